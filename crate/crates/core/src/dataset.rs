//! Synthetic dataset layout on disk.
//!
//! ```text
//! out/
//!   sessions/<id>.ndjson, sessions/<id>.truth.json
//!   profiles.json, dispersion.json
//!   manifest.json                 every session
//!   pretrain.json, enroll.json, test.json
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::pipeline::{io_err, write_json, PipelineError, Result};
use crate::session::{self, Label, ManifestEntry};
use crate::stats;
use crate::synth::{self, AttackSpec, SynthConfig, Truth, UserProfile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub users: usize,
    pub sessions: usize,
    /// Attack sessions per victim, by kind.
    pub attacks: BTreeMap<Label, usize>,
    /// Extra users whose sessions only feed pretraining.
    pub pretrain_users: usize,
    pub pretrain_sessions: usize,
    /// Share of each benchmark user's genuine sessions listed for enrolment.
    pub enroll_fraction: f64,
    /// Sessions per user behind dispersion.json.
    pub dispersion_sessions: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            users: 10,
            sessions: 40,
            attacks: BTreeMap::new(),
            pretrain_users: 0,
            pretrain_sessions: 40,
            enroll_fraction: 0.5,
            dispersion_sessions: 20,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if let Some(kind) = self.attacks.keys().find(|k| !k.is_attack()) {
            return Err(PipelineError::Invalid(format!("'{kind}' is not an attack kind")));
        }
        if self.attacks.values().any(|&n| n > 0) && self.users < 2 {
            return Err(PipelineError::Invalid("attacks need at least two users".into()));
        }
        if !(0.0..=1.0).contains(&self.enroll_fraction) {
            return Err(PipelineError::Invalid("enroll_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

pub fn pretrain_user_id(index: usize) -> String {
    format!("p{index:03}")
}

/// Benchmark users first, then pretraining users. User seeds are independent
/// streams of the run seed.
pub fn gen_users(spec: &DatasetSpec, cfg: &SynthConfig, seed: u64) -> (Vec<UserProfile>, Vec<UserProfile>) {
    let bench = (0..spec.users)
        .map(|i| synth::gen_user(stats::stream_seed(seed, i as u64), &synth::user_id(i), cfg))
        .collect();
    let pre = (0..spec.pretrain_users)
        .map(|i| {
            let idx = (spec.users + i) as u64;
            synth::gen_user(stats::stream_seed(seed, idx), &pretrain_user_id(i), cfg)
        })
        .collect();
    (bench, pre)
}

/// Work item for one session.
#[derive(Debug, Clone)]
pub(crate) enum Job {
    Genuine { user: usize, index: usize },
    Attack { victim: usize, kind: Label, index: usize },
}

fn kind_index(kind: Label) -> u64 {
    match kind {
        Label::Genuine => 0,
        Label::Mimicry => 1,
        Label::Replica => 2,
        Label::Puppet => 3,
    }
}

fn session_id(job: &Job, users: &[UserProfile]) -> String {
    match job {
        Job::Genuine { user, index } => format!("{}_g{index:04}", users[*user].user_id),
        Job::Attack { victim, kind, index } => format!("{}_{kind}{index:04}", users[*victim].user_id),
    }
}

/// Renders one job. Every job owns an RNG stream keyed by what it is, so
/// results do not depend on scheduling.
pub(crate) fn render_job(job: &Job, users: &[UserProfile], n_bench: usize, cfg: &SynthConfig, seed: u64) -> Result<(session::Session, Truth)> {
    let id = session_id(job, users);
    match *job {
        Job::Genuine { user, index } => {
            let mut rng = stats::derived_rng(stats::stream_seed(seed, 2 * user as u64), index as u64);
            Ok(synth::gen_session(&users[user], &id, cfg, &mut rng))
        }
        Job::Attack { victim, kind, index } => {
            let stream = stats::stream_seed(seed, 2 * (victim as u64 * 4 + kind_index(kind)) + 1);
            let mut rng = stats::derived_rng(stream, index as u64);
            // attackers are the other benchmark users
            let pick = rng.random_range(0..n_bench - 1);
            let attacker = if pick >= victim { pick + 1 } else { pick };
            let fidelity = cfg.attack.fidelity.draw(&mut rng).clamp(0.0, 1.0);
            Ok(synth::gen_attack(
                &users[victim],
                &users[attacker],
                AttackSpec { kind, fidelity },
                &id,
                cfg,
                &mut rng,
            )?)
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct DatasetSummary {
    pub sessions: usize,
    pub manifest: Vec<ManifestEntry>,
}

pub fn write_dataset(out: &Path, spec: &DatasetSpec, cfg: &SynthConfig, seed: u64) -> Result<DatasetSummary> {
    spec.validate()?;
    cfg.validate()?;
    let (bench, pre) = gen_users(spec, cfg, seed);
    let n_bench = bench.len();
    let users: Vec<UserProfile> = bench.iter().chain(&pre).cloned().collect();

    let mut jobs = Vec::new();
    for u in 0..users.len() {
        let n = if u < n_bench { spec.sessions } else { spec.pretrain_sessions };
        jobs.extend((0..n).map(|index| Job::Genuine { user: u, index }));
    }
    for victim in 0..n_bench {
        for (&kind, &n) in &spec.attacks {
            jobs.extend((0..n).map(|index| Job::Attack { victim, kind, index }));
        }
    }

    let dir = out.join("sessions");
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let entries: Vec<ManifestEntry> = jobs
        .par_iter()
        .map(|job| {
            let (s, truth) = render_job(job, &users, n_bench, cfg, seed)?;
            let id = &s.meta.session_id;
            session::write_session(&s, dir.join(format!("{id}.ndjson")))?;
            write_json(&dir.join(format!("{id}.truth.json")), &truth)?;
            Ok(ManifestEntry {
                path: format!("sessions/{id}.ndjson"),
                user_id: s.meta.user_id.clone(),
                label: s.meta.label,
            })
        })
        .collect::<Result<_>>()?;

    write_json(&out.join("profiles.json"), &users)?;
    let report = synth::dispersion_report(&users, spec.dispersion_sessions.max(2), cfg, seed);
    log::info!(
        "dispersion: min inter/intra sd ratio {:.2}, min inter / max intra distance {:.2}",
        report.min_ratio(),
        report.distance_ratio()
    );
    write_json(&out.join("dispersion.json"), &report)?;

    session::write_manifest(&entries, out.join("manifest.json"))?;
    let n_enroll = (spec.sessions as f64 * spec.enroll_fraction).round() as usize;
    let is_bench = |e: &ManifestEntry| bench.iter().any(|u| u.user_id == e.user_id);
    let genuine_index = |e: &ManifestEntry| -> Option<usize> {
        let stem = e.path.rsplit_once("_g")?.1.strip_suffix(".ndjson")?;
        stem.parse().ok()
    };
    let mut pretrain = Vec::new();
    let mut enroll = Vec::new();
    let mut test = Vec::new();
    for e in &entries {
        if !is_bench(e) {
            pretrain.push(e.clone());
        } else if e.label == Label::Genuine && genuine_index(e).is_some_and(|i| i < n_enroll) {
            enroll.push(e.clone());
        } else {
            test.push(e.clone());
        }
    }
    session::write_manifest(&pretrain, out.join("pretrain.json"))?;
    session::write_manifest(&enroll, out.join("enroll.json"))?;
    session::write_manifest(&test, out.join("test.json"))?;
    Ok(DatasetSummary {
        sessions: entries.len(),
        manifest: entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_splits() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            users: 2,
            sessions: 5,
            pretrain_users: 1,
            pretrain_sessions: 3,
            attacks: [(Label::Replica, 2)].into_iter().collect(),
            ..Default::default()
        };
        let s = write_dataset(dir.path(), &spec, &SynthConfig::default(), 1).unwrap();
        assert_eq!(s.sessions, 2 * 5 + 3 + 2 * 2);
        let m = |f: &str| session::read_manifest(dir.path().join(f)).unwrap();
        assert_eq!(m("pretrain.json").len(), 3);
        // round(5 × 0.5) = 3 per user
        assert_eq!(m("enroll.json").len(), 6);
        assert_eq!(m("test.json").len(), 2 * 2 + 2 * 2);
        for e in m("manifest.json") {
            assert!(session::read_session(session::resolve_entry(&dir.path().join("manifest.json"), &e)).is_ok());
        }
    }

    #[test]
    fn attack_needs_two_users() {
        let spec = DatasetSpec {
            users: 1,
            attacks: [(Label::Puppet, 1)].into_iter().collect(),
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }
}
