//! End-to-end synthetic benchmark held in memory: generate, pretrain one
//! embedder per modality, enrol every user, score genuine, zero-effort and
//! attack sessions.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::dataset::{self, DatasetSpec, Job};
use crate::embed::Modality;
use crate::oneclass::{self, UserTemplate};
use crate::pipeline::{self, hash_bytes, PipelineError, Prepared, Result};
use crate::session::{Label, ManifestEntry};
use crate::workflow::{self, Evaluation};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModalityResult {
    pub modality: Modality,
    pub pooled_eer: f64,
    /// Mean of the per-user EERs.
    pub mean_user_eer: f64,
    pub final_accuracy: f64,
    pub attack_far: BTreeMap<Label, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub seed: u64,
    pub results: Vec<ModalityResult>,
}

impl BenchmarkReport {
    pub fn get(&self, m: Modality) -> Option<&ModalityResult> {
        self.results.iter().find(|r| r.modality == m)
    }

    pub fn far(&self, m: Modality, kind: Label) -> f64 {
        self.get(m).and_then(|r| r.attack_far.get(&kind).copied()).unwrap_or(f64::NAN)
    }
}

struct Prepped {
    entry: ManifestEntry,
    enroll: bool,
    prepared: Prepared,
}

/// Runs the benchmark for each requested modality on one seed.
pub fn run(spec: &DatasetSpec, cfg: &PipelineConfig, seed: u64, modalities: &[Modality]) -> Result<BenchmarkReport> {
    spec.validate()?;
    cfg.validate()?;
    let pre = cfg.preprocess();
    let (bench, pretrain) = dataset::gen_users(spec, &cfg.synth, seed);
    let n_bench = bench.len();
    let users: Vec<_> = bench.iter().chain(&pretrain).cloned().collect();
    let n_enroll = (spec.sessions as f64 * spec.enroll_fraction).round() as usize;

    let mut jobs = Vec::new();
    for u in 0..users.len() {
        let n = if u < n_bench { spec.sessions } else { spec.pretrain_sessions };
        jobs.extend((0..n).map(|index| (Job::Genuine { user: u, index }, u < n_bench && index < n_enroll)));
    }
    for victim in 0..n_bench {
        for (&kind, &n) in &spec.attacks {
            jobs.extend((0..n).map(|index| (Job::Attack { victim, kind, index }, false)));
        }
    }
    let items: Vec<Prepped> = jobs
        .par_iter()
        .map(|(job, enroll)| {
            let (s, _) = dataset::render_job(job, &users, n_bench, &cfg.synth, seed)?;
            Ok(Prepped {
                entry: ManifestEntry {
                    path: String::new(),
                    user_id: s.meta.user_id.clone(),
                    label: s.meta.label,
                },
                enroll: *enroll,
                prepared: pipeline::prepare(&s, &pre)?,
            })
        })
        .collect::<Result<_>>()?;
    let is_pretrain = |p: &Prepped| !bench.iter().any(|u| u.user_id == p.entry.user_id);
    let pretrain_set: Vec<Prepared> = items.iter().filter(|p| is_pretrain(p)).map(|p| p.prepared.clone()).collect();
    let features: Vec<pipeline::Features> = items
        .par_iter()
        .map(|p| pipeline::describe(&p.prepared, &pre))
        .collect::<Result<_>>()?;

    let mut results = Vec::new();
    for &modality in modalities {
        let mut settings = cfg.pretrain_settings();
        settings.train.modality = modality;
        let (model, log) = pipeline::pretrain_from_prepared(&pretrain_set, &settings)?;
        let hash = hash_bytes(&model.to_bytes());
        let emb: Vec<Vec<f64>> = features
            .par_iter()
            .map(|f| Ok(model.embed(f)?.0))
            .collect::<Result<_>>()?;

        let mut enroll_by_user: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
        let mut impostor_pool = Vec::new();
        let mut test = Vec::new();
        for (p, e) in items.iter().zip(&emb) {
            if is_pretrain(p) {
                impostor_pool.push(e.clone());
            } else if p.enroll {
                enroll_by_user.entry(p.entry.user_id.as_str()).or_default().push(e.clone());
            } else {
                test.push((p.entry.clone(), e.clone()));
            }
        }
        let stamp = workflow::created_at();
        let templates: BTreeMap<String, UserTemplate> = enroll_by_user
            .par_iter()
            .map(|(u, g)| {
                let mut t = oneclass::enroll(u, g, &impostor_pool, &cfg.oneclass, &hash, &stamp)
                    .map_err(|e| PipelineError::from(e).in_user(u))?;
                let cohort: Vec<Vec<f64>> = enroll_by_user
                    .iter()
                    .filter(|(k, _)| *k != u)
                    .flat_map(|(_, v)| v.iter().cloned())
                    .collect();
                oneclass::calibrate(&mut t, &cohort);
                Ok((u.to_string(), t))
            })
            .collect::<Result<_>>()?;
        let eval: Evaluation = workflow::score_embeddings(&test, &templates)?;
        results.push(ModalityResult {
            modality,
            pooled_eer: eval.summary.pooled.as_ref().map_or(f64::NAN, |s| s.eer),
            mean_user_eer: {
                let v: Vec<f64> = eval.summary.users.values().flatten().map(|s| s.eer).collect();
                crate::stats::mean(&v)
            },
            final_accuracy: log.last().map_or(f64::NAN, |s| s.accuracy),
            attack_far: eval.summary.attack_far.clone(),
        });
    }
    Ok(BenchmarkReport { seed, results })
}

/// Dataset shape of the reference benchmark.
pub fn reference_spec() -> DatasetSpec {
    DatasetSpec {
        users: 10,
        sessions: 200,
        attacks: Label::ATTACKS.iter().map(|&k| (k, 100)).collect(),
        pretrain_users: 15,
        pretrain_sessions: 40,
        enroll_fraction: 0.5,
        dispersion_sessions: 20,
    }
}
