//! Enrolment, verification and evaluation over manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::metrics::{self, Summary};
use crate::oneclass::{self, OneClassConfig, UserTemplate};
use crate::pipeline::{self, io_err, read_json, write_json, LoadedEntry, ModelFile, PipelineError, Result};
use crate::session::{self, Label};

/// Timestamp written into templates. Honors SOURCE_DATE_EPOCH so rebuilt
/// templates stay byte-identical; falls back to 0 rather than the clock.
pub fn created_at() -> String {
    let secs: u64 = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0);
    format!("unix:{secs}")
}

pub fn template_path(dir: &Path, user_id: &str) -> PathBuf {
    dir.join(format!("{user_id}.json"))
}

/// Embeddings of the genuine sessions in a manifest, grouped by user.
pub fn genuine_embeddings(manifest: &Path, model: &ModelFile) -> Result<BTreeMap<String, Vec<Vec<f64>>>> {
    let loaded = pipeline::load_manifest_features(manifest, &model.preprocess)?;
    let genuine: Vec<&LoadedEntry> = loaded.iter().filter(|l| l.entry.label == Label::Genuine).collect();
    let vecs: Vec<Vec<f64>> = genuine
        .par_iter()
        .map(|l| Ok(model.embed(&l.features)?.0))
        .collect::<Result<_>>()?;
    let mut out: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for (l, v) in genuine.iter().zip(vecs) {
        out.entry(l.entry.user_id.clone()).or_default().push(v);
    }
    Ok(out)
}

/// Enrols `users` (every user in the manifest when empty). The impostor pool
/// is `impostors` when given, otherwise the other users of the manifest.
/// Score normalization is calibrated on the other users of the manifest.
pub fn enroll_users(
    manifest: &Path,
    users: &[String],
    model_path: &Path,
    impostors: Option<&Path>,
    cfg: &OneClassConfig,
) -> Result<Vec<UserTemplate>> {
    let (model, hash) = ModelFile::load(model_path)?;
    let by_user = genuine_embeddings(manifest, &model)?;
    let pool = match impostors {
        Some(p) => Some(genuine_embeddings(p, &model)?),
        None => None,
    };
    let targets: Vec<String> = if users.is_empty() {
        by_user.keys().cloned().collect()
    } else {
        users.to_vec()
    };
    let stamp = created_at();
    targets
        .par_iter()
        .map(|u| {
            let genuine = by_user.get(u).map(Vec::as_slice).unwrap_or(&[]);
            let imp: Vec<Vec<f64>> = match &pool {
                Some(p) => p.iter().filter(|(k, _)| *k != u).flat_map(|(_, v)| v.iter().cloned()).collect(),
                None => by_user.iter().filter(|(k, _)| *k != u).flat_map(|(_, v)| v.iter().cloned()).collect(),
            };
            let mut t = oneclass::enroll(u, genuine, &imp, cfg, &hash, &stamp).map_err(|e| PipelineError::from(e).in_user(u))?;
            let cohort: Vec<Vec<f64>> = by_user.iter().filter(|(k, _)| *k != u).flat_map(|(_, v)| v.iter().cloned()).collect();
            oneclass::calibrate(&mut t, &cohort);
            Ok(t)
        })
        .collect()
}

pub fn save_template(dir: &Path, t: &UserTemplate) -> Result<PathBuf> {
    let path = template_path(dir, &t.user_id);
    write_json(&path, t)?;
    Ok(path)
}

pub fn load_template(path: &Path) -> Result<UserTemplate> {
    read_json(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Decision {
    pub score: f64,
    pub accept: bool,
    pub latency_ms: f64,
}

/// Read → preprocess → embed → score for one session file.
pub fn verify_session(session_path: &Path, template_path: &Path, model_path: &Path) -> Result<Decision> {
    let start = Instant::now();
    let template = load_template(template_path)?;
    let (model, hash) = ModelFile::load(model_path)?;
    if template.embed_config_hash != hash {
        return Err(PipelineError::ModelMismatch {
            template: template.embed_config_hash,
            model: hash,
        });
    }
    let s = pipeline::load_session(session_path)?;
    let f = pipeline::features(&s, &model.preprocess)?;
    let e = model.embed(&f)?;
    let (score, accept) = oneclass::verify(&template, &e.0);
    Ok(Decision {
        score,
        accept,
        latency_ms: start.elapsed().as_secs_f64() * 1000.0,
    })
}

/// Scores of one template's sessions.
#[derive(Debug, Clone, Default, Serialize)]
pub struct UserScores {
    pub threshold: f64,
    pub impostor_mean: f64,
    pub impostor_std: f64,
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
    pub attacks: BTreeMap<Label, Vec<f64>>,
}

impl UserScores {
    fn margins(&self, v: &[f64]) -> Vec<f64> {
        v.iter().map(|s| (s - self.impostor_mean) / self.impostor_std).collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackRow {
    pub victim: String,
    pub kind: Label,
    pub attempts: usize,
    pub accepted: usize,
    pub far: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluationSummary {
    /// Genuine vs zero-effort impostors on normalized margins.
    /// `None` when either side has no scores.
    pub pooled: Option<Summary>,
    pub users: BTreeMap<String, Option<Summary>>,
    /// Acceptance rate per attack kind, pooled over victims.
    pub attack_far: BTreeMap<Label, f64>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub scores: BTreeMap<String, UserScores>,
    pub summary: EvaluationSummary,
    pub attack_rows: Vec<AttackRow>,
}

impl Evaluation {
    pub fn pooled_margins(&self) -> (Vec<f64>, Vec<f64>) {
        let mut g = Vec::new();
        let mut i = Vec::new();
        for s in self.scores.values() {
            g.extend(s.margins(&s.genuine));
            i.extend(s.margins(&s.impostor));
        }
        (g, i)
    }

    pub fn attack_far(&self, kind: Label) -> Option<f64> {
        self.summary.attack_far.get(&kind).copied()
    }
}

fn summary_of(genuine: &[f64], impostor: &[f64], threshold: f64) -> Option<Summary> {
    (!genuine.is_empty() && !impostor.is_empty()).then(|| Summary::new(genuine, impostor, threshold))
}

/// Scores embeddings against templates. Genuine sessions of user u count as
/// genuine for u and as zero-effort impostors for every other template; an
/// attack session counts against the template of the user it claims.
pub fn score_embeddings(
    items: &[(session::ManifestEntry, Vec<f64>)],
    templates: &BTreeMap<String, UserTemplate>,
) -> Result<Evaluation> {
    let mut scores: BTreeMap<String, UserScores> = templates
        .iter()
        .map(|(u, t)| {
            (
                u.clone(),
                UserScores {
                    threshold: t.threshold,
                    impostor_mean: t.impostor_mean,
                    impostor_std: t.impostor_std,
                    ..Default::default()
                },
            )
        })
        .collect();
    for (entry, e) in items {
        if entry.label == Label::Genuine {
            for (u, t) in templates {
                let (score, _) = oneclass::verify(t, e);
                let s = scores.get_mut(u).unwrap();
                if *u == entry.user_id {
                    s.genuine.push(score);
                } else {
                    s.impostor.push(score);
                }
            }
        } else {
            let t = templates
                .get(&entry.user_id)
                .ok_or_else(|| PipelineError::Invalid(format!("no template for victim '{}'", entry.user_id)))?;
            let (score, _) = oneclass::verify(t, e);
            scores
                .get_mut(&entry.user_id)
                .unwrap()
                .attacks
                .entry(entry.label)
                .or_default()
                .push(score);
        }
    }

    let mut attack_rows = Vec::new();
    let mut pooled_attacks: BTreeMap<Label, (usize, usize)> = BTreeMap::new();
    for (u, s) in &scores {
        for (&kind, v) in &s.attacks {
            let accepted = v.iter().filter(|&&x| x >= s.threshold).count();
            let slot = pooled_attacks.entry(kind).or_default();
            slot.0 += accepted;
            slot.1 += v.len();
            attack_rows.push(AttackRow {
                victim: u.clone(),
                kind,
                attempts: v.len(),
                accepted,
                far: accepted as f64 / v.len() as f64,
            });
        }
    }
    let users = scores
        .iter()
        .map(|(u, s)| (u.clone(), summary_of(&s.genuine, &s.impostor, s.threshold)))
        .collect();
    let mut g = Vec::new();
    let mut i = Vec::new();
    for s in scores.values() {
        g.extend(s.margins(&s.genuine));
        i.extend(s.margins(&s.impostor));
    }
    let eval = Evaluation {
        summary: EvaluationSummary {
            pooled: summary_of(&g, &i, 0.0),
            users,
            attack_far: pooled_attacks
                .into_iter()
                .map(|(k, (a, n))| (k, a as f64 / n as f64))
                .collect(),
        },
        scores,
        attack_rows,
    };
    Ok(eval)
}

/// Loads the template of every user named in the manifest.
pub fn load_templates(dir: &Path, users: &BTreeSet<String>) -> Result<BTreeMap<String, UserTemplate>> {
    users
        .iter()
        .map(|u| {
            let p = template_path(dir, u);
            if !p.exists() {
                return Err(PipelineError::Invalid(format!("missing template for '{u}' at {}", p.display())));
            }
            Ok((u.clone(), load_template(&p)?))
        })
        .collect()
}

pub fn evaluate(manifest: &Path, templates_dir: &Path, model_path: &Path) -> Result<Evaluation> {
    let (model, hash) = ModelFile::load(model_path)?;
    let loaded = pipeline::load_manifest_features(manifest, &model.preprocess)?;
    let users: BTreeSet<String> = loaded.iter().map(|l| l.entry.user_id.clone()).collect();
    let templates = load_templates(templates_dir, &users)?;
    if let Some(t) = templates.values().find(|t| t.embed_config_hash != hash) {
        return Err(PipelineError::ModelMismatch {
            template: t.embed_config_hash.clone(),
            model: hash,
        });
    }
    let items: Vec<(session::ManifestEntry, Vec<f64>)> = loaded
        .par_iter()
        .map(|l| Ok((l.entry.clone(), model.embed(&l.features)?.0)))
        .collect::<Result<_>>()?;
    score_embeddings(&items, &templates)
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> PipelineError + '_ {
    move |e| PipelineError::Invalid(format!("{}: {e}", path.display()))
}

pub fn write_attack_far_csv(path: &Path, rows: &[AttackRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["victim", "attack", "attempts", "accepted", "far"])
        .map_err(csv_err(path))?;
    for r in rows {
        w.write_record([
            r.victim.clone(),
            r.kind.to_string(),
            r.attempts.to_string(),
            r.accepted.to_string(),
            format!("{:.6}", r.far),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// roc.csv (pooled margins), roc_<user>.csv, hist.csv, summary.json and
/// attack_far.csv under `out`.
pub fn write_evaluation(out: &Path, eval: &Evaluation, hist_bins: usize, per_user_roc: bool) -> Result<()> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let (g, i) = eval.pooled_margins();
    if !g.is_empty() && !i.is_empty() {
        let p = out.join("roc.csv");
        metrics::write_roc_csv(&p, &metrics::roc(&g, &i)).map_err(io_err(&p))?;
    }
    if per_user_roc {
        for (u, s) in eval.scores.iter().filter(|(_, s)| !s.genuine.is_empty() && !s.impostor.is_empty()) {
            let p = out.join(format!("roc_{u}.csv"));
            metrics::write_roc_csv(&p, &metrics::roc(&s.genuine, &s.impostor)).map_err(io_err(&p))?;
        }
    }
    let p = out.join("hist.csv");
    metrics::write_histogram_csv(&p, &metrics::score_histogram(&g, &i, hist_bins)).map_err(io_err(&p))?;
    write_json(&out.join("summary.json"), &eval.summary)?;
    write_attack_far_csv(&out.join("attack_far.csv"), &eval.attack_rows)
}
