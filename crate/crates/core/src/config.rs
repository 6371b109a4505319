//! Layered run configuration: defaults, then a JSON file, then `--seed`,
//! then `--set key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::augment::AugmentConfig;
use crate::capsense::CapsenseConfig;
use crate::embed::TrainConfig;
use crate::motion::MotionConfig;
use crate::oneclass::OneClassConfig;
use crate::pipeline::{PipelineError, PreprocessConfig, PretrainSettings, Result};
use crate::synth::SynthConfig;

/// Unset paths fall back to locations under `out_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory holding manifest.json.
    pub data_dir: Option<PathBuf>,
    pub model_path: Option<PathBuf>,
    pub template_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: None,
            model_path: None,
            template_dir: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl Paths {
    pub fn manifest(&self) -> PathBuf {
        self.data_dir.as_deref().unwrap_or(&self.out_dir).join("manifest.json")
    }

    pub fn model(&self) -> PathBuf {
        self.model_path.clone().unwrap_or_else(|| self.out_dir.join("model.json"))
    }

    pub fn templates(&self) -> PathBuf {
        self.template_dir.clone().unwrap_or_else(|| self.out_dir.join("templates"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub hist_bins: usize,
    /// Also write per-user ROC curves.
    pub per_user_roc: bool,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            hist_bins: 50,
            per_user_roc: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub paths: Paths,
    pub capsense: CapsenseConfig,
    pub motion: MotionConfig,
    pub augment: AugmentConfig,
    pub embed: TrainConfig,
    pub oneclass: OneClassConfig,
    pub synth: SynthConfig,
    pub evaluate: EvaluateConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            workers: 0,
            paths: Paths::default(),
            capsense: CapsenseConfig::default(),
            motion: MotionConfig::default(),
            augment: AugmentConfig::default(),
            embed: TrainConfig::default(),
            oneclass: OneClassConfig::default(),
            synth: SynthConfig::default(),
            evaluate: EvaluateConfig::default(),
        }
    }
}

/// Namespaces whose `seed` follows the global seed unless set explicitly.
const SEEDED: [&str; 3] = ["augment", "embed", "oneclass"];

impl PipelineConfig {
    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            capsense: self.capsense.clone(),
            motion: self.motion.clone(),
        }
    }

    pub fn pretrain_settings(&self) -> PretrainSettings {
        PretrainSettings {
            preprocess: self.preprocess(),
            augment: self.augment.clone(),
            train: self.embed.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        self.synth.validate()?;
        if self.capsense.n_frames < 2 {
            return Err(PipelineError::Invalid("capsense.n_frames must be at least 2".into()));
        }
        if self.motion.segment_len < self.motion.stft.win {
            return Err(PipelineError::Invalid("motion.segment_len must cover one STFT window".into()));
        }
        if self.motion.stft.hop == 0 || self.motion.stft.win < 2 {
            return Err(PipelineError::Invalid("motion.stft needs win ≥ 2 and hop ≥ 1".into()));
        }
        if !(0.0..=100.0).contains(&self.oneclass.threshold_percentile) {
            return Err(PipelineError::Invalid("oneclass.threshold_percentile must lie in [0, 100]".into()));
        }
        if self.evaluate.hist_bins == 0 {
            return Err(PipelineError::Invalid("evaluate.hist_bins must be positive".into()));
        }
        Ok(())
    }
}

/// Parses `a.b.c=value`. The value is read as JSON when possible and as a
/// plain string otherwise.
pub fn parse_override(text: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| PipelineError::Invalid(format!("override '{text}' is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(PipelineError::Invalid(format!("override '{text}' has an empty key segment")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path, value))
}

fn set_path(root: &mut Value, path: &[String], value: Value) -> Result<()> {
    let mut node = root;
    for (i, key) in path.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(PipelineError::Invalid(format!(
                "'{}' is not a table",
                path[..i].join(".")
            )));
        };
        if i + 1 == path.len() {
            map.insert(key.clone(), value);
            return Ok(());
        }
        node = map.entry(key.clone()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

fn merge(base: &mut Value, layer: Value) {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn has_seed(layer: &Value, ns: &str) -> bool {
    layer.get(ns).and_then(|v| v.get("seed")).is_some()
}

#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub file: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub set: Vec<String>,
}

/// Builds the effective configuration. Unknown keys anywhere are errors.
pub fn resolve(o: &Overrides) -> Result<PipelineConfig> {
    let mut explicit = Value::Object(Map::new());
    if let Some(path) = &o.file {
        let layer: Value = crate::pipeline::read_json(path)?;
        if !layer.is_object() {
            return Err(PipelineError::Invalid(format!("{}: config must be a JSON object", path.display())));
        }
        merge(&mut explicit, layer);
    }
    if let Some(seed) = o.seed {
        set_path(&mut explicit, &["seed".to_string()], Value::from(seed))?;
    }
    if let Some(out) = &o.out {
        set_path(
            &mut explicit,
            &["paths".to_string(), "out_dir".to_string()],
            Value::String(out.display().to_string()),
        )?;
    }
    for s in &o.set {
        let (path, value) = parse_override(s)?;
        set_path(&mut explicit, &path, value)?;
    }

    let mut value = serde_json::to_value(PipelineConfig::default()).expect("defaults serialize");
    let seed = explicit.get("seed").cloned();
    merge(&mut value, explicit.clone());
    if let Some(seed) = seed {
        for ns in SEEDED {
            if !has_seed(&explicit, ns) {
                set_path(&mut value, &[ns.to_string(), "seed".to_string()], seed.clone())?;
            }
        }
    }
    let cfg: PipelineConfig =
        serde_json::from_value(value).map_err(|e| PipelineError::Invalid(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn write_resolved(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    crate::pipeline::write_json(&dir.join("resolved_config.json"), cfg)
}
