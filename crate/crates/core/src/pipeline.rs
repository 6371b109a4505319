//! Session → descriptors → embedding, shared by every command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{self, AugmentConfig, AugmentError, Augmentable};
use crate::capsense::{self, CapSequence, CapsenseConfig, CapsenseError};
use crate::embed::{self, CapDescriptor, EmbedError, EmbeddingVector, FusionModel, ImuDescriptor, Modality, TrainConfig};
use crate::motion::{self, MotionConfig, MotionError, MotionSegment};
use crate::oneclass::OneClassError;
use crate::session::{self, Label, ManifestEntry, Session, SessionError, SessionMeta};
use crate::synth::SynthError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Capsense(#[from] CapsenseError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    OneClass(#[from] OneClassError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("session '{id}': {source}")]
    InSession {
        id: String,
        #[source]
        source: Box<PipelineError>,
    },
    #[error("user '{user}': {source}")]
    InUser {
        user: String,
        #[source]
        source: Box<PipelineError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("template was enrolled with model {template}, but the model file hashes to {model}")]
    ModelMismatch { template: String, model: String },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

impl PipelineError {
    pub fn in_session(self, id: &str) -> Self {
        PipelineError::InSession {
            id: id.to_string(),
            source: Box::new(self),
        }
    }

    pub fn in_user(self, user: &str) -> Self {
        PipelineError::InUser {
            user: user.to_string(),
            source: Box::new(self),
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> PipelineError + '_ {
    move |source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(json_err(path))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(json_err(path))?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

/// Settings that shape descriptors; stored with the network so inference
/// reproduces training-time preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub capsense: CapsenseConfig,
    pub motion: MotionConfig,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            capsense: CapsenseConfig::default(),
            motion: MotionConfig::default(),
        }
    }
}

/// A session after resampling and motion estimation. The capacitive side is
/// kept raw so augmentation can act on it before descriptors are taken.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub meta: SessionMeta,
    pub seq: CapSequence,
    pub segment: MotionSegment,
    pub imu: ImuDescriptor,
}

impl Augmentable for Prepared {
    fn cap_sequence(&self) -> &CapSequence {
        &self.seq
    }

    fn with_cap_sequence(&self, seq: CapSequence, copy: usize) -> Self {
        let mut out = self.clone();
        out.meta.session_id = format!("{}#aug{copy}", self.meta.session_id);
        out.seq = seq;
        out
    }
}

#[derive(Debug, Clone)]
pub struct Features {
    pub meta: SessionMeta,
    pub cap: CapDescriptor,
    pub imu: ImuDescriptor,
}

impl Features {
    pub fn input(&self, modality: Modality) -> Vec<f64> {
        embed::assemble_input(modality, &self.cap, &self.imu)
    }
}

pub fn prepare(session: &Session, cfg: &PreprocessConfig) -> Result<Prepared> {
    let run = || -> Result<Prepared> {
        let seq = capsense::interpolate_frames(session, cfg.capsense.n_frames)?;
        let track = capsense::track_touch(&seq, &cfg.capsense)?;
        let segment = motion::estimate_motion(session, &track, &cfg.motion)?;
        let fs = session.meta.imu_hz as f64;
        let imu = embed::imu_descriptor(&segment, fs, &cfg.motion.stft);
        Ok(Prepared {
            meta: session.meta.clone(),
            seq,
            segment,
            imu,
        })
    };
    run().map_err(|e| e.in_session(&session.meta.session_id))
}

pub fn describe(p: &Prepared, cfg: &PreprocessConfig) -> Result<Features> {
    let track = capsense::track_touch(&p.seq, &cfg.capsense).map_err(|e| PipelineError::from(e).in_session(&p.meta.session_id))?;
    Ok(Features {
        meta: p.meta.clone(),
        cap: embed::cap_descriptor(&p.seq, &track, cfg.capsense.smooth_window),
        imu: p.imu.clone(),
    })
}

pub fn features(session: &Session, cfg: &PreprocessConfig) -> Result<Features> {
    describe(&prepare(session, cfg)?, cfg)
}

/// Reads a session and tags any failure with its path.
pub fn load_session(path: &Path) -> Result<Session> {
    session::read_session(path).map_err(PipelineError::from)
}

#[derive(Debug, Clone)]
pub struct LoadedEntry {
    pub entry: ManifestEntry,
    pub features: Features,
}

/// Reads and describes every manifest entry. Order follows the manifest.
pub fn load_manifest_features(manifest: &Path, cfg: &PreprocessConfig) -> Result<Vec<LoadedEntry>> {
    let entries = session::read_manifest(manifest)?;
    entries
        .par_iter()
        .map(|e| {
            let s = load_session(&session::resolve_entry(manifest, e))?;
            Ok(LoadedEntry {
                entry: e.clone(),
                features: features(&s, cfg)?,
            })
        })
        .collect()
}

/// Trained network plus the preprocessing it expects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub preprocess: PreprocessConfig,
    pub network: FusionModel,
}

impl ModelFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut text = serde_json::to_string(self).expect("model serializes");
        text.push('\n');
        text.into_bytes()
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        std::fs::write(path, &bytes).map_err(io_err(path))?;
        Ok(hash_bytes(&bytes))
    }

    /// The model and the hash of its file bytes.
    pub fn load(path: &Path) -> Result<(ModelFile, String)> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        let model = serde_json::from_slice(&bytes).map_err(json_err(path))?;
        Ok((model, hash_bytes(&bytes)))
    }

    /// Network output scaled to unit length. Templates only see directions;
    /// the norm mostly tracks press strength.
    pub fn embed(&self, f: &Features) -> Result<EmbeddingVector> {
        let mut e = self.network.embed(&f.cap, &f.imu)?;
        embed::unit_normalize(&mut e.0);
        Ok(e)
    }

    pub fn embed_all(&self, fs: &[Features]) -> Result<Vec<EmbeddingVector>> {
        fs.par_iter().map(|f| self.embed(f)).collect()
    }
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything the pretraining step consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSettings {
    pub preprocess: PreprocessConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
}

/// Augments the genuine sessions of each user, describes them and trains
/// the embedder with one class per user (classes ordered by user id).
pub fn pretrain_from_prepared(
    prepared: &[Prepared],
    settings: &PretrainSettings,
) -> Result<(ModelFile, Vec<embed::EpochStats>)> {
    let classes: BTreeMap<&str, usize> = {
        let mut ids: Vec<&str> = prepared.iter().map(|p| p.meta.user_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter().enumerate().map(|(i, u)| (u, i)).collect()
    };
    if classes.len() < 2 {
        return Err(EmbedError::Degenerate(format!("need at least two users, found {}", classes.len())).into());
    }
    let augmented = augment::augment_dataset(prepared, &settings.augment, settings.augment.seed)?;
    let pre = &settings.preprocess;
    let samples: Vec<embed::TrainingSample> = augmented
        .par_iter()
        .map(|p| {
            let f = describe(p, pre)?;
            Ok(embed::TrainingSample {
                input: f.input(settings.train.modality),
                class: classes[p.meta.user_id.as_str()],
            })
        })
        .collect::<Result<_>>()?;
    let (network, log) = embed::fusion_train(&samples, &settings.train)?;
    Ok((
        ModelFile {
            preprocess: pre.clone(),
            network,
        },
        log,
    ))
}

/// Genuine sessions only; attack entries never reach pretraining.
pub fn prepare_manifest(manifest: &Path, cfg: &PreprocessConfig) -> Result<Vec<Prepared>> {
    let entries: Vec<ManifestEntry> = session::read_manifest(manifest)?
        .into_iter()
        .filter(|e| e.label == Label::Genuine)
        .collect();
    entries
        .par_iter()
        .map(|e| prepare(&load_session(&session::resolve_entry(manifest, e))?, cfg))
        .collect()
}

pub fn write_training_log(path: &Path, log: &[embed::EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| PipelineError::Invalid(format!("{}: {e}", path.display())))?;
    let mut write = || -> std::result::Result<(), csv::Error> {
        w.write_record(["epoch", "loss", "accuracy"])?;
        for s in log {
            w.write_record([s.epoch.to_string(), format!("{:.9}", s.loss), format!("{:.6}", s.accuracy)])?;
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(|e| PipelineError::Invalid(format!("{}: {e}", path.display())))
}
