//! Press embeddings: deterministic modality descriptors feeding a two-layer
//! fusion network whose 320-dimensional output is the enrolment feature.

mod io;
mod net;

pub use io::{load_external_embeddings, write_embeddings_csv};
pub use net::{fusion_train, EpochStats, FusionModel, Gradients, Network, TrainConfig, TrainingSample};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capsense::{self, CapSequence, TouchTrack};
use crate::motion::{MotionSegment, Stft, StftConfig};

pub const EMBEDDING_DIM: usize = 320;
pub const CAP_FRAME_FEATURES: usize = 8;
pub const CAP_DOWNSAMPLE: usize = 64;
pub const IMU_POOL: usize = 4;
pub const IMU_STATS: usize = 6;
pub const IMU_BLOCK: usize = IMU_POOL * IMU_POOL + IMU_STATS;
pub const MOTION_CHANNELS: usize = 6;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("row {row} has {got} values, expected {expected}")]
    RowDimension { row: usize, got: usize, expected: usize },
    #[error("duplicate session id '{0}'")]
    DuplicateId(String),
    #[error("degenerate training input: {0}")]
    Degenerate(String),
    #[error("malformed model file: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which descriptors feed the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Fused,
    Cap,
    Imu,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Fused => "fused",
            Modality::Cap => "cap",
            Modality::Imu => "imu",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapDescriptor(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct ImuDescriptor(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Scales `v` to unit Euclidean length; a zero vector is left as is.
pub fn unit_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Concatenates the descriptors selected by `modality`.
pub fn assemble_input(modality: Modality, cap: &CapDescriptor, imu: &ImuDescriptor) -> Vec<f64> {
    match modality {
        Modality::Fused => cap.0.iter().chain(&imu.0).copied().collect(),
        Modality::Cap => cap.0.clone(),
        Modality::Imu => imu.0.clone(),
    }
}

/// Per-frame region statistics followed by a uniform downsample of the
/// smoothed flattened sequence.
///
/// Frame features, in order: energy, active cells, centroid x, centroid y,
/// intensity-weighted var_x, var_y, cov_xy and peak value. Untouched frames
/// contribute zeros.
pub fn cap_descriptor(seq: &CapSequence, track: &TouchTrack, smooth_window: usize) -> CapDescriptor {
    let mut v = Vec::with_capacity(seq.len() * CAP_FRAME_FEATURES + CAP_DOWNSAMPLE);
    for (frame, det) in seq.frames.iter().zip(&track.detections) {
        v.extend_from_slice(&region_features(frame, &det.region));
    }
    let flat = capsense::flatten_and_smooth(seq, smooth_window);
    let last = flat.len() - 1;
    for i in 0..CAP_DOWNSAMPLE {
        let idx = ((i * last) as f64 / (CAP_DOWNSAMPLE - 1) as f64).round() as usize;
        v.push(flat[idx]);
    }
    CapDescriptor(v)
}

pub(crate) fn region_features(frame: &capsense::Frame, region: &[(usize, usize)]) -> [f64; CAP_FRAME_FEATURES] {
    if region.is_empty() {
        return [0.0; CAP_FRAME_FEATURES];
    }
    let mut energy = 0.0;
    let mut peak = f64::NEG_INFINITY;
    for &(i, j) in region {
        let w = frame.get(i, j);
        energy += w;
        peak = peak.max(w);
    }
    let (cx, cy) = capsense::weighted_centroid(frame, region);
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    if energy > 0.0 {
        for &(i, j) in region {
            let w = frame.get(i, j);
            let dx = j as f64 - cx;
            let dy = i as f64 - cy;
            vx += w * dx * dx;
            vy += w * dy * dy;
            cxy += w * dx * dy;
        }
        vx /= energy;
        vy /= energy;
        cxy /= energy;
    }
    [energy, region.len() as f64, cx, cy, vx, vy, cxy, peak]
}

/// Per motion channel: 4×4 mean-pooled dB spectrogram, then mean, std, RMS,
/// skewness, excess kurtosis and the time-averaged spectral centroid (Hz).
pub fn imu_descriptor(segment: &MotionSegment, fs: f64, stft: &StftConfig) -> ImuDescriptor {
    imu_descriptor_with(segment, fs, &Stft::new(stft))
}

pub fn imu_descriptor_with(segment: &MotionSegment, fs: f64, stft: &Stft) -> ImuDescriptor {
    let mut v = Vec::with_capacity(segment.tensor.len() * IMU_BLOCK);
    for channel in &segment.tensor {
        let spec = stft.psd(channel, fs).expect("segment is at least one window long");
        v.extend(pool_grid(&spec.db, IMU_POOL));
        v.extend_from_slice(&moments(channel));
        let frames = spec.t_bins.len();
        let mut centroid = 0.0;
        for t in 0..frames {
            let total: f64 = spec.power.iter().map(|row| row[t]).sum();
            if total > 0.0 {
                centroid += spec
                    .power
                    .iter()
                    .zip(&spec.f_bins)
                    .map(|(row, f)| f * row[t])
                    .sum::<f64>()
                    / total;
            }
        }
        v.push(centroid / frames as f64);
    }
    ImuDescriptor(v)
}

/// Mean over a `parts × parts` partition; the last block absorbs the remainder.
fn pool_grid(grid: &[Vec<f64>], parts: usize) -> Vec<f64> {
    let rows = grid.len();
    let cols = grid[0].len();
    let bounds = |n: usize, k: usize| (k * n / parts, (k + 1) * n / parts);
    let mut out = Vec::with_capacity(parts * parts);
    for bi in 0..parts {
        let (r0, r1) = bounds(rows, bi);
        for bj in 0..parts {
            let (c0, c1) = bounds(cols, bj);
            let mut s = 0.0;
            let mut n = 0usize;
            for row in &grid[r0..r1] {
                for v in &row[c0..c1] {
                    s += v;
                    n += 1;
                }
            }
            out.push(if n > 0 { s / n as f64 } else { 0.0 });
        }
    }
    out
}

/// mean, std, RMS, skewness, excess kurtosis; higher moments are 0 for a
/// constant input.
fn moments(x: &[f64]) -> [f64; 5] {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    let m2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = m2.sqrt();
    if std <= 1e-12 * mean.abs().max(1.0) {
        return [mean, 0.0, rms, 0.0, 0.0];
    }
    let m3 = x.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    let m4 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    [mean, std, rms, m3 / std.powi(3), m4 / (m2 * m2) - 3.0]
}
