//! Capacitive-side augmentation for pre-training: global time warping and
//! amplitude-adaptive Gaussian noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capsense::{CapSequence, Frame};
use crate::stats;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("invalid augmentation config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Maximum relative rate change, r ~ U(1 − w, 1 + w).
    pub warp_factor: f64,
    pub base_sigma: f64,
    pub min_sigma: f64,
    /// Reference amplitude at which σ equals `base_sigma`.
    pub a_nominal: f64,
    pub n_aug: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            warp_factor: 0.1,
            base_sigma: 0.5,
            min_sigma: 0.1,
            a_nominal: 50.0,
            n_aug: 1,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(0.0..1.0).contains(&self.warp_factor) {
            return Err(AugmentError::Config(format!(
                "warp_factor must lie in [0, 1), got {}",
                self.warp_factor
            )));
        }
        if !(self.base_sigma >= self.min_sigma && self.min_sigma >= 0.0) {
            return Err(AugmentError::Config(
                "need base_sigma ≥ min_sigma ≥ 0".to_string(),
            ));
        }
        if self.a_nominal <= 0.0 {
            return Err(AugmentError::Config("a_nominal must be positive".to_string()));
        }
        Ok(())
    }
}

/// Linear resampling of every cell onto `n` instants spanning the sequence.
fn resample_frames(frames: &[Frame], n: usize) -> Vec<Frame> {
    let src = frames.len();
    (0..n)
        .map(|k| {
            let pos = if n > 1 {
                k as f64 * (src - 1) as f64 / (n - 1) as f64
            } else {
                0.0
            };
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let w = pos - lo as f64;
            let data = frames[lo]
                .data
                .iter()
                .zip(&frames[hi].data)
                .map(|(a, b)| a + (b - a) * w)
                .collect();
            Frame::new(frames[0].rows, frames[0].cols, data)
        })
        .collect()
}

/// Applies a global rate change `rate` and maps the result back onto the
/// original frame count.
pub fn time_warp_with_rate(seq: &CapSequence, rate: f64) -> CapSequence {
    let n = seq.frames.len();
    let stretched_len = ((n as f64 * rate).round() as usize).max(2);
    let frames = if stretched_len == n {
        seq.frames.clone()
    } else {
        let stretched = resample_frames(&seq.frames, stretched_len);
        resample_frames(&stretched, n)
    };
    CapSequence {
        meta: seq.meta.clone(),
        frames,
    }
}

pub fn time_warp<R: Rng + ?Sized>(seq: &CapSequence, cfg: &AugmentConfig, rng: &mut R) -> CapSequence {
    let rate = if cfg.warp_factor > 0.0 {
        rng.random_range(1.0 - cfg.warp_factor..=1.0 + cfg.warp_factor)
    } else {
        1.0
    };
    time_warp_with_rate(seq, rate)
}

/// Median of the non-zero values in the central 3×3 block (0 if all zero).
pub fn reference_amplitude(frame: &Frame) -> f64 {
    let ci = frame.rows / 2;
    let cj = frame.cols / 2;
    let mut vals = Vec::with_capacity(9);
    for i in ci.saturating_sub(1)..=(ci + 1).min(frame.rows - 1) {
        for j in cj.saturating_sub(1)..=(cj + 1).min(frame.cols - 1) {
            let v = frame.get(i, j);
            if v != 0.0 {
                vals.push(v);
            }
        }
    }
    if vals.is_empty() {
        0.0
    } else {
        stats::median_in_place(&mut vals)
    }
}

/// σ = max(min_sigma, base_sigma · A_ref / a_nominal).
pub fn noise_sigma(frame: &Frame, cfg: &AugmentConfig) -> f64 {
    (cfg.base_sigma * reference_amplitude(frame) / cfg.a_nominal).max(cfg.min_sigma)
}

/// Adds i.i.d. N(0, σ²) to every cell without clamping.
pub fn perturb<R: Rng + ?Sized>(frame: &Frame, sigma: f64, rng: &mut R) -> Frame {
    if sigma == 0.0 {
        return frame.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let data = frame.data.iter().map(|v| v + normal.sample(rng)).collect();
    Frame::new(frame.rows, frame.cols, data)
}

/// Amplitude-adaptive noise, clamped at zero. Returns the frame and the σ used.
pub fn adaptive_noise<R: Rng + ?Sized>(frame: &Frame, cfg: &AugmentConfig, rng: &mut R) -> (Frame, f64) {
    let sigma = noise_sigma(frame, cfg);
    let mut out = perturb(frame, sigma, rng);
    for v in out.data.iter_mut() {
        *v = v.max(0.0);
    }
    (out, sigma)
}

/// Anything carrying a capacitive sequence that can be augmented.
pub trait Augmentable: Clone {
    fn cap_sequence(&self) -> &CapSequence;
    /// Returns a copy with the capacitive sequence replaced; `copy` numbers
    /// the augmented replica (1-based).
    fn with_cap_sequence(&self, seq: CapSequence, copy: usize) -> Self;
}

impl Augmentable for CapSequence {
    fn cap_sequence(&self) -> &CapSequence {
        self
    }

    fn with_cap_sequence(&self, seq: CapSequence, _copy: usize) -> Self {
        seq
    }
}

pub fn augment_sequence<R: Rng + ?Sized>(seq: &CapSequence, cfg: &AugmentConfig, rng: &mut R) -> CapSequence {
    let warped = time_warp(seq, cfg, rng);
    CapSequence {
        meta: warped.meta,
        frames: warped
            .frames
            .iter()
            .map(|f| adaptive_noise(f, cfg, rng).0)
            .collect(),
    }
}

/// Each input followed by its `n_aug` warped and noised copies. Item `i`
/// draws from its own derived stream, so the output does not
/// depend on scheduling.
pub fn augment_dataset<T: Augmentable>(items: &[T], cfg: &AugmentConfig, seed: u64) -> Result<Vec<T>, AugmentError> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(items.len() * (cfg.n_aug + 1));
    for (i, item) in items.iter().enumerate() {
        out.push(item.clone());
        let mut rng = stats::derived_rng(seed, i as u64);
        for copy in 1..=cfg.n_aug {
            let seq = augment_sequence(item.cap_sequence(), cfg, &mut rng);
            out.push(item.with_cap_sequence(seq, copy));
        }
    }
    Ok(out)
}
