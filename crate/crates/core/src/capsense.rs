//! Touch localization on capacitive frames: robust thresholding, largest-energy
//! connected region, intensity-weighted centroid, constant-velocity Kalman
//! tracking and the smoothed flattened representation.

use std::collections::VecDeque;

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::session::{Session, SessionMeta};
use crate::stats;

#[derive(Debug, Error, PartialEq)]
pub enum CapsenseError {
    #[error("need at least 2 capacitive frames, got {0}")]
    TooFewFrames(usize),
    #[error("n_frames must be at least 2, got {0}")]
    BadFrameCount(usize),
    #[error("no touch event detected")]
    NoTouch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    Four,
    Eight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KalmanConfig {
    pub q_pos: f64,
    pub q_vel: f64,
    pub r: f64,
    pub p0_pos: f64,
    pub p0_vel: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        KalmanConfig {
            q_pos: 0.01,
            q_vel: 0.04,
            r: 0.25,
            p0_pos: 1.0,
            p0_vel: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapsenseConfig {
    /// Sensitivity multiplier on the MAD.
    pub k: f64,
    pub connectivity: Connectivity,
    pub n_frames: usize,
    /// Temporal moving-average width in frames.
    pub smooth_window: usize,
    pub kalman: KalmanConfig,
}

impl Default for CapsenseConfig {
    fn default() -> Self {
        CapsenseConfig {
            k: 3.0,
            connectivity: Connectivity::Eight,
            n_frames: 16,
            smooth_window: 5,
            kalman: KalmanConfig::default(),
        }
    }
}

/// A rows×cols matrix of float capacitance values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Frame {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "frame data does not match shape");
        Frame { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Frame::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_counts(rows: usize, cols: usize, counts: &[u64]) -> Self {
        Frame::new(rows, cols, counts.iter().map(|&c| c as f64).collect())
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn scaled(&self, c: f64) -> Frame {
        Frame::new(self.rows, self.cols, self.data.iter().map(|v| v * c).collect())
    }
}

/// Fixed-length capacitive sequence produced by [`interpolate_frames`].
#[derive(Debug, Clone, PartialEq)]
pub struct CapSequence {
    pub meta: SessionMeta,
    pub frames: Vec<Frame>,
}

impl CapSequence {
    pub fn rows(&self) -> usize {
        self.frames[0].rows
    }

    pub fn cols(&self) -> usize {
        self.frames[0].cols
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameDetection {
    pub tau: f64,
    /// Cells (row, col) of the selected region.
    pub region: Vec<(usize, usize)>,
    /// (x = column, y = row); `None` when nothing was detected.
    pub centroid: Option<(f64, f64)>,
    pub energy: f64,
}

impl FrameDetection {
    pub fn touched(&self) -> bool {
        !self.region.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    /// [x, y, v_x, v_y] in cells and cells/frame.
    pub s: Vector4<f64>,
    pub p: Matrix4<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TouchTrack {
    pub detections: Vec<FrameDetection>,
    /// Filter state after processing each frame; `None` before the first detection.
    pub states: Vec<Option<KalmanState>>,
    pub smoothed: Vec<Option<(f64, f64)>>,
    /// First and last touched frame, inclusive.
    pub active_window: (usize, usize),
}

/// Resamples the capacitive stream onto `n_frames` uniformly spaced
/// instants spanning the first and last frame timestamps.
pub fn interpolate_frames(session: &Session, n_frames: usize) -> Result<CapSequence, CapsenseError> {
    if session.cap.len() < 2 {
        return Err(CapsenseError::TooFewFrames(session.cap.len()));
    }
    if n_frames < 2 {
        return Err(CapsenseError::BadFrameCount(n_frames));
    }
    let (rows, cols) = (session.meta.cap_rows, session.meta.cap_cols);
    let ts: Vec<f64> = session.cap.iter().map(|f| f.ts_ms as f64).collect();
    let t0 = ts[0];
    let t1 = ts[ts.len() - 1];

    let frames = (0..n_frames)
        .map(|k| {
            let t = t0 + (t1 - t0) * k as f64 / (n_frames - 1) as f64;
            let hi = ts.partition_point(|&v| v <= t).clamp(1, ts.len() - 1);
            let lo = hi - 1;
            let span = ts[hi] - ts[lo];
            let w = if span > 0.0 { ((t - ts[lo]) / span).clamp(0.0, 1.0) } else { 0.0 };
            let a = &session.cap[lo].values;
            let b = &session.cap[hi].values;
            let data = a
                .iter()
                .zip(b)
                .map(|(&x, &y)| {
                    let (x, y) = (x as f64, y as f64);
                    x + (y - x) * w
                })
                .collect();
            Frame::new(rows, cols, data)
        })
        .collect();

    Ok(CapSequence {
        meta: session.meta.clone(),
        frames,
    })
}

/// `tau = median + k·MAD`; the mask keeps cells strictly above `tau`.
pub fn adaptive_threshold(frame: &Frame, k: f64) -> (f64, Vec<bool>) {
    let mut buf = frame.data.clone();
    let med = stats::median_in_place(&mut buf);
    for (b, v) in buf.iter_mut().zip(&frame.data) {
        *b = (v - med).abs();
    }
    let mad = stats::median_in_place(&mut buf);
    let tau = med + k * mad;
    let mask = frame.data.iter().map(|&v| v > tau).collect();
    (tau, mask)
}

/// Selects the connected masked region with the largest summed intensity
/// and returns its intensity-weighted centroid.
pub fn detect_touch_region(
    frame: &Frame,
    mask: &[bool],
    tau: f64,
    connectivity: Connectivity,
) -> FrameDetection {
    assert_eq!(mask.len(), frame.data.len(), "mask shape mismatch");
    let (rows, cols) = (frame.rows, frame.cols);
    let mut seen = vec![false; mask.len()];
    let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
    let mut queue = VecDeque::new();

    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut cells = Vec::new();
        let mut energy = 0.0;
        while let Some(idx) = queue.pop_front() {
            let (i, j) = (idx / cols, idx % cols);
            cells.push((i, j));
            energy += frame.data[idx];
            for (di, dj) in neighbours(connectivity) {
                let ni = i as isize + di;
                let nj = j as isize + dj;
                if ni < 0 || nj < 0 || ni >= rows as isize || nj >= cols as isize {
                    continue;
                }
                let nidx = ni as usize * cols + nj as usize;
                if mask[nidx] && !seen[nidx] {
                    seen[nidx] = true;
                    queue.push_back(nidx);
                }
            }
        }
        // ties keep the earliest region in scan order
        if best.as_ref().is_none_or(|(e, _)| energy > *e) {
            best = Some((energy, cells));
        }
    }

    match best {
        None => FrameDetection {
            tau,
            region: Vec::new(),
            centroid: None,
            energy: 0.0,
        },
        Some((energy, mut region)) => {
            region.sort_unstable();
            let centroid = weighted_centroid(frame, &region);
            FrameDetection {
                tau,
                region,
                centroid: Some(centroid),
                energy,
            }
        }
    }
}

fn neighbours(c: Connectivity) -> &'static [(isize, isize)] {
    const FOUR: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
    const EIGHT: [(isize, isize); 8] = [
        (-1, -1),
        (-1, 0),
        (-1, 1),
        (0, -1),
        (0, 1),
        (1, -1),
        (1, 0),
        (1, 1),
    ];
    match c {
        Connectivity::Four => &FOUR,
        Connectivity::Eight => &EIGHT,
    }
}

/// (x, y) = Σ (j, i)·X(i,j) / Σ X(i,j) over the region.
pub fn weighted_centroid(frame: &Frame, region: &[(usize, usize)]) -> (f64, f64) {
    let mut sw = 0.0;
    let mut sx = 0.0;
    let mut sy = 0.0;
    for &(i, j) in region {
        let w = frame.get(i, j);
        sw += w;
        sx += j as f64 * w;
        sy += i as f64 * w;
    }
    if sw > 0.0 {
        (sx / sw, sy / sw)
    } else {
        let n = region.len() as f64;
        let (cx, cy) = region
            .iter()
            .fold((0.0, 0.0), |(a, b), &(i, j)| (a + j as f64, b + i as f64));
        (cx / n, cy / n)
    }
}

/// Constant-velocity filter over (x, y) with one frame per step.
#[derive(Debug, Clone)]
pub struct KalmanTracker {
    f: Matrix4<f64>,
    q: Matrix4<f64>,
    h: Matrix2x4<f64>,
    r: Matrix2<f64>,
    p0: Matrix4<f64>,
    state: Option<KalmanState>,
}

impl KalmanTracker {
    pub fn new(cfg: &KalmanConfig) -> Self {
        #[rustfmt::skip]
        let f = Matrix4::new(
            1.0, 0.0, 1.0, 0.0,
            0.0, 1.0, 0.0, 1.0,
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        );
        #[rustfmt::skip]
        let h = Matrix2x4::new(
            1.0, 0.0, 0.0, 0.0,
            0.0, 1.0, 0.0, 0.0,
        );
        KalmanTracker {
            f,
            q: Matrix4::from_diagonal(&Vector4::new(cfg.q_pos, cfg.q_pos, cfg.q_vel, cfg.q_vel)),
            h,
            r: Matrix2::identity() * cfg.r,
            p0: Matrix4::from_diagonal(&Vector4::new(cfg.p0_pos, cfg.p0_pos, cfg.p0_vel, cfg.p0_vel)),
            state: None,
        }
    }

    pub fn state(&self) -> Option<&KalmanState> {
        self.state.as_ref()
    }

    pub fn initialize(&mut self, x: f64, y: f64) {
        self.state = Some(KalmanState {
            s: Vector4::new(x, y, 0.0, 0.0),
            p: self.p0,
        });
    }

    pub fn predict(&mut self) {
        if let Some(st) = self.state.as_mut() {
            st.s = self.f * st.s;
            let p = self.f * st.p * self.f.transpose() + self.q;
            st.p = 0.5 * (p + p.transpose());
        }
    }

    /// Measurement update; initializes the filter on the first call.
    pub fn update(&mut self, x: f64, y: f64) {
        let Some(st) = self.state.as_mut() else {
            self.initialize(x, y);
            return;
        };
        let z = Vector2::new(x, y);
        let innovation = z - self.h * st.s;
        let s = self.h * st.p * self.h.transpose() + self.r;
        let s_inv = s.try_inverse().expect("innovation covariance is positive definite");
        let gain = st.p * self.h.transpose() * s_inv;
        st.s += gain * innovation;
        // Joseph form keeps P symmetric PSD under rounding.
        let ikh = Matrix4::identity() - gain * self.h;
        let p = ikh * st.p * ikh.transpose() + gain * self.r * gain.transpose();
        st.p = 0.5 * (p + p.transpose());
    }
}

pub fn track_touch(seq: &CapSequence, cfg: &CapsenseConfig) -> Result<TouchTrack, CapsenseError> {
    let detections: Vec<FrameDetection> = seq
        .frames
        .iter()
        .map(|f| {
            let (tau, mask) = adaptive_threshold(f, cfg.k);
            detect_touch_region(f, &mask, tau, cfg.connectivity)
        })
        .collect();

    let first = detections.iter().position(|d| d.touched()).ok_or(CapsenseError::NoTouch)?;
    let last = detections.iter().rposition(|d| d.touched()).unwrap_or(first);

    let mut kf = KalmanTracker::new(&cfg.kalman);
    let mut states = Vec::with_capacity(detections.len());
    let mut smoothed = Vec::with_capacity(detections.len());
    for det in &detections {
        kf.predict();
        if let Some((x, y)) = det.centroid {
            kf.update(x, y);
        }
        let st = kf.state().cloned();
        smoothed.push(st.as_ref().map(|s| (s.s[0], s.s[1])));
        states.push(st);
    }

    Ok(TouchTrack {
        detections,
        states,
        smoothed,
        active_window: (first, last),
    })
}

/// Per-cell centered moving average over time (edges use the truncated
/// window), then row-major flattening with frames concatenated in order.
pub fn flatten_and_smooth(seq: &CapSequence, window: usize) -> Vec<f64> {
    let n = seq.frames.len();
    let cells = seq.frames[0].data.len();
    let half = window.max(1) / 2;
    let mut out = vec![0.0; n * cells];
    let mut column = vec![0.0; n];
    for c in 0..cells {
        for (t, f) in seq.frames.iter().enumerate() {
            column[t] = f.data[c];
        }
        // running sums keep this O(n) per cell
        let mut prefix = vec![0.0; n + 1];
        for t in 0..n {
            prefix[t + 1] = prefix[t] + column[t];
        }
        for t in 0..n {
            let lo = t.saturating_sub(half);
            let hi = (t + half + 1).min(n);
            out[t * cells + c] = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
        }
    }
    out
}
