//! IMU side of the pipeline: uniform resampling, wavelet denoising, the
//! coarse-to-fine alignment of the press interval, quaternion orientation
//! tracking, Euler conversion and the STFT power spectrogram.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capsense::TouchTrack;
use crate::session::{Session, SessionMeta};
use crate::stats;

#[derive(Debug, Error, PartialEq)]
pub enum MotionError {
    #[error("need at least {need} IMU samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("series of length {got} is shorter than the {need} samples required by {levels} wavelet levels")]
    SeriesTooShort { need: usize, got: usize, levels: usize },
    #[error("channel of length {got} is shorter than the STFT window {win}")]
    ChannelTooShort { got: usize, win: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaveletConfig {
    pub levels: usize,
}

impl Default for WaveletConfig {
    fn default() -> Self {
        WaveletConfig { levels: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub win: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig { win: 32, hop: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionConfig {
    pub wavelet: WaveletConfig,
    /// Gain of the accelerometer/magnetometer correction, rad/s.
    pub beta: f64,
    /// Derivative threshold as a fraction of the window's max |dm/dt|.
    pub rho: f64,
    pub segment_len: usize,
    pub stft: StftConfig,
    /// Padding added on both sides of the coarse window, seconds.
    pub pad_s: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        MotionConfig {
            wavelet: WaveletConfig::default(),
            beta: 0.1,
            rho: 0.2,
            segment_len: 160,
            stft: StftConfig::default(),
            pad_s: 0.05,
        }
    }
}

/// Channel order: a_x a_y a_z g_x g_y g_z m_x m_y m_z.
pub const IMU_CHANNELS: usize = 9;

#[derive(Debug, Clone, PartialEq)]
pub struct ImuSeries {
    pub hz: f64,
    /// Sample times, seconds.
    pub t: Vec<f64>,
    pub channels: Vec<Vec<f64>>,
}

impl ImuSeries {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn vec3(&self, base: usize, i: usize) -> [f64; 3] {
        [
            self.channels[base][i],
            self.channels[base + 1][i],
            self.channels[base + 2][i],
        ]
    }

    pub fn acc(&self, i: usize) -> [f64; 3] {
        self.vec3(0, i)
    }

    pub fn gyro(&self, i: usize) -> [f64; 3] {
        self.vec3(3, i)
    }

    pub fn mag(&self, i: usize) -> [f64; 3] {
        self.vec3(6, i)
    }

    /// m(t) = |a(t)|.
    pub fn acc_magnitude(&self) -> Vec<f64> {
        (0..self.len()).map(|i| norm3(self.acc(i))).collect()
    }
}

pub fn resample_imu(session: &Session) -> Result<ImuSeries, MotionError> {
    let n = session.imu.len();
    if n < 8 {
        return Err(MotionError::TooFewSamples { need: 8, got: n });
    }
    let hz = session.meta.imu_hz as f64;
    let ts: Vec<f64> = session.imu.iter().map(|s| s.ts_ms as f64 / 1000.0).collect();
    let t0 = ts[0];
    let span = ts[n - 1] - t0;
    let count = (span * hz + 1e-9).floor() as usize + 1;
    let t: Vec<f64> = (0..count).map(|k| t0 + k as f64 / hz).collect();

    let channels = (0..IMU_CHANNELS)
        .map(|c| {
            let ys: Vec<f64> = session
                .imu
                .iter()
                .map(|s| match c {
                    0..=2 => s.a[c],
                    3..=5 => s.g[c - 3],
                    _ => s.m[c - 6],
                })
                .collect();
            t.iter().map(|&x| stats::interp(&ts, &ys, x)).collect()
        })
        .collect();
    Ok(ImuSeries { hz, t, channels })
}

/// Daubechies-4 (8-tap) orthonormal scaling filter.
const DB4: [f64; 8] = [
    0.230_377_813_308_896_500_863,
    0.714_846_570_552_915_647_090,
    0.630_880_767_929_858_907_882,
    -0.027_983_769_416_859_854_211,
    -0.187_034_811_719_093_084_080,
    0.030_841_381_835_560_763_627,
    0.032_883_011_666_885_199_735,
    -0.010_597_401_785_069_032_105,
];

fn db4_high() -> [f64; 8] {
    let mut g = [0.0; 8];
    for (n, v) in g.iter_mut().enumerate() {
        let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
        *v = sign * DB4[7 - n];
    }
    g
}

/// One level of the periodized orthonormal DWT. `x.len()` must be even.
pub fn dwt_step(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = x.len();
    let g = db4_high();
    let half = m / 2;
    let mut a = vec![0.0; half];
    let mut d = vec![0.0; half];
    for k in 0..half {
        let mut sa = 0.0;
        let mut sd = 0.0;
        for n in 0..DB4.len() {
            let v = x[(2 * k + n) % m];
            sa += DB4[n] * v;
            sd += g[n] * v;
        }
        a[k] = sa;
        d[k] = sd;
    }
    (a, d)
}

/// Inverse of [`dwt_step`].
pub fn idwt_step(a: &[f64], d: &[f64]) -> Vec<f64> {
    let m = a.len() * 2;
    let g = db4_high();
    let mut x = vec![0.0; m];
    for k in 0..a.len() {
        for n in 0..DB4.len() {
            x[(2 * k + n) % m] += DB4[n] * a[k] + g[n] * d[k];
        }
    }
    x
}

/// Index into the half-sample symmetric extension of a length-`n` signal.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Universal soft-threshold denoising of one channel; output length equals
/// input length.
pub fn denoise_channel(x: &[f64], levels: usize) -> Result<Vec<f64>, MotionError> {
    let n = x.len();
    let block = 1usize << levels;
    if n < block || n < 2 {
        return Err(MotionError::SeriesTooShort {
            need: block.max(2),
            got: n,
            levels,
        });
    }
    if levels == 0 {
        return Ok(x.to_vec());
    }
    // symmetric padding on both sides; the deepest level must still span the filter
    let pad = DB4.len() * block;
    let mut total = n + 2 * pad;
    total = total.div_ceil(block) * block;
    let padded: Vec<f64> = (0..total)
        .map(|i| x[reflect(i as isize - pad as isize, n)])
        .collect();

    let mut approx = padded;
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let (a, d) = dwt_step(&approx);
        details.push(d);
        approx = a;
    }

    let mut finest: Vec<f64> = details[0].iter().map(|v| v.abs()).collect();
    let sigma = stats::median_in_place(&mut finest) / 0.6745;
    let lambda = sigma * (2.0 * (n as f64).ln()).sqrt();
    for d in details.iter_mut() {
        for v in d.iter_mut() {
            *v = v.signum() * (v.abs() - lambda).max(0.0);
        }
    }

    for d in details.iter().rev() {
        approx = idwt_step(&approx, d);
    }
    Ok(approx[pad..pad + n].to_vec())
}

pub fn wavelet_denoise(series: &ImuSeries, levels: usize) -> Result<ImuSeries, MotionError> {
    let channels = series
        .channels
        .iter()
        .map(|c| denoise_channel(c, levels))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ImuSeries {
        hz: series.hz,
        t: series.t.clone(),
        channels,
    })
}

/// Maps the touched frame span onto IMU sample indices, padded and clamped.
pub fn coarse_window(track: &TouchTrack, meta: &SessionMeta, series_len: usize, pad_s: f64) -> (usize, usize) {
    let ratio = meta.imu_hz as f64 / meta.cap_hz as f64;
    let pad = (pad_s * meta.imu_hz as f64).round() as isize;
    let (f0, f1) = track.active_window;
    let s = (f0 as f64 * ratio).round() as isize - pad;
    let e = (f1 as f64 * ratio).round() as isize + pad;
    let last = series_len as isize - 1;
    (s.clamp(0, last) as usize, e.clamp(0, last) as usize)
}

/// Indices of the global max and min of `m` over the inclusive window,
/// earliest index on ties. Together they maximize |m(t_p) − m(t_v)|.
pub fn find_extremum_pair(m: &[f64], window: (usize, usize)) -> (usize, usize) {
    let (s, e) = window;
    let mut tp = s;
    let mut tv = s;
    for t in s..=e {
        if m[t] > m[tp] {
            tp = t;
        }
        if m[t] < m[tv] {
            tv = t;
        }
    }
    (tp, tv)
}

/// Refines the press interval around the extremum pair by thresholding the
/// first difference d(t) = m(t+1) − m(t) at `rho · max|d|`.
///
/// Backtracking from the earlier extremum, the scan finds the first active
/// sample and then follows the active run back to its onset. Forward from the
/// later extremum, the end is the first sample whose |d| falls below the
/// threshold. Both ends stay inside the window and `start < end`.
pub fn refine_interval(m: &[f64], tp: usize, tv: usize, window: (usize, usize), rho: f64) -> (usize, usize) {
    let (s, e) = window;
    if e <= s {
        return (s, e);
    }
    let d = |t: usize| (m[t + 1] - m[t]).abs();
    let max_d = (s..e).map(d).fold(0.0, f64::max);
    if max_d == 0.0 {
        return (s, e);
    }
    let eta = rho * max_d;
    let lo = tp.min(tv);
    let hi = tp.max(tv);

    let start = {
        // d(lo-1) is the change arriving at lo
        let mut t = lo as isize - 1;
        while t >= s as isize && d(t as usize) <= eta {
            t -= 1;
        }
        if t < s as isize {
            s
        } else {
            let mut t = t as usize;
            while t > s && d(t - 1) > eta {
                t -= 1;
            }
            t
        }
    };

    let mut end = hi;
    while end < e && d(end) >= eta {
        end += 1;
    }

    if start < end {
        (start, end)
    } else if end < e {
        (start, end + 1)
    } else {
        (end - 1, end)
    }
}

/// Unit quaternion (q0 scalar part).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub q0: f64,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        q0: 1.0,
        q1: 0.0,
        q2: 0.0,
        q3: 0.0,
    };

    pub fn new(q0: f64, q1: f64, q2: f64, q3: f64) -> Self {
        Quaternion { q0, q1, q2, q3 }
    }

    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Self {
        let n = norm3(axis);
        if n == 0.0 {
            return Self::IDENTITY;
        }
        let (s, c) = (angle / 2.0).sin_cos();
        Quaternion::new(c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n)
    }

    pub fn norm(&self) -> f64 {
        (self.q0 * self.q0 + self.q1 * self.q1 + self.q2 * self.q2 + self.q3 * self.q3).sqrt()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        Quaternion::new(self.q0 / n, self.q1 / n, self.q2 / n, self.q3 / n)
    }

    pub fn conj(&self) -> Self {
        Quaternion::new(self.q0, -self.q1, -self.q2, -self.q3)
    }

    /// Hamilton product `self ⊗ rhs`.
    pub fn mul(&self, r: &Quaternion) -> Quaternion {
        let (a0, a1, a2, a3) = (self.q0, self.q1, self.q2, self.q3);
        let (b0, b1, b2, b3) = (r.q0, r.q1, r.q2, r.q3);
        Quaternion::new(
            a0 * b0 - a1 * b1 - a2 * b2 - a3 * b3,
            a0 * b1 + a1 * b0 + a2 * b3 - a3 * b2,
            a0 * b2 - a1 * b3 + a2 * b0 + a3 * b1,
            a0 * b3 + a1 * b2 - a2 * b1 + a3 * b0,
        )
    }

    /// Rotation matrix of the active rotation `v ↦ q v q*`.
    pub fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        let (w, x, y, z) = (self.q0, self.q1, self.q2, self.q3);
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        mat_vec(&self.rotation_matrix(), v)
    }

    /// Inverse rotation, `v ↦ q* v q`.
    pub fn rotate_inv(&self, v: [f64; 3]) -> [f64; 3] {
        mat_t_vec(&self.rotation_matrix(), v)
    }

    /// Shepperd's method.
    pub fn from_rotation_matrix(r: &[[f64; 3]; 3]) -> Quaternion {
        let tr = r[0][0] + r[1][1] + r[2][2];
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            Quaternion::new(
                0.25 * s,
                (r[2][1] - r[1][2]) / s,
                (r[0][2] - r[2][0]) / s,
                (r[1][0] - r[0][1]) / s,
            )
        } else if r[0][0] > r[1][1] && r[0][0] > r[2][2] {
            let s = (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt() * 2.0;
            Quaternion::new(
                (r[2][1] - r[1][2]) / s,
                0.25 * s,
                (r[0][1] + r[1][0]) / s,
                (r[0][2] + r[2][0]) / s,
            )
        } else if r[1][1] > r[2][2] {
            let s = (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt() * 2.0;
            Quaternion::new(
                (r[0][2] - r[2][0]) / s,
                (r[0][1] + r[1][0]) / s,
                0.25 * s,
                (r[1][2] + r[2][1]) / s,
            )
        } else {
            let s = (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt() * 2.0;
            Quaternion::new(
                (r[1][0] - r[0][1]) / s,
                (r[0][2] + r[2][0]) / s,
                (r[1][2] + r[2][1]) / s,
                0.25 * s,
            )
        };
        let q = q.normalized();
        if q.q0 < 0.0 {
            Quaternion::new(-q.q0, -q.q1, -q.q2, -q.q3)
        } else {
            q
        }
    }

    /// Rotation angle between two orientations, radians.
    pub fn angle_to(&self, other: &Quaternion) -> f64 {
        let d = self.conj().mul(other);
        2.0 * norm3([d.q1, d.q2, d.q3]).atan2(d.q0.abs())
    }
}

pub(crate) fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn scale3(v: [f64; 3], s: f64) -> [f64; 3] {
    [v[0] * s, v[1] * s, v[2] * s]
}

fn mat_vec(r: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
        r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
        r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
    ]
}

fn mat_t_vec(r: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * v[0] + r[1][0] * v[1] + r[2][0] * v[2],
        r[0][1] * v[0] + r[1][1] * v[1] + r[2][1] * v[2],
        r[0][2] * v[0] + r[1][2] * v[1] + r[2][2] * v[2],
    ]
}

/// Body-to-earth orientation from one accelerometer/magnetometer pair.
/// Earth frame: x north, y west, z up.
pub fn triad_alignment(a: [f64; 3], m: [f64; 3]) -> Quaternion {
    let na = norm3(a);
    if na == 0.0 {
        return Quaternion::IDENTITY;
    }
    let up = scale3(a, 1.0 / na);
    let mut west = cross(up, m);
    let nw = norm3(west);
    if nw < 1e-12 {
        // no usable heading: pick any horizontal axis
        let helper = if up[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        west = cross(up, helper);
        let n = norm3(west);
        west = scale3(west, 1.0 / n);
    } else {
        west = scale3(west, 1.0 / nw);
    }
    let north = cross(west, up);
    // rows are the earth axes expressed in body coordinates
    Quaternion::from_rotation_matrix(&[north, west, up])
}

/// Gyro integration with accelerometer/magnetometer gradient correction.
#[derive(Debug, Clone)]
pub struct OrientationFilter {
    pub q: Quaternion,
    pub beta: f64,
    pub dt: f64,
}

impl OrientationFilter {
    pub fn new(q: Quaternion, beta: f64, dt: f64) -> Self {
        OrientationFilter { q, beta, dt }
    }

    pub fn step(&mut self, a: [f64; 3], g: [f64; 3], m: [f64; 3]) {
        let q = self.q;
        let omega = Quaternion::new(0.0, g[0], g[1], g[2]);
        let rate = q.mul(&omega);
        let mut qdot = [0.5 * rate.q0, 0.5 * rate.q1, 0.5 * rate.q2, 0.5 * rate.q3];

        if let Some(grad) = correction_gradient(&q, a, m) {
            let n = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                for (qd, gv) in qdot.iter_mut().zip(grad) {
                    *qd -= self.beta * gv / n;
                }
            }
        }

        let next = Quaternion::new(
            q.q0 + qdot[0] * self.dt,
            q.q1 + qdot[1] * self.dt,
            q.q2 + qdot[2] * self.dt,
            q.q3 + qdot[3] * self.dt,
        );
        self.q = next.normalized();
    }
}

/// Gradient of ½‖f‖² where f stacks the misfit between the predicted and
/// measured gravity and magnetic directions in the body frame. `None` when
/// either reference vector is degenerate.
pub fn correction_gradient(q: &Quaternion, a: [f64; 3], m: [f64; 3]) -> Option<[f64; 4]> {
    let na = norm3(a);
    let nm = norm3(m);
    if na == 0.0 || nm == 0.0 || !na.is_finite() || !nm.is_finite() {
        return None;
    }
    let a = scale3(a, 1.0 / na);
    let m = scale3(m, 1.0 / nm);
    // earth-frame field reference with the heading removed
    let h = q.rotate(m);
    let bx = (h[0] * h[0] + h[1] * h[1]).sqrt();
    let bz = h[2];

    let (w, x, y, z) = (q.q0, q.q1, q.q2, q.q3);
    let f = [
        2.0 * (x * z - w * y) - a[0],
        2.0 * (y * z + w * x) - a[1],
        1.0 - 2.0 * (x * x + y * y) - a[2],
        bx * (1.0 - 2.0 * (y * y + z * z)) + bz * 2.0 * (x * z - w * y) - m[0],
        bx * 2.0 * (x * y - w * z) + bz * 2.0 * (y * z + w * x) - m[1],
        bx * 2.0 * (x * z + w * y) + bz * (1.0 - 2.0 * (x * x + y * y)) - m[2],
    ];
    #[rustfmt::skip]
    let j: [[f64; 4]; 6] = [
        [-2.0 * y, 2.0 * z, -2.0 * w, 2.0 * x],
        [2.0 * x, 2.0 * w, 2.0 * z, 2.0 * y],
        [0.0, -4.0 * x, -4.0 * y, 0.0],
        [-2.0 * bz * y, 2.0 * bz * z, -4.0 * bx * y - 2.0 * bz * w, -4.0 * bx * z + 2.0 * bz * x],
        [-2.0 * bx * z + 2.0 * bz * x, 2.0 * bx * y + 2.0 * bz * w, 2.0 * bx * x + 2.0 * bz * z, -2.0 * bx * w + 2.0 * bz * y],
        [2.0 * bx * y, 2.0 * bx * z - 4.0 * bz * x, 2.0 * bx * w - 4.0 * bz * y, 2.0 * bx * x],
    ];
    let mut grad = [0.0; 4];
    for (row, fi) in j.iter().zip(f) {
        for (g, jv) in grad.iter_mut().zip(row) {
            *g += jv * fi;
        }
    }
    Some(grad)
}

/// One orientation per sample, starting from the TRIAD alignment of the
/// first sample.
pub fn fuse_orientation(series: &ImuSeries, beta: f64) -> Vec<Quaternion> {
    let n = series.len();
    if n == 0 {
        return Vec::new();
    }
    let dt = 1.0 / series.hz;
    let mut filter = OrientationFilter::new(triad_alignment(series.acc(0), series.mag(0)), beta, dt);
    let mut out = Vec::with_capacity(n);
    out.push(filter.q);
    for i in 1..n {
        filter.step(series.acc(i), series.gyro(i), series.mag(i));
        out.push(filter.q);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerAngles {
    pub phi: f64,
    pub theta: f64,
    pub psi: f64,
}

/// Roll, pitch and yaw:
/// φ = atan2(2(q2q3 + q0q1), 1 − 2(q1² + q2²)),
/// θ = asin(2(q1q3 − q0q2)),
/// ψ = atan2(2(q1q2 + q0q3), 1 − 2(q2² + q3²)).
pub fn quat_to_euler(q: &Quaternion) -> EulerAngles {
    let Quaternion { q0, q1, q2, q3 } = *q;
    let phi = (2.0 * (q2 * q3 + q0 * q1)).atan2(1.0 - 2.0 * (q1 * q1 + q2 * q2));
    let theta = (2.0 * (q1 * q3 - q0 * q2)).clamp(-1.0, 1.0).asin();
    let psi = (2.0 * (q1 * q2 + q0 * q3)).atan2(1.0 - 2.0 * (q2 * q2 + q3 * q3));
    EulerAngles {
        phi: wrap_pi(phi),
        theta,
        psi: wrap_pi(psi),
    }
}

/// Inverse of [`quat_to_euler`]: q = q_z(ψ) ⊗ q_y(−θ) ⊗ q_x(φ).
pub fn euler_to_quat(e: &EulerAngles) -> Quaternion {
    let qz = Quaternion::from_axis_angle([0.0, 0.0, 1.0], e.psi);
    let qy = Quaternion::from_axis_angle([0.0, 1.0, 0.0], -e.theta);
    let qx = Quaternion::from_axis_angle([1.0, 0.0, 0.0], e.phi);
    qz.mul(&qy).mul(&qx)
}

/// Maps an angle into (−π, π].
fn wrap_pi(a: f64) -> f64 {
    if a <= -PI {
        a + 2.0 * PI
    } else {
        a
    }
}

/// Removes 2π jumps between consecutive samples.
pub fn unwrap_phase(x: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut offset = 0.0;
    for (i, &v) in x.iter().enumerate() {
        if i > 0 {
            let delta = v - x[i - 1];
            if delta > PI {
                offset -= 2.0 * PI;
            } else if delta < -PI {
                offset += 2.0 * PI;
            }
        }
        out.push(v + offset);
    }
    out
}

pub const DB_FLOOR: f64 = -80.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    /// Linear power spectral density, `power[f][t]`, units²/Hz.
    pub power: Vec<Vec<f64>>,
    /// `10·log10(power)` floored at −80 dB.
    pub db: Vec<Vec<f64>>,
    pub f_bins: Vec<f64>,
    pub t_bins: Vec<f64>,
}

/// Reusable Hann-windowed one-sided STFT.
pub struct Stft {
    win: usize,
    hop: usize,
    window: Vec<f64>,
    window_energy: f64,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(cfg: &StftConfig) -> Self {
        let win = cfg.win;
        // periodic Hann
        let window: Vec<f64> = (0..win)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / win as f64).cos())
            .collect();
        let window_energy = window.iter().map(|w| w * w).sum();
        let fft = FftPlanner::new().plan_fft_forward(win);
        Stft {
            win,
            hop: cfg.hop.max(1),
            window,
            window_energy,
            fft,
        }
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.win {
            0
        } else {
            (len - self.win) / self.hop + 1
        }
    }

    pub fn psd(&self, channel: &[f64], fs: f64) -> Result<Spectrogram, MotionError> {
        if channel.len() < self.win {
            return Err(MotionError::ChannelTooShort {
                got: channel.len(),
                win: self.win,
            });
        }
        let frames = self.frame_count(channel.len());
        let bins = self.win / 2 + 1;
        let scale = 1.0 / (fs * self.window_energy);
        let mut power = vec![vec![0.0; frames]; bins];
        let mut buf = vec![Complex::new(0.0, 0.0); self.win];
        for t in 0..frames {
            let off = t * self.hop;
            for (n, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(channel[off + n] * self.window[n], 0.0);
            }
            self.fft.process(&mut buf);
            for (f, row) in power.iter_mut().enumerate() {
                let mut p = buf[f].norm_sqr() * scale;
                let edge = f == 0 || (self.win % 2 == 0 && f == self.win / 2);
                if !edge {
                    p *= 2.0;
                }
                row[t] = p;
            }
        }
        let db = power
            .iter()
            .map(|row| row.iter().map(|&p| to_db(p)).collect())
            .collect();
        Ok(Spectrogram {
            power,
            db,
            f_bins: (0..bins).map(|f| f as f64 * fs / self.win as f64).collect(),
            t_bins: (0..frames)
                .map(|t| (t * self.hop) as f64 / fs + self.win as f64 / (2.0 * fs))
                .collect(),
        })
    }
}

fn to_db(p: f64) -> f64 {
    if p > 0.0 {
        (10.0 * p.log10()).max(DB_FLOOR)
    } else {
        DB_FLOOR
    }
}

pub fn stft_psd(channel: &[f64], fs: f64, cfg: &StftConfig) -> Result<Spectrogram, MotionError> {
    Stft::new(cfg).psd(channel, fs)
}

/// Aligned 6-channel block (a_x, a_y, a_z, φ, θ, ψ) for one press.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSegment {
    /// Refined press interval, series indices.
    pub interval: (usize, usize),
    /// Series index of the first tensor column (may be negative when padded).
    pub offset: isize,
    pub tensor: Vec<Vec<f64>>,
    /// Acceleration magnitude over the same window.
    pub m: Vec<f64>,
}

impl MotionSegment {
    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Whether series index `idx` falls inside the tensor's time support.
    pub fn covers(&self, idx: usize) -> bool {
        let i = idx as isize;
        i >= self.offset && i < self.offset + self.len() as isize
    }
}

/// Crops a fixed-length window centered on the interval midpoint,
/// replicating edge samples outside the series.
pub fn build_motion_segment(
    series: &ImuSeries,
    quats: &[Quaternion],
    interval: (usize, usize),
    len: usize,
) -> MotionSegment {
    let n = series.len();
    assert_eq!(quats.len(), n, "one quaternion per sample");
    let euler: Vec<EulerAngles> = quats.iter().map(quat_to_euler).collect();
    let phi: Vec<f64> = euler.iter().map(|e| e.phi).collect();
    let theta: Vec<f64> = euler.iter().map(|e| e.theta).collect();
    let psi = unwrap_phase(&euler.iter().map(|e| e.psi).collect::<Vec<_>>());
    let mag = series.acc_magnitude();

    let (s, e) = interval;
    let offset = (s + e + 1) as isize / 2 - (len / 2) as isize;
    let crop = |src: &[f64]| -> Vec<f64> {
        (0..len)
            .map(|k| {
                let idx = (offset + k as isize).clamp(0, n as isize - 1) as usize;
                src[idx]
            })
            .collect()
    };
    let tensor = vec![
        crop(&series.channels[0]),
        crop(&series.channels[1]),
        crop(&series.channels[2]),
        crop(&phi),
        crop(&theta),
        crop(&psi),
    ];
    MotionSegment {
        interval,
        offset,
        tensor,
        m: crop(&mag),
    }
}

/// Full IMU chain for one session given its touch track.
pub fn estimate_motion(session: &Session, track: &TouchTrack, cfg: &MotionConfig) -> Result<MotionSegment, MotionError> {
    let raw = resample_imu(session)?;
    let series = wavelet_denoise(&raw, cfg.wavelet.levels)?;
    let m = series.acc_magnitude();
    let window = coarse_window(track, &session.meta, series.len(), cfg.pad_s);
    let (tp, tv) = find_extremum_pair(&m, window);
    let interval = refine_interval(&m, tp, tv, window, cfg.rho);
    let quats = fuse_orientation(&series, cfg.beta);
    Ok(build_motion_segment(&series, &quats, interval, cfg.segment_len))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::{ImuSample, Label};
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn series_from(channels: Vec<Vec<f64>>, hz: f64) -> ImuSeries {
        let n = channels[0].len();
        ImuSeries {
            hz,
            t: (0..n).map(|k| k as f64 / hz).collect(),
            channels,
        }
    }

    fn session_from(samples: Vec<ImuSample>) -> Session {
        Session {
            meta: SessionMeta::nominal("s", "u", Label::Genuine),
            cap: Vec::new(),
            imu: samples,
        }
    }

    #[test]
    fn resample_identity_and_midpoint() {
        let samples: Vec<ImuSample> = (0..20)
            .map(|k| ImuSample {
                ts_ms: k * 5,
                a: [k as f64, 0.5, -1.0],
                g: [0.0; 3],
                m: [1.0; 3],
            })
            .collect();
        let s = resample_imu(&session_from(samples)).unwrap();
        assert_eq!(s.len(), 20);
        for k in 0..20 {
            assert!((s.channels[0][k] - k as f64).abs() < 1e-9);
        }

        let mut samples: Vec<ImuSample> = (0..8)
            .map(|k| ImuSample {
                ts_ms: k * 10,
                a: [0.0; 3],
                g: [0.0; 3],
                m: [0.0; 3],
            })
            .collect();
        samples[1].a[0] = 1.0;
        let s = resample_imu(&session_from(samples)).unwrap();
        // 200 Hz grid: sample 1 is at 5 ms, halfway between 0 ms and 10 ms
        assert!((s.channels[0][1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn resample_jittered_sinusoid() {
        let mut rng = stats::rng(21);
        let f = 3.0;
        let samples: Vec<ImuSample> = (0..160)
            .map(|k| {
                let ts = if k == 0 || k == 159 {
                    k * 5
                } else {
                    (k as i64 * 5 + rng.random_range(-1..=1)) as u64
                };
                let v = (2.0 * PI * f * ts as f64 / 1000.0).sin();
                ImuSample {
                    ts_ms: ts,
                    a: [v, 0.0, 0.0],
                    g: [0.0; 3],
                    m: [0.0; 3],
                }
            })
            .collect();
        let s = resample_imu(&session_from(samples)).unwrap();
        let max_err = s
            .t
            .iter()
            .zip(&s.channels[0])
            .map(|(t, v)| (v - (2.0 * PI * f * t).sin()).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 0.01, "max error {max_err}");
    }

    #[test]
    fn resample_needs_eight_samples() {
        let samples = vec![
            ImuSample {
                ts_ms: 0,
                a: [0.0; 3],
                g: [0.0; 3],
                m: [0.0; 3]
            };
            7
        ];
        assert_eq!(
            resample_imu(&session_from(samples)).unwrap_err(),
            MotionError::TooFewSamples { need: 8, got: 7 }
        );
    }

    #[test]
    fn dwt_is_perfect_reconstruction() {
        let mut rng = stats::rng(1);
        let x: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a, d) = dwt_step(&x);
        let y = idwt_step(&a, &d);
        for (u, v) in x.iter().zip(&y) {
            assert!((u - v).abs() < 1e-12);
        }
        // orthonormal: energy preserved
        let ex: f64 = x.iter().map(|v| v * v).sum();
        let ec: f64 = a.iter().chain(&d).map(|v| v * v).sum();
        assert!((ex - ec).abs() < 1e-10);
    }

    #[test]
    fn denoise_zero_and_constant() {
        assert_eq!(denoise_channel(&vec![0.0; 50], 3).unwrap(), vec![0.0; 50]);
        let out = denoise_channel(&vec![4.2; 37], 3).unwrap();
        assert_eq!(out.len(), 37);
        assert!(out.iter().all(|v| (v - 4.2).abs() < 1e-9));
    }

    #[test]
    fn denoise_reduces_noise() {
        let mut rng = stats::rng(9);
        let n = 160;
        let clean: Vec<f64> = (0..n).map(|k| (2.0 * PI * 2.0 * k as f64 / 200.0).sin()).collect();
        // 10 dB SNR: noise power = signal power / 10
        let noise = Normal::new(0.0, (0.5f64 / 10.0).sqrt()).unwrap();
        let noisy: Vec<f64> = clean.iter().map(|c| c + noise.sample(&mut rng)).collect();
        let out = denoise_channel(&noisy, 3).unwrap();
        let rmse = |x: &[f64]| (x.iter().zip(&clean).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!(rmse(&out) < rmse(&noisy), "{} vs {}", rmse(&out), rmse(&noisy));
    }

    #[test]
    fn denoise_rejects_short_series() {
        assert_eq!(
            denoise_channel(&[1.0; 7], 3).unwrap_err(),
            MotionError::SeriesTooShort { need: 8, got: 7, levels: 3 }
        );
    }

    fn track_with_window(first: usize, last: usize) -> TouchTrack {
        TouchTrack {
            detections: Vec::new(),
            states: Vec::new(),
            smoothed: Vec::new(),
            active_window: (first, last),
        }
    }

    #[test]
    fn coarse_window_mapping() {
        let meta = SessionMeta::nominal("s", "u", Label::Genuine);
        assert_eq!(coarse_window(&track_with_window(4, 12), &meta, 160, 0.05), (30, 130));
        assert_eq!(coarse_window(&track_with_window(0, 5), &meta, 160, 0.05), (0, 60));
        assert_eq!(coarse_window(&track_with_window(0, 15), &meta, 160, 0.05), (0, 159));
    }

    #[test]
    fn extremum_pair_examples() {
        assert_eq!(find_extremum_pair(&[1.0, 5.0, 1.0, 0.0], (0, 3)), (1, 3));
        assert_eq!(find_extremum_pair(&[2.0; 6], (0, 5)), (0, 0));
    }

    fn piecewise_press() -> Vec<f64> {
        // flat 1.0, ramp up to 3.0 over [20,30], flat, ramp down to 0.0 over [50,60], flat
        (0..100)
            .map(|t| match t {
                0..=19 => 1.0,
                20..=29 => 1.0 + 2.0 * (t - 20) as f64 / 10.0,
                30..=49 => 3.0,
                50..=59 => 3.0 - 3.0 * (t - 50) as f64 / 10.0,
                _ => 0.0,
            })
            .collect()
    }

    #[test]
    fn refine_brackets_both_ramps() {
        let m = piecewise_press();
        let window = (0, 99);
        let (tp, tv) = find_extremum_pair(&m, window);
        assert_eq!((tp, tv), (30, 60));
        let (s, e) = refine_interval(&m, tp, tv, window, 0.2);
        assert!(s <= 20 && e >= 60 && s < e, "({s}, {e})");
        assert!(s >= 15 && e <= 65, "interval should stay tight: ({s}, {e})");
    }

    #[test]
    fn refine_degenerate_and_spike() {
        let m = vec![1.0; 40];
        assert_eq!(refine_interval(&m, 0, 0, (5, 30), 0.2), (5, 30));

        let mut m = vec![1.0; 40];
        m[17] = 4.0;
        let window = (3, 35);
        let (tp, tv) = find_extremum_pair(&m, window);
        let (s, e) = refine_interval(&m, tp, tv, window, 0.2);
        assert!(s <= 17 && 17 <= e && e - s >= 1 && s >= 3 && e <= 35, "({s}, {e})");
    }

    #[test]
    fn euler_examples() {
        let e = quat_to_euler(&Quaternion::IDENTITY);
        assert_eq!((e.phi, e.theta, e.psi), (0.0, 0.0, 0.0));
        let h = 0.5f64.sqrt();
        let e = quat_to_euler(&Quaternion::new(h, 0.0, 0.0, h));
        assert!(e.phi.abs() < 1e-12 && e.theta.abs() < 1e-12);
        assert!((e.psi - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn triad_recovers_static_orientation() {
        let truth = euler_to_quat(&EulerAngles {
            phi: 0.3,
            theta: -0.2,
            psi: 1.1,
        });
        let b = [22.0, 0.0, -40.0];
        let a = truth.rotate_inv([0.0, 0.0, 9.81]);
        let m = truth.rotate_inv(b);
        let q = triad_alignment(a, m);
        assert!(q.angle_to(&truth) < 1e-9);
    }

    #[test]
    fn correction_gradient_matches_finite_differences() {
        let q = Quaternion::new(0.9, 0.1, -0.3, 0.2).normalized();
        let a = [0.5, -1.0, 9.5];
        let m = [18.0, 5.0, -35.0];
        let grad = correction_gradient(&q, a, m).unwrap();
        // objective with the field reference frozen at q
        let na = norm3(a);
        let nm = norm3(m);
        let an = scale3(a, 1.0 / na);
        let mn = scale3(m, 1.0 / nm);
        let h = q.rotate(mn);
        let b = [(h[0] * h[0] + h[1] * h[1]).sqrt(), 0.0, h[2]];
        let obj = |p: [f64; 4]| {
            let r = Quaternion::new(p[0], p[1], p[2], p[3]);
            // un-normalized rotation matrix, as in the analytic Jacobian
            let g = r.rotate_inv([0.0, 0.0, 1.0]);
            let f = r.rotate_inv(b);
            let mut s = 0.0;
            for i in 0..3 {
                s += (g[i] - an[i]).powi(2) + (f[i] - mn[i]).powi(2);
            }
            0.5 * s
        };
        let p = [q.q0, q.q1, q.q2, q.q3];
        for k in 0..4 {
            let eps = 1e-6;
            let mut up = p;
            let mut dn = p;
            up[k] += eps;
            dn[k] -= eps;
            let fd = (obj(up) - obj(dn)) / (2.0 * eps);
            assert!((fd - grad[k]).abs() < 1e-6, "component {k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn stft_shapes_and_floor() {
        let stft = Stft::new(&StftConfig::default());
        let s = stft.psd(&vec![0.0; 160], 200.0).unwrap();
        assert_eq!(s.power.len(), 17);
        assert_eq!(s.power[0].len(), 17);
        assert!(s.db.iter().flatten().all(|&v| v == DB_FLOOR));
        for len in 32..200 {
            assert_eq!(stft.frame_count(len), (len - 32) / 8 + 1);
        }
        assert_eq!(
            stft.psd(&[0.0; 31], 200.0).unwrap_err(),
            MotionError::ChannelTooShort { got: 31, win: 32 }
        );
    }

    #[test]
    fn stft_localizes_tone() {
        let x: Vec<f64> = (0..160).map(|k| (2.0 * PI * 25.0 * k as f64 / 200.0).sin()).collect();
        let s = stft_psd(&x, 200.0, &StftConfig::default()).unwrap();
        for t in 0..s.t_bins.len() {
            let best = (0..17)
                .max_by(|&a, &b| s.power[a][t].total_cmp(&s.power[b][t]))
                .unwrap();
            assert_eq!(best, 4);
        }
    }

    #[test]
    fn segment_slicing_and_padding() {
        let n = 400;
        let ch: Vec<f64> = (0..n).map(|k| k as f64).collect();
        let series = series_from(vec![ch.clone(); 9], 200.0);
        let quats = vec![Quaternion::IDENTITY; n];

        let seg = build_motion_segment(&series, &quats, (100, 259), 160);
        assert_eq!(seg.tensor[0], ch[100..260].to_vec());

        let seg = build_motion_segment(&series, &quats, (0, 20), 160);
        assert_eq!(seg.tensor[0].len(), 160);
        assert_eq!(seg.tensor[0][0], 0.0);
        assert_eq!(seg.tensor[0][1], 0.0);
        assert!(seg.offset < 0);
    }

    #[test]
    fn unwrap_removes_jumps() {
        let x = [3.0, 3.1, -3.1, -3.0];
        let u = unwrap_phase(&x);
        assert!((u[2] - (2.0 * PI - 3.1)).abs() < 1e-12);
        assert!(u.windows(2).all(|w| (w[1] - w[0]).abs() < 0.5));
    }
}
