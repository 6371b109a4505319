//! Seeded synthetic users, genuine sessions and attack sessions.
//!
//! A profile splits into physiology (finger footprint on the panel) and
//! behaviour (press timing, force, tremor, grip, sensor noise). Attacks swap
//! or distort exactly one of the two factors.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::motion::{euler_to_quat, EulerAngles, Quaternion};
use crate::session::{quantize, CapFrame, ImuSample, Label, Session, SessionMeta};
use crate::stats;

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("'{0}' is not an attack kind")]
    NotAnAttack(Label),
    #[error("invalid synth config: {0}")]
    Config(String),
}

/// Closed interval used for uniform draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range(pub f64, pub f64);

impl Range {
    pub fn width(&self) -> f64 {
        self.1 - self.0
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.1 > self.0 {
            rng.random_range(self.0..=self.1)
        } else {
            self.0
        }
    }

    /// Position of `v` in the range, 0 at the low end and 1 at the high end.
    pub fn unit(&self, v: f64) -> f64 {
        if self.width() > 0.0 {
            (v - self.0) / self.width()
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UserRanges {
    pub sigma_x: Range,
    pub sigma_y: Range,
    pub corr: Range,
    pub amp: Range,
    pub skew: Range,
    pub press_ms: Range,
    pub attack_ms: Range,
    pub release_ms: Range,
    pub peak_scale: Range,
    pub tremor: Range,
    pub roll: Range,
    pub pitch: Range,
    pub yaw: Range,
    pub accel_noise: Range,
    pub gyro_noise: Range,
    pub mag_noise: Range,
}

impl Default for UserRanges {
    fn default() -> Self {
        UserRanges {
            sigma_x: Range(0.9, 1.9),
            sigma_y: Range(1.4, 2.8),
            corr: Range(-0.5, 0.5),
            amp: Range(50.0, 150.0),
            skew: Range(-0.4, 0.4),
            press_ms: Range(320.0, 520.0),
            attack_ms: Range(40.0, 110.0),
            release_ms: Range(40.0, 110.0),
            peak_scale: Range(0.6, 1.4),
            tremor: Range(1e-4, 1.2e-3),
            roll: Range(-0.4, 0.4),
            pitch: Range(-0.9, -0.2),
            yaw: Range(-1.2, 1.2),
            accel_noise: Range(0.01, 0.03),
            gyro_noise: Range(0.002, 0.006),
            mag_noise: Range(0.2, 0.6),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Fidelity drawn per attack session when the caller does not fix it.
    pub fidelity: Range,
    pub replica_amp_drop: f64,
    pub replica_cov_inflation: Range,
    pub puppet_damping: Range,
    pub puppet_jerk_hz: Range,
    /// Jerk amplitude, m/s².
    pub puppet_jerk_amp: f64,
    pub puppet_tremor_gain: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            fidelity: Range(0.5, 1.0),
            replica_amp_drop: 0.2,
            replica_cov_inflation: Range(0.1, 0.3),
            puppet_damping: Range(0.5, 0.8),
            puppet_jerk_hz: Range(2.0, 4.0),
            puppet_jerk_amp: 0.6,
            puppet_tremor_gain: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub rows: usize,
    pub cols: usize,
    pub cap_hz: u32,
    pub imu_hz: u32,
    pub duration_ms: u64,
    pub users: UserRanges,
    /// Half-width of the per-session uniform jitter, as a fraction of each
    /// parameter's user range.
    pub session_jitter: f64,
    /// Scales every session-level nuisance below.
    pub perturb_scale: f64,
    pub location_sd: f64,
    pub posture_sd: f64,
    pub wander_amp: f64,
    pub onset_jitter_ms: f64,
    pub background: f64,
    pub read_noise: f64,
    pub shot_gain: f64,
    /// Share of the capacitive amplitude that follows press force.
    pub force_coupling: f64,
    /// Accelerometer response to the force derivative, m/s² per (1/s).
    pub press_gain: f64,
    /// Earth magnetic field in the north-west-up frame, µT.
    pub earth_field: [f64; 3],
    pub attack: AttackConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            rows: 27,
            cols: 15,
            cap_hz: 20,
            imu_hz: 200,
            duration_ms: 800,
            users: UserRanges::default(),
            session_jitter: 0.04,
            perturb_scale: 1.0,
            location_sd: 0.7,
            posture_sd: 0.12,
            wander_amp: 0.01,
            onset_jitter_ms: 25.0,
            background: 4.0,
            read_noise: 1.5,
            shot_gain: 0.5,
            force_coupling: 0.1,
            press_gain: 0.05,
            earth_field: [20.0, 0.0, -45.0],
            attack: AttackConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.rows < 3 || self.cols < 3 {
            return err("panel must be at least 3×3");
        }
        if self.cap_hz == 0 || self.imu_hz == 0 || self.duration_ms == 0 {
            return err("rates and duration must be positive");
        }
        if !(0.0..0.5).contains(&self.session_jitter) {
            return err("session_jitter must lie in [0, 0.5)");
        }
        let u = &self.users;
        if u.sigma_x.0 <= 0.0 || u.sigma_y.0 <= 0.0 || u.amp.0 <= 0.0 {
            return err("footprint widths and amplitude must be positive");
        }
        if u.corr.0 <= -1.0 || u.corr.1 >= 1.0 {
            return err("footprint correlation must lie in (-1, 1)");
        }
        if u.press_ms.0 < 200.0 || u.press_ms.1 > 700.0 {
            return err("press_ms range must lie within [200, 700]");
        }
        if (u.press_ms.1 * (1.0 + self.session_jitter)) as u64 + 40 > self.duration_ms {
            return err("press does not fit in the session");
        }
        if u.attack_ms.1 + u.release_ms.1 > u.press_ms.0 {
            return err("rise plus fall must fit in the shortest press");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Physio {
    /// Footprint covariance in (col, row) cell coordinates.
    pub blob_cov: [[f64; 2]; 2],
    pub amp: f64,
    pub skew: f64,
}

impl Physio {
    fn from_shape(sx: f64, sy: f64, r: f64, amp: f64, skew: f64) -> Self {
        let c = r * sx * sy;
        Physio {
            blob_cov: [[sx * sx, c], [c, sy * sy]],
            amp,
            skew,
        }
    }

    /// (σ_x, σ_y, correlation).
    pub fn shape(&self) -> (f64, f64, f64) {
        let sx = self.blob_cov[0][0].sqrt();
        let sy = self.blob_cov[1][1].sqrt();
        (sx, sy, self.blob_cov[0][1] / (sx * sy))
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let [[a, b], [_, d]] = self.blob_cov;
        let tr = a + d;
        let det = a * d - b * b;
        0.5 * (tr - (tr * tr - 4.0 * det).max(0.0).sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForceEnvelope {
    pub attack_ms: f64,
    pub release_ms: f64,
    pub peak_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuNoise {
    pub accel: f64,
    pub gyro: f64,
    pub mag: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Behavior {
    pub press_ms: f64,
    pub force_env: ForceEnvelope,
    /// Per-axis accelerometer band power in 8–12 Hz, m²/s⁴/Hz.
    pub tremor: [f64; 3],
    /// Resting (φ, θ, ψ), rad.
    pub grip_euler: [f64; 3],
    pub imu_noise: ImuNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    pub seed: u64,
    pub physio: Physio,
    pub behavior: Behavior,
}

pub const PARAM_NAMES: [&str; 18] = [
    "sigma_x",
    "sigma_y",
    "corr",
    "amp",
    "skew",
    "press_ms",
    "attack_ms",
    "release_ms",
    "peak_scale",
    "tremor_x",
    "tremor_y",
    "tremor_z",
    "roll",
    "pitch",
    "yaw",
    "accel_noise",
    "gyro_noise",
    "mag_noise",
];

impl UserProfile {
    /// Raw parameters in [`PARAM_NAMES`] order.
    pub fn params(&self) -> [f64; 18] {
        let (sx, sy, r) = self.physio.shape();
        let b = &self.behavior;
        [
            sx,
            sy,
            r,
            self.physio.amp,
            self.physio.skew,
            b.press_ms,
            b.force_env.attack_ms,
            b.force_env.release_ms,
            b.force_env.peak_scale,
            b.tremor[0],
            b.tremor[1],
            b.tremor[2],
            b.grip_euler[0],
            b.grip_euler[1],
            b.grip_euler[2],
            b.imu_noise.accel,
            b.imu_noise.gyro,
            b.imu_noise.mag,
        ]
    }

    fn from_params(user_id: &str, seed: u64, p: &[f64; 18]) -> Self {
        UserProfile {
            user_id: user_id.to_string(),
            seed,
            physio: Physio::from_shape(p[0], p[1], p[2], p[3], p[4]),
            behavior: Behavior {
                press_ms: p[5],
                force_env: ForceEnvelope {
                    attack_ms: p[6],
                    release_ms: p[7],
                    peak_scale: p[8],
                },
                tremor: [p[9], p[10], p[11]],
                grip_euler: [p[12], p[13], p[14]],
                imu_noise: ImuNoise {
                    accel: p[15],
                    gyro: p[16],
                    mag: p[17],
                },
            },
        }
    }

    /// Parameters mapped onto the unit user range of each dimension.
    pub fn unit_params(&self, ranges: &UserRanges) -> [f64; 18] {
        let raw = self.params();
        let r = ranges.as_array();
        std::array::from_fn(|i| r[i].unit(raw[i]))
    }
}

impl UserRanges {
    pub fn as_array(&self) -> [Range; 18] {
        [
            self.sigma_x,
            self.sigma_y,
            self.corr,
            self.amp,
            self.skew,
            self.press_ms,
            self.attack_ms,
            self.release_ms,
            self.peak_scale,
            self.tremor,
            self.tremor,
            self.tremor,
            self.roll,
            self.pitch,
            self.yaw,
            self.accel_noise,
            self.gyro_noise,
            self.mag_noise,
        ]
    }
}

pub fn user_id(index: usize) -> String {
    format!("u{index:03}")
}

/// Every parameter drawn uniformly over its user range.
pub fn gen_user(seed: u64, user_id: &str, cfg: &SynthConfig) -> UserProfile {
    let mut rng = stats::rng(stats::mix64(seed));
    let ranges = cfg.users.as_array();
    let p: [f64; 18] = std::array::from_fn(|i| ranges[i].draw(&mut rng));
    UserProfile::from_params(user_id, seed, &p)
}

/// Session-level realization: each parameter moves uniformly by at most
/// `session_jitter` of its user range.
pub fn jitter_profile<R: Rng + ?Sized>(profile: &UserProfile, cfg: &SynthConfig, rng: &mut R) -> UserProfile {
    let ranges = cfg.users.as_array();
    let raw = profile.params();
    let j = cfg.session_jitter;
    let mut p: [f64; 18] = std::array::from_fn(|i| {
        let half = j * ranges[i].width();
        if half > 0.0 {
            raw[i] + rng.random_range(-half..=half)
        } else {
            raw[i]
        }
    });
    // keep the realization physical
    p[0] = p[0].max(0.3);
    p[1] = p[1].max(0.3);
    p[2] = p[2].clamp(-0.95, 0.95);
    p[3] = p[3].max(1.0);
    for i in (9..12).chain(15..18) {
        p[i] = p[i].max(0.0);
    }
    UserProfile::from_params(&profile.user_id, profile.seed, &p)
}

/// Per-parameter dispersion summary across users and within sessions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DispersionReport {
    pub names: Vec<&'static str>,
    /// Standard deviation of user-level values, in unit-range coordinates.
    pub inter_sd: Vec<f64>,
    /// Pooled within-user standard deviation of session realizations.
    pub intra_sd: Vec<f64>,
    pub min_inter_distance: f64,
    pub max_intra_distance: f64,
}

impl DispersionReport {
    pub fn min_ratio(&self) -> f64 {
        self.inter_sd
            .iter()
            .zip(&self.intra_sd)
            .map(|(a, b)| if *b > 0.0 { a / b } else { f64::INFINITY })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn distance_ratio(&self) -> f64 {
        self.min_inter_distance / self.max_intra_distance
    }
}

pub fn dispersion_report(users: &[UserProfile], sessions: usize, cfg: &SynthConfig, seed: u64) -> DispersionReport {
    let ranges = &cfg.users;
    let centres: Vec<[f64; 18]> = users.iter().map(|u| u.unit_params(ranges)).collect();
    let realized: Vec<Vec<[f64; 18]>> = users
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let mut rng = stats::derived_rng(seed, i as u64);
            (0..sessions).map(|_| jitter_profile(u, cfg, &mut rng).unit_params(ranges)).collect()
        })
        .collect();
    let inter_sd = (0..18)
        .map(|k| stats::std_dev(&centres.iter().map(|c| c[k]).collect::<Vec<_>>()))
        .collect();
    let intra_sd = (0..18)
        .map(|k| {
            let mut ss = 0.0;
            let mut n = 0usize;
            for (c, r) in centres.iter().zip(&realized) {
                for s in r {
                    ss += (s[k] - c[k]).powi(2);
                    n += 1;
                }
            }
            (ss / n.max(1) as f64).sqrt()
        })
        .collect();
    let mut min_inter = f64::INFINITY;
    for i in 0..centres.len() {
        for j in 0..i {
            min_inter = min_inter.min(stats::dist(&centres[i], &centres[j]));
        }
    }
    let mut max_intra: f64 = 0.0;
    for r in &realized {
        for i in 0..r.len() {
            for j in 0..i {
                max_intra = max_intra.max(stats::dist(&r[i], &r[j]));
            }
        }
    }
    DispersionReport {
        names: PARAM_NAMES.to_vec(),
        inter_sd,
        intra_sd,
        min_inter_distance: min_inter,
        max_intra_distance: max_intra,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: Label,
    pub fidelity: f64,
}

/// Everything needed to render one session.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Recipe {
    pub profile: UserProfile,
    pub label: Label,
    /// Claimed identity written into the session.
    pub claimed_user: String,
    pub attacker: Option<String>,
    pub fidelity: Option<f64>,
    /// (amplitude m/s², frequency Hz) of an external actuation jerk.
    pub jerk: Option<(f64, f64)>,
}

/// Ground truth stored beside each generated session.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Truth {
    pub session_id: String,
    pub user_id: String,
    pub label: Label,
    pub attacker: Option<String>,
    pub fidelity: Option<f64>,
    /// Inclusive IMU sample indices of contact start and end.
    pub press_interval: (usize, usize),
    pub onset_ms: f64,
    pub release_end_ms: f64,
    pub location: (f64, f64),
    pub posture: [f64; 3],
    pub realized: UserProfile,
    pub jerk: Option<(f64, f64)>,
}

pub fn genuine_recipe(profile: &UserProfile) -> Recipe {
    Recipe {
        profile: profile.clone(),
        label: Label::Genuine,
        claimed_user: profile.user_id.clone(),
        attacker: None,
        fidelity: None,
        jerk: None,
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn lerp_behavior(a: &Behavior, b: &Behavior, t: f64) -> Behavior {
    Behavior {
        press_ms: lerp(a.press_ms, b.press_ms, t),
        force_env: ForceEnvelope {
            attack_ms: lerp(a.force_env.attack_ms, b.force_env.attack_ms, t),
            release_ms: lerp(a.force_env.release_ms, b.force_env.release_ms, t),
            peak_scale: lerp(a.force_env.peak_scale, b.force_env.peak_scale, t),
        },
        tremor: std::array::from_fn(|i| lerp(a.tremor[i], b.tremor[i], t)),
        grip_euler: std::array::from_fn(|i| lerp(a.grip_euler[i], b.grip_euler[i], t)),
        imu_noise: ImuNoise {
            accel: lerp(a.imu_noise.accel, b.imu_noise.accel, t),
            gyro: lerp(a.imu_noise.gyro, b.imu_noise.gyro, t),
            mag: lerp(a.imu_noise.mag, b.imu_noise.mag, t),
        },
    }
}

/// Composite profile for an attack on `victim`.
///
/// * mimicry: attacker's finger, behaviour moved toward the victim's by `fidelity`
/// * replica: victim's footprint on a fabricated copy (weaker, wider) pressed
///   with the attacker's behaviour
/// * puppet: victim's finger and behaviour under external actuation
pub fn attack_recipe<R: Rng + ?Sized>(
    victim: &UserProfile,
    attacker: &UserProfile,
    spec: AttackSpec,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Recipe, SynthError> {
    let fid = spec.fidelity.clamp(0.0, 1.0);
    let (physio, behavior, attacker_id, jerk) = match spec.kind {
        Label::Mimicry => (
            attacker.physio.clone(),
            lerp_behavior(&attacker.behavior, &victim.behavior, fid),
            Some(attacker.user_id.clone()),
            None,
        ),
        Label::Replica => {
            let (sx, sy, r) = victim.physio.shape();
            let inflate = 1.0 + cfg.replica_cov_inflation.draw(rng);
            let amp = victim.physio.amp * (1.0 - cfg.replica_amp_drop * (1.0 - fid));
            let s = inflate.sqrt();
            (
                Physio::from_shape(sx * s, sy * s, r, amp, victim.physio.skew),
                attacker.behavior.clone(),
                Some(attacker.user_id.clone()),
                None,
            )
        }
        Label::Puppet => {
            let mut b = victim.behavior.clone();
            b.force_env.peak_scale *= cfg.puppet_damping.draw(rng);
            for t in b.tremor.iter_mut() {
                *t *= cfg.puppet_tremor_gain;
            }
            let hz = cfg.puppet_jerk_hz.draw(rng);
            (victim.physio.clone(), b, None, Some((cfg.puppet_jerk_amp, hz)))
        }
        Label::Genuine => return Err(SynthError::NotAnAttack(spec.kind)),
    };
    Ok(Recipe {
        profile: UserProfile {
            user_id: victim.user_id.clone(),
            seed: victim.seed,
            physio,
            behavior,
        },
        label: spec.kind,
        claimed_user: victim.user_id.clone(),
        attacker: attacker_id,
        fidelity: Some(fid),
        jerk,
    })
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

fn smoothstep_rate(u: f64) -> f64 {
    if (0.0..=1.0).contains(&u) {
        6.0 * u * (1.0 - u)
    } else {
        0.0
    }
}

/// Contact level in [0, 1] and its time derivative (1/s) at `t_ms`.
fn contact(t_ms: f64, onset: f64, end: f64, env: &ForceEnvelope) -> (f64, f64) {
    let rise = (t_ms - onset) / env.attack_ms;
    let fall = (t_ms - (end - env.release_ms)) / env.release_ms;
    let level = smoothstep(rise) * (1.0 - smoothstep(fall));
    let rate = smoothstep_rate(rise) / (env.attack_ms / 1000.0) - smoothstep_rate(fall) / (env.release_ms / 1000.0);
    (level, rate)
}

/// Band-limited 8–12 Hz tremor: four sinusoids per axis with total variance
/// 4·P (P the band power density).
struct Tremor {
    tones: Vec<[(f64, f64, f64); 4]>,
}

impl Tremor {
    fn new<R: Rng + ?Sized>(power: &[f64; 3], rng: &mut R) -> Self {
        let tones = power
            .iter()
            .map(|&p| {
                let a = (2.0 * p).sqrt();
                std::array::from_fn(|_| (a, rng.random_range(8.0..12.0), rng.random_range(0.0..2.0 * PI)))
            })
            .collect();
        Tremor { tones }
    }

    fn at(&self, t: f64) -> [f64; 3] {
        std::array::from_fn(|axis| {
            self.tones[axis]
                .iter()
                .map(|(a, f, ph)| a * (2.0 * PI * f * t + ph).sin())
                .sum()
        })
    }
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let v = [stats::gauss(rng), stats::gauss(rng), stats::gauss(rng)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-6 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Renders a recipe into a session and its ground truth.
pub fn render<R: Rng + ?Sized>(recipe: &Recipe, session_id: &str, cfg: &SynthConfig, rng: &mut R) -> (Session, Truth) {
    let p = jitter_profile(&recipe.profile, cfg, rng);
    let nuisance = cfg.perturb_scale;
    let dur = cfg.duration_ms as f64;

    // timing
    let press = p.behavior.press_ms;
    let env = p.behavior.force_env;
    let centred = 0.5 * (dur - press);
    let onset = (centred + nuisance * cfg.onset_jitter_ms * stats::gauss(rng)).clamp(20.0, dur - press - 20.0);
    let end = onset + press;

    // capacitive
    let row0 = (cfg.rows as f64 - 1.0) / 2.0 + nuisance * cfg.location_sd * stats::gauss(rng);
    let col0 = (cfg.cols as f64 - 1.0) / 2.0 + nuisance * cfg.location_sd * stats::gauss(rng);
    let [[a, b], [_, d]] = p.physio.blob_cov;
    let det = a * d - b * b;
    let (ia, ib, id) = (d / det, -b / det, a / det);
    let sy = d.sqrt();
    let force_gain = 1.0 - cfg.force_coupling + cfg.force_coupling * env.peak_scale;
    let frame_dt = 1000.0 / cfg.cap_hz as f64;
    let n_frames = (dur / frame_dt).round() as usize;
    let mut cap = Vec::with_capacity(n_frames);
    for k in 0..n_frames {
        let t = k as f64 * frame_dt;
        let (level, _) = contact(t, onset, end, &env);
        let peak = p.physio.amp * level * force_gain;
        let mut values = Vec::with_capacity(cfg.rows * cfg.cols);
        for i in 0..cfg.rows {
            for j in 0..cfg.cols {
                let dx = j as f64 - col0;
                let dy = i as f64 - row0;
                let q = ia * dx * dx + 2.0 * ib * dx * dy + id * dy * dy;
                let shape = (-0.5 * q).exp() * (1.0 + p.physio.skew * (dy / sy).tanh()).max(0.0);
                let signal = peak * shape;
                let sd = (cfg.read_noise * cfg.read_noise + cfg.shot_gain * signal).sqrt();
                let v = (cfg.background + signal + sd * stats::gauss(rng)).round().max(0.0);
                values.push(v as u64);
            }
        }
        cap.push(CapFrame {
            ts_ms: t.round() as u64,
            values,
        });
    }

    // motion
    let posture: [f64; 3] = std::array::from_fn(|_| nuisance * cfg.posture_sd * stats::gauss(rng));
    let wander: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                nuisance * cfg.wander_amp,
                rng.random_range(0.3..1.2),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let tremor = Tremor::new(&p.behavior.tremor, rng);
    let jerk = recipe.jerk.map(|(amp, hz)| (amp, hz, rng.random_range(0.0..2.0 * PI), unit_vector(rng)));
    let noise = p.behavior.imu_noise;
    let grip = p.behavior.grip_euler;
    let orientation = |t: f64| -> Quaternion {
        let w: [f64; 3] = std::array::from_fn(|i| {
            let (a, f, ph) = wander[i];
            a * (2.0 * PI * f * t + ph).sin()
        });
        euler_to_quat(&EulerAngles {
            phi: grip[0] + posture[0] + w[0],
            theta: grip[1] + posture[1] + w[1],
            psi: grip[2] + posture[2] + w[2],
        })
    };
    let imu_dt = 1.0 / cfg.imu_hz as f64;
    let n_imu = (dur / 1000.0 * cfg.imu_hz as f64).round() as usize;
    let mut imu = Vec::with_capacity(n_imu);
    for k in 0..n_imu {
        let t = k as f64 * imu_dt;
        let q = orientation(t);
        // body rate from the orientation trajectory
        let h = 1e-4;
        let qa = orientation(t - h);
        let qb = orientation(t + h);
        let dq = Quaternion::new(
            (qb.q0 - qa.q0) / (2.0 * h),
            (qb.q1 - qa.q1) / (2.0 * h),
            (qb.q2 - qa.q2) / (2.0 * h),
            (qb.q3 - qa.q3) / (2.0 * h),
        );
        let w = q.conj().mul(&dq);
        let gyro = [2.0 * w.q1, 2.0 * w.q2, 2.0 * w.q3];

        let (_, rate) = contact(t * 1000.0, onset, end, &env);
        let mut acc = q.rotate_inv([0.0, 0.0, GRAVITY]);
        acc[2] += cfg.press_gain * env.peak_scale * rate;
        let tr = tremor.at(t);
        for i in 0..3 {
            acc[i] += tr[i];
        }
        if let Some((amp, hz, ph, dir)) = jerk {
            let s = amp * (2.0 * PI * hz * t + ph).sin();
            for i in 0..3 {
                acc[i] += s * dir[i];
            }
        }
        let mag = q.rotate_inv(cfg.earth_field);
        let mut sample = ImuSample {
            ts_ms: (t * 1000.0).round() as u64,
            a: [0.0; 3],
            g: [0.0; 3],
            m: [0.0; 3],
        };
        for i in 0..3 {
            sample.a[i] = quantize(acc[i] + noise.accel * stats::gauss(rng));
            sample.g[i] = quantize(gyro[i] + noise.gyro * stats::gauss(rng));
            sample.m[i] = quantize(mag[i] + noise.mag * stats::gauss(rng));
        }
        imu.push(sample);
    }

    let meta = SessionMeta {
        session_id: session_id.to_string(),
        user_id: recipe.claimed_user.clone(),
        label: recipe.label,
        cap_hz: cfg.cap_hz,
        cap_rows: cfg.rows,
        cap_cols: cfg.cols,
        imu_hz: cfg.imu_hz,
        duration_ms: cfg.duration_ms,
    };
    let last = n_imu.saturating_sub(1);
    let to_idx = |ms: f64| ((ms / 1000.0 * cfg.imu_hz as f64).round() as usize).min(last);
    let truth = Truth {
        session_id: session_id.to_string(),
        user_id: recipe.claimed_user.clone(),
        label: recipe.label,
        attacker: recipe.attacker.clone(),
        fidelity: recipe.fidelity,
        press_interval: (to_idx(onset), to_idx(end)),
        onset_ms: onset,
        release_end_ms: end,
        location: (col0, row0),
        posture,
        realized: p,
        jerk: recipe.jerk,
    };
    (Session { meta, cap, imu }, truth)
}

pub fn gen_session<R: Rng + ?Sized>(profile: &UserProfile, session_id: &str, cfg: &SynthConfig, rng: &mut R) -> (Session, Truth) {
    render(&genuine_recipe(profile), session_id, cfg, rng)
}

pub fn gen_attack<R: Rng + ?Sized>(
    victim: &UserProfile,
    attacker: &UserProfile,
    spec: AttackSpec,
    session_id: &str,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<(Session, Truth), SynthError> {
    let recipe = attack_recipe(victim, attacker, spec, &cfg.attack, rng)?;
    Ok(render(&recipe, session_id, cfg, rng))
}
