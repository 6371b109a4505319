//! Acceptance criteria, one PASS/FAIL line each. Pass a substring of a
//! criterion name to run only the matching ones.

mod support;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::Matrix4;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::*;

use touchauth::benchmark::{self, BenchmarkReport};
use touchauth::capsense::{self, CapSequence, Connectivity, Frame, KalmanConfig, KalmanTracker};
use touchauth::config::PipelineConfig;
use touchauth::embed::{FusionModel, Modality, Network};
use touchauth::motion::{self, EulerAngles, OrientationFilter, Quaternion, StftConfig};
use touchauth::oneclass::{self, SolverConfig};
use touchauth::session::{Label, SessionMeta};
use touchauth::{metrics, stats};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gaussian_vecs(rng: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| stats::gauss(rng)).collect()).collect()
}

// ------------------------------------------------------------------ oracles

fn oracle_threshold() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let data: Vec<f64> = (0..27 * 15).map(|_| rng.random_range(0.0..30.0) + 80.0 * rng.random::<f64>().powi(8)).collect();
        let frame = Frame::new(27, 15, data.clone());
        let (tau, mask) = capsense::adaptive_threshold(&frame, 3.0);
        let want = median_mad_tau(&data, 3.0);
        worst = worst.max((tau - want).abs());
        let want_mask: Vec<bool> = data.iter().map(|&v| v > want).collect();
        if mask != want_mask {
            return Err("mask differs from the sort-based oracle".into());
        }
    }
    check(worst <= 1e-12, format!("median/MAD tau max error {worst:.1e}"))
}

fn oracle_centroid() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (rows, cols) = (rng.random_range(3..12), rng.random_range(3..12));
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(0.1..10.0)).collect();
        let mask: Vec<bool> = (0..rows * cols).map(|_| rng.random::<f64>() < 0.3).collect();
        let det = capsense::detect_touch_region(&Frame::new(rows, cols, data.clone()), &mask, 0.0, Connectivity::Eight);
        match (best_region(rows, cols, &data, &mask), det.centroid) {
            (None, None) => {}
            (Some((cells, (x, y))), Some((cx, cy))) => {
                let got: std::collections::BTreeSet<_> = det.region.iter().copied().collect();
                if got != cells {
                    return Err("selected region differs from the relaxation oracle".into());
                }
                worst = worst.max((x - cx).abs()).max((y - cy).abs());
            }
            _ => return Err("touched flag differs from the oracle".into()),
        }
    }
    check(worst <= 1e-12, format!("centroid max error {worst:.1e}"))
}

fn oracle_smoothing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for width in [1, 3, 5, 7] {
        let frames: Vec<Vec<f64>> = (0..16).map(|_| (0..27 * 15).map(|_| rng.random_range(0.0..100.0)).collect()).collect();
        let seq = CapSequence {
            meta: SessionMeta::nominal("s", "u", Label::Genuine),
            frames: frames.iter().map(|d| Frame::new(27, 15, d.clone())).collect(),
        };
        let got = capsense::flatten_and_smooth(&seq, width);
        let want = naive_smooth(&frames, width);
        if got.len() != want.len() {
            return Err("length differs".into());
        }
        worst = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    check(worst <= 1e-12, format!("moving-average max error {worst:.1e}"))
}

fn oracle_extremum_pair() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..200 {
        let n = rng.random_range(2..120);
        let m: Vec<f64> = (0..n).map(|_| (rng.random_range(0..40) as f64) * 0.25).collect();
        let s = rng.random_range(0..n - 1);
        let e = rng.random_range(s + 1..n);
        let (tp, tv) = motion::find_extremum_pair(&m, (s, e));
        let (i, j, d) = exhaustive_pair(&m, s, e);
        if (tp, tv) != (i, j) || m[tp] - m[tv] != d {
            return Err(format!("window ({s},{e}): got ({tp},{tv}), oracle ({i},{j})"));
        }
    }
    Ok("200 series match the exhaustive pair search".into())
}

fn oracle_lof() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let n = rng.random_range(8..=50);
        let d = rng.random_range(1..6);
        let k = rng.random_range(1..n.min(12));
        let x = gaussian_vecs(&mut rng, n, d);
        let model = oneclass::lof_fit(&x, k).map_err(|e| e.to_string())?;
        let oracle = LofOracle { data: x.clone(), k };
        for i in 0..n {
            let got = oneclass::lof_training_score(&model, i);
            worst = worst.max((got + oracle.lof(&x[i], Some(i))).abs());
        }
        for q in gaussian_vecs(&mut rng, 5, d) {
            worst = worst.max((oneclass::lof_score(&model, &q) + oracle.lof(&q, None)).abs());
        }
        if trial == 0 {
            let diameter = (0..n)
                .flat_map(|a| (0..n).map(move |b| (a, b)))
                .map(|(a, b)| stats::dist(&x[a], &x[b]))
                .fold(0.0, f64::max);
            let far: Vec<f64> = x[0].iter().map(|v| v + 10.0 * diameter).collect();
            if -oneclass::lof_score(&model, &far) <= 2.0 {
                return Err("far outlier has LOF ≤ 2".into());
            }
        }
    }
    check(worst <= 1e-9, format!("LOF max error {worst:.1e} over 20 sets"))
}

fn oracle_ocsvm_dual() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(2..=8);
        let x = gaussian_vecs(&mut rng, n, 2);
        let nu = rng.random_range(0.15..1.0);
        let gamma = rng.random_range(0.1..2.0);
        let fit = oneclass::ocsvm_fit(&x, nu, gamma, &SolverConfig::default()).map_err(|e| e.to_string())?;
        let k = oneclass::kernel_matrix(&x, gamma);
        let c = 1.0 / (nu * n as f64);
        let best = qp_oracle(&k, c, 50, &mut rng);
        worst = worst.max((fit.objective - best).abs());
    }
    check(worst <= 1e-4, format!("dual objective max gap {worst:.1e}"))
}

fn oracle_roc() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    // coarse grid so that many scores tie
    let mut draw = |mu: f64| ((mu + stats::gauss(&mut rng)) * 20.0).round() / 20.0;
    let genuine: Vec<f64> = (0..500).map(|_| draw(1.0)).collect();
    let impostor: Vec<f64> = (0..500).map(|_| draw(0.0)).collect();
    let curve = metrics::roc(&genuine, &impostor);
    for p in &curve.points {
        let (far, frr) = count_rates(&genuine, &impostor, p.threshold);
        if far != p.far || frr != p.frr {
            return Err(format!("threshold {}: ({}, {}) vs oracle ({far}, {frr})", p.threshold, p.far, p.frr));
        }
    }
    Ok(format!("{} sweep points match the counting oracle", curve.points.len()))
}

fn oracle_fusion_forward() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let (d, h, o) = (324, 64, 40);
    let w1: Vec<Vec<f64>> = (0..h).map(|_| (0..d).map(|_| 0.1 * stats::gauss(&mut rng)).collect()).collect();
    let b1: Vec<f64> = (0..h).map(|_| stats::gauss(&mut rng)).collect();
    let w2: Vec<Vec<f64>> = (0..o).map(|_| (0..h).map(|_| 0.1 * stats::gauss(&mut rng)).collect()).collect();
    let b2: Vec<f64> = (0..o).map(|_| stats::gauss(&mut rng)).collect();
    let mean: Vec<f64> = (0..d).map(|_| stats::gauss(&mut rng)).collect();
    let std: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
    let mut model = FusionModel::zeros(Modality::Fused, d, h, o);
    model.w1 = Array2::from_shape_fn((h, d), |(r, c)| w1[r][c]);
    model.b1 = Array1::from(b1.clone());
    model.w2 = Array2::from_shape_fn((o, h), |(r, c)| w2[r][c]);
    model.b2 = Array1::from(b2.clone());
    model.norm_mean = mean.clone();
    model.norm_std = std.clone();
    let oracle = DenseOracle {
        w1: &w1,
        b1: &b1,
        w2: &w2,
        b2: &b2,
        mean: &mean,
        std: &std,
        slope: model.leaky_slope,
    };
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let x: Vec<f64> = (0..d).map(|_| 3.0 * stats::gauss(&mut rng)).collect();
        let got = model.forward_input::<ChaCha8Rng>(&x, None).map_err(|e| e.to_string())?;
        let want = oracle.forward(&x);
        worst = got.0.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    check(worst <= 1e-9, format!("forward max error {worst:.1e}"))
}

fn oracle_suite() -> Outcome {
    let start = Instant::now();
    let parts: [(&str, fn() -> Outcome); 8] = [
        ("threshold", oracle_threshold),
        ("centroid", oracle_centroid),
        ("smoothing", oracle_smoothing),
        ("extremum", oracle_extremum_pair),
        ("lof", oracle_lof),
        ("ocsvm", oracle_ocsvm_dual),
        ("roc", oracle_roc),
        ("forward", oracle_fusion_forward),
    ];
    let mut notes = Vec::new();
    let mut failed = false;
    for (name, f) in parts {
        match f() {
            Ok(d) => notes.push(format!("{name}: {d}")),
            Err(d) => {
                failed = true;
                notes.push(format!("{name} FAILED: {d}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    notes.push(format!("{secs:.1} s"));
    check(!failed && secs < 60.0, notes.join("; "))
}

// --------------------------------------------------------- numerical analysis

/// Sign pattern of the first-layer pre-activations over the batch.
fn kink_pattern(net: &Network, x: &Array2<f64>) -> Vec<bool> {
    (x.dot(&net.w1.t()) + &net.b1).iter().map(|&z| z > 0.0).collect()
}

/// Central differences are meaningless where θ ± ε straddles a LeakyReLU
/// kink, so such parameters are skipped and counted.
fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut net = Network::init(12, 16, 10, 3, 0.01, &mut rng);
    let x = Array2::from_shape_fn((5, 12), |_| stats::gauss(&mut rng));
    let labels = [0, 1, 2, 1, 0];
    let mask = Array2::from_shape_fn((5, 16), |_| if rng.random::<f64>() < 0.3 { 0.0 } else { 1.0 / 0.7 });
    let (_, g) = net.loss_and_grad(x.view(), &labels, Some(mask.view()));
    let analytic = g.flatten();
    let eps = 1e-4;
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    for k in 0..analytic.len() {
        let orig = *net.params_mut()[k];
        *net.params_mut()[k] = orig + eps;
        let (lp, _) = net.loss_and_grad(x.view(), &labels, Some(mask.view()));
        let kp = kink_pattern(&net, &x);
        *net.params_mut()[k] = orig - eps;
        let (lm, _) = net.loss_and_grad(x.view(), &labels, Some(mask.view()));
        let km = kink_pattern(&net, &x);
        *net.params_mut()[k] = orig;
        if kp != km {
            skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * eps);
        let denom = analytic[k].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[k] - numeric).abs() / denom);
    }
    check(
        worst < 1e-4 && skipped * 20 < analytic.len(),
        format!(
            "gradient max rel error {worst:.1e} over {} params ({skipped} straddling a kink skipped)",
            analytic.len()
        ),
    )
}

fn quaternion_drift() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut f = OrientationFilter::new(Quaternion::IDENTITY, 0.1, 1.0 / 200.0);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let g = [0.5 * stats::gauss(&mut rng), 0.5 * stats::gauss(&mut rng), 0.5 * stats::gauss(&mut rng)];
        let a = [0.3 * stats::gauss(&mut rng), 0.3 * stats::gauss(&mut rng), 9.81 + 0.3 * stats::gauss(&mut rng)];
        let m = [20.0 + stats::gauss(&mut rng), stats::gauss(&mut rng), -45.0 + stats::gauss(&mut rng)];
        f.step(a, g, m);
        worst = worst.max((f.q.norm() - 1.0).abs());
    }
    check(worst <= 1e-6, format!("quaternion norm drift {worst:.1e}"))
}

fn euler_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst: f64 = 0.0;
    let mut n = 0;
    while n < 1000 {
        let q = Quaternion::new(stats::gauss(&mut rng), stats::gauss(&mut rng), stats::gauss(&mut rng), stats::gauss(&mut rng)).normalized();
        let EulerAngles { phi, theta, psi } = motion::quat_to_euler(&q);
        if theta.abs() >= 80f64.to_radians() {
            continue;
        }
        n += 1;
        let want = q.rotation_matrix();
        let got = euler_matrix(phi, theta, psi);
        for i in 0..3 {
            for j in 0..3 {
                worst = worst.max((got[i][j] - want[i][j]).abs());
            }
        }
    }
    check(worst < 1e-6, format!("Euler round trip max error {worst:.1e}"))
}

fn stft_parseval() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let cfg = StftConfig::default();
    let fs = 200.0;
    let x: Vec<f64> = (0..160).map(|_| stats::gauss(&mut rng)).collect();
    let stft = motion::Stft::new(&cfg);
    let spec = stft.psd(&x, fs).map_err(|e| e.to_string())?;
    let df = fs / cfg.win as f64;
    let mut worst: f64 = 0.0;
    for t in 0..spec.t_bins.len() {
        let total: f64 = spec.power.iter().map(|row| row[t]).sum::<f64>() * df;
        let off = t * cfg.hop;
        let want = windowed_power(&x[off..off + cfg.win], stft.window());
        worst = worst.max((total - want).abs() / want);
    }
    check(worst < 1e-6, format!("Parseval max rel error {worst:.1e}"))
}

fn kalman_psd() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let mut worst = f64::INFINITY;
    let mut asym: f64 = 0.0;
    for _ in 0..100 {
        let mut kf = KalmanTracker::new(&KalmanConfig::default());
        for _ in 0..200 {
            kf.predict();
            if rng.random::<f64>() < 0.7 {
                kf.update(rng.random_range(-5.0..30.0), rng.random_range(-5.0..30.0));
            }
            if let Some(st) = kf.state() {
                let p: Matrix4<f64> = st.p;
                asym = asym.max((p - p.transpose()).amax());
                worst = worst.min(p.symmetric_eigen().eigenvalues.min());
            }
        }
    }
    check(worst >= -1e-9 && asym <= 1e-12, format!("min eigenvalue {worst:.2e}, max asymmetry {asym:.1e}"))
}

fn numerical_suite() -> Outcome {
    let parts: [(&str, fn() -> Outcome); 5] = [
        ("gradient", gradient_check),
        ("quaternion", quaternion_drift),
        ("euler", euler_round_trip),
        ("parseval", stft_parseval),
        ("kalman", kalman_psd),
    ];
    let mut notes = Vec::new();
    let mut failed = false;
    for (name, f) in parts {
        match f() {
            Ok(d) => notes.push(format!("{name}: {d}")),
            Err(d) => {
                failed = true;
                notes.push(format!("{name} FAILED: {d}"));
            }
        }
    }
    check(!failed, notes.join("; "))
}

// ---------------------------------------------------------------- statistics

fn nu_property() -> Outcome {
    let (n, nu) = (100, 0.1);
    let solver = SolverConfig::default();
    // margin vectors sit at f = 0 only up to the solver's KKT tolerance
    let tol = solver.kkt_tol;
    let mut good = 0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let x = gaussian_vecs(&mut rng, n, 2);
        let fit = oneclass::ocsvm_fit(&x, nu, 0.5, &solver).map_err(|e| e.to_string())?;
        let outliers = x.iter().filter(|p| oneclass::ocsvm_score(&fit.model, p) < -tol).count() as f64 / n as f64;
        let svs = fit.alpha_full.iter().filter(|&&a| a > 0.0).count() as f64 / n as f64;
        if outliers <= nu + 1.0 / n as f64 && svs >= nu - 1.0 / n as f64 {
            good += 1;
        }
    }
    check(good >= 95, format!("{good}/100 seeds satisfy the bounds"))
}

fn eer_calibration() -> Outcome {
    let d_prime = 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let genuine: Vec<f64> = (0..10_000).map(|_| d_prime + stats::gauss(&mut rng)).collect();
    let impostor: Vec<f64> = (0..10_000).map(|_| stats::gauss(&mut rng)).collect();
    let got = metrics::eer_of(&genuine, &impostor);
    let want = phi(-d_prime / 2.0);
    check((got - want).abs() <= 0.01, format!("EER {got:.4} vs closed form {want:.4}"))
}

// ----------------------------------------------------------------- benchmark

const SEEDS: std::ops::Range<u64> = 0..10;

struct BenchRuns {
    fused: Vec<BenchmarkReport>,
    fused_time: Duration,
    single: Vec<BenchmarkReport>,
}

fn bench_runs() -> &'static Result<BenchRuns, String> {
    static RUNS: OnceLock<Result<BenchRuns, String>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let spec = benchmark::reference_spec();
        let cfg = PipelineConfig::default();
        let start = Instant::now();
        let fused = SEEDS
            .map(|s| benchmark::run(&spec, &cfg, s, &[Modality::Fused]))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        let fused_time = start.elapsed();
        let single = SEEDS
            .map(|s| benchmark::run(&spec, &cfg, s, &[Modality::Cap, Modality::Imu]))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        Ok(BenchRuns {
            fused,
            fused_time,
            single,
        })
    })
}

fn benchmark_eer() -> Outcome {
    let runs = bench_runs().as_ref().map_err(Clone::clone)?;
    let eers: Vec<f64> = runs.fused.iter().map(|r| r.get(Modality::Fused).unwrap().pooled_eer).collect();
    let mean = stats::mean(&eers);
    let worst = eers.iter().cloned().fold(0.0, f64::max);
    let secs = runs.fused_time.as_secs_f64();
    let per_seed: Vec<String> = eers.iter().map(|e| format!("{:.2}", 100.0 * e)).collect();
    check(
        mean <= 0.03 && secs < 600.0,
        format!(
            "pooled EER mean {:.2}% (max {:.2}%; per seed {}), {secs:.0} s for 10 seeds",
            100.0 * mean,
            100.0 * worst,
            per_seed.join(" ")
        ),
    )
}

fn attack_robustness() -> Outcome {
    let runs = bench_runs().as_ref().map_err(Clone::clone)?;
    let mean_far = |kind: Label| stats::mean(&runs.fused.iter().map(|r| r.far(Modality::Fused, kind)).collect::<Vec<_>>());
    let (rep, pup) = (mean_far(Label::Replica), mean_far(Label::Puppet));
    let mut ordered = 0;
    let mut rows = Vec::new();
    for (f, s) in runs.fused.iter().zip(&runs.single) {
        let fr = f.far(Modality::Fused, Label::Replica);
        let fp = f.far(Modality::Fused, Label::Puppet);
        let ir = s.far(Modality::Imu, Label::Replica);
        let cp = s.far(Modality::Cap, Label::Puppet);
        if fp < cp && fr < ir {
            ordered += 1;
        }
        rows.push(format!("s{}: pup {fp:.3}<{cp:.3} rep {fr:.3}<{ir:.3}", f.seed));
    }
    check(
        rep <= 0.10 && pup <= 0.10 && ordered >= 8,
        format!(
            "fused FAR replica {rep:.3}, puppet {pup:.3}; ordering holds in {ordered}/10 seeds [{}]",
            rows.join(", ")
        ),
    )
}

// ----------------------------------------------------------------------- CLI

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_touchauth"));
    c.env("RUST_LOG", "warn").env_remove("TOUCHAUTH_CONFIG").env_remove("SOURCE_DATE_EPOCH");
    c
}

fn run_cli(args: &[&str]) -> Result<std::process::Output, String> {
    let out = bin().args(args).output().map_err(|e| e.to_string())?;
    if out.status.code() == Some(2) || out.status.code().is_none() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out)
}

/// synth → pretrain → enroll → evaluate under `root`, plus `verify` on the
/// first test sessions. Returns the verify stdout lines.
fn pipeline_run(root: &Path, workers: &str) -> Result<Vec<String>, String> {
    let p = |s: &str| root.join(s).display().to_string();
    let common = ["--seed", "7", "--workers", workers];
    let with = |rest: &[&str]| -> Vec<String> { rest.iter().chain(&common).map(|s| s.to_string()).collect() };
    let call = |v: Vec<String>| run_cli(&v.iter().map(String::as_str).collect::<Vec<_>>());
    call(with(&[
        "synth",
        "--out",
        &p("data"),
        "--users",
        "3",
        "--sessions",
        "40",
        "--pretrain-users",
        "3",
        "--pretrain-sessions",
        "20",
        "--attack",
        "replica=3",
        "--attack",
        "puppet=3",
    ]))?;
    call(with(&["pretrain", "--out", &p("model"), "--manifest", &p("data/pretrain.json"), "--set", "embed.epochs=5"]))?;
    call(with(&[
        "enroll",
        "--out",
        &p("enroll"),
        "--manifest",
        &p("data/enroll.json"),
        "--impostors",
        &p("data/pretrain.json"),
        "--model",
        &p("model/model.json"),
    ]))?;
    call(with(&[
        "evaluate",
        "--out",
        &p("eval"),
        "--manifest",
        &p("data/test.json"),
        "--templates",
        &p("enroll/templates"),
        "--model",
        &p("model/model.json"),
    ]))?;
    let mut lines = Vec::new();
    for id in ["u000_g0030", "u001_replica0001", "u002_puppet0002"] {
        let out = call(with(&[
            "verify",
            "--session",
            &p(&format!("data/sessions/{id}.ndjson")),
            "--template",
            &p(&format!("enroll/templates/{}.json", &id[..4])),
            "--model",
            &p("model/model.json"),
        ]))?;
        lines.push(String::from_utf8_lossy(&out.stdout).trim().to_string());
    }
    Ok(lines)
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Drops the fields that legitimately differ between runs: the worker count
/// in resolved configs and the wall-clock latency of verify.
fn comparable(files: &mut BTreeMap<PathBuf, Vec<u8>>, verify: &[String]) -> Vec<String> {
    for (path, bytes) in files.iter_mut() {
        if path.file_name().is_some_and(|n| n == "resolved_config.json") {
            let mut v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
            v.as_object_mut().unwrap().remove("workers");
            *bytes = serde_json::to_vec(&v).unwrap();
        }
    }
    verify
        .iter()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("latency_ms");
            v.to_string()
        })
        .collect()
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path().join("run");
    let mut runs = Vec::new();
    for workers in ["1", "1", "3"] {
        let _ = std::fs::remove_dir_all(&root);
        let verify = pipeline_run(&root, workers)?;
        let mut files = snapshot(&root);
        let verify = comparable(&mut files, &verify);
        runs.push((workers, files, verify));
    }
    let (_, base, base_verify) = &runs[0];
    for (workers, files, verify) in &runs[1..] {
        if files.keys().ne(base.keys()) {
            return Err(format!("workers={workers}: different file set"));
        }
        for (path, bytes) in files {
            if &base[path] != bytes {
                return Err(format!("workers={workers}: {} differs", path.display()));
            }
        }
        if verify != base_verify {
            return Err(format!("workers={workers}: verify output differs"));
        }
    }
    Ok(format!(
        "{} files byte-identical across two runs with 1 worker and one with 3",
        base.len()
    ))
}

fn latency() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    pipeline_run(root, "0")?;
    let p = |s: &str| root.join(s).display().to_string();
    let manifest: Vec<serde_json::Value> =
        serde_json::from_slice(&std::fs::read(root.join("data/test.json")).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let mut walls = Vec::new();
    let mut inner = Vec::new();
    for e in manifest.iter().take(30) {
        let user = e["user_id"].as_str().unwrap();
        let session = p(&format!("data/{}", e["path"].as_str().unwrap()));
        let template = p(&format!("enroll/templates/{user}.json"));
        let start = Instant::now();
        let out = run_cli(&["verify", "--session", &session, "--template", &template, "--model", &p("model/model.json")])?;
        walls.push(start.elapsed().as_secs_f64() * 1000.0);
        let d: serde_json::Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
        inner.push(d["latency_ms"].as_f64().unwrap());
    }
    let max_wall = walls.iter().cloned().fold(0.0, f64::max);
    let max_inner = inner.iter().cloned().fold(0.0, f64::max);
    check(
        max_wall < 100.0,
        format!(
            "{} sessions: process wall time mean {:.1} ms, max {max_wall:.1} ms; in-process mean {:.1} ms, max {max_inner:.1} ms",
            walls.len(),
            stats::mean(&walls),
            stats::mean(&inner)
        ),
    )
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("oracle_equivalence", oracle_suite),
        ("numerical_analysis", numerical_suite),
        ("nu_property", nu_property),
        ("eer_calibration", eer_calibration),
        ("synthetic_benchmark_eer", benchmark_eer),
        ("attack_robustness", attack_robustness),
        ("verify_latency", latency),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|flt| name.contains(flt.as_str())) {
            continue;
        }
        match f() {
            Ok(d) => println!("PASS {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name}: {d}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
