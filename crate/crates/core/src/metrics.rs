//! Verification error rates, ROC/EER, score histograms and a 2-D projection
//! of embeddings. Scores follow the accept-on-≥ convention.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    /// True accepts (genuine accepted).
    pub ta: u64,
    /// True rejects (impostor rejected).
    pub tr: u64,
    /// False accepts (impostor accepted).
    pub fa: u64,
    /// False rejects (genuine rejected).
    pub fr: u64,
}

impl Confusion {
    pub fn at_threshold(genuine: &[f64], impostor: &[f64], threshold: f64) -> Self {
        let ta = genuine.iter().filter(|&&s| s >= threshold).count() as u64;
        let fa = impostor.iter().filter(|&&s| s >= threshold).count() as u64;
        Confusion {
            ta,
            fr: genuine.len() as u64 - ta,
            fa,
            tr: impostor.len() as u64 - fa,
        }
    }

    pub fn total(&self) -> u64 {
        self.ta + self.tr + self.fa + self.fr
    }
}

impl std::ops::Add for Confusion {
    type Output = Confusion;

    fn add(self, o: Confusion) -> Confusion {
        Confusion {
            ta: self.ta + o.ta,
            tr: self.tr + o.tr,
            fa: self.fa + o.fa,
            fr: self.fr + o.fr,
        }
    }
}

/// Rates with undefined entries set to NaN and named in `undefined`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rates {
    pub far: f64,
    pub frr: f64,
    pub accuracy: f64,
    pub bac: f64,
    pub undefined: Vec<&'static str>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn rates(c: &Confusion) -> Rates {
    let far = ratio(c.fa, c.fa + c.tr);
    let frr = ratio(c.fr, c.fr + c.ta);
    let acc = ratio(c.ta + c.tr, c.total());
    let tar = ratio(c.ta, c.ta + c.fr);
    let trr = ratio(c.tr, c.tr + c.fa);
    let bac = tar.zip(trr).map(|(a, b)| 0.5 * (a + b));
    let mut undefined = Vec::new();
    for (name, v) in [("far", far), ("frr", frr), ("accuracy", acc), ("bac", bac)] {
        if v.is_none() {
            undefined.push(name);
        }
    }
    Rates {
        far: far.unwrap_or(f64::NAN),
        frr: frr.unwrap_or(f64::NAN),
        accuracy: acc.unwrap_or(f64::NAN),
        bac: bac.unwrap_or(f64::NAN),
        undefined,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Sweeps every distinct score plus ±∞; FAR = share of impostors ≥ t,
/// FRR = share of genuine < t.
pub fn roc(genuine: &[f64], impostor: &[f64]) -> RocCurve {
    assert!(!genuine.is_empty() && !impostor.is_empty(), "roc needs both score sets");
    let g = sorted(genuine);
    let i = sorted(impostor);
    let mut thresholds: Vec<f64> = g.iter().chain(&i).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let mut all = Vec::with_capacity(thresholds.len() + 2);
    all.push(f64::NEG_INFINITY);
    all.extend(thresholds);
    all.push(f64::INFINITY);
    let ng = g.len() as f64;
    let ni = i.len() as f64;
    let points = all
        .into_iter()
        .map(|t| {
            let g_below = g.partition_point(|&s| s < t) as f64;
            let i_below = i.partition_point(|&s| s < t) as f64;
            RocPoint {
                threshold: t,
                far: (ni - i_below) / ni,
                frr: g_below / ng,
            }
        })
        .collect();
    RocCurve { points }
}

/// Rate where FAR and FRR meet, interpolating linearly along the segment
/// between the two sweep points that bracket the sign change.
pub fn eer(curve: &RocCurve) -> f64 {
    let p = &curve.points;
    for k in 0..p.len() {
        let d0 = p[k].far - p[k].frr;
        if d0 == 0.0 {
            return p[k].far;
        }
        if k + 1 < p.len() {
            let d1 = p[k + 1].far - p[k + 1].frr;
            if d0 > 0.0 && d1 < 0.0 {
                let lambda = d0 / (d0 - d1);
                return p[k].far + lambda * (p[k + 1].far - p[k].far);
            }
        }
    }
    // unreachable for curves produced by `roc`, which start at (1, 0) and end at (0, 1)
    let best = p
        .iter()
        .min_by(|a, b| (a.far - a.frr).abs().total_cmp(&(b.far - b.frr).abs()))
        .expect("non-empty curve");
    0.5 * (best.far + best.frr)
}

pub fn eer_of(genuine: &[f64], impostor: &[f64]) -> f64 {
    eer(&roc(genuine, impostor))
}

pub fn write_roc_csv(path: &Path, curve: &RocCurve) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "threshold,far,frr")?;
    for p in &curve.points {
        writeln!(w, "{},{:.6},{:.6}", fmt_threshold(p.threshold), p.far, p.frr)?;
    }
    w.flush()
}

fn fmt_threshold(t: f64) -> String {
    if t == f64::INFINITY {
        "inf".into()
    } else if t == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{t:.6}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub genuine: Vec<u64>,
    pub impostor: Vec<u64>,
}

/// Histogram over the shared score range; the last bin is closed.
pub fn score_histogram(genuine: &[f64], impostor: &[f64], bins: usize) -> Histogram {
    assert!(bins >= 2, "need at least two bins");
    let all = genuine.iter().chain(impostor);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|k| if k == bins { hi } else { lo + width * k as f64 }).collect();
    let bin_of = |s: f64| {
        if width <= 0.0 {
            0
        } else {
            (((s - lo) / width).floor() as usize).min(bins - 1)
        }
    };
    let mut g = vec![0; bins];
    let mut i = vec![0; bins];
    for &s in genuine {
        g[bin_of(s)] += 1;
    }
    for &s in impostor {
        i[bin_of(s)] += 1;
    }
    Histogram {
        edges,
        genuine: g,
        impostor: i,
    }
}

pub fn write_histogram_csv(path: &Path, h: &Histogram) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "bin_lo,bin_hi,genuine,impostor")?;
    for k in 0..h.genuine.len() {
        writeln!(
            w,
            "{:.6},{:.6},{},{}",
            h.edges[k],
            h.edges[k + 1],
            h.genuine[k],
            h.impostor[k]
        )?;
    }
    w.flush()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    pub components: [Vec<f64>; 2],
    pub eigenvalues: [f64; 2],
    /// Fewer than two non-degenerate directions; missing columns are zero.
    pub rank_deficient: bool,
}

const POWER_TOL: f64 = 1e-9;
const POWER_MAX_ITER: usize = 1000;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Applies the sample covariance (n − 1 normalization) of centred rows,
/// minus already extracted components.
fn cov_apply(x: &[Vec<f64>], v: &[f64], deflate: &[(f64, Vec<f64>)]) -> Vec<f64> {
    let d = v.len();
    let mut out = vec![0.0; d];
    for row in x {
        let p = dot(row, v);
        for (o, r) in out.iter_mut().zip(row) {
            *o += p * r;
        }
    }
    let scale = 1.0 / (x.len() - 1) as f64;
    out.iter_mut().for_each(|o| *o *= scale);
    for (lambda, u) in deflate {
        let p = lambda * dot(u, v);
        for (o, ui) in out.iter_mut().zip(u) {
            *o -= p * ui;
        }
    }
    out
}

fn fix_sign(v: &mut [f64]) {
    let big = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
    if big < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Top direction of the deflated covariance, started from the centred row
/// with the largest residual.
fn power_iteration(x: &[Vec<f64>], deflate: &[(f64, Vec<f64>)]) -> Option<(f64, Vec<f64>)> {
    let residual = |row: &[f64]| {
        let mut r = row.to_vec();
        for (_, u) in deflate {
            let p = dot(u, &r);
            r.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        r
    };
    let start = x
        .iter()
        .map(|r| residual(r))
        .max_by(|a, b| norm(a).total_cmp(&norm(b)))?;
    let n0 = norm(&start);
    let scale = x.iter().map(|r| norm(r)).fold(0.0, f64::max);
    if n0 <= 1e-12 * scale.max(1e-300) {
        return None;
    }
    let mut v: Vec<f64> = start.iter().map(|a| a / n0).collect();
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITER {
        let w = cov_apply(x, &v, deflate);
        lambda = norm(&w);
        if lambda == 0.0 {
            return None;
        }
        let next: Vec<f64> = w.iter().map(|a| a / lambda).collect();
        let diff = next.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        v = next;
        if diff < POWER_TOL {
            break;
        }
    }
    fix_sign(&mut v);
    Some((lambda, v))
}

pub fn project_2d(embeddings: &[Vec<f64>]) -> Projection {
    let n = embeddings.len();
    assert!(n >= 3, "projection needs at least three points");
    let d = embeddings[0].len();
    let mut mean = vec![0.0; d];
    for e in embeddings {
        mean.iter_mut().zip(e).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let x: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| e.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();

    let mut found: Vec<(f64, Vec<f64>)> = Vec::new();
    for _ in 0..2 {
        match power_iteration(&x, &found) {
            Some((lambda, v)) if found.first().is_none_or(|(l0, _)| lambda > 1e-12 * l0) => found.push((lambda, v)),
            _ => break,
        }
    }
    let rank_deficient = found.len() < 2;
    while found.len() < 2 {
        found.push((0.0, vec![0.0; d]));
    }
    let coords = x.iter().map(|r| [dot(r, &found[0].1), dot(r, &found[1].1)]).collect();
    let [(l0, v0), (l1, v1)]: [(f64, Vec<f64>); 2] = found.try_into().unwrap();
    Projection {
        coords,
        components: [v0, v1],
        eigenvalues: [l0, l1],
        rank_deficient,
    }
}

pub fn write_projection_csv(path: &Path, ids: &[String], labels: &[String], p: &Projection) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "session_id,label,pc1,pc2")?;
    for ((id, label), c) in ids.iter().zip(labels).zip(&p.coords) {
        writeln!(w, "{id},{label},{:.6},{:.6}", c[0], c[1])?;
    }
    w.flush()
}

/// Contents of summary.json.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub eer: f64,
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
    pub accuracy: f64,
    pub bac_at_threshold: f64,
    pub bac_at_eer: f64,
    pub n_genuine: usize,
    pub n_impostor: usize,
}

impl Summary {
    pub fn new(genuine: &[f64], impostor: &[f64], threshold: f64) -> Self {
        let eer = eer_of(genuine, impostor);
        let r = rates(&Confusion::at_threshold(genuine, impostor, threshold));
        Summary {
            eer,
            threshold,
            far: r.far,
            frr: r.frr,
            accuracy: r.accuracy,
            bac_at_threshold: r.bac,
            bac_at_eer: 1.0 - eer,
            n_genuine: genuine.len(),
            n_impostor: impostor.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_examples() {
        let r = rates(&Confusion { ta: 50, tr: 50, fa: 0, fr: 0 });
        assert_eq!((r.far, r.frr, r.accuracy, r.bac), (0.0, 0.0, 1.0, 1.0));
        let r = rates(&Confusion { ta: 0, tr: 0, fa: 10, fr: 10 });
        assert_eq!((r.far, r.frr, r.accuracy, r.bac), (1.0, 1.0, 0.0, 0.0));
        let r = rates(&Confusion { ta: 90, fr: 10, tr: 80, fa: 20 });
        assert!((r.far - 0.2).abs() < 1e-15 && (r.frr - 0.1).abs() < 1e-15);
        assert!((r.accuracy - 0.85).abs() < 1e-15 && (r.bac - 0.85).abs() < 1e-15);
        assert!((r.bac - (1.0 - 0.5 * (r.far + r.frr))).abs() < 1e-15);
    }

    #[test]
    fn undefined_rates_are_flagged() {
        let r = rates(&Confusion { ta: 5, fr: 5, ..Default::default() });
        assert!(r.far.is_nan());
        assert_eq!(r.undefined, vec!["far", "bac"]);
    }

    #[test]
    fn separable_roc_and_eer() {
        let c = roc(&[0.9, 0.8], &[0.1, 0.2]);
        assert!(c.points.iter().any(|p| p.far == 0.0 && p.frr == 0.0));
        assert_eq!(eer(&c), 0.0);
    }

    #[test]
    fn roc_is_monotone_with_sentinels() {
        let c = roc(&[0.3, 0.5, 0.5, 0.9], &[0.1, 0.5, 0.6]);
        assert_eq!(c.points.first().unwrap().threshold, f64::NEG_INFINITY);
        assert_eq!(c.points.last().unwrap().threshold, f64::INFINITY);
        for w in c.points.windows(2) {
            assert!(w[1].far <= w[0].far && w[1].frr >= w[0].frr);
        }
    }

    #[test]
    fn histogram_conservation_and_degenerate_range() {
        let h = score_histogram(&[1.0; 5], &[1.0; 3], 4);
        assert_eq!(h.genuine, vec![5, 0, 0, 0]);
        assert_eq!(h.impostor, vec![3, 0, 0, 0]);
        let h = score_histogram(&[0.0, 0.1, 0.2], &[0.8, 0.9, 1.0], 5);
        assert_eq!(h.genuine.iter().sum::<u64>(), 3);
        assert_eq!(h.impostor.iter().sum::<u64>(), 3);
        assert!(h.genuine.iter().zip(&h.impostor).all(|(g, i)| g * i == 0));
    }

    #[test]
    fn projection_of_plane_and_duplicates() {
        let pts: Vec<Vec<f64>> = (0..30)
            .map(|k| {
                let a = (k as f64 * 0.7).sin() * 3.0;
                let b = (k as f64 * 1.3).cos();
                (0..10).map(|j| a * (j as f64 + 1.0) * 0.1 + b * if j % 2 == 0 { 1.0 } else { -1.0 }).collect()
            })
            .collect();
        let p = project_2d(&pts);
        assert!(!p.rank_deficient);
        let mut doubled = pts.clone();
        doubled.extend(pts.clone());
        let q = project_2d(&doubled);
        for k in 0..30 {
            for c in 0..2 {
                assert!((q.coords[k][c] - q.coords[k + 30][c]).abs() < 1e-12);
                assert!((q.coords[k][c] - p.coords[k][c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn projection_flags_rank_one() {
        let pts: Vec<Vec<f64>> = (0..5).map(|k| vec![k as f64, 2.0 * k as f64, 0.0]).collect();
        let p = project_2d(&pts);
        assert!(p.rank_deficient);
        assert!(p.coords.iter().all(|c| c[1] == 0.0));
    }
}
