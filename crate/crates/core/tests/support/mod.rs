//! Brute-force reference implementations, written straight from the
//! definitions and sharing no code with the library.

#![allow(dead_code)]

use std::collections::BTreeSet;

/// Median by full sort, averaging the two middle values for even lengths.
pub fn sorted_median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn median_mad_tau(values: &[f64], k: f64) -> f64 {
    let med = sorted_median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    med + k * sorted_median(&dev)
}

/// Components by repeated label relaxation: every cell starts with its own
/// label and takes the smallest label among masked neighbours until nothing
/// changes. Returns the highest-energy component (first by smallest label
/// on ties) and its intensity-weighted centroid (x = column, y = row).
pub fn best_region(rows: usize, cols: usize, data: &[f64], mask: &[bool]) -> Option<(BTreeSet<(usize, usize)>, (f64, f64))> {
    let mut label: Vec<usize> = (0..rows * cols).collect();
    loop {
        let mut changed = false;
        for i in 0..rows {
            for j in 0..cols {
                if !mask[i * cols + j] {
                    continue;
                }
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let (ni, nj) = (i as i64 + di, j as i64 + dj);
                        if ni < 0 || nj < 0 || ni >= rows as i64 || nj >= cols as i64 {
                            continue;
                        }
                        let n = ni as usize * cols + nj as usize;
                        if mask[n] && label[n] < label[i * cols + j] {
                            label[i * cols + j] = label[n];
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    let labels: BTreeSet<usize> = (0..rows * cols).filter(|&c| mask[c]).map(|c| label[c]).collect();
    let mut best: Option<(f64, usize)> = None;
    for &l in &labels {
        let e: f64 = (0..rows * cols).filter(|&c| mask[c] && label[c] == l).map(|c| data[c]).sum();
        if best.map_or(true, |(be, _)| e > be) {
            best = Some((e, l));
        }
    }
    let (_, l) = best?;
    let cells: BTreeSet<(usize, usize)> = (0..rows * cols)
        .filter(|&c| mask[c] && label[c] == l)
        .map(|c| (c / cols, c % cols))
        .collect();
    let (mut sx, mut sy, mut s) = (0.0, 0.0, 0.0);
    for &(i, j) in &cells {
        let v = data[i * cols + j];
        sx += j as f64 * v;
        sy += i as f64 * v;
        s += v;
    }
    Some((cells, (sx / s, sy / s)))
}

/// Per-cell centred moving average over frames by direct summation, then
/// row-major flattening frame by frame.
pub fn naive_smooth(frames: &[Vec<f64>], width: usize) -> Vec<f64> {
    let n = frames.len();
    let cells = frames[0].len();
    let half = (width / 2) as i64;
    let mut out = Vec::with_capacity(n * cells);
    for t in 0..n as i64 {
        for c in 0..cells {
            let mut sum = 0.0;
            let mut count = 0.0;
            for u in t - half..=t + half {
                if u >= 0 && u < n as i64 {
                    sum += frames[u as usize][c];
                    count += 1.0;
                }
            }
            out.push(sum / count);
        }
    }
    out
}

/// Exhaustive pair search for max m(i) − m(j) over the inclusive window.
/// Among equal differences the lexicographically smallest (i, j) wins.
pub fn exhaustive_pair(m: &[f64], s: usize, e: usize) -> (usize, usize, f64) {
    let mut best = (s, s, f64::NEG_INFINITY);
    for i in s..=e {
        for j in s..=e {
            let d = m[i] - m[j];
            if d > best.2 {
                best = (i, j, d);
            }
        }
    }
    best
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// LOF following the textbook definitions. `query = None` scores training
/// point `i` against the rest; otherwise `x` against the full set.
pub struct LofOracle {
    pub data: Vec<Vec<f64>>,
    pub k: usize,
}

impl LofOracle {
    fn neighbourhood(&self, x: &[f64], skip: Option<usize>) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.data.len()).filter(|&i| Some(i) != skip).collect();
        idx.sort_by(|&a, &b| euclid(&self.data[a], x).partial_cmp(&euclid(&self.data[b], x)).unwrap().then(a.cmp(&b)));
        idx.truncate(self.k);
        idx
    }

    fn k_distance(&self, o: usize) -> f64 {
        let nb = self.neighbourhood(&self.data[o], Some(o));
        euclid(&self.data[o], &self.data[*nb.last().unwrap()])
    }

    fn reach(&self, x: &[f64], o: usize) -> f64 {
        self.k_distance(o).max(euclid(x, &self.data[o]))
    }

    fn lrd(&self, x: &[f64], skip: Option<usize>) -> f64 {
        let nb = self.neighbourhood(x, skip);
        let mean = nb.iter().map(|&o| self.reach(x, o)).sum::<f64>() / nb.len() as f64;
        1.0 / mean.max(1e-12)
    }

    pub fn lof(&self, x: &[f64], skip: Option<usize>) -> f64 {
        let nb = self.neighbourhood(x, skip);
        let own = self.lrd(x, skip);
        nb.iter().map(|&o| self.lrd(&self.data[o], Some(o)) / own).sum::<f64>() / nb.len() as f64
    }
}

fn quad(k: &[Vec<f64>], a: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        for j in 0..a.len() {
            s += a[i] * a[j] * k[i][j];
        }
    }
    0.5 * s
}

/// Euclidean projection onto {0 ≤ a ≤ c, Σa = 1} by bisection on the shift.
fn project_capped_simplex(y: &[f64], c: f64) -> Vec<f64> {
    let total = |lambda: f64| y.iter().map(|v| (v - lambda).clamp(0.0, c)).sum::<f64>();
    let mut lo = y.iter().cloned().fold(f64::INFINITY, f64::min) - c - 1.0;
    let mut hi = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if total(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lambda = 0.5 * (lo + hi);
    y.iter().map(|v| (v - lambda).clamp(0.0, c)).collect()
}

/// Minimum of ½αᵀKα over the capped simplex by projected gradient descent
/// from `starts` random feasible points, each run until steps fall below 1e-10.
pub fn qp_oracle(k: &[Vec<f64>], c: f64, starts: usize, rng: &mut impl rand::Rng) -> f64 {
    let n = k.len();
    let step = 1.0 / n as f64;
    let mut best = f64::INFINITY;
    for _ in 0..starts {
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let mut a = project_capped_simplex(&raw, c);
        for _ in 0..200_000 {
            let grad: Vec<f64> = (0..n).map(|i| (0..n).map(|j| k[i][j] * a[j]).sum()).collect();
            let y: Vec<f64> = a.iter().zip(&grad).map(|(x, g)| x - step * g).collect();
            let next = project_capped_simplex(&y, c);
            let moved = next.iter().zip(&a).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            a = next;
            if moved < 1e-10 {
                break;
            }
        }
        best = best.min(quad(k, &a));
    }
    best
}

/// FAR and FRR at `t` by scanning every score.
pub fn count_rates(genuine: &[f64], impostor: &[f64], t: f64) -> (f64, f64) {
    let mut fa = 0usize;
    for &s in impostor {
        if s >= t {
            fa += 1;
        }
    }
    let mut fr = 0usize;
    for &s in genuine {
        if s < t {
            fr += 1;
        }
    }
    (fa as f64 / impostor.len() as f64, fr as f64 / genuine.len() as f64)
}

/// Two dense layers with LeakyReLU, written as explicit loops.
pub struct DenseOracle<'a> {
    pub w1: &'a [Vec<f64>],
    pub b1: &'a [f64],
    pub w2: &'a [Vec<f64>],
    pub b2: &'a [f64],
    pub mean: &'a [f64],
    pub std: &'a [f64],
    pub slope: f64,
}

impl DenseOracle<'_> {
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; x.len()];
        for i in 0..x.len() {
            z[i] = (x[i] - self.mean[i]) / self.std[i];
        }
        let mut h = vec![0.0; self.b1.len()];
        for r in 0..h.len() {
            let mut s = self.b1[r];
            for c in 0..z.len() {
                s += self.w1[r][c] * z[c];
            }
            h[r] = if s > 0.0 { s } else { self.slope * s };
        }
        let mut e = vec![0.0; self.b2.len()];
        for r in 0..e.len() {
            let mut s = self.b2[r];
            for c in 0..h.len() {
                s += self.w2[r][c] * h[c];
            }
            e[r] = s;
        }
        e
    }
}

type M3 = [[f64; 3]; 3];

fn matmul(a: &M3, b: &M3) -> M3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

/// Rz(ψ)·Ry(−θ)·Rx(φ) from elementary rotation matrices.
pub fn euler_matrix(phi: f64, theta: f64, psi: f64) -> M3 {
    let (sx, cx) = phi.sin_cos();
    let (sy, cy) = (-theta).sin_cos();
    let (sz, cz) = psi.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    matmul(&rz, &matmul(&ry, &rx))
}

/// Hann-windowed energy of one frame normalized by the window energy.
pub fn windowed_power(x: &[f64], window: &[f64]) -> f64 {
    let num: f64 = x.iter().zip(window).map(|(v, w)| (v * w) * (v * w)).sum();
    let den: f64 = window.iter().map(|w| w * w).sum();
    num / den
}

/// Standard normal CDF via the complementary error function.
pub fn phi(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}
