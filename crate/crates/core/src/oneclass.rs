//! Per-user one-class classifiers, hyperparameter search and enrolment.
//!
//! All scores are oriented so that higher means more genuine.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics;
use crate::stats;

#[derive(Debug, Error)]
pub enum OneClassError {
    #[error("solver did not converge after {iterations} iterations (max KKT violation {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("insufficient samples: got {got}, need at least {need}")]
    InsufficientSamples { got: usize, need: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("hyperparameter grid is empty")]
    EmptyGrid,
    #[error("empty {0} set")]
    EmptySet(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Ocsvm,
    Lof,
    Iforest,
}

impl ClassifierKind {
    pub const ALL: [ClassifierKind; 3] = [ClassifierKind::Ocsvm, ClassifierKind::Lof, ClassifierKind::Iforest];

    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierKind::Ocsvm => "ocsvm",
            ClassifierKind::Lof => "lof",
            ClassifierKind::Iforest => "iforest",
        }
    }
}

impl std::str::FromStr for ClassifierKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ocsvm" => Ok(ClassifierKind::Ocsvm),
            "lof" => Ok(ClassifierKind::Lof),
            "iforest" => Ok(ClassifierKind::Iforest),
            other => Err(format!("unknown classifier '{other}' (expected ocsvm, lof or iforest)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub kkt_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            kkt_tol: 1e-6,
            max_iter: 1_000_000,
        }
    }
}

// ---------------------------------------------------------------- OC-SVM

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcSvmModel {
    pub support_vectors: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub rho: f64,
    pub gamma: f64,
    pub nu: f64,
}

/// Fit diagnostics alongside the model.
#[derive(Debug, Clone, PartialEq)]
pub struct OcSvmFit {
    pub model: OcSvmModel,
    /// Dual coefficients for every training point.
    pub alpha_full: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub max_violation: f64,
}

pub fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    (-gamma * stats::sq_dist(a, b)).exp()
}

pub fn kernel_matrix(x: &[Vec<f64>], gamma: f64) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut k = vec![vec![0.0; n]; n];
    for i in 0..n {
        k[i][i] = 1.0;
        for j in 0..i {
            let v = rbf(&x[i], &x[j], gamma);
            k[i][j] = v;
            k[j][i] = v;
        }
    }
    k
}

/// ½αᵀKα.
pub fn dual_objective(k: &[Vec<f64>], alpha: &[f64]) -> f64 {
    let mut s = 0.0;
    for (i, ai) in alpha.iter().enumerate() {
        for (j, aj) in alpha.iter().enumerate() {
            s += ai * aj * k[i][j];
        }
    }
    0.5 * s
}

pub fn ocsvm_train(x: &[Vec<f64>], nu: f64, gamma: f64, solver: &SolverConfig) -> Result<OcSvmModel, OneClassError> {
    ocsvm_fit(x, nu, gamma, solver).map(|f| f.model)
}

/// Minimizes ½αᵀKα subject to 0 ≤ αᵢ ≤ 1/(νn), Σα = 1 by pairwise updates on
/// the maximal violating pair.
pub fn ocsvm_fit(x: &[Vec<f64>], nu: f64, gamma: f64, solver: &SolverConfig) -> Result<OcSvmFit, OneClassError> {
    let n = x.len();
    if n < 2 {
        return Err(OneClassError::InsufficientSamples { got: n, need: 2 });
    }
    if !(nu > 0.0 && nu <= 1.0) {
        return Err(OneClassError::InvalidParam(format!("nu must lie in (0, 1], got {nu}")));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(OneClassError::InvalidParam(format!("gamma must be positive, got {gamma}")));
    }
    let c = 1.0 / (nu * n as f64);
    let k = kernel_matrix(x, gamma);

    // feasible start: fill the first points to the bound
    let mut alpha = vec![0.0; n];
    let mut remaining: f64 = 1.0;
    for a in alpha.iter_mut() {
        let take = remaining.min(c);
        *a = take;
        remaining -= take;
        if remaining <= 0.0 {
            break;
        }
    }
    let mut grad: Vec<f64> = (0..n).map(|i| (0..n).map(|j| k[i][j] * alpha[j]).sum()).collect();

    let mut iterations = 0;
    let mut violation;
    loop {
        // i: direction of increase (α_i < C), j: decrease (α_j > 0)
        let mut i_best = usize::MAX;
        let mut g_min = f64::INFINITY;
        let mut j_best = usize::MAX;
        let mut g_max = f64::NEG_INFINITY;
        for t in 0..n {
            if alpha[t] < c && grad[t] < g_min {
                g_min = grad[t];
                i_best = t;
            }
            if alpha[t] > 0.0 && grad[t] > g_max {
                g_max = grad[t];
                j_best = t;
            }
        }
        violation = if i_best == usize::MAX || j_best == usize::MAX {
            0.0
        } else {
            g_max - g_min
        };
        if violation < solver.kkt_tol {
            break;
        }
        if iterations >= solver.max_iter {
            return Err(OneClassError::NonConvergence {
                iterations,
                residual: violation,
            });
        }
        iterations += 1;
        let (i, j) = (i_best, j_best);
        let eta = (k[i][i] + k[j][j] - 2.0 * k[i][j]).max(1e-12);
        let mut delta = (grad[j] - grad[i]) / eta;
        delta = delta.min(c - alpha[i]).min(alpha[j]);
        if delta <= 0.0 {
            break;
        }
        alpha[i] += delta;
        alpha[j] -= delta;
        // snap to the box exactly
        if c - alpha[i] < 1e-15 {
            alpha[i] = c;
        }
        if alpha[j] < 1e-15 {
            alpha[j] = 0.0;
        }
        for t in 0..n {
            grad[t] += delta * (k[t][i] - k[t][j]);
        }
    }

    let rho = offset(&alpha, &grad, c);
    let objective = dual_objective(&k, &alpha);
    let (support_vectors, sv_alpha): (Vec<_>, Vec<_>) = alpha
        .iter()
        .enumerate()
        .filter(|(_, &a)| a > 1e-9)
        .map(|(i, &a)| (x[i].clone(), a))
        .unzip();
    Ok(OcSvmFit {
        model: OcSvmModel {
            support_vectors,
            alpha: sv_alpha,
            rho,
            gamma,
            nu,
        },
        alpha_full: alpha,
        objective,
        iterations,
        max_violation: violation,
    })
}

/// ρ as the mean gradient over free support vectors, or the midpoint of the
/// feasible interval when every coefficient sits at a bound.
fn offset(alpha: &[f64], grad: &[f64], c: f64) -> f64 {
    let free_tol = 1e-12;
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    for (&a, &g) in alpha.iter().zip(grad) {
        if a > free_tol && a < c - free_tol {
            sum += g;
            count += 1;
        } else if a >= c - free_tol {
            lb = lb.max(g);
        } else {
            ub = ub.min(g);
        }
    }
    if count > 0 {
        sum / count as f64
    } else if lb.is_finite() && ub.is_finite() {
        0.5 * (lb + ub)
    } else if lb.is_finite() {
        lb
    } else {
        ub
    }
}

pub fn ocsvm_score(model: &OcSvmModel, x: &[f64]) -> f64 {
    model
        .support_vectors
        .iter()
        .zip(&model.alpha)
        .map(|(sv, a)| a * rbf(sv, x, model.gamma))
        .sum::<f64>()
        - model.rho
}

/// ln(Σ αᵢ K(svᵢ, x)) − ln ρ: same sign and order as [`ocsvm_score`], but
/// stays informative when a large γ drives every kernel value towards zero.
/// Falls back to the raw decision value when ρ ≤ 0.
pub fn ocsvm_log_score(model: &OcSvmModel, x: &[f64]) -> f64 {
    if model.rho <= 0.0 {
        return ocsvm_score(model, x);
    }
    let terms: Vec<f64> = model
        .support_vectors
        .iter()
        .zip(&model.alpha)
        .filter(|(_, &a)| a > 0.0)
        .map(|(sv, a)| a.ln() - model.gamma * stats::sq_dist(sv, x))
        .collect();
    let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return f64::NEG_INFINITY;
    }
    top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln() - model.rho.ln()
}

// ---------------------------------------------------------------- LOF

pub const LOF_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LofModel {
    pub train: Vec<Vec<f64>>,
    pub k: usize,
    pub k_distance: Vec<f64>,
    pub lrd: Vec<f64>,
}

/// The `k` nearest training points to `x` as (distance, index), ties broken
/// by index; `exclude` drops one index from consideration.
fn nearest(train: &[Vec<f64>], x: &[f64], k: usize, exclude: Option<usize>) -> Vec<(f64, usize)> {
    let mut d: Vec<(f64, usize)> = train
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, t)| (stats::dist(t, x), i))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.truncate(k);
    d
}

fn lrd_of(neighbours: &[(f64, usize)], k_distance: &[f64]) -> f64 {
    let mean_reach = neighbours
        .iter()
        .map(|&(d, o)| d.max(k_distance[o]))
        .sum::<f64>()
        / neighbours.len() as f64;
    1.0 / mean_reach.max(LOF_EPS)
}

pub fn lof_fit(x: &[Vec<f64>], k: usize) -> Result<LofModel, OneClassError> {
    let n = x.len();
    if k == 0 || k >= n {
        return Err(OneClassError::InvalidParam(format!("LOF needs 1 ≤ k < n (k = {k}, n = {n})")));
    }
    let neighbours: Vec<Vec<(f64, usize)>> = (0..n).map(|i| nearest(x, &x[i], k, Some(i))).collect();
    let k_distance: Vec<f64> = neighbours.iter().map(|nb| nb[k - 1].0).collect();
    let lrd = neighbours.iter().map(|nb| lrd_of(nb, &k_distance)).collect();
    Ok(LofModel {
        train: x.to_vec(),
        k,
        k_distance,
        lrd,
    })
}

fn lof_from(model: &LofModel, neighbours: &[(f64, usize)]) -> f64 {
    let own = lrd_of(neighbours, &model.k_distance);
    let ratio = neighbours.iter().map(|&(_, o)| model.lrd[o] / own).sum::<f64>() / neighbours.len() as f64;
    -ratio
}

/// −LOF of a new query against the whole training set.
pub fn lof_score(model: &LofModel, x: &[f64]) -> f64 {
    lof_from(model, &nearest(&model.train, x, model.k, None))
}

/// −LOF of training point `i` with itself left out of its neighbourhood.
pub fn lof_training_score(model: &LofModel, i: usize) -> f64 {
    lof_from(model, &nearest(&model.train, &model.train[i], model.k, Some(i)))
}

// ---------------------------------------------------------------- Isolation forest

pub const EULER_GAMMA: f64 = 0.5772156649;

/// Average unsuccessful-search path length in a binary search tree of `n` items.
pub fn c_factor(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let nf = n as f64;
            2.0 * ((nf - 1.0).ln() + EULER_GAMMA) - 2.0 * (nf - 1.0) / nf
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "lowercase")]
pub enum IsoNode {
    Split {
        feature: usize,
        value: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        size: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationTree {
    pub nodes: Vec<IsoNode>,
}

impl IsolationTree {
    fn grow<R: Rng + ?Sized>(data: &[&[f64]], limit: usize, rng: &mut R) -> Self {
        let mut tree = IsolationTree { nodes: Vec::new() };
        tree.build(data, 0, limit, rng);
        tree
    }

    fn build<R: Rng + ?Sized>(&mut self, data: &[&[f64]], depth: usize, limit: usize, rng: &mut R) -> usize {
        let idx = self.nodes.len();
        self.nodes.push(IsoNode::Leaf { size: data.len() });
        if depth >= limit || data.len() <= 1 {
            return idx;
        }
        let dims = data[0].len();
        let ranges: Vec<(usize, f64, f64)> = (0..dims)
            .filter_map(|f| {
                let (lo, hi) = data
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x[f]), hi.max(x[f])));
                (hi > lo).then_some((f, lo, hi))
            })
            .collect();
        if ranges.is_empty() {
            return idx;
        }
        let (feature, lo, hi) = ranges[rng.random_range(0..ranges.len())];
        let value = rng.random_range(lo..hi);
        let (left, right): (Vec<&[f64]>, Vec<&[f64]>) = data.iter().partition(|x| x[feature] < value);
        let l = self.build(&left, depth + 1, limit, rng);
        let r = self.build(&right, depth + 1, limit, rng);
        self.nodes[idx] = IsoNode::Split {
            feature,
            value,
            left: l,
            right: r,
        };
        idx
    }

    pub fn path_length(&self, x: &[f64]) -> f64 {
        let mut node = 0;
        let mut depth = 0.0;
        loop {
            match self.nodes[node] {
                IsoNode::Split {
                    feature,
                    value,
                    left,
                    right,
                } => {
                    node = if x[feature] < value { left } else { right };
                    depth += 1.0;
                }
                IsoNode::Leaf { size } => return depth + c_factor(size),
            }
        }
    }

    pub fn height(&self) -> usize {
        fn h(nodes: &[IsoNode], i: usize) -> usize {
            match nodes[i] {
                IsoNode::Split { left, right, .. } => 1 + h(nodes, left).max(h(nodes, right)),
                IsoNode::Leaf { .. } => 0,
            }
        }
        h(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IForestModel {
    pub trees: Vec<IsolationTree>,
    pub psi: usize,
    pub seed: u64,
}

pub const IFOREST_TREES: usize = 100;

pub fn iforest_fit(x: &[Vec<f64>], trees: usize, psi: usize, seed: u64) -> Result<IForestModel, OneClassError> {
    let n = x.len();
    if n < 2 {
        return Err(OneClassError::InsufficientSamples { got: n, need: 2 });
    }
    if psi < 2 {
        return Err(OneClassError::InvalidParam(format!("psi must be at least 2, got {psi}")));
    }
    let psi = psi.min(n);
    let limit = (psi as f64).log2().ceil() as usize;
    let trees = (0..trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = stats::derived_rng(seed, t as u64);
            let sample: Vec<&[f64]> = rand::seq::index::sample(&mut rng, n, psi)
                .into_iter()
                .map(|i| x[i].as_slice())
                .collect();
            IsolationTree::grow(&sample, limit, &mut rng)
        })
        .collect();
    Ok(IForestModel { trees, psi, seed })
}

pub fn iforest_mean_path(model: &IForestModel, x: &[f64]) -> f64 {
    model.trees.iter().map(|t| t.path_length(x)).sum::<f64>() / model.trees.len() as f64
}

/// Anomaly score s = 2^(−E[h]/c(ψ)) in (0, 1].
pub fn anomaly_score(mean_path: f64, psi: usize) -> f64 {
    2f64.powf(-mean_path / c_factor(psi))
}

pub fn iforest_score(model: &IForestModel, x: &[f64]) -> f64 {
    -anomaly_score(iforest_mean_path(model, x), model.psi)
}

// ---------------------------------------------------------------- Unified model

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Params {
    Ocsvm { nu: f64, gamma: f64 },
    Lof { k: usize },
    Iforest { psi: usize },
}

impl Params {
    pub fn kind(&self) -> ClassifierKind {
        match self {
            Params::Ocsvm { .. } => ClassifierKind::Ocsvm,
            Params::Lof { .. } => ClassifierKind::Lof,
            Params::Iforest { .. } => ClassifierKind::Iforest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OneClassModel {
    Ocsvm(OcSvmModel),
    Lof(LofModel),
    Iforest(IForestModel),
}

impl OneClassModel {
    pub fn fit(x: &[Vec<f64>], params: Params, solver: &SolverConfig, seed: u64) -> Result<Self, OneClassError> {
        Ok(match params {
            Params::Ocsvm { nu, gamma } => OneClassModel::Ocsvm(ocsvm_train(x, nu, gamma, solver)?),
            Params::Lof { k } => OneClassModel::Lof(lof_fit(x, k)?),
            Params::Iforest { psi } => OneClassModel::Iforest(iforest_fit(x, IFOREST_TREES, psi, seed)?),
        })
    }

    pub fn kind(&self) -> ClassifierKind {
        match self {
            OneClassModel::Ocsvm(_) => ClassifierKind::Ocsvm,
            OneClassModel::Lof(_) => ClassifierKind::Lof,
            OneClassModel::Iforest(_) => ClassifierKind::Iforest,
        }
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        match self {
            OneClassModel::Ocsvm(m) => ocsvm_log_score(m, x),
            OneClassModel::Lof(m) => lof_score(m, x),
            OneClassModel::Iforest(m) => iforest_score(m, x),
        }
    }

    /// Scores of the points the model was fit on; LOF leaves each point out
    /// of its own neighbourhood.
    pub fn training_scores(&self, x: &[Vec<f64>]) -> Vec<f64> {
        match self {
            OneClassModel::Lof(m) => (0..m.train.len()).map(|i| lof_training_score(m, i)).collect(),
            _ => x.iter().map(|v| self.score(v)).collect(),
        }
    }
}

// ---------------------------------------------------------------- Grid search

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub nu: Vec<f64>,
    /// γ candidates as multiples of 1/(d·σ²), σ² the mean per-feature
    /// variance of the training rows.
    pub gamma_scale: Vec<f64>,
    pub k: Vec<usize>,
    pub psi: Vec<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            nu: vec![0.01, 0.05, 0.1, 0.2],
            gamma_scale: vec![0.1, 1.0, 10.0],
            k: vec![5, 10, 20],
            psi: vec![64, 128, 256],
        }
    }
}

impl GridConfig {
    /// Candidates in grid order for dimension `d` and feature variance `var`.
    pub fn candidates(&self, kind: ClassifierKind, d: usize, var: f64) -> Vec<Params> {
        let unit = d as f64 * if var > 1e-12 { var } else { 1.0 };
        match kind {
            ClassifierKind::Ocsvm => self
                .nu
                .iter()
                .flat_map(|&nu| {
                    self.gamma_scale.iter().map(move |&g| Params::Ocsvm {
                        nu,
                        gamma: g / unit,
                    })
                })
                .collect(),
            ClassifierKind::Lof => self.k.iter().map(|&k| Params::Lof { k }).collect(),
            ClassifierKind::Iforest => self.psi.iter().map(|&psi| Params::Iforest { psi }).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub params: Params,
    pub eer: f64,
}

/// Mean per-feature variance of the rows of `x`.
pub fn matrix_variance(x: &[Vec<f64>]) -> f64 {
    let Some(first) = x.first() else { return 0.0 };
    let d = first.len();
    let total: f64 = (0..d)
        .map(|j| {
            let col: Vec<f64> = x.iter().map(|r| r[j]).collect();
            stats::std_dev(&col).powi(2)
        })
        .sum();
    total / d.max(1) as f64
}

/// Exhaustive search for the lowest validation EER; ties keep the earlier
/// candidate. Candidates that cannot be fit (e.g. k ≥ n) are skipped.
pub fn grid_search(
    genuine_train: &[Vec<f64>],
    genuine_val: &[Vec<f64>],
    impostor_val: &[Vec<f64>],
    candidates: &[Params],
    solver: &SolverConfig,
    seed: u64,
) -> Result<GridResult, OneClassError> {
    if candidates.is_empty() {
        return Err(OneClassError::EmptyGrid);
    }
    for (name, set) in [
        ("genuine training", genuine_train),
        ("genuine validation", genuine_val),
        ("impostor validation", impostor_val),
    ] {
        if set.is_empty() {
            return Err(OneClassError::EmptySet(name));
        }
    }
    let mut best: Option<GridResult> = None;
    let mut last_err = None;
    for &params in candidates {
        let model = match OneClassModel::fit(genuine_train, params, solver, seed) {
            Ok(m) => m,
            Err(e @ OneClassError::InvalidParam(_)) => {
                last_err = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        let g: Vec<f64> = genuine_val.iter().map(|x| model.score(x)).collect();
        let i: Vec<f64> = impostor_val.iter().map(|x| model.score(x)).collect();
        let eer = metrics::eer(&metrics::roc(&g, &i));
        log::trace!("grid {params:?}: eer {eer:.4}");
        if best.as_ref().is_none_or(|b| eer < b.eer) {
            best = Some(GridResult { params, eer });
        }
    }
    best.ok_or_else(|| last_err.unwrap_or(OneClassError::EmptyGrid))
}

// ---------------------------------------------------------------- Enrolment

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OneClassConfig {
    pub kind: ClassifierKind,
    pub grid: GridConfig,
    pub threshold_percentile: f64,
    pub val_fraction: f64,
    pub min_samples: usize,
    pub kkt_tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for OneClassConfig {
    fn default() -> Self {
        OneClassConfig {
            kind: ClassifierKind::Ocsvm,
            grid: GridConfig::default(),
            threshold_percentile: 2.0,
            val_fraction: 0.2,
            min_samples: 20,
            kkt_tol: 1e-6,
            max_iter: 1_000_000,
            seed: 0,
        }
    }
}

impl OneClassConfig {
    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            kkt_tol: self.kkt_tol,
            max_iter: self.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserTemplate {
    pub user_id: String,
    pub kind: ClassifierKind,
    pub params: Params,
    pub model: OneClassModel,
    pub threshold: f64,
    /// Mean and standard deviation of the template's scores on a cohort of
    /// other users, used to put scores of different templates on one scale.
    /// Set from the impostor pool by [`enroll`]; see [`calibrate`].
    pub impostor_mean: f64,
    pub impostor_std: f64,
    pub val_eer: f64,
    pub embed_config_hash: String,
    pub created_at: String,
}

/// Fits a template on a user's genuine embeddings. `impostors` come from
/// other (pre-training) users and only steer the grid search.
pub fn enroll(
    user_id: &str,
    genuine: &[Vec<f64>],
    impostors: &[Vec<f64>],
    cfg: &OneClassConfig,
    embed_config_hash: &str,
    created_at: &str,
) -> Result<UserTemplate, OneClassError> {
    let need = cfg.min_samples.max(2);
    if genuine.len() < need {
        return Err(OneClassError::InsufficientSamples {
            got: genuine.len(),
            need,
        });
    }
    if impostors.is_empty() {
        return Err(OneClassError::EmptySet("impostor validation"));
    }
    let solver = cfg.solver();
    let mut order: Vec<usize> = (0..genuine.len()).collect();
    order.shuffle(&mut stats::rng(cfg.seed));
    let n_val = ((genuine.len() as f64 * cfg.val_fraction).round() as usize).clamp(1, genuine.len() - 2);
    let (val_idx, train_idx) = order.split_at(n_val);
    let train: Vec<Vec<f64>> = train_idx.iter().map(|&i| genuine[i].clone()).collect();
    let val: Vec<Vec<f64>> = val_idx.iter().map(|&i| genuine[i].clone()).collect();
    let d = genuine[0].len();
    let candidates = cfg.grid.candidates(cfg.kind, d, matrix_variance(&train));
    let best = grid_search(&train, &val, impostors, &candidates, &solver, cfg.seed)?;

    let model = OneClassModel::fit(genuine, best.params, &solver, cfg.seed)?;
    let scores = model.training_scores(genuine);
    let threshold = stats::percentile(&scores, cfg.threshold_percentile);
    let imp_scores: Vec<f64> = impostors.iter().map(|x| model.score(x)).collect();
    let impostor_mean = stats::mean(&imp_scores);
    let sd = stats::std_dev(&imp_scores);
    let impostor_std = if sd > 1e-12 { sd } else { 1.0 };
    Ok(UserTemplate {
        user_id: user_id.to_string(),
        kind: cfg.kind,
        params: best.params,
        model,
        threshold,
        impostor_mean,
        impostor_std,
        val_eer: best.eer,
        embed_config_hash: embed_config_hash.to_string(),
        created_at: created_at.to_string(),
    })
}

/// Recomputes the normalization statistics from `cohort` (typically the
/// enrolment sessions of the other enrolled users). No-op when empty.
pub fn calibrate(template: &mut UserTemplate, cohort: &[Vec<f64>]) {
    if cohort.is_empty() {
        return;
    }
    let scores: Vec<f64> = cohort.iter().map(|x| template.model.score(x)).collect();
    template.impostor_mean = stats::mean(&scores);
    let sd = stats::std_dev(&scores);
    template.impostor_std = if sd > 1e-12 { sd } else { 1.0 };
}

impl UserTemplate {
    /// Score standardized against the calibration cohort.
    pub fn normalized(&self, score: f64) -> f64 {
        (score - self.impostor_mean) / self.impostor_std
    }
}

/// (score, accept) with accept ⟺ score ≥ threshold.
pub fn verify(template: &UserTemplate, embedding: &[f64]) -> (f64, bool) {
    let score = template.model.score(embedding);
    (score, score >= template.threshold)
}
