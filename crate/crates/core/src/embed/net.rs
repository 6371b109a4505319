use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{assemble_input, CapDescriptor, EmbedError, EmbeddingVector, ImuDescriptor, Modality, EMBEDDING_DIM};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Mini-batch size; 0 trains on the full set each step.
    pub batch: usize,
    pub momentum: f64,
    pub seed: u64,
    pub modality: Modality,
    pub dropout: f64,
    pub leaky_slope: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: 512,
            lr: 0.01,
            epochs: 50,
            batch: 32,
            momentum: 0.9,
            seed: 0,
            modality: Modality::Fused,
            dropout: 0.3,
            leaky_slope: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub input: Vec<f64>,
    pub class: usize,
}

/// Eval-mode full-set loss and head accuracy after each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Embedder plus the temporary classification head. Operates on inputs that
/// are already z-scored.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
    pub leaky_slope: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

fn he_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let scale = (2.0 / cols as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

fn leaky(z: f64, slope: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        slope * z
    }
}

impl Network {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, classes: usize, slope: f64, rng: &mut R) -> Self {
        let w1 = he_matrix(hidden, input, rng);
        let w2 = he_matrix(output, hidden, rng);
        let w3 = he_matrix(classes, output, rng);
        Network {
            w1,
            b1: Array1::zeros(hidden),
            w2,
            b2: Array1::zeros(output),
            w3,
            b3: Array1::zeros(classes),
            leaky_slope: slope,
        }
    }

    fn zeros_like(&self) -> Gradients {
        Gradients {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
            w3: Array2::zeros(self.w3.raw_dim()),
            b3: Array1::zeros(self.b3.raw_dim()),
        }
    }

    /// Class logits for a batch (rows are samples); no dropout.
    pub fn logits(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let slope = self.leaky_slope;
        let h = (x.dot(&self.w1.t()) + &self.b1).mapv(|z| leaky(z, slope));
        let e = h.dot(&self.w2.t()) + &self.b2;
        e.dot(&self.w3.t()) + &self.b3
    }

    /// Mean cross-entropy and its gradient. `mask` holds the per-unit dropout
    /// multipliers (0 or 1/(1−p)); `None` disables dropout.
    pub fn loss_and_grad(&self, x: ArrayView2<f64>, labels: &[usize], mask: Option<ArrayView2<f64>>) -> (f64, Gradients) {
        let b = x.nrows() as f64;
        let slope = self.leaky_slope;
        let z1 = x.dot(&self.w1.t()) + &self.b1;
        let a1 = z1.mapv(|z| leaky(z, slope));
        let h = match mask {
            Some(m) => &a1 * &m,
            None => a1,
        };
        let e = h.dot(&self.w2.t()) + &self.b2;
        let logits = e.dot(&self.w3.t()) + &self.b3;
        let (loss, mut dl) = softmax_xent(&logits, labels);
        dl /= b;

        let gw3 = dl.t().dot(&e);
        let gb3 = dl.sum_axis(Axis(0));
        let de = dl.dot(&self.w3);
        let gw2 = de.t().dot(&h);
        let gb2 = de.sum_axis(Axis(0));
        let mut dz = de.dot(&self.w2);
        if let Some(m) = mask {
            dz *= &m;
        }
        ndarray::Zip::from(&mut dz).and(&z1).for_each(|d, &z| {
            if z <= 0.0 {
                *d *= slope;
            }
        });
        let gw1 = dz.t().dot(&x);
        let gb1 = dz.sum_axis(Axis(0));
        (
            loss,
            Gradients {
                w1: gw1,
                b1: gb1,
                w2: gw2,
                b2: gb2,
                w3: gw3,
                b3: gb3,
            },
        )
    }

    /// Eval-mode mean loss and accuracy.
    pub fn evaluate(&self, x: ArrayView2<f64>, labels: &[usize]) -> (f64, f64) {
        let logits = self.logits(x);
        let (loss, _) = softmax_xent(&logits, labels);
        let correct = logits
            .outer_iter()
            .zip(labels)
            .filter(|(row, &y)| argmax(row.as_slice().unwrap()) == y)
            .count();
        (loss, correct as f64 / labels.len() as f64)
    }

    /// Every parameter, in a fixed order, for finite-difference checks.
    pub fn params_mut(&mut self) -> Vec<&mut f64> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
            .chain(self.w3.iter_mut())
            .chain(self.b3.iter_mut())
            .collect()
    }
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .chain(&self.w3)
            .chain(&self.b3)
            .copied()
            .collect()
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Summed cross-entropy divided by batch size, plus (softmax − onehot) per row.
fn softmax_xent(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let mut probs = logits.clone();
    let mut loss = 0.0;
    for (mut row, &y) in probs.outer_iter_mut().zip(labels) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
        loss -= row[y].max(f64::MIN_POSITIVE).ln();
        row[y] -= 1.0;
    }
    (loss / labels.len() as f64, probs)
}

/// The trained embedder with its input normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub modality: Modality,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub leaky_slope: f64,
    pub dropout_p: f64,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
}

impl FusionModel {
    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.nrows()
    }

    /// All-zero model, mostly useful in tests.
    pub fn zeros(modality: Modality, input: usize, hidden: usize, output: usize) -> Self {
        FusionModel {
            modality,
            w1: Array2::zeros((hidden, input)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((output, hidden)),
            b2: Array1::zeros(output),
            leaky_slope: 0.01,
            dropout_p: 0.3,
            norm_mean: vec![0.0; input],
            norm_std: vec![1.0; input],
        }
    }

    fn normalize(&self, x: &[f64]) -> Result<Vec<f64>, EmbedError> {
        if x.len() != self.input_dim() {
            return Err(EmbedError::Dimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(x.iter()
            .zip(self.norm_mean.iter().zip(&self.norm_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    /// Post-activation hidden layer, with inverted dropout when `rng` is given.
    pub fn hidden<R: Rng + ?Sized>(&self, input: &[f64], rng: Option<&mut R>) -> Result<Vec<f64>, EmbedError> {
        let x = Array1::from(self.normalize(input)?);
        let slope = self.leaky_slope;
        let mut h = (self.w1.dot(&x) + &self.b1).mapv(|z| leaky(z, slope));
        if let Some(rng) = rng {
            let keep = 1.0 - self.dropout_p;
            for v in h.iter_mut() {
                if rng.random::<f64>() < self.dropout_p {
                    *v = 0.0;
                } else {
                    *v /= keep;
                }
            }
        }
        Ok(h.to_vec())
    }

    pub fn forward_input<R: Rng + ?Sized>(&self, input: &[f64], rng: Option<&mut R>) -> Result<EmbeddingVector, EmbedError> {
        let h = Array1::from(self.hidden(input, rng)?);
        Ok(EmbeddingVector((self.w2.dot(&h) + &self.b2).to_vec()))
    }

    /// Training-mode forward draws dropout masks from `rng`; pass `None` for
    /// inference.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        cap: &CapDescriptor,
        imu: &ImuDescriptor,
        rng: Option<&mut R>,
    ) -> Result<EmbeddingVector, EmbedError> {
        self.forward_input(&assemble_input(self.modality, cap, imu), rng)
    }

    pub fn embed(&self, cap: &CapDescriptor, imu: &ImuDescriptor) -> Result<EmbeddingVector, EmbedError> {
        self.forward::<stats::Rng>(cap, imu, None)
    }

    /// Inference over many raw inputs with one matrix product per layer.
    pub fn embed_batch(&self, inputs: &[Vec<f64>]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let d = self.input_dim();
        let mut x = Array2::zeros((inputs.len(), d));
        for (i, input) in inputs.iter().enumerate() {
            let row = self.normalize(input)?;
            x.row_mut(i).assign(&Array1::from(row));
        }
        let slope = self.leaky_slope;
        let h = (x.dot(&self.w1.t()) + &self.b1).mapv(|z| leaky(z, slope));
        let e = h.dot(&self.w2.t()) + &self.b2;
        Ok(e.outer_iter().map(|r| EmbeddingVector(r.to_vec())).collect())
    }
}

/// Relative lower bound on per-feature standard deviations.
pub const STD_FLOOR: f64 = 1e-3;

fn z_stats(samples: &[TrainingSample], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(&s.input) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for s in samples {
        for ((acc, v), m) in var.iter_mut().zip(&s.input).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    // Features pinned at a floor in training (e.g. silent spectrogram cells)
    // would otherwise blow up on the first input that leaves it.
    let std = var
        .iter()
        .zip(&mean)
        .map(|(v, m)| (v / n).sqrt().max(STD_FLOOR * m.abs().max(1.0)))
        .collect();
    (mean, std)
}

/// Pre-trains the embedder through a temporary softmax head over the
/// pretraining users, then drops the head.
pub fn fusion_train(samples: &[TrainingSample], cfg: &TrainConfig) -> Result<(FusionModel, Vec<EpochStats>), EmbedError> {
    let Some(first) = samples.first() else {
        return Err(EmbedError::Degenerate("no training samples".into()));
    };
    let d = first.input.len();
    if let Some(bad) = samples.iter().find(|s| s.input.len() != d) {
        return Err(EmbedError::Dimension {
            expected: d,
            got: bad.input.len(),
        });
    }
    let classes = samples.iter().map(|s| s.class).max().unwrap() + 1;
    let mut counts = vec![0usize; classes];
    for s in samples {
        counts[s.class] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(EmbedError::Degenerate("need at least two users".into()));
    }
    if let Some((c, n)) = counts.iter().enumerate().find(|(_, &n)| n > 0 && n < 10) {
        return Err(EmbedError::Degenerate(format!("user {c} has {n} samples, need at least 10")));
    }
    if !(0.0..1.0).contains(&cfg.dropout) {
        return Err(EmbedError::Degenerate(format!("dropout {} outside [0, 1)", cfg.dropout)));
    }

    let (norm_mean, norm_std) = z_stats(samples, d);
    let n = samples.len();
    let mut x = Array2::zeros((n, d));
    for (i, s) in samples.iter().enumerate() {
        for (j, v) in s.input.iter().enumerate() {
            x[[i, j]] = (v - norm_mean[j]) / norm_std[j];
        }
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.class).collect();

    let mut rng = stats::rng(cfg.seed);
    let mut net = Network::init(d, cfg.hidden, EMBEDDING_DIM, classes, cfg.leaky_slope, &mut rng);
    let mut vel = net.zeros_like();
    let batch = if cfg.batch == 0 { n } else { cfg.batch.min(n) };
    let keep = 1.0 - cfg.dropout;
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        if batch < n {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let xb = x.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mask = (cfg.dropout > 0.0).then(|| {
                Array2::from_shape_simple_fn((chunk.len(), cfg.hidden), || {
                    if rng.random::<f64>() < cfg.dropout {
                        0.0
                    } else {
                        1.0 / keep
                    }
                })
            });
            let (_, g) = net.loss_and_grad(xb.view(), &yb, mask.as_ref().map(|m| m.view()));
            sgd_step(&mut net, &mut vel, &g, cfg.lr, cfg.momentum);
        }
        let (loss, accuracy) = net.evaluate(x.view(), &labels);
        log::debug!("epoch {epoch}: loss {loss:.6} acc {accuracy:.4}");
        log.push(EpochStats { epoch, loss, accuracy });
    }

    let model = FusionModel {
        modality: cfg.modality,
        w1: net.w1,
        b1: net.b1,
        w2: net.w2,
        b2: net.b2,
        leaky_slope: cfg.leaky_slope,
        dropout_p: cfg.dropout,
        norm_mean,
        norm_std,
    };
    Ok((model, log))
}

fn sgd_step(net: &mut Network, vel: &mut Gradients, g: &Gradients, lr: f64, mu: f64) {
    fn upd<D: ndarray::Dimension>(
        p: &mut ndarray::Array<f64, D>,
        v: &mut ndarray::Array<f64, D>,
        g: &ndarray::Array<f64, D>,
        lr: f64,
        mu: f64,
    ) {
        ndarray::Zip::from(p).and(v).and(g).for_each(|p, v, &g| {
            *v = mu * *v + g;
            *p -= lr * *v;
        });
    }
    upd(&mut net.w1, &mut vel.w1, &g.w1, lr, mu);
    upd(&mut net.b1, &mut vel.b1, &g.b1, lr, mu);
    upd(&mut net.w2, &mut vel.w2, &g.w2, lr, mu);
    upd(&mut net.b2, &mut vel.b2, &g.b2, lr, mu);
    upd(&mut net.w3, &mut vel.w3, &g.w3, lr, mu);
    upd(&mut net.b3, &mut vel.b3, &g.b3, lr, mu);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn two_users(per_user: usize, d: usize, seed: u64) -> Vec<TrainingSample> {
        let mut rng = stats::rng(seed);
        (0..2 * per_user)
            .map(|i| {
                let class = i % 2;
                let shift = if class == 0 { -2.0 } else { 2.0 };
                let input = (0..d)
                    .map(|j| {
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        noise + if j < 4 { shift } else { 0.0 }
                    })
                    .collect();
                TrainingSample { input, class }
            })
            .collect()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            hidden: 32,
            epochs: 20,
            ..Default::default()
        }
    }

    #[test]
    fn zero_model_gives_zero_embedding() {
        let m = FusionModel::zeros(Modality::Fused, 324, 512, 320);
        let e = m.embed(&CapDescriptor(vec![1.0; 192]), &ImuDescriptor(vec![2.0; 132])).unwrap();
        assert_eq!(e.0, vec![0.0; 320]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = FusionModel::zeros(Modality::Fused, 324, 8, 320);
        let err = m.embed(&CapDescriptor(vec![1.0; 191]), &ImuDescriptor(vec![2.0; 132]));
        assert!(matches!(err, Err(EmbedError::Dimension { expected: 324, got: 323 })));
    }

    #[test]
    fn forward_matches_naive_arithmetic() {
        let mut rng = stats::rng(3);
        let (d, h, o) = (7, 5, 4);
        let mut m = FusionModel::zeros(Modality::Fused, d, h, o);
        m.w1 = Array2::from_shape_simple_fn((h, d), || StandardNormal.sample(&mut rng));
        m.b1 = Array1::from_shape_simple_fn(h, || StandardNormal.sample(&mut rng));
        m.w2 = Array2::from_shape_simple_fn((o, h), || StandardNormal.sample(&mut rng));
        m.b2 = Array1::from_shape_simple_fn(o, || StandardNormal.sample(&mut rng));
        m.norm_mean = (0..d).map(|i| i as f64 * 0.1).collect();
        m.norm_std = (0..d).map(|i| 1.0 + i as f64 * 0.5).collect();
        let x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();

        let z: Vec<f64> = (0..d).map(|j| (x[j] - m.norm_mean[j]) / m.norm_std[j]).collect();
        let mut hid = vec![0.0; h];
        for i in 0..h {
            let mut acc = m.b1[i];
            for j in 0..d {
                acc += m.w1[[i, j]] * z[j];
            }
            hid[i] = if acc > 0.0 { acc } else { 0.01 * acc };
        }
        let got = m.forward_input::<stats::Rng>(&x, None).unwrap();
        for k in 0..o {
            let mut acc = m.b2[k];
            for i in 0..h {
                acc += m.w2[[k, i]] * hid[i];
            }
            assert!((got.0[k] - acc).abs() < 1e-9);
        }
        let batch = m.embed_batch(&[x.clone(), x]).unwrap();
        assert!(batch[0].0.iter().zip(&got.0).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn dropout_is_unbiased() {
        let samples = two_users(10, 6, 1);
        let (m, _) = fusion_train(&samples, &TrainConfig { hidden: 16, epochs: 1, ..Default::default() }).unwrap();
        let x = &samples[0].input;
        let h = m.hidden::<stats::Rng>(x, None).unwrap();
        let mut rng = stats::rng(99);
        let mut acc = vec![0.0; h.len()];
        let trials = 10_000;
        for _ in 0..trials {
            for (a, v) in acc.iter_mut().zip(m.hidden(x, Some(&mut rng)).unwrap()) {
                *a += v;
            }
        }
        for (a, v) in acc.iter().zip(&h) {
            let mean = a / trials as f64;
            assert!((mean - v).abs() <= 0.03 * v.abs() + 1e-12, "{mean} vs {v}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let samples = two_users(5, 6, 8);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut net = Network::init(6, 7, 5, 2, 0.01, &mut rng);
        let x = Array2::from_shape_fn((5, 6), |(i, j)| samples[i].input[j]);
        let labels: Vec<usize> = samples[..5].iter().map(|s| s.class).collect();
        let mask = Array2::from_shape_fn((5, 7), |(i, j)| if (i + j) % 3 == 0 { 0.0 } else { 1.0 / 0.7 });
        let (_, g) = net.loss_and_grad(x.view(), &labels, Some(mask.view()));
        let analytic = g.flatten();
        let eps = 1e-4;
        let count = analytic.len();
        for k in 0..count {
            let orig = *net.params_mut()[k];
            *net.params_mut()[k] = orig + eps;
            let (lp, _) = net.loss_and_grad(x.view(), &labels, Some(mask.view()));
            *net.params_mut()[k] = orig - eps;
            let (lm, _) = net.loss_and_grad(x.view(), &labels, Some(mask.view()));
            *net.params_mut()[k] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let denom = analytic[k].abs().max(numeric.abs()).max(1e-6);
            assert!((analytic[k] - numeric).abs() / denom < 1e-4, "param {k}: {} vs {numeric}", analytic[k]);
        }
    }

    #[test]
    fn separable_users_are_learned() {
        let samples = two_users(20, 10, 2);
        let (_, log) = fusion_train(&samples, &small_cfg()).unwrap();
        assert!(log.last().unwrap().accuracy >= 0.99);
    }

    #[test]
    fn training_is_deterministic() {
        let samples = two_users(12, 6, 4);
        let a = fusion_train(&samples, &small_cfg()).unwrap();
        let b = fusion_train(&samples, &small_cfg()).unwrap();
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn full_batch_loss_is_non_increasing() {
        let samples = two_users(15, 8, 6);
        let cfg = TrainConfig {
            hidden: 24,
            lr: 0.001,
            epochs: 40,
            batch: 0,
            ..Default::default()
        };
        let (_, log) = fusion_train(&samples, &cfg).unwrap();
        let upticks = log.windows(2).filter(|w| w[1].loss > w[0].loss).count();
        assert!(upticks as f64 <= 0.05 * log.len() as f64, "{upticks} upticks");
    }

    #[test]
    fn single_class_is_rejected() {
        let samples: Vec<TrainingSample> = two_users(10, 4, 1).into_iter().filter(|s| s.class == 1).collect();
        assert!(matches!(fusion_train(&samples, &small_cfg()), Err(EmbedError::Degenerate(_))));
    }
}
