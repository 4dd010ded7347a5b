//! One-hidden-layer MLP classifier (784 → 64 ReLU → 10 softmax) trained by
//! mini-batch SGD on mean cross-entropy.

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use crate::data::{Dataset, CLASSES, PIXELS};
use crate::error::{Error, Result};
use crate::rng::{derive_stream, RngStream, StreamId};

pub const INPUTS: usize = PIXELS;
pub const HIDDEN: usize = 64;
pub const OUTPUTS: usize = CLASSES;
pub const PARAM_COUNT: usize = INPUTS * HIDDEN + HIDDEN + HIDDEN * OUTPUTS + OUTPUTS;

const CHECKPOINT_MAGIC: &[u8; 4] = b"TESM";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    /// `784 × 64`, input-major.
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `64 × 10`.
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Same shapes as [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Gradient {
    fn is_finite(&self) -> bool {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).all(|v| v.is_finite())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).copied().collect()
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_model(seed: u64) -> Model {
    let mut rng = derive_stream(seed, StreamId::new("nn", 0, "init"));
    let mut glorot = |rows: usize, cols: usize| {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        Array2::from_shape_simple_fn((rows, cols), || rng.uniform(-limit, limit))
    };
    let w1 = glorot(INPUTS, HIDDEN);
    let w2 = glorot(HIDDEN, OUTPUTS);
    Model {
        w1,
        b1: Array1::zeros(HIDDEN),
        w2,
        b2: Array1::zeros(OUTPUTS),
    }
}

/// `1 − max(probs)`.
pub fn uncertainty(probs: &[f64]) -> f64 {
    1.0 - probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in row.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Gather the images at `indices` into an `m × 784` matrix.
pub fn batch_matrix(ds: &Dataset, indices: &[usize]) -> Array2<f64> {
    let mut x = Array2::zeros((indices.len(), INPUTS));
    for (mut row, &i) in x.rows_mut().into_iter().zip(indices) {
        for (dst, &src) in row.iter_mut().zip(ds.image(i)) {
            *dst = f64::from(src);
        }
    }
    x
}

fn log_softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
}

impl Model {
    pub fn zeros() -> Self {
        Model {
            w1: Array2::zeros((INPUTS, HIDDEN)),
            b1: Array1::zeros(HIDDEN),
            w2: Array2::zeros((HIDDEN, OUTPUTS)),
            b2: Array1::zeros(OUTPUTS),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Parameters in checkpoint order: W1 row-major, b1, W2 row-major, b2.
    pub fn flat(&self) -> Vec<f64> {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).copied().collect()
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() != PARAM_COUNT {
            return Err(Error::Contract(format!(
                "{} parameters, expected {PARAM_COUNT}",
                values.len()
            )));
        }
        let (w1, rest) = values.split_at(INPUTS * HIDDEN);
        let (b1, rest) = rest.split_at(HIDDEN);
        let (w2, b2) = rest.split_at(HIDDEN * OUTPUTS);
        Ok(Model {
            w1: Array2::from_shape_vec((INPUTS, HIDDEN), w1.to_vec()).expect("shape"),
            b1: Array1::from(b1.to_vec()),
            w2: Array2::from_shape_vec((HIDDEN, OUTPUTS), w2.to_vec()).expect("shape"),
            b2: Array1::from(b2.to_vec()),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).all(|v| v.is_finite())
    }

    fn hidden(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = x.dot(&self.w1);
        h += &self.b1;
        h.mapv_inplace(|v| v.max(0.0));
        h
    }

    fn logits(&self, h: &Array2<f64>) -> Array2<f64> {
        let mut z = h.dot(&self.w2);
        z += &self.b2;
        z
    }

    fn log_probs(&self, x: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let h = self.hidden(x);
        let mut z = self.logits(&h);
        log_softmax_rows(&mut z);
        (h, z)
    }

    /// Row-wise class probabilities for an `m × 784` batch.
    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = self.logits(&self.hidden(x));
        for mut row in z.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        z
    }

    /// Mean cross-entropy over the batch and its gradient.
    pub fn loss_and_grad(&self, x: ArrayView2<f64>, labels: &[u8]) -> (f64, Gradient) {
        let m = labels.len();
        assert!(m > 0 && x.nrows() == m, "batch must be non-empty and match labels");
        let (h, lp) = self.log_probs(x);
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(i, &y)| lp[[i, y as usize]])
            .sum::<f64>()
            / m as f64;

        // dL/dz = (softmax − onehot) / m
        let mut dz = lp.mapv(f64::exp);
        for (i, &y) in labels.iter().enumerate() {
            dz[[i, y as usize]] -= 1.0;
        }
        dz /= m as f64;

        let w2 = h.t().dot(&dz);
        let b2 = dz.sum_axis(Axis(0));
        let mut dh = dz.dot(&self.w2.t());
        Zip::from(&mut dh).and(&h).for_each(|d, &a| {
            if a <= 0.0 {
                *d = 0.0;
            }
        });
        let w1 = x.t().dot(&dh);
        let b1 = dh.sum_axis(Axis(0));
        (loss, Gradient { w1, b1, w2, b2 })
    }

    /// `−log p[label]` for each sample.
    pub fn per_sample_loss(&self, x: ArrayView2<f64>, labels: &[u8]) -> Vec<f64> {
        let (_, lp) = self.log_probs(x);
        labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -lp[[i, y as usize]])
            .collect()
    }

    /// `θ ← θ − lr·g`. Rejects non-finite gradients without touching `self`.
    pub fn sgd_step(&mut self, grad: &Gradient, lr: f64) -> Result<()> {
        if !grad.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        self.w1.scaled_add(-lr, &grad.w1);
        self.b1.scaled_add(-lr, &grad.b1);
        self.w2.scaled_add(-lr, &grad.w2);
        self.b2.scaled_add(-lr, &grad.b2);
        if !self.is_finite() {
            return Err(Error::Numeric("parameters diverged".into()));
        }
        Ok(())
    }

    /// `(predicted class, uncertainty)` per row.
    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<(usize, f64)> {
        let p = self.forward(x);
        p.rows()
            .into_iter()
            .map(|row| {
                let probs = row.to_vec();
                (argmax(probs.iter().copied()), uncertainty(&probs))
            })
            .collect()
    }

    /// Fraction of samples whose argmax prediction matches the label.
    pub fn evaluate(&self, ds: &Dataset) -> f64 {
        const CHUNK: usize = 512;
        let mut correct = 0usize;
        let idx: Vec<usize> = (0..ds.len()).collect();
        for chunk in idx.chunks(CHUNK) {
            let x = batch_matrix(ds, chunk);
            let h = self.hidden(x.view());
            let z = self.logits(&h);
            for (row, &i) in z.rows().into_iter().zip(chunk) {
                if argmax(row.iter().copied()) == ds.label(i) as usize {
                    correct += 1;
                }
            }
        }
        correct as f64 / ds.len() as f64
    }

    /// Mean loss over a dataset.
    pub fn mean_loss(&self, ds: &Dataset) -> f64 {
        let idx: Vec<usize> = (0..ds.len()).collect();
        let mut total = 0.0;
        for chunk in idx.chunks(512) {
            let x = batch_matrix(ds, chunk);
            let labels: Vec<u8> = chunk.iter().map(|&i| ds.label(i)).collect();
            total += self.per_sample_loss(x.view(), &labels).iter().sum::<f64>();
        }
        total / ds.len() as f64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * PARAM_COUNT);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.param_count() as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for v in self.flat() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "not a TESM checkpoint"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        if u32_at(4) != CHECKPOINT_VERSION {
            return Err(Error::format(4, format!("unsupported version {}", u32_at(4))));
        }
        let count = u32_at(8) as usize;
        if count != PARAM_COUNT {
            return Err(Error::format(8, format!("param count {count}, expected {PARAM_COUNT}")));
        }
        let body = &bytes[16..];
        if body.len() != 8 * count {
            return Err(Error::format(bytes.len() as u64, "checkpoint body length mismatch"));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Model::from_flat(&values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Model::from_bytes(&fs::read(path)?)
    }

    /// Parameter-wise `self += alpha · other`.
    pub(crate) fn add_scaled(&mut self, alpha: f64, other: &Model) {
        self.w1.scaled_add(alpha, &other.w1);
        self.b1.scaled_add(alpha, &other.b1);
        self.w2.scaled_add(alpha, &other.w2);
        self.b2.scaled_add(alpha, &other.b2);
    }
}

/// Training knobs for mini-batch SGD.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub batch: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 0.05, batch: 32 }
    }
}

/// One shuffled pass of mini-batch SGD over `indices` of `ds`.
pub fn train_epoch(
    model: &mut Model,
    ds: &Dataset,
    indices: &[usize],
    sgd: SgdConfig,
    rng: &mut RngStream,
) -> Result<()> {
    if sgd.batch == 0 {
        return Err(Error::param("batch size must be >= 1"));
    }
    let mut order = indices.to_vec();
    rng.shuffle(&mut order);
    for chunk in order.chunks(sgd.batch) {
        let x = batch_matrix(ds, chunk);
        let labels: Vec<u8> = chunk.iter().map(|&i| ds.label(i)).collect();
        let (_, g) = model.loss_and_grad(x.view(), &labels);
        model.sgd_step(&g, sgd.lr)?;
    }
    Ok(())
}

/// Train a fresh classifier for `epochs` passes over `ds`.
pub fn train_classifier(ds: &Dataset, epochs: usize, sgd: SgdConfig, seed: u64) -> Result<Model> {
    let mut model = init_model(seed);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for e in 0..epochs {
        let mut rng = derive_stream(seed, StreamId::new("nn-train", e as u64, "shuffle"));
        train_epoch(&mut model, ds, &idx, sgd, &mut rng)?;
    }
    Ok(model)
}

/// Rows `[start, end)` of a batch matrix, convenience for tests and callers
/// that slice a larger matrix.
pub fn rows(x: &Array2<f64>, start: usize, end: usize) -> Array2<f64> {
    x.slice(s![start..end, ..]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, Split};

    fn random_batch(seed: u64, m: usize) -> (Array2<f64>, Vec<u8>) {
        let mut rng = derive_stream(seed, StreamId::new("test", 0, "batch"));
        let x = Array2::from_shape_simple_fn((m, INPUTS), || rng.next_f64());
        let labels = (0..m).map(|_| rng.below(10) as u8).collect();
        (x, labels)
    }

    #[test]
    fn parameter_count() {
        assert_eq!(PARAM_COUNT, 50890);
        assert_eq!(init_model(1).param_count(), 50890);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_model(9);
        assert_eq!(a, init_model(9));
        assert_ne!(a, init_model(10));
        assert!(a.b1.iter().chain(&a.b2).all(|&b| b == 0.0));
        let limit = (6.0f64 / 848.0).sqrt();
        assert!(a.w1.iter().all(|w| w.abs() < limit));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let m = init_model(2);
        let (x, _) = random_batch(3, 17);
        let p = m.forward(x.view());
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = Model::zeros();
        let (x, labels) = random_batch(4, 8);
        assert!(m.forward(x.view()).iter().all(|&p| p == 0.1));
        let (loss, _) = m.loss_and_grad(x.view(), &labels);
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!(m
            .per_sample_loss(x.view(), &labels)
            .iter()
            .all(|&l| (l - 10f64.ln()).abs() < 1e-12));
    }

    #[test]
    fn hand_set_weights_pick_class() {
        // Hidden unit j copies pixel j; output class c reads hidden unit c.
        let mut m = Model::zeros();
        for j in 0..10 {
            m.w1[[j, j]] = 1.0;
            m.w2[[j, j]] = 5.0;
        }
        for class in 0..10 {
            let mut x = Array2::zeros((1, INPUTS));
            x[[0, class]] = 1.0;
            assert_eq!(m.predict(x.view())[0].0, class);
        }
    }

    #[test]
    fn duplicated_batch_same_loss_and_grad() {
        let m = init_model(5);
        let (x, labels) = random_batch(6, 5);
        let (l1, g1) = m.loss_and_grad(x.view(), &labels);
        let x2 = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        let labels2: Vec<u8> = labels.iter().chain(&labels).copied().collect();
        let (l2, g2) = m.loss_and_grad(x2.view(), &labels2);
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.flat().iter().zip(g2.flat()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn per_sample_mean_matches_batch_loss() {
        let m = init_model(7);
        let (x, labels) = random_batch(8, 9);
        let (loss, _) = m.loss_and_grad(x.view(), &labels);
        let per = m.per_sample_loss(x.view(), &labels);
        assert!((per.iter().sum::<f64>() / 9.0 - loss).abs() < 1e-12);
        let (single, _) = m.loss_and_grad(rows(&x, 0, 1).view(), &labels[..1]);
        assert!((per[0] - single).abs() < 1e-12);
    }

    #[test]
    fn mislabeled_copy_has_larger_loss() {
        let ds = synth_dataset(400, 21).unwrap();
        let m = train_classifier(&ds, 3, SgdConfig::default(), 1).unwrap();
        let x = batch_matrix(&ds, &[0, 0]);
        let p = m.predict(rows(&x, 0, 1).view())[0].0 as u8;
        let wrong = (p + 1) % 10;
        let losses = m.per_sample_loss(x.view(), &[p, wrong]);
        assert!(losses[1] > losses[0]);
    }

    #[test]
    fn sgd_step_linearity_and_zero_lr() {
        let mut m = init_model(3);
        let (x, labels) = random_batch(9, 4);
        let (_, g) = m.loss_and_grad(x.view(), &labels);
        let before = m.clone();
        m.sgd_step(&g, 0.0).unwrap();
        assert_eq!(m, before);
        m.sgd_step(&g, 0.1).unwrap();
        m.sgd_step(&g, 0.1).unwrap();
        for ((a, b), gv) in m.flat().iter().zip(before.flat()).zip(g.flat()) {
            assert!((a - (b - 0.2 * gv)).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut m = init_model(3);
        let (x, labels) = random_batch(9, 4);
        let (_, mut g) = m.loss_and_grad(x.view(), &labels);
        g.b2[0] = f64::NAN;
        let before = m.clone();
        assert!(matches!(m.sgd_step(&g, 0.1), Err(Error::Numeric(_))));
        assert_eq!(m, before);
    }

    #[test]
    fn full_batch_descent_fits_small_set() {
        let ds = synth_dataset(100, 31).unwrap();
        let idx: Vec<usize> = (0..100).collect();
        let x = batch_matrix(&ds, &idx);
        let mut m = init_model(4);
        let mut loss = 0.0;
        for _ in 0..200 {
            let (l, g) = m.loss_and_grad(x.view(), ds.labels());
            loss = l;
            m.sgd_step(&g, 0.5).unwrap();
        }
        assert!(loss < 0.1, "loss {loss}");
    }

    #[test]
    fn loss_monotone_at_small_lr() {
        let ds = synth_dataset(30, 12).unwrap();
        let idx: Vec<usize> = (0..30).collect();
        let x = batch_matrix(&ds, &idx);
        let mut m = init_model(8);
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let (l, g) = m.loss_and_grad(x.view(), ds.labels());
            assert!(l <= prev + 1e-12, "{l} > {prev}");
            prev = l;
            m.sgd_step(&g, 0.01).unwrap();
        }
    }

    #[test]
    fn forward_is_permutation_equivariant() {
        let m = init_model(11);
        let (x, _) = random_batch(12, 6);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let xp = x.select(Axis(0), &perm);
        let p = m.forward(x.view());
        let pp = m.forward(xp.view());
        for (k, &i) in perm.iter().enumerate() {
            for c in 0..OUTPUTS {
                assert!((pp[[k, c]] - p[[i, c]]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn evaluate_tie_rule_and_lookup() {
        let ds = synth_dataset(200, 5).unwrap();
        let zero_acc = Model::zeros().evaluate(&ds);
        let freq0 = ds.histogram()[0] as f64 / ds.len() as f64;
        assert_eq!(zero_acc, freq0);

        // Three samples whose first pixel differs; a lookup model keys on it.
        let mut images = vec![0.0f32; 3 * PIXELS];
        for k in 0..3 {
            images[k * PIXELS + k] = 1.0;
        }
        let tiny = Dataset::new(images, vec![4, 7, 2], Split::Test).unwrap();
        let mut m = Model::zeros();
        for (k, class) in [(0usize, 4usize), (1, 7), (2, 2)] {
            m.w1[[k, k]] = 1.0;
            m.w2[[k, class]] = 10.0;
        }
        assert_eq!(m.evaluate(&tiny), 1.0);
    }

    #[test]
    fn uncertainty_bounds() {
        let mut one_hot = [0.0; 10];
        one_hot[3] = 1.0;
        assert_eq!(uncertainty(&one_hot), 0.0);
        assert!((uncertainty(&[0.1; 10]) - 0.9).abs() < 1e-12);
        let m = init_model(2);
        let (x, _) = random_batch(1, 50);
        for (_, u) in m.predict(x.view()) {
            assert!((0.0..=0.9 + 1e-12).contains(&u));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = init_model(13);
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"TESM");
        assert_eq!(bytes.len(), 16 + 8 * PARAM_COUNT);
        assert_eq!(Model::from_bytes(&bytes).unwrap(), m);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Model::from_bytes(&bad).is_err());
        assert!(Model::from_bytes(&bytes[..100]).is_err());
    }
}
