//! Online identity classifier: multinomial logistic regression over pooled
//! patch features, trained with Adam.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};

use super::buffer::TrainBuffer;
use super::patch::{featurize, AugmentationOp, Patch, FEATURE_DIM, POOLED_SIZE};
use super::Label;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierConfig {
    /// Side of the pooled feature grid; only 20 (4x4 pooling of 80x80) is supported.
    pub feature_downsample: usize,
    pub learning_rate: f64,
    /// Multiplier on the loss of background samples.
    pub background_loss_scale: f64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            feature_downsample: POOLED_SIZE,
            learning_rate: 0.00005,
            background_loss_scale: 0.1,
            batch_size: 64,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_downsample != POOLED_SIZE {
            return Err(Error::Config(format!("feature_downsample must be {POOLED_SIZE}")));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("learning_rate and batch_size must be positive".into()));
        }
        if !(self.background_loss_scale > 0.0 && self.background_loss_scale <= 1.0) {
            return Err(Error::Config("background_loss_scale must lie in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_epsilon > 0.0) {
            return Err(Error::Config("invalid Adam hyper-parameters".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Scalar> AdamParams<T> {
    pub fn from_config(cfg: &ClassifierConfig) -> Self {
        AdamParams {
            lr: T::c(cfg.learning_rate),
            beta1: T::c(cfg.adam_beta1),
            beta2: T::c(cfg.adam_beta2),
            epsilon: T::c(cfg.adam_epsilon),
        }
    }
}

/// One bias-corrected Adam step; `step` is the 1-based update count.
pub fn adam_update<T: Scalar>(params: &mut [T], grads: &[T], m: &mut [T], v: &mut [T], step: u64, p: &AdamParams<T>) {
    let t = step.min(i32::MAX as u64) as i32;
    let c1 = T::one() - p.beta1.powi(t);
    let c2 = T::one() - p.beta2.powi(t);
    let one = T::one();
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = p.beta1 * m[i] + (one - p.beta1) * g;
        v[i] = p.beta2 * v[i] + (one - p.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= p.lr * m_hat / (v_hat.sqrt() + p.epsilon);
    }
}

/// In-place softmax with max subtraction. Returns log-sum-exp of the input.
pub fn softmax_in_place<T: Scalar>(values: &mut [T]) -> T {
    let max = values.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

/// One labelled training example.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub features: Vec<T>,
    pub row: usize,
    pub weight: T,
}

/// Interface the joiner trains and queries. Probabilities are reported in
/// `f64` regardless of the model's internal precision.
pub trait AppearanceModel: Send + Sync {
    fn labels(&self) -> &[Label];
    fn add_label(&mut self, label: Label) -> Result<()>;
    fn remove_label(&mut self, label: Label) -> Result<()>;
    /// One optimizer step on a random batch; returns the pre-update loss.
    fn train_step(&mut self, buffer: &TrainBuffer, rng: &mut dyn RngCore) -> Result<f64>;
    /// Probability for every label, aligned with [`AppearanceModel::labels`].
    fn score(&self, patch: &Patch) -> Vec<f64>;

    fn probability(&self, patch: &Patch, label: Label) -> Option<f64> {
        let row = self.labels().iter().position(|&l| l == label)?;
        Some(self.score(patch)[row])
    }
}

/// Linear softmax model. Rows follow label insertion order; each row holds
/// `FEATURE_DIM` weights with the bias last.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSoftmax<T: Scalar> {
    cfg: ClassifierConfig,
    labels: Vec<Label>,
    index: BTreeMap<Label, usize>,
    weights: Vec<T>,
    adam_m: Vec<T>,
    adam_v: Vec<T>,
    step_count: u64,
}

impl<T: Scalar> LinearSoftmax<T> {
    pub fn new(cfg: ClassifierConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(LinearSoftmax {
            cfg,
            labels: Vec::new(),
            index: BTreeMap::new(),
            weights: Vec::new(),
            adam_m: Vec::new(),
            adam_v: Vec::new(),
            step_count: 0,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn row_of(&self, label: Label) -> Option<usize> {
        self.index.get(&label).copied()
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [T] {
        &mut self.weights
    }

    pub fn moments(&self) -> (&[T], &[T]) {
        (&self.adam_m, &self.adam_v)
    }

    fn reindex(&mut self) {
        self.index = self.labels.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    }

    pub fn insert_label(&mut self, label: Label) -> Result<()> {
        if self.index.contains_key(&label) {
            return Err(Error::DuplicateLabel(label.to_string()));
        }
        self.labels.push(label);
        self.index.insert(label, self.labels.len() - 1);
        for buf in [&mut self.weights, &mut self.adam_m, &mut self.adam_v] {
            buf.extend(std::iter::repeat_n(T::zero(), FEATURE_DIM));
        }
        Ok(())
    }

    pub fn delete_label(&mut self, label: Label) -> Result<()> {
        let row = self.row_of(label).ok_or_else(|| Error::UnknownLabel(label.to_string()))?;
        self.labels.remove(row);
        for buf in [&mut self.weights, &mut self.adam_m, &mut self.adam_v] {
            buf.drain(row * FEATURE_DIM..(row + 1) * FEATURE_DIM);
        }
        self.reindex();
        Ok(())
    }

    pub fn logits(&self, features: &[T]) -> Vec<T> {
        self.weights.chunks_exact(FEATURE_DIM).map(|row| dot(row, features)).collect()
    }

    pub fn probabilities(&self, features: &[T]) -> Vec<T> {
        let mut z = self.logits(features);
        if !z.is_empty() {
            softmax_in_place(&mut z);
        }
        z
    }

    /// Weighted mean cross-entropy over `batch` and its gradient with respect
    /// to the flattened weights. The mean divides by the batch size.
    pub fn loss_and_gradient(&self, batch: &[Sample<T>]) -> (T, Vec<T>) {
        let mut grad = vec![T::zero(); self.weights.len()];
        let loss = self.accumulate_gradient(batch, &mut grad);
        (loss, grad)
    }

    fn accumulate_gradient(&self, batch: &[Sample<T>], grad: &mut [T]) -> T {
        let n = T::from_usize_lossy(batch.len().max(1));
        let mut loss = T::zero();
        let mut z = Vec::with_capacity(self.labels.len());
        for s in batch {
            z.clear();
            z.extend(self.weights.chunks_exact(FEATURE_DIM).map(|row| dot(row, &s.features)));
            let target_logit = z[s.row];
            let lse = softmax_in_place(&mut z);
            loss += s.weight * (lse - target_logit);
            for (k, g_row) in grad.chunks_exact_mut(FEATURE_DIM).enumerate() {
                let indicator = if k == s.row { T::one() } else { T::zero() };
                let coef = s.weight * (z[k] - indicator) / n;
                for (g, &x) in g_row.iter_mut().zip(&s.features) {
                    *g += coef * x;
                }
            }
        }
        loss / n
    }

    /// Draws a batch: uniform (label, slot), uniform augmentation per sample.
    pub fn sample_batch(&self, buffer: &TrainBuffer, rng: &mut dyn RngCore) -> Result<Vec<Sample<T>>> {
        let ops = AugmentationOp::all();
        let bg_weight = T::c(self.cfg.background_loss_scale);
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let (label, entry) = buffer.sample(rng).ok_or(Error::TooFewLabels(0))?;
            let op = ops[rng.random_range(0..ops.len())];
            let row = self.row_of(label).ok_or_else(|| Error::UnknownLabel(label.to_string()))?;
            let mut features = Vec::with_capacity(FEATURE_DIM);
            entry.pooled.features_into(op, &mut features);
            let weight = if label == Label::Background { bg_weight } else { T::one() };
            batch.push(Sample { features, row, weight });
        }
        Ok(batch)
    }

    pub fn step(&mut self, buffer: &TrainBuffer, rng: &mut dyn RngCore) -> Result<T> {
        let labels = self.labels.len().min(buffer.num_labels());
        if labels < 2 {
            return Err(Error::TooFewLabels(labels));
        }
        let batch = self.sample_batch(buffer, rng)?;
        let (loss, grad) = self.loss_and_gradient(&batch);
        self.step_count += 1;
        let params = AdamParams::from_config(&self.cfg);
        adam_update(&mut self.weights, &grad, &mut self.adam_m, &mut self.adam_v, self.step_count, &params);
        Ok(loss)
    }

    pub fn score_patch(&self, patch: &Patch) -> Vec<T> {
        self.probabilities(&featurize(patch))
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    // fixed left-to-right order keeps results reproducible
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

impl<T: Scalar> AppearanceModel for LinearSoftmax<T> {
    fn labels(&self) -> &[Label] {
        &self.labels
    }

    fn add_label(&mut self, label: Label) -> Result<()> {
        self.insert_label(label)
    }

    fn remove_label(&mut self, label: Label) -> Result<()> {
        self.delete_label(label)
    }

    fn train_step(&mut self, buffer: &TrainBuffer, rng: &mut dyn RngCore) -> Result<f64> {
        self.step(buffer, rng).map(Scalar::to_f64_lossy)
    }

    fn score(&self, patch: &Patch) -> Vec<f64> {
        self.score_patch(patch).into_iter().map(Scalar::to_f64_lossy).collect()
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"HVCK";
const CHECKPOINT_VERSION: u32 = 1;

impl<T: Scalar> LinearSoftmax<T> {
    /// Serializes labels, weights, moments and step count. See the README for
    /// the byte layout.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(T::BYTES as u8);
        out.extend_from_slice(&(self.labels.len() as u32).to_le_bytes());
        out.extend_from_slice(&(FEATURE_DIM as u32).to_le_bytes());
        out.extend_from_slice(&self.step_count.to_le_bytes());
        for label in &self.labels {
            let (tag, id) = match *label {
                Label::Background => (0u8, 0u64),
                Label::Identity(id) => (1u8, id),
            };
            out.push(tag);
            out.extend_from_slice(&id.to_le_bytes());
        }
        for buf in [&self.weights, &self.adam_m, &self.adam_v] {
            for &v in buf.iter() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_checkpoint(bytes: &[u8], cfg: ClassifierConfig) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4).ok_or_else(|| bad("truncated"))? != CHECKPOINT_MAGIC {
            return Err(bad("wrong magic"));
        }
        let version = cur.u32().ok_or_else(|| bad("truncated"))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let width = cur.take(1).ok_or_else(|| bad("truncated"))?[0] as usize;
        if width != T::BYTES {
            return Err(Error::Checkpoint(format!("scalar width {width} != {}", T::BYTES)));
        }
        let rows = cur.u32().ok_or_else(|| bad("truncated"))? as usize;
        let dim = cur.u32().ok_or_else(|| bad("truncated"))? as usize;
        if dim != FEATURE_DIM {
            return Err(Error::Checkpoint(format!("feature dim {dim} != {FEATURE_DIM}")));
        }
        let step_count = cur.u64().ok_or_else(|| bad("truncated"))?;
        let mut model = LinearSoftmax::new(cfg)?;
        for _ in 0..rows {
            let tag = cur.take(1).ok_or_else(|| bad("truncated"))?[0];
            let id = cur.u64().ok_or_else(|| bad("truncated"))?;
            let label = match tag {
                0 => Label::Background,
                1 => Label::Identity(id),
                t => return Err(Error::Checkpoint(format!("bad label tag {t}"))),
            };
            model.insert_label(label)?;
        }
        for buf in [&mut model.weights, &mut model.adam_m, &mut model.adam_v] {
            for v in buf.iter_mut() {
                *v = T::read_le(cur.take(T::BYTES).ok_or_else(|| bad("truncated"))?);
            }
        }
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        model.step_count = step_count;
        Ok(model)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn model_with(labels: &[Label]) -> LinearSoftmax<f64> {
        let mut m = LinearSoftmax::new(ClassifierConfig::default()).unwrap();
        for &l in labels {
            m.insert_label(l).unwrap();
        }
        m
    }

    #[test]
    fn adam_scalar_hand_case() {
        let p = AdamParams { lr: 0.00005, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 };
        let (mut w, mut m, mut v) = ([1.0f64], [0.0], [0.0]);
        adam_update(&mut w, &[0.5], &mut m, &mut v, 1, &p);
        assert!((m[0] - 0.05).abs() < 1e-15);
        assert!((v[0] - 0.00025).abs() < 1e-15);
        let expected = 1.0 - 0.00005 * (0.05 / 0.1) / ((0.00025f64 / 0.001).sqrt() + 1e-8);
        assert!((w[0] - expected).abs() < 1e-15);
        assert!((w[0] - 0.99995).abs() < 1e-10);
    }

    #[test]
    fn zero_weights_score_uniformly() {
        let m = model_with(&[Label::Background, Label::Identity(0), Label::Identity(1), Label::Identity(2)]);
        let p = m.score_patch(&Patch::filled(30));
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut a = vec![0.3f64, -1.2, 2.5];
        let mut b: Vec<f64> = a.iter().map(|v| v + 17.0).collect();
        softmax_in_place(&mut a);
        softmax_in_place(&mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn add_remove_labels() {
        let mut m = model_with(&[Label::Background, Label::Identity(3)]);
        let before = m.clone();
        m.insert_label(Label::Identity(4)).unwrap();
        assert_eq!(m.weights().len(), 3 * FEATURE_DIM);
        assert!(matches!(m.insert_label(Label::Identity(4)), Err(Error::DuplicateLabel(_))));
        m.delete_label(Label::Identity(4)).unwrap();
        assert_eq!(m, before);
        assert!(matches!(m.delete_label(Label::Identity(4)), Err(Error::UnknownLabel(_))));
    }

    #[test]
    fn new_zero_row_gets_exp_zero_share() {
        let mut m = model_with(&[Label::Background, Label::Identity(0)]);
        let mut px = vec![0u8; 6400];
        px[..3200].fill(200);
        let patch = Patch::from_pixels(px, 0, (0.0, 0.0)).unwrap();
        let x: Vec<f64> = featurize(&patch);
        for (w, f) in m.weights_mut()[FEATURE_DIM..].iter_mut().zip(&x) {
            *w = 3.0 * f;
        }
        let z = m.logits(&x);
        m.insert_label(Label::Identity(1)).unwrap();
        let p = m.score_patch(&patch);
        let denom = z[0].exp() + z[1].exp() + 1.0;
        assert!((p[2] - 1.0 / denom).abs() < 1e-12);
        // dropping the argmax promotes the runner-up
        let argmax = |p: &[f64]| p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(m.labels()[argmax(&p)], Label::Identity(0));
        m.delete_label(Label::Identity(0)).unwrap();
        let p = m.score_patch(&patch);
        assert_eq!(m.labels()[argmax(&p)], Label::Identity(1));
    }

    #[test]
    fn training_needs_two_labels() {
        let mut m: LinearSoftmax<f32> = LinearSoftmax::new(ClassifierConfig::default()).unwrap();
        m.insert_label(Label::Background).unwrap();
        let mut buf = TrainBuffer::new(4).unwrap();
        buf.insert_label(Label::Background, vec![Patch::filled(1)]).unwrap();
        let mut rng = substream(0, "t");
        assert!(matches!(m.step(&buf, &mut rng), Err(Error::TooFewLabels(1))));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut m: LinearSoftmax<f32> = LinearSoftmax::new(ClassifierConfig::default()).unwrap();
        let mut buf = TrainBuffer::new(8).unwrap();
        for (l, v) in [(Label::Background, 20u8), (Label::Identity(7), 200)] {
            m.insert_label(l).unwrap();
            buf.insert_label(l, vec![Patch::filled(v), Patch::filled(v / 2)]).unwrap();
        }
        let mut rng = substream(1, "ck");
        for _ in 0..5 {
            m.step(&buf, &mut rng).unwrap();
        }
        let bytes = m.to_checkpoint();
        let back = LinearSoftmax::<f32>::from_checkpoint(&bytes, ClassifierConfig::default()).unwrap();
        assert_eq!(back.to_checkpoint(), bytes);
        assert_eq!(back.step_count(), 5);
        assert!(LinearSoftmax::<f64>::from_checkpoint(&bytes, ClassifierConfig::default()).is_err());
        assert!(LinearSoftmax::<f32>::from_checkpoint(&bytes[..bytes.len() - 1], ClassifierConfig::default()).is_err());
    }
}
