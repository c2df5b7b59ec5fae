//! Classifiers with closed-form gradients.
//!
//! Parameters live in one flat `f64` vector. Layouts:
//!
//! * softmax: `W` (`C x d`, row-major) then `b` (`C`)
//! * mlp: `W1` (`h x d`), `b1` (`h`), `W2` (`C x h`), `b2` (`C`), tanh hidden units

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{LabeledDataset, Samples};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Softmax,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    /// Ignored for softmax.
    pub hidden_dim: usize,
    pub n_classes: usize,
    /// Standard deviation of the Gaussian weight init.
    pub init_scale: f64,
}

/// Flat model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

/// A mini-batch gradient together with the batch loss it was taken at.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEstimate {
    pub values: Vec<f64>,
    pub batch_loss: f64,
}

/// Anything that can be trained by the federation: a loss over samples and
/// its exact gradient with respect to a flat parameter vector.
pub trait Objective: Sync {
    fn param_len(&self) -> usize;

    /// Mean loss over `batch`.
    fn loss(&self, params: &[f64], batch: Samples<'_>) -> Result<f64>;

    /// Exact gradient of [`Objective::loss`].
    fn gradient(&self, params: &[f64], batch: Samples<'_>) -> Result<GradEstimate>;
}

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Writes a checkpoint: 8-byte magic, 8-byte spec fingerprint, then the
    /// values as little-endian f64.
    pub fn write_checkpoint(&self, spec: &ModelSpec, path: impl AsRef<Path>) -> Result<()> {
        if self.len() != spec.param_count() {
            return invalid(format!("{} values for a {}-parameter model", self.len(), spec.param_count()));
        }
        let mut bytes = Vec::with_capacity(16 + 8 * self.len());
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&spec.fingerprint());
        for v in &self.0 {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn read_checkpoint(spec: &ModelSpec, path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a parameter checkpoint".into()));
        }
        if bytes[8..16] != spec.fingerprint() {
            return Err(Error::Integrity("checkpoint was written for a different model".into()));
        }
        let body = &bytes[16..];
        if body.len() != 8 * spec.param_count() {
            return Err(Error::Integrity(format!(
                "checkpoint holds {} bytes of parameters, model needs {}",
                body.len(),
                8 * spec.param_count()
            )));
        }
        Ok(Self(body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect()))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MOBIFLPV";

impl ModelSpec {
    pub fn softmax(input_dim: usize, n_classes: usize) -> Self {
        Self { kind: ModelKind::Softmax, input_dim, hidden_dim: 0, n_classes, init_scale: 0.01 }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, n_classes: usize) -> Self {
        Self { kind: ModelKind::Mlp, input_dim, hidden_dim, n_classes, init_scale: 0.1 }
    }

    pub fn with_init_scale(mut self, init_scale: f64) -> Self {
        self.init_scale = init_scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.n_classes == 0 {
            return invalid("model dimensions must be positive");
        }
        if self.kind == ModelKind::Mlp && self.hidden_dim == 0 {
            return invalid("mlp hidden_dim must be positive");
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return invalid(format!("init_scale {} must be finite and nonnegative", self.init_scale));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (d, h, c) = (self.input_dim, self.hidden_dim, self.n_classes);
        match self.kind {
            ModelKind::Softmax => c * d + c,
            ModelKind::Mlp => h * d + h + c * h + c,
        }
    }

    fn fingerprint(&self) -> [u8; 8] {
        let desc = format!(
            "{:?};d={};h={};c={}",
            self.kind,
            self.input_dim,
            if self.kind == ModelKind::Mlp { self.hidden_dim } else { 0 },
            self.n_classes
        );
        let digest = Sha256::digest(desc.as_bytes());
        digest[..8].try_into().expect("sha256 is 32 bytes")
    }

    fn check(&self, params: &[f64], batch: Samples<'_>) -> Result<()> {
        if params.len() != self.param_count() {
            return invalid(format!("{} parameters for a {}-parameter model", params.len(), self.param_count()));
        }
        if batch.dim != self.input_dim {
            return invalid(format!("samples of dimension {} for input_dim {}", batch.dim, self.input_dim));
        }
        if batch.is_empty() {
            return invalid("empty batch");
        }
        if let Some(&y) = batch.labels.iter().find(|&&y| y as usize >= self.n_classes) {
            return invalid(format!("label {y} outside [0, {})", self.n_classes));
        }
        Ok(())
    }

    /// Class scores for one input. `hidden` receives the tanh activations (mlp only).
    fn logits_into(&self, params: &[f64], x: &[f64], hidden: &mut [f64], logits: &mut [f64]) {
        let (d, h, c) = (self.input_dim, self.hidden_dim, self.n_classes);
        match self.kind {
            ModelKind::Softmax => {
                let (w, b) = params.split_at(c * d);
                for k in 0..c {
                    logits[k] = b[k] + dot(&w[k * d..(k + 1) * d], x);
                }
            }
            ModelKind::Mlp => {
                let (w1, rest) = params.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(c * h);
                for j in 0..h {
                    hidden[j] = (b1[j] + dot(&w1[j * d..(j + 1) * d], x)).tanh();
                }
                for k in 0..c {
                    logits[k] = b2[k] + dot(&w2[k * h..(k + 1) * h], hidden);
                }
            }
        }
    }

    /// Predicted class; ties go to the smallest index.
    pub fn predict(&self, params: &[f64], x: &[f64]) -> usize {
        let mut hidden = vec![0.0; self.hidden_dim];
        let mut logits = vec![0.0; self.n_classes];
        self.logits_into(params, x, &mut hidden, &mut logits);
        argmax(&logits)
    }

    /// Fraction of correctly classified samples.
    pub fn evaluate(&self, params: &[f64], dataset: &LabeledDataset) -> Result<f64> {
        self.check(params, dataset.view())?;
        let mut hidden = vec![0.0; self.hidden_dim];
        let mut logits = vec![0.0; self.n_classes];
        let mut correct = 0usize;
        for i in 0..dataset.len() {
            self.logits_into(params, dataset.row(i), &mut hidden, &mut logits);
            if argmax(&logits) == dataset.labels()[i] as usize {
                correct += 1;
            }
        }
        Ok(correct as f64 / dataset.len() as f64)
    }
}

impl Objective for ModelSpec {
    fn param_len(&self) -> usize {
        self.param_count()
    }

    fn loss(&self, params: &[f64], batch: Samples<'_>) -> Result<f64> {
        self.check(params, batch)?;
        let mut hidden = vec![0.0; self.hidden_dim];
        let mut logits = vec![0.0; self.n_classes];
        let mut total = 0.0;
        for i in 0..batch.len() {
            self.logits_into(params, batch.row(i), &mut hidden, &mut logits);
            total += log_sum_exp(&logits) - logits[batch.labels[i] as usize];
        }
        Ok(total / batch.len() as f64)
    }

    fn gradient(&self, params: &[f64], batch: Samples<'_>) -> Result<GradEstimate> {
        self.check(params, batch)?;
        let (d, h, c) = (self.input_dim, self.hidden_dim, self.n_classes);
        let mut grad = vec![0.0; params.len()];
        let mut hidden = vec![0.0; h];
        let mut logits = vec![0.0; c];
        let mut delta_hidden = vec![0.0; h];
        let mut total = 0.0;

        for i in 0..batch.len() {
            let x = batch.row(i);
            let y = batch.labels[i] as usize;
            self.logits_into(params, x, &mut hidden, &mut logits);
            let lse = log_sum_exp(&logits);
            total += lse - logits[y];
            // logits now become dL/dlogits = softmax - onehot
            for (k, l) in logits.iter_mut().enumerate() {
                *l = (*l - lse).exp() - if k == y { 1.0 } else { 0.0 };
            }
            match self.kind {
                ModelKind::Softmax => {
                    let (gw, gb) = grad.split_at_mut(c * d);
                    for k in 0..c {
                        axpy(logits[k], x, &mut gw[k * d..(k + 1) * d]);
                        gb[k] += logits[k];
                    }
                }
                ModelKind::Mlp => {
                    let w2 = &params[h * d + h..h * d + h + c * h];
                    let (gw1, rest) = grad.split_at_mut(h * d);
                    let (gb1, rest) = rest.split_at_mut(h);
                    let (gw2, gb2) = rest.split_at_mut(c * h);
                    delta_hidden.iter_mut().for_each(|v| *v = 0.0);
                    for k in 0..c {
                        axpy(logits[k], &hidden, &mut gw2[k * h..(k + 1) * h]);
                        gb2[k] += logits[k];
                        axpy(logits[k], &w2[k * h..(k + 1) * h], &mut delta_hidden);
                    }
                    for j in 0..h {
                        let dj = delta_hidden[j] * (1.0 - hidden[j] * hidden[j]);
                        axpy(dj, x, &mut gw1[j * d..(j + 1) * d]);
                        gb1[j] += dj;
                    }
                }
            }
        }
        let scale = 1.0 / batch.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok(GradEstimate { values: grad, batch_loss: total * scale })
    }
}

/// `f(w) = mean_i ½‖w − x_i‖²`, whose gradient is `w − mean_i x_i`.
/// Handy as a smooth toy objective with known constants (`L = 1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuadraticBowl {
    pub dim: usize,
}

impl QuadraticBowl {
    fn check(&self, params: &[f64], batch: Samples<'_>) -> Result<()> {
        if params.len() != self.dim || batch.dim != self.dim {
            return invalid("dimension mismatch for quadratic objective");
        }
        if batch.is_empty() {
            return invalid("empty batch");
        }
        Ok(())
    }
}

impl Objective for QuadraticBowl {
    fn param_len(&self) -> usize {
        self.dim
    }

    fn loss(&self, params: &[f64], batch: Samples<'_>) -> Result<f64> {
        self.check(params, batch)?;
        let total: f64 = (0..batch.len())
            .map(|i| 0.5 * params.iter().zip(batch.row(i)).map(|(w, x)| (w - x) * (w - x)).sum::<f64>())
            .sum();
        Ok(total / batch.len() as f64)
    }

    fn gradient(&self, params: &[f64], batch: Samples<'_>) -> Result<GradEstimate> {
        let batch_loss = self.loss(params, batch)?;
        let n = batch.len() as f64;
        let values =
            (0..self.dim).map(|j| params[j] - (0..batch.len()).map(|i| batch.row(i)[j]).sum::<f64>() / n).collect();
        Ok(GradEstimate { values, batch_loss })
    }
}

/// Gaussian `N(0, init_scale²)` weights and zero biases.
pub fn init_params<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<ParamVector> {
    spec.validate()?;
    let (d, h, c) = (spec.input_dim, spec.hidden_dim, spec.n_classes);
    let mut draw =
        |n: usize| -> Vec<f64> { (0..n).map(|_| spec.init_scale * rng.sample::<f64, _>(StandardNormal)).collect() };
    let values = match spec.kind {
        ModelKind::Softmax => {
            let mut v = draw(c * d);
            v.extend(std::iter::repeat_n(0.0, c));
            v
        }
        ModelKind::Mlp => {
            let mut v = draw(h * d);
            v.extend(std::iter::repeat_n(0.0, h));
            v.extend(draw(c * h));
            v.extend(std::iter::repeat_n(0.0, c));
            v
        }
    };
    Ok(ParamVector(values))
}

pub fn loss<O: Objective + ?Sized>(obj: &O, params: &ParamVector, batch: Samples<'_>) -> Result<f64> {
    obj.loss(params.as_slice(), batch)
}

pub fn gradient<O: Objective + ?Sized>(obj: &O, params: &ParamVector, batch: Samples<'_>) -> Result<GradEstimate> {
    obj.gradient(params.as_slice(), batch)
}

/// First-order meta-gradient `g(w − ρ g(w; a); b)`: one inner step on
/// `inner`, gradient taken on `outer`. With `ρ = 0` the inner gradient is
/// skipped and the result is exactly `g(w; outer)`.
pub fn meta_gradient<O: Objective + ?Sized>(
    obj: &O,
    params: &[f64],
    inner: Samples<'_>,
    outer: Samples<'_>,
    rho: f64,
) -> Result<GradEstimate> {
    if !(rho >= 0.0 && rho.is_finite()) {
        return invalid(format!("meta step size {rho} must be finite and nonnegative"));
    }
    if rho == 0.0 {
        return obj.gradient(params, outer);
    }
    let g = obj.gradient(params, inner)?;
    let adapted: Vec<f64> = params.iter().zip(&g.values).map(|(w, gi)| w - rho * gi).collect();
    obj.gradient(&adapted, outer)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = k;
        }
    }
    best
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{synth_gaussian_classes, MiniBatch};
    use crate::rng::{stream, Purpose};

    fn toy(n: usize, d: usize, c: usize, seed: u64) -> LabeledDataset {
        synth_gaussian_classes(n, d, c, 3.0, &mut stream(seed, Purpose::Data)).unwrap()
    }

    #[test]
    fn param_counts() {
        assert_eq!(ModelSpec::softmax(784, 10).param_count(), 7850);
        assert_eq!(ModelSpec::mlp(784, 64, 10).param_count(), 784 * 64 + 64 + 64 * 10 + 10);
        let p = init_params(&ModelSpec::softmax(784, 10), &mut stream(0, Purpose::Init)).unwrap();
        assert_eq!(p.len(), 7850);
    }

    #[test]
    fn init_is_deterministic_and_scaled() {
        let spec = ModelSpec::mlp(5, 4, 3);
        let a = init_params(&spec, &mut stream(9, Purpose::Init)).unwrap();
        let b = init_params(&spec, &mut stream(9, Purpose::Init)).unwrap();
        assert_eq!(a, b);
        let z = init_params(&spec.clone().with_init_scale(0.0), &mut stream(9, Purpose::Init)).unwrap();
        assert!(z.0.iter().all(|&x| x == 0.0));
        // biases start at zero
        assert!(a.0[20..24].iter().all(|&x| x == 0.0));
        assert!(a.0[..20].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let spec = ModelSpec::softmax(4, 10);
        let data = toy(30, 4, 10, 1);
        let l = spec.loss(&vec![0.0; spec.param_count()], data.view()).unwrap();
        assert!((l - std::f64::consts::LN_10).abs() < 1e-12);
    }

    #[test]
    fn confident_model_has_tiny_loss() {
        // One input x = [1]; class-1 weight 20 gives a logit margin of 20.
        let spec = ModelSpec::softmax(1, 2);
        let params = [0.0, 20.0, 0.0, 0.0];
        let batch = MiniBatch { features: vec![1.0], labels: vec![1], dim: 1 };
        let l = spec.loss(&params, batch.view()).unwrap();
        assert!(l <= 1e-6 && l > 0.0, "{l}");
    }

    #[test]
    fn batch_loss_is_mean_of_sample_losses() {
        let spec = ModelSpec::mlp(3, 4, 3);
        let data = toy(9, 3, 3, 2);
        let p = init_params(&spec.clone().with_init_scale(0.5), &mut stream(2, Purpose::Init)).unwrap();
        let whole = spec.loss(&p.0, data.view()).unwrap();
        let mean: f64 = (0..9).map(|i| spec.loss(&p.0, data.select(&[i]).unwrap().view()).unwrap()).sum::<f64>() / 9.0;
        assert!((whole - mean).abs() < 1e-12);
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let spec = ModelSpec::softmax(3, 3);
        let data = toy(6, 3, 3, 3);
        let twice = data.select(&[0, 1, 2, 3, 4, 5, 0, 1, 2, 3, 4, 5]).unwrap();
        let p = init_params(&spec.clone().with_init_scale(0.3), &mut stream(3, Purpose::Init)).unwrap();
        let a = spec.gradient(&p.0, data.view()).unwrap();
        let b = spec.gradient(&p.0, twice.view()).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn gradient_vanishes_at_quadratic_minimum() {
        let q = QuadraticBowl { dim: 3 };
        let batch = MiniBatch { features: vec![1.0, 2.0, 3.0, 3.0, 2.0, 1.0], labels: vec![0, 0], dim: 3 };
        let g = q.gradient(&[2.0, 2.0, 2.0], batch.view()).unwrap();
        assert!(g.values.iter().map(|x| x * x).sum::<f64>().sqrt() <= 1e-8);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let spec = ModelSpec::softmax(3, 2);
        let data = toy(4, 4, 2, 4);
        assert!(spec.loss(&[0.0; 8], data.view()).is_err());
        assert!(spec.gradient(&[0.0; 5], data.view()).is_err());
    }

    #[test]
    fn meta_gradient_special_cases() {
        let spec = ModelSpec::softmax(3, 3);
        let data = toy(12, 3, 3, 5);
        let p = init_params(&spec.clone().with_init_scale(0.2), &mut stream(5, Purpose::Init)).unwrap();
        let g = spec.gradient(&p.0, data.view()).unwrap();
        let m = meta_gradient(&spec, &p.0, data.view(), data.view(), 0.0).unwrap();
        assert_eq!(g, m);

        // Quadratic bowl around the origin: g(w) = w, so g(w − ρw) = (1 − ρ)w.
        let q = QuadraticBowl { dim: 2 };
        let origin = MiniBatch { features: vec![0.0, 0.0], labels: vec![0], dim: 2 };
        let w = [0.7, -1.3];
        let m = meta_gradient(&q, &w, origin.view(), origin.view(), 0.25).unwrap();
        assert!((m.values[0] - 0.75 * 0.7).abs() < 1e-15);
        assert!((m.values[1] + 0.75 * 1.3).abs() < 1e-15);
        assert!(meta_gradient(&q, &w, origin.view(), origin.view(), -1.0).is_err());
    }

    #[test]
    fn evaluate_ties_and_perfect_model() {
        let spec = ModelSpec::softmax(2, 2);
        let data = LabeledDataset::new(vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0], 2, vec![0, 1, 0, 1], 2).unwrap();
        // All-zero model ties everywhere and predicts class 0.
        assert_eq!(spec.evaluate(&[0.0; 6], &data).unwrap(), 0.5);
        // Identity weights classify perfectly.
        assert_eq!(spec.evaluate(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0], &data).unwrap(), 1.0);
    }

    #[test]
    fn checkpoint_round_trip_and_guards() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let spec = ModelSpec::mlp(4, 3, 2);
        let p = init_params(&spec, &mut stream(1, Purpose::Init)).unwrap();
        p.write_checkpoint(&spec, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 16 + 8 * spec.param_count());
        assert_eq!(&bytes[..8], b"MOBIFLPV");
        assert_eq!(ParamVector::read_checkpoint(&spec, &path).unwrap(), p);
        assert!(matches!(ParamVector::read_checkpoint(&ModelSpec::mlp(4, 5, 2), &path), Err(Error::Integrity(_))));
        std::fs::write(&path, b"garbage").unwrap();
        assert!(matches!(ParamVector::read_checkpoint(&spec, &path), Err(Error::Format(_))));
    }
}
