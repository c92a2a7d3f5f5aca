//! Dense feed-forward models with hand-written reverse-mode gradients.
//!
//! Parameters live in one flat vector. Layer `l` stores its weight matrix
//! (row-major, `out x in`) followed by its bias. Hidden layers use ReLU with
//! subgradient 0 at the kink; the output layer is linear and feeds either a
//! softmax cross-entropy or a squared-error loss against the one-hot target.

use std::fs;
use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{ensure_len, Error, Result};
use crate::numkit::{norm2_unchecked, uniform01, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    CrossEntropy,
    /// `0.5 * ||f(x) - onehot(y)||²`
    Mse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Input width first, class count last.
    pub widths: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default = "default_bias")]
    pub bias: bool,
}

fn default_activation() -> Activation {
    Activation::Relu
}
fn default_loss() -> LossKind {
    LossKind::CrossEntropy
}
fn default_bias() -> bool {
    true
}

impl ModelSpec {
    /// Multinomial logistic regression.
    pub fn logistic(n_features: usize, n_classes: usize) -> Self {
        Self::mlp(vec![n_features, n_classes])
    }

    pub fn mlp(widths: Vec<usize>) -> Self {
        Self {
            widths,
            activation: Activation::Relu,
            loss: LossKind::CrossEntropy,
            bias: true,
        }
    }

    pub fn with_loss(mut self, loss: LossKind) -> Self {
        self.loss = loss;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn n_inputs(&self) -> usize {
        self.widths[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.widths
            .windows(2)
            .map(|w| w[0] * w[1] + if self.bias { w[1] } else { 0 })
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Parameter(
                "model needs at least input and output widths".into(),
            ));
        }
        if self.widths.contains(&0) {
            return Err(Error::Parameter("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        if self.n_inputs() != dataset.n_features() {
            return Err(Error::Dimension {
                expected: self.n_inputs(),
                actual: dataset.n_features(),
            });
        }
        if self.n_outputs() < dataset.n_classes() {
            return Err(Error::Parameter(format!(
                "model has {} outputs but dataset has {} classes",
                self.n_outputs(),
                dataset.n_classes()
            )));
        }
        Ok(())
    }
}

/// Flat parameter state of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Little-endian IEEE-754 doubles, no header.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.0.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() % 8 != 0 {
            return Err(Error::Format(format!(
                "parameter blob of {} bytes is not a multiple of 8",
                bytes.len()
            )));
        }
        Ok(Self(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ))
    }

    /// Writes `path` (raw doubles) and `path.json` (the model spec).
    pub fn save(&self, path: impl AsRef<Path>, spec: &ModelSpec) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        let sidecar = sidecar_path(path);
        let json = serde_json::to_string_pretty(spec).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, ModelSpec)> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let sidecar = sidecar_path(path);
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let spec: ModelSpec =
            serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?;
        let params = Self::from_le_bytes(&bytes)?;
        ensure_len(spec.param_count(), params.len())?;
        Ok((params, spec))
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    n_in: usize,
    n_out: usize,
    w: usize,
    b: Option<usize>,
}

/// A validated [`ModelSpec`] with its parameter layout resolved.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
    dim: usize,
}

const HVP_STEP: f64 = 1e-5;

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.widths.len() - 1);
        let mut off = 0;
        for w in spec.widths.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let w_off = off;
            off += n_in * n_out;
            let b = spec.bias.then(|| {
                let b = off;
                off += n_out;
                b
            });
            layers.push(Layer {
                n_in,
                n_out,
                w: w_off,
                b,
            });
        }
        Ok(Self {
            spec,
            layers,
            dim: off,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Total parameter count `d`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Uniform in `±1/sqrt(fan_in)` for weights and biases alike.
    pub fn init_params(&self, rng: &RngState) -> ParamVector {
        let mut gen = rng.generator();
        let mut theta = vec![0.0; self.dim];
        for layer in &self.layers {
            let bound = 1.0 / (layer.n_in as f64).sqrt();
            let end = layer.b.map_or(layer.w + layer.n_in * layer.n_out, |b| b + layer.n_out);
            for v in &mut theta[layer.w..end] {
                *v = bound * (2.0 * uniform01(&mut gen) - 1.0);
            }
        }
        ParamVector(theta)
    }

    fn check(&self, params: &[f64], x: &[f64]) -> Result<()> {
        ensure_len(self.dim, params.len())?;
        ensure_len(self.spec.n_inputs(), x.len())
    }

    /// Returns pre-activations of every layer; the last entry holds the logits.
    fn forward_trace(&self, params: &[f64], x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check(params, x)?;
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut input: Vec<f64> = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let w = &params[layer.w..layer.w + layer.n_in * layer.n_out];
            let mut z = match layer.b {
                Some(b) => params[b..b + layer.n_out].to_vec(),
                None => vec![0.0; layer.n_out],
            };
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &w[o * layer.n_in..(o + 1) * layer.n_in];
                *zo += row.iter().zip(&input).map(|(a, b)| a * b).sum::<f64>();
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite activation in layer {l}")));
            }
            if l + 1 < self.layers.len() {
                input = z.iter().map(|v| v.max(0.0)).collect();
            }
            pre.push(z);
        }
        Ok(pre)
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(params, x)?.pop().unwrap())
    }

    /// Loss value and its gradient with respect to the logits.
    fn loss_and_output_grad(&self, logits: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
        if y >= logits.len() {
            return Err(Error::Parameter(format!(
                "label {y} outside {} outputs",
                logits.len()
            )));
        }
        match self.spec.loss {
            LossKind::CrossEntropy => {
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                // log1p keeps precision when the true class dominates.
                let loss = if logits[y] == max {
                    let rest: f64 = logits
                        .iter()
                        .enumerate()
                        .filter(|&(c, _)| c != y)
                        .map(|(_, z)| (z - max).exp())
                        .sum();
                    rest.ln_1p()
                } else {
                    sum.ln() + max - logits[y]
                };
                let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
                grad[y] -= 1.0;
                Ok((loss, grad))
            }
            LossKind::Mse => {
                let grad: Vec<f64> = logits
                    .iter()
                    .enumerate()
                    .map(|(c, z)| z - if c == y { 1.0 } else { 0.0 })
                    .collect();
                let loss = 0.5 * grad.iter().map(|r| r * r).sum::<f64>();
                Ok((loss, grad))
            }
        }
    }

    pub fn sample_loss(&self, params: &[f64], x: &[f64], y: usize) -> Result<f64> {
        let logits = self.forward(params, x)?;
        Ok(self.loss_and_output_grad(&logits, y)?.0)
    }

    /// Adds `scale * grad L(x, y)` into `out` and returns the sample loss.
    pub fn accumulate_grad(
        &self,
        params: &[f64],
        x: &[f64],
        y: usize,
        scale: f64,
        out: &mut [f64],
    ) -> Result<f64> {
        ensure_len(self.dim, out.len())?;
        let pre = self.forward_trace(params, x)?;
        let (loss, mut delta) = self.loss_and_output_grad(pre.last().unwrap(), y)?;
        for l in (0..self.layers.len()).rev() {
            let layer = self.layers[l];
            if let Some(b) = layer.b {
                for (g, d) in out[b..b + layer.n_out].iter_mut().zip(&delta) {
                    *g += scale * d;
                }
            }
            for o in 0..layer.n_out {
                let d = scale * delta[o];
                if d == 0.0 {
                    continue;
                }
                let gw = &mut out[layer.w + o * layer.n_in..layer.w + (o + 1) * layer.n_in];
                if l == 0 {
                    for (g, a) in gw.iter_mut().zip(x) {
                        *g += d * a;
                    }
                } else {
                    for (g, z) in gw.iter_mut().zip(&pre[l - 1]) {
                        *g += d * z.max(0.0);
                    }
                }
            }
            if l > 0 {
                let w = &params[layer.w..layer.w + layer.n_in * layer.n_out];
                let mut back = vec![0.0; layer.n_in];
                for (o, d) in delta.iter().enumerate() {
                    for (bk, wv) in back.iter_mut().zip(&w[o * layer.n_in..(o + 1) * layer.n_in]) {
                        *bk += d * wv;
                    }
                }
                for (bk, z) in back.iter_mut().zip(&pre[l - 1]) {
                    if *z <= 0.0 {
                        *bk = 0.0;
                    }
                }
                delta = back;
            }
        }
        Ok(loss)
    }

    pub fn per_sample_grad(&self, params: &[f64], x: &[f64], y: usize) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.dim];
        self.accumulate_grad(params, x, y, 1.0, &mut g)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        Ok(g)
    }

    /// Mean loss over `batch` (row positions into `dataset`).
    pub fn batch_loss(&self, params: &[f64], dataset: &Dataset, batch: &[usize]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Parameter("empty batch".into()));
        }
        let mut total = 0.0;
        for &i in batch {
            total += self.sample_loss(params, dataset.row(i), dataset.label(i))?;
        }
        Ok(total / batch.len() as f64)
    }

    /// Mean per-sample gradient over `batch`, summed in batch order.
    pub fn batch_grad(&self, params: &[f64], dataset: &Dataset, batch: &[usize]) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Err(Error::Parameter("empty batch".into()));
        }
        let mut g = vec![0.0; self.dim];
        for &i in batch {
            self.accumulate_grad(params, dataset.row(i), dataset.label(i), 1.0, &mut g)?;
        }
        let inv = 1.0 / batch.len() as f64;
        g.iter_mut().for_each(|v| *v *= inv);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite batch gradient".into()));
        }
        Ok(g)
    }

    /// Hessian of the mean batch loss applied to `v`, by a central difference
    /// of analytic gradients along `v / ||v||` with step `1e-5`.
    pub fn hessian_vector_product(
        &self,
        params: &[f64],
        dataset: &Dataset,
        batch: &[usize],
        v: &[f64],
    ) -> Result<Vec<f64>> {
        ensure_len(self.dim, v.len())?;
        ensure_len(self.dim, params.len())?;
        let vn = norm2_unchecked(v);
        if !vn.is_finite() {
            return Err(Error::Numeric("non-finite direction".into()));
        }
        if vn == 0.0 {
            return Ok(vec![0.0; self.dim]);
        }
        let h = HVP_STEP;
        let shifted = |sign: f64| -> Vec<f64> {
            params
                .iter()
                .zip(v)
                .map(|(p, d)| p + sign * h * d / vn)
                .collect()
        };
        let gp = self.batch_grad(&shifted(1.0), dataset, batch)?;
        let gm = self.batch_grad(&shifted(-1.0), dataset, batch)?;
        let k = vn / (2.0 * h);
        let hv: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) * k).collect();
        if hv.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite Hessian-vector product".into()));
        }
        Ok(hv)
    }

    pub fn predict(&self, params: &[f64], x: &[f64]) -> Result<usize> {
        let logits = self.forward(params, x)?;
        Ok(logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (c, &z)| if z > best.1 { (c, z) } else { best })
            .0)
    }

    pub fn accuracy(&self, params: &[f64], dataset: &Dataset) -> Result<f64> {
        let mut hits = 0usize;
        for i in 0..dataset.len() {
            if self.predict(params, dataset.row(i))? == dataset.label(i) {
                hits += 1;
            }
        }
        Ok(hits as f64 / dataset.len().max(1) as f64)
    }

    /// Mean loss over every row of `dataset`.
    pub fn dataset_loss(&self, params: &[f64], dataset: &Dataset) -> Result<f64> {
        let all: Vec<usize> = (0..dataset.len()).collect();
        self.batch_loss(params, dataset, &all)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth_gaussian_blobs;

    #[test]
    fn parameter_counts() {
        assert_eq!(ModelSpec::logistic(2, 2).param_count(), 6);
        assert_eq!(ModelSpec::mlp(vec![784, 32, 10]).param_count(), 25_450);
        let m = Model::new(ModelSpec::mlp(vec![784, 32, 10])).unwrap();
        assert_eq!(m.dim(), 25_450);
        assert_eq!(ModelSpec::logistic(1, 1).without_bias().param_count(), 1);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let m = Model::new(ModelSpec::mlp(vec![16, 8, 3])).unwrap();
        let a = m.init_params(&RngState::new(3));
        assert_eq!(a, m.init_params(&RngState::new(3)));
        assert_ne!(a, m.init_params(&RngState::new(4)));
        assert!(a[..16 * 8 + 8].iter().all(|v| v.abs() <= 0.25));
        assert!(a[16 * 8 + 8..].iter().all(|v| v.abs() <= 1.0 / 8f64.sqrt()));
    }

    #[test]
    fn perfect_prediction_has_zero_gradient() {
        // MSE output equal to the one-hot target is an exact stationary point.
        let m = Model::new(ModelSpec::logistic(2, 2).with_loss(LossKind::Mse)).unwrap();
        let theta = [0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let g = m.per_sample_grad(&theta, &[0.4, -2.0], 1).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        assert_eq!(m.sample_loss(&theta, &[0.4, -2.0], 1).unwrap(), 0.0);
    }

    #[test]
    fn uniform_output_loss_is_ln_c() {
        let m = Model::new(ModelSpec::logistic(3, 5)).unwrap();
        let ds = synth_gaussian_blobs(&RngState::new(1), 4, 5, 5, 1.0).unwrap();
        let m5 = Model::new(ModelSpec::logistic(5, 5)).unwrap();
        let zeros = vec![0.0; m5.dim()];
        let batch: Vec<usize> = (0..ds.len()).collect();
        let loss = m5.batch_loss(&zeros, &ds, &batch).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-14);
        assert_eq!(m.dim(), 20);
    }

    #[test]
    fn saturated_cross_entropy_keeps_precision() {
        // Bias-only logits [30, 0]: loss is ln(1 + e^-30).
        let m = Model::new(ModelSpec::logistic(1, 2)).unwrap();
        let theta = [0.0, 0.0, 30.0, 0.0];
        let loss = m.sample_loss(&theta, &[1.0], 0).unwrap();
        let expect = (-30f64).exp().ln_1p();
        assert!((loss - expect).abs() <= 1e-12 * expect, "{loss:e}");
        let wrong = m.sample_loss(&theta, &[1.0], 1).unwrap();
        assert!((wrong - (30.0 + expect)).abs() < 1e-12);
    }

    #[test]
    fn duplicated_batch_has_same_loss() {
        let ds = synth_gaussian_blobs(&RngState::new(2), 5, 2, 3, 1.0).unwrap();
        let m = Model::new(ModelSpec::mlp(vec![3, 4, 2])).unwrap();
        let p = m.init_params(&RngState::new(1));
        let b = [0, 3, 7];
        let bb = [0, 3, 7, 0, 3, 7];
        let l1 = m.batch_loss(&p, &ds, &b).unwrap();
        let l2 = m.batch_loss(&p, &ds, &bb).unwrap();
        assert!((l1 - l2).abs() < 1e-15);
        assert!(matches!(m.batch_loss(&p, &ds, &[]), Err(Error::Parameter(_))));
    }

    #[test]
    fn batch_grad_is_mean_of_sample_grads() {
        let ds = synth_gaussian_blobs(&RngState::new(2), 10, 3, 4, 1.0).unwrap();
        let m = Model::new(ModelSpec::mlp(vec![4, 6, 3])).unwrap();
        let p = m.init_params(&RngState::new(9));
        let batch: Vec<usize> = (0..ds.len()).step_by(3).collect();
        let g = m.batch_grad(&p, &ds, &batch).unwrap();
        let mut mean = vec![0.0; m.dim()];
        for &i in &batch {
            let gi = m.per_sample_grad(&p, ds.row(i), ds.label(i)).unwrap();
            for (a, b) in mean.iter_mut().zip(gi) {
                *a += b / batch.len() as f64;
            }
        }
        for (a, b) in g.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_direction_hvp() {
        let ds = synth_gaussian_blobs(&RngState::new(2), 5, 2, 3, 1.0).unwrap();
        let m = Model::new(ModelSpec::logistic(3, 2)).unwrap();
        let p = m.init_params(&RngState::new(1));
        let hv = m.hessian_vector_product(&p, &ds, &[0, 1], &vec![0.0; m.dim()]).unwrap();
        assert!(hv.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_finite_params_are_rejected() {
        let m = Model::new(ModelSpec::logistic(2, 2)).unwrap();
        let mut p = vec![0.0; 6];
        p[0] = f64::NAN;
        assert!(matches!(
            m.per_sample_grad(&p, &[1.0, 1.0], 0),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn param_blob_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::mlp(vec![3, 2, 2]);
        let m = Model::new(spec.clone()).unwrap();
        let p = m.init_params(&RngState::new(5));
        let path = dir.path().join("theta.bin");
        p.save(&path, &spec).unwrap();
        let (q, s) = ParamVector::load(&path).unwrap();
        assert_eq!((q, s), (p, spec));
        assert!(ParamVector::from_le_bytes(&[0u8; 7]).is_err());
    }
}
