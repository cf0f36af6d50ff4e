//! Feed-forward logit model with hand-derived backward pass, and the softmax
//! transforms that turn logits into probabilities.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seeded_rng;

/// Row-per-sample logits `f(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix(Matrix);

impl LogitMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        if !values.is_finite() {
            return Err(Error::NonFiniteLogits);
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, n: usize) -> &[f64] {
        self.0.row(n)
    }

    pub fn select_rows(&self, indices: &[usize]) -> LogitMatrix {
        LogitMatrix(self.0.select_rows(indices))
    }
}

/// Row-stochastic matrix of class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix(Matrix);

impl ProbMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        for (n, row) in values.iter_rows().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "probability row {n} is not normalized (sum = {sum})"
                )));
            }
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, n: usize) -> &[f64] {
        self.0.row(n)
    }

    pub fn select_rows(&self, indices: &[usize]) -> ProbMatrix {
        ProbMatrix(self.0.select_rows(indices))
    }

    /// Per-row argmax, ties to the smallest class index.
    pub fn argmax(&self) -> Vec<usize> {
        self.0.iter_rows().map(argmax).collect()
    }
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn softmax_row_into(row: &[f64], inv_temp: f64, out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = ((v - max) * inv_temp).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Softmax of a single logit vector at temperature 1.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    softmax_row_into(row, 1.0, &mut out);
    out
}

pub fn softmax_with_temperature(logits: &LogitMatrix, temperature: f64) -> Result<ProbMatrix> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let m = logits.values();
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for n in 0..m.rows() {
        softmax_row_into(m.row(n), 1.0 / temperature, out.row_mut(n));
    }
    Ok(ProbMatrix(out))
}

/// Softmax where row `n` uses `temps[labels[n]]`.
pub fn softmax_per_class_temperature(
    logits: &LogitMatrix,
    labels: &[usize],
    temps: &[f64],
) -> Result<ProbMatrix> {
    if let Some(t) = temps.iter().find(|&&t| !(t > 0.0) || !t.is_finite()) {
        return Err(Error::invalid(format!("temperatures must be positive, got {t}")));
    }
    if labels.len() != logits.rows() {
        return Err(Error::shape(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    let m = logits.values();
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for (n, &y) in labels.iter().enumerate() {
        let t = *temps
            .get(y)
            .ok_or_else(|| Error::invalid(format!("no temperature for class {y}")))?;
        softmax_row_into(m.row(n), 1.0 / t, out.row_mut(n));
    }
    Ok(ProbMatrix(out))
}

/// Dense ReLU network. Layer `l` maps `layer_dims[l]` inputs to
/// `layer_dims[l + 1]` outputs with a `[out x in]` weight matrix; the last
/// layer is linear and produces the logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
}

/// Parameter gradients, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    /// Flattened in the same order as [`MlpModel::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.flatten().iter().all(|&g| g == 0.0)
    }
}

/// Activations kept from a forward pass: the input to every layer and the
/// pre-activation output of every layer.
struct ForwardCache {
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
}

impl MlpModel {
    /// He-normal weights (std `sqrt(2 / fan_in)`), zero biases.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::invalid("a model needs at least input and output dims"));
        }
        if layer_dims.contains(&0) {
            return Err(Error::invalid(format!("layer dims must be positive: {layer_dims:?}")));
        }
        let mut rng = seeded_rng(seed, 0);
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let scale = (2.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            weights.push(Matrix::from_vec(fan_out, fan_in, data)?);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
        })
    }

    pub fn from_parts(weights: Vec<Matrix>, biases: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::shape("need one bias vector per weight matrix"));
        }
        let mut layer_dims = vec![weights[0].cols()];
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.cols() != *layer_dims.last().unwrap() || b.len() != w.rows() {
                return Err(Error::shape(format!("layer {l} has incompatible shapes")));
            }
            layer_dims.push(w.rows());
        }
        let model = Self {
            layer_dims,
            weights,
            biases,
        };
        model.check_finite()?;
        Ok(model)
    }

    fn check_finite(&self) -> Result<()> {
        let finite = self.weights.iter().all(Matrix::is_finite)
            && self.biases.iter().flatten().all(|b| b.is_finite());
        if finite {
            Ok(())
        } else {
            Err(Error::invalid("model parameters must be finite"))
        }
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.as_slice().len() + b.len())
            .sum()
    }

    /// Parameters layer by layer: row-major weights, then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::shape(format!(
                "{} parameters given, model has {}",
                params.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let wl = w.as_slice().len();
            w.as_mut_slice().copy_from_slice(&params[offset..offset + wl]);
            offset += wl;
            let bl = b.len();
            b.copy_from_slice(&params[offset..offset + bl]);
            offset += bl;
        }
        Ok(())
    }

    /// Mutable views of every parameter block paired with the matching gradient
    /// block, plus whether the block is a weight (as opposed to a bias).
    pub(crate) fn param_blocks_mut<'a>(
        &'a mut self,
        grads: &'a Gradients,
    ) -> impl Iterator<Item = (&'a mut [f64], &'a [f64], bool)> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .zip(grads.weights.iter().zip(&grads.biases))
            .flat_map(|((w, b), (gw, gb))| {
                [
                    (w.as_mut_slice(), gw.as_slice(), true),
                    (b.as_mut_slice(), gb.as_slice(), false),
                ]
            })
    }

    fn check_input(&self, features: &Matrix) -> Result<()> {
        if features.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "features have width {} but model expects {}",
                features.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn forward_cached(&self, features: &Matrix) -> Result<ForwardCache> {
        self.check_input(features)?;
        let depth = self.weights.len();
        let mut inputs = Vec::with_capacity(depth);
        let mut pre_activations = Vec::with_capacity(depth);
        let mut h = features.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = h.matmul_transposed(w)?;
            for n in 0..z.rows() {
                for (v, &bias) in z.row_mut(n).iter_mut().zip(b) {
                    *v += bias;
                }
            }
            let next = if l + 1 < depth {
                let mut a = z.clone();
                a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
                a
            } else {
                z.clone()
            };
            inputs.push(std::mem::replace(&mut h, next));
            pre_activations.push(z);
        }
        Ok(ForwardCache {
            inputs,
            pre_activations,
        })
    }

    pub fn forward_logits(&self, features: &Matrix) -> Result<LogitMatrix> {
        let mut cache = self.forward_cached(features)?;
        LogitMatrix::new(cache.pre_activations.pop().unwrap())
    }

    /// Per-row argmax of the logits, ties to the smallest class index.
    pub fn predict(&self, features: &Matrix) -> Result<Vec<usize>> {
        let logits = self.forward_logits(features)?;
        Ok(logits.values().iter_rows().map(argmax).collect())
    }

    /// Exact gradients of a scalar loss given its gradient with respect to the
    /// logits. The ReLU subgradient at zero is taken to be zero.
    pub fn backward(&self, features: &Matrix, dloss_dlogits: &Matrix) -> Result<Gradients> {
        let cache = self.forward_cached(features)?;
        self.backward_from_cache(&cache, dloss_dlogits)
    }

    fn backward_from_cache(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<Gradients> {
        let out = cache.pre_activations.last().unwrap();
        if upstream.rows() != out.rows() || upstream.cols() != out.cols() {
            return Err(Error::shape(format!(
                "upstream gradient is {}x{} but logits are {}x{}",
                upstream.rows(),
                upstream.cols(),
                out.rows(),
                out.cols()
            )));
        }
        let depth = self.weights.len();
        let mut gw = vec![Matrix::zeros(0, 0); depth];
        let mut gb = vec![Vec::new(); depth];
        let mut delta = upstream.clone();
        for l in (0..depth).rev() {
            gw[l] = delta.transposed_matmul(&cache.inputs[l])?;
            let mut bias = vec![0.0; delta.cols()];
            for row in delta.iter_rows() {
                for (b, &d) in bias.iter_mut().zip(row) {
                    *b += d;
                }
            }
            gb[l] = bias;
            if l > 0 {
                let mut prev = delta.matmul(&self.weights[l])?;
                let z = &cache.pre_activations[l - 1];
                for (p, &zv) in prev.as_mut_slice().iter_mut().zip(z.as_slice()) {
                    if zv <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
        Ok(Gradients {
            weights: gw,
            biases: gb,
        })
    }

    /// Forward pass, loss-gradient callback on the logits, and backward pass in one go.
    pub(crate) fn forward_backward<F>(&self, features: &Matrix, loss: F) -> Result<(f64, Gradients)>
    where
        F: FnOnce(&LogitMatrix) -> Result<(f64, Matrix)>,
    {
        let cache = self.forward_cached(features)?;
        let logits = LogitMatrix::new(cache.pre_activations.last().unwrap().clone())?;
        let (value, upstream) = loss(&logits)?;
        let grads = self.backward_from_cache(&cache, &upstream)?;
        Ok((value, grads))
    }

    pub fn to_checkpoint(&self) -> String {
        let ckpt = Checkpoint {
            layer_dims: self.layer_dims.clone(),
            weights: self.weights.iter().map(|w| w.as_slice().to_vec()).collect(),
            biases: self.biases.clone(),
        };
        let mut text = serde_json::to_string_pretty(&ckpt).expect("checkpoint serializes");
        text.push('\n');
        text
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.layer_dims.len() < 2 || ckpt.weights.len() != ckpt.layer_dims.len() - 1 {
            return Err(Error::shape("checkpoint layer count does not match layer_dims"));
        }
        let weights = ckpt
            .weights
            .into_iter()
            .zip(ckpt.layer_dims.windows(2))
            .map(|(w, d)| Matrix::from_vec(d[1], d[0], w))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(weights, ckpt.biases)
    }
}

/// On-disk model layout: layer dims and row-major parameter arrays.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    layer_dims: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}
