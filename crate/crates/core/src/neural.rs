//! Dense feed-forward networks with hand-written backpropagation.
//!
//! Hidden layers use ReLU; the output activation is chosen per network
//! (`Tanh` for actor heads bounded in `[-1, 1]`, `Identity` for critics).
//! Everything is `f64`. Batched passes work on row-major `(batch, features)`
//! matrices.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("tau = {0} must lie in (0, 1]")]
    Tau(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
}

/// One affine layer; `weight` is `(in, out)` so a batch maps as `x . W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Array2::zeros((fan_in, fan_out)), bias: Array1::zeros(fan_out) }
    }

    fn zeros_like(other: &Layer) -> Self {
        Self { weight: Array2::zeros(other.weight.raw_dim()), bias: Array1::zeros(other.bias.raw_dim()) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    dims: Vec<usize>,
    layers: Vec<Layer>,
    output: Activation,
}

/// Per-parameter gradients, laid out exactly like the network layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn max_abs(&self) -> f64 {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter())).fold(0.0, |m, g| m.max(g.abs()))
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied()).collect()
    }
}

/// Activations recorded during a forward pass, needed by [`DenseNet::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (the network input first).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl ForwardCache {
    /// ReLU on/off pattern of every hidden unit, for kink detection in
    /// finite-difference checks.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let hidden = self.pre.len().saturating_sub(1);
        self.pre[..hidden].iter().flat_map(|z| z.iter().map(|&v| v > 0.0)).collect()
    }
}

impl DenseNet {
    /// Uniform fan-in initialization: every weight and bias of a layer with
    /// `fan_in` inputs is drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], output: Activation, rng: &mut R) -> Result<Self, NeuralError> {
        let mut net = Self::zeros(dims, output)?;
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.weight.nrows() as f64).sqrt();
            layer.weight.mapv_inplace(|_| rng.random_range(-bound..bound));
            layer.bias.mapv_inplace(|_| rng.random_range(-bound..bound));
        }
        Ok(net)
    }

    pub fn zeros(dims: &[usize], output: Activation) -> Result<Self, NeuralError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(NeuralError::Shape(format!("layer dims {dims:?} need >= 2 positive entries")));
        }
        let layers = dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Ok(Self { dims: dims.to_vec(), layers, output })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("validated dims")
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Flat parameter view (weights then bias, layer by layer).
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied()).collect()
    }

    /// Mutable access to the `index`-th parameter in [`Self::flat_params`] order.
    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for l in &mut self.layers {
            if index < l.weight.len() {
                let cols = l.weight.ncols();
                return &mut l.weight[[index / cols, index % cols]];
            }
            index -= l.weight.len();
            if index < l.bias.len() {
                return &mut l.bias[index];
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    fn check_input(&self, cols: usize) -> Result<(), NeuralError> {
        if cols != self.input_dim() {
            return Err(NeuralError::Shape(format!("input width {cols}, network expects {}", self.input_dim())));
        }
        Ok(())
    }

    fn activate_output(&self, z: &mut Array2<f64>) {
        if self.output == Activation::Tanh {
            z.mapv_inplace(f64::tanh);
        }
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NeuralError> {
        self.check_input(x.ncols())?;
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight);
            z += &layer.bias;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            } else {
                self.activate_output(&mut z);
            }
            h = z;
        }
        Ok(h)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NeuralError> {
        let view = ArrayView2::from_shape((1, x.len()), x).map_err(|e| NeuralError::Shape(e.to_string()))?;
        Ok(self.forward_batch(view)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<ForwardCache, NeuralError> {
        self.check_input(x.ncols())?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight);
            z += &layer.bias;
            let mut a = z.clone();
            if i < last {
                a.mapv_inplace(|v| v.max(0.0));
            } else {
                self.activate_output(&mut a);
            }
            inputs.push(h);
            pre.push(z);
            h = a;
        }
        Ok(ForwardCache { inputs, pre, output: h })
    }

    /// Reverse-mode pass seeded by `upstream = dL/d(output)`. Returns the
    /// parameter gradients and `dL/d(input)`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<f64>,
    ) -> Result<(Gradients, Array2<f64>), NeuralError> {
        if upstream.dim() != cache.output.dim() {
            return Err(NeuralError::Shape(format!(
                "upstream gradient {:?} vs output {:?}",
                upstream.dim(),
                cache.output.dim()
            )));
        }
        let mut delta = upstream.to_owned();
        if self.output == Activation::Tanh {
            Zip::from(&mut delta).and(&cache.output).for_each(|d, &y| *d *= 1.0 - y * y);
        }
        let mut grads: Vec<Layer> = self.layers.iter().map(Layer::zeros_like).collect();
        for i in (0..self.layers.len()).rev() {
            grads[i].weight = cache.inputs[i].t().dot(&delta);
            grads[i].bias = delta.sum_axis(Axis(0));
            let mut back = delta.dot(&self.layers[i].weight.t());
            if i > 0 {
                Zip::from(&mut back).and(&cache.pre[i - 1]).for_each(|d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            delta = back;
        }
        Ok((Gradients { layers: grads }, delta))
    }

    /// Single-sample convenience wrapper around [`Self::backward`].
    pub fn backward_single(&self, x: &[f64], upstream: &[f64]) -> Result<(Gradients, Vec<f64>), NeuralError> {
        let xv = ArrayView2::from_shape((1, x.len()), x).map_err(|e| NeuralError::Shape(e.to_string()))?;
        let uv =
            ArrayView2::from_shape((1, upstream.len()), upstream).map_err(|e| NeuralError::Shape(e.to_string()))?;
        let cache = self.forward_cached(xv)?;
        let (g, dx) = self.backward(&cache, uv)?;
        Ok((g, dx.into_raw_vec_and_offset().0))
    }

    fn same_shape(&self, other: &DenseNet) -> bool {
        self.dims == other.dims
    }

    pub fn to_tensors(&self, prefix: &str) -> Vec<NamedTensor> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            out.push(NamedTensor {
                name: format!("{prefix}.layer{i}.weight"),
                shape: vec![l.weight.nrows(), l.weight.ncols()],
                data: l.weight.iter().copied().collect(),
            });
            out.push(NamedTensor {
                name: format!("{prefix}.layer{i}.bias"),
                shape: vec![l.bias.len()],
                data: l.bias.to_vec(),
            });
        }
        out
    }

    /// Rebuilds a network from `{prefix}.layer{i}.weight|bias` tensors.
    pub fn from_tensors(tensors: &[NamedTensor], prefix: &str, output: Activation) -> Result<Self, NeuralError> {
        let find = |name: String| tensors.iter().find(|t| t.name == name);
        let mut layers = Vec::new();
        let mut dims = Vec::new();
        while let Some(w) = find(format!("{prefix}.layer{}.weight", layers.len())) {
            let i = layers.len();
            let b = find(format!("{prefix}.layer{i}.bias"))
                .ok_or_else(|| NeuralError::Checkpoint(format!("missing {prefix}.layer{i}.bias")))?;
            let [rows, cols] = w.shape[..] else {
                return Err(NeuralError::Checkpoint(format!("{} is not 2-D", w.name)));
            };
            if b.shape != [cols] || b.data.len() != cols {
                return Err(NeuralError::Checkpoint(format!("{} does not match {}", b.name, w.name)));
            }
            if dims.last().is_some_and(|&d| d != rows) {
                return Err(NeuralError::Checkpoint(format!("{} breaks the layer chain", w.name)));
            }
            let weight = Array2::from_shape_vec((rows, cols), w.data.clone())
                .map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
            if dims.is_empty() {
                dims.push(rows);
            }
            dims.push(cols);
            layers.push(Layer { weight, bias: Array1::from(b.data.clone()) });
        }
        if layers.is_empty() {
            return Err(NeuralError::Checkpoint(format!("no tensors under prefix {prefix}")));
        }
        Ok(Self { dims, layers, output })
    }
}

/// Adaptive-moment optimizer state for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Layer>,
    v: Vec<Layer>,
}

impl Adam {
    pub fn new(net: &DenseNet, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: net.layers.iter().map(Layer::zeros_like).collect(),
            v: net.layers.iter().map(Layer::zeros_like).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected descent step on `net` along `grads`.
    pub fn step(&mut self, net: &mut DenseNet, grads: &Gradients) -> Result<(), NeuralError> {
        if grads.layers.len() != net.layers.len()
            || grads.layers.iter().zip(&net.layers).any(|(g, l)| g.weight.dim() != l.weight.dim())
        {
            return Err(NeuralError::Shape("gradient layout does not match the network".into()));
        }
        if !grads.layers.iter().all(|g| g.weight.iter().chain(g.bias.iter()).all(|v| v.is_finite())) {
            return Err(NeuralError::NonFinite("gradient"));
        }
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let lr = self.lr;
        let update = |p: &mut f64, g: &f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for (((layer, g), m), v) in net.layers.iter_mut().zip(&grads.layers).zip(&mut self.m).zip(&mut self.v) {
            Zip::from(&mut layer.weight).and(&g.weight).and(&mut m.weight).and(&mut v.weight).for_each(update);
            Zip::from(&mut layer.bias).and(&g.bias).and(&mut m.bias).and(&mut v.bias).for_each(update);
        }
        Ok(())
    }
}

/// `target <- tau * online + (1 - tau) * target`, elementwise.
pub fn soft_update(target: &mut DenseNet, online: &DenseNet, tau: f64) -> Result<(), NeuralError> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(NeuralError::Tau(tau));
    }
    if !target.same_shape(online) {
        return Err(NeuralError::Shape(format!("target {:?} vs online {:?}", target.dims, online.dims)));
    }
    for (t, o) in target.layers.iter_mut().zip(&online.layers) {
        if tau == 1.0 {
            t.weight.assign(&o.weight);
            t.bias.assign(&o.bias);
        } else {
            Zip::from(&mut t.weight).and(&o.weight).for_each(|t, &o| *t = tau * o + (1.0 - tau) * *t);
            Zip::from(&mut t.bias).and(&o.bias).for_each(|t, &o| *t = tau * o + (1.0 - tau) * *t);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// JSON list of named tensors. `f64` values round-trip exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub algorithm: String,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), NeuralError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
        }
        let text = serde_json::to_string(self).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
        fs::write(path, text).map_err(|e| NeuralError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, NeuralError> {
        let text = fs::read_to_string(path).map_err(|e| NeuralError::Checkpoint(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| NeuralError::Checkpoint(e.to_string()))
    }
}
