//! Dense networks with hand-written backpropagation, a sinusoidal time
//! embedding, and Adam. Everything runs in `f64`.

mod checkpoint;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError, ModelKind, WeightArray};

#[derive(Debug, Error, PartialEq)]
pub enum NnetError {
    #[error("time step {t} outside 1..={steps}")]
    TimeStep { t: usize, steps: usize },
    #[error("embedding dimension must be even and positive, got {0}")]
    EmbedDim(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// `x·σ(x)`
    Silu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `(inputs, outputs)`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Cached forward pass: the input of every layer and every pre-activation.
pub struct Tape {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

/// Fully connected network; the activation follows every layer except the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    activation: Activation,
}

impl Mlp {
    /// Gaussian init with variance `1/fan_in`, zero biases; the output layer is
    /// scaled by `out_scale`.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        activation: Activation,
        out_scale: f64,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
                let scale = (1.0 / fan_in as f64).sqrt() * if l + 1 == n { out_scale } else { 1.0 };
                let w = Array2::from_shape_simple_fn((fan_in, fan_out), || {
                    scale * rng.sample::<f64, _>(StandardNormal)
                });
                Dense {
                    w,
                    b: Array1::zeros(fan_out),
                }
            })
            .collect();
        Self { layers, activation }
    }

    pub fn from_layers(layers: Vec<Dense>, activation: Activation) -> Result<Self, NnetError> {
        if layers.is_empty() {
            return Err(NnetError::Dimension("no layers".into()));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.b.len() != l.w.ncols() {
                return Err(NnetError::Dimension(format!("layer {k} bias length")));
            }
            if k > 0 && layers[k - 1].w.ncols() != l.w.nrows() {
                return Err(NnetError::Dimension(format!("layer {k} input width")));
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").w.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Flat parameter vector: per layer, `w` row-major then `b`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_params(&mut self, theta: &[f64]) {
        assert_eq!(theta.len(), self.n_params());
        let mut k = 0;
        for l in &mut self.layers {
            for w in l.w.iter_mut() {
                *w = theta[k];
                k += 1;
            }
            for b in l.b.iter_mut() {
                *b = theta[k];
                k += 1;
            }
        }
    }

    /// Forward pass over a row batch.
    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut a = x.to_owned();
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let mut z = a.dot(&l.w);
            z += &l.b;
            if k < last {
                z.mapv_inplace(|v| self.activation.apply(v));
            }
            a = z;
        }
        a
    }

    pub fn forward_tape(&self, x: ArrayView2<f64>) -> (Array2<f64>, Tape) {
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut a = x.to_owned();
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let mut z = a.dot(&l.w);
            z += &l.b;
            tape.inputs.push(a);
            a = if k < last {
                z.mapv(|v| self.activation.apply(v))
            } else {
                z.clone()
            };
            tape.pre.push(z);
        }
        (a, tape)
    }

    /// Parameter gradient (flat layout of [`Mlp::params`]) given `∂L/∂output`.
    pub fn backward(&self, tape: &Tape, d_out: Array2<f64>) -> Vec<f64> {
        let n = self.layers.len();
        let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(n);
        let mut dz = d_out;
        for k in (0..n).rev() {
            let dw = tape.inputs[k].t().dot(&dz);
            let db = dz.sum_axis(Axis(0));
            if k > 0 {
                let mut da = dz.dot(&self.layers[k].w.t());
                da.zip_mut_with(&tape.pre[k - 1], |d, &z| *d *= self.activation.derivative(z));
                dz = da;
            }
            grads.push((dw, db));
        }
        grads.reverse();
        let mut flat = Vec::with_capacity(self.n_params());
        for (dw, db) in grads {
            flat.extend(dw.iter());
            flat.extend(db.iter());
        }
        flat
    }
}

/// Sinusoidal embedding of `t/T`: the first half holds sines, the second
/// cosines, of `1000·(t/T) / base^(k/half)` for `k = 0..half`.
pub fn time_embed(t: usize, steps: usize, dim: usize, base: f64) -> Result<Vec<f64>, NnetError> {
    if t == 0 || t > steps {
        return Err(NnetError::TimeStep { t, steps });
    }
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(NnetError::EmbedDim(dim));
    }
    let half = dim / 2;
    let pos = 1000.0 * t as f64 / steps as f64;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let arg = pos / base.powf(k as f64 / half as f64);
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    pub dim: usize,
    pub base: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub model_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub embedding: TimeEmbedding,
}

impl Architecture {
    pub fn input_dim(&self) -> usize {
        self.model_dim + self.embedding.dim
    }

    fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(&self.hidden);
        s.push(self.model_dim);
        s
    }
}

/// `ε_θ(z, t)`: an MLP on `[z, embed(t)]` returning a model-space vector.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePredictor {
    arch: Architecture,
    mlp: Mlp,
}

impl NoisePredictor {
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self, NnetError> {
        let e = arch.embedding;
        if e.dim == 0 || !e.dim.is_multiple_of(2) {
            return Err(NnetError::EmbedDim(e.dim));
        }
        let mlp = Mlp::new(&arch.sizes(), arch.activation, 0.1, rng);
        Ok(Self { arch, mlp })
    }

    pub fn from_mlp(arch: Architecture, mlp: Mlp) -> Result<Self, NnetError> {
        if mlp.input_dim() != arch.input_dim() || mlp.output_dim() != arch.model_dim {
            return Err(NnetError::Dimension(format!(
                "network maps {} -> {}, architecture needs {} -> {}",
                mlp.input_dim(),
                mlp.output_dim(),
                arch.input_dim(),
                arch.model_dim
            )));
        }
        Ok(Self { arch, mlp })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn n_params(&self) -> usize {
        self.mlp.n_params()
    }

    fn embed(&self, t: usize) -> Result<Vec<f64>, NnetError> {
        let e = self.arch.embedding;
        time_embed(t, e.steps, e.dim, e.base)
    }

    fn inputs(&self, z: ArrayView2<f64>, t: &[usize]) -> Result<Array2<f64>, NnetError> {
        if z.ncols() != self.arch.model_dim {
            return Err(NnetError::Dimension(format!(
                "input has {} columns, model space has {}",
                z.ncols(),
                self.arch.model_dim
            )));
        }
        if z.nrows() != t.len() {
            return Err(NnetError::Dimension("one time step per row".into()));
        }
        let mut emb = Array2::zeros((t.len(), self.arch.embedding.dim));
        for (r, &tt) in t.iter().enumerate() {
            let e = self.embed(tt)?;
            emb.row_mut(r).assign(&Array1::from(e));
        }
        Ok(concatenate![Axis(1), z, emb])
    }

    pub fn forward_batch(&self, z: ArrayView2<f64>, t: &[usize]) -> Result<Array2<f64>, NnetError> {
        Ok(self.mlp.forward(self.inputs(z, t)?.view()))
    }

    pub fn forward(&self, z: &[f64], t: usize) -> Result<Vec<f64>, NnetError> {
        let zb = ArrayView2::from_shape((1, z.len()), z)
            .map_err(|e| NnetError::Dimension(e.to_string()))?;
        Ok(self.forward_batch(zb, &[t])?.row(0).to_vec())
    }

    /// Noise-matching loss `mean_i ‖ε_i − ε_θ(z_i, t_i)‖²` and its gradient.
    pub fn loss_and_grad(
        &self,
        z_t: ArrayView2<f64>,
        t: &[usize],
        eps: ArrayView2<f64>,
    ) -> Result<(f64, Vec<f64>), NnetError> {
        if t.is_empty() {
            return Err(NnetError::EmptyBatch);
        }
        if eps.dim() != z_t.dim() {
            return Err(NnetError::Dimension("noise and input shapes differ".into()));
        }
        let x = self.inputs(z_t, t)?;
        let (pred, tape) = self.mlp.forward_tape(x.view());
        let diff = &pred - &eps;
        let b = t.len() as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / b;
        let grad = self.mlp.backward(&tape, diff * (2.0 / b));
        Ok((loss, grad))
    }

    pub fn loss(&self, z_t: ArrayView2<f64>, t: &[usize], eps: ArrayView2<f64>) -> Result<f64, NnetError> {
        let pred = self.forward_batch(z_t, t)?;
        let diff = &pred - &eps;
        Ok(diff.iter().map(|d| d * d).sum::<f64>() / t.len() as f64)
    }
}

/// Mean over the batch of `‖y − f(x)‖²` and its gradient for a plain MLP.
pub fn mse_loss_and_grad(
    mlp: &Mlp,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
) -> Result<(f64, Vec<f64>), NnetError> {
    if x.nrows() == 0 {
        return Err(NnetError::EmptyBatch);
    }
    if x.nrows() != y.nrows() || x.ncols() != mlp.input_dim() || y.ncols() != mlp.output_dim() {
        return Err(NnetError::Dimension("regression batch shape".into()));
    }
    let (pred, tape) = mlp.forward_tape(x);
    let diff = &pred - &y;
    let b = x.nrows() as f64;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / b;
    Ok((loss, mlp.backward(&tape, diff * (2.0 / b))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update of `theta` in place.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<(), NnetError> {
        if theta.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(NnetError::Dimension(format!(
                "optimizer holds {} moments, got {} parameters and {} gradients",
                self.m.len(),
                theta.len(),
                grad.len()
            )));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for k in 0..theta.len() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * grad[k];
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * grad[k] * grad[k];
            let m_hat = self.m[k] / c1;
            let v_hat = self.v[k] / c2;
            theta[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Row-gathers `rows` of `data` into a new batch matrix.
pub fn gather_rows(data: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), data.ncols()));
    for (k, &r) in rows.iter().enumerate() {
        out.row_mut(k).assign(&data.slice(s![r, ..]));
    }
    out
}
