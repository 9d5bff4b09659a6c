//! Single-valued load-to-dispatch regressor trained by mean squared error,
//! the point-prediction baseline for the diffusion sampler.

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Layout, Normalizer};
use crate::grid::Demand;
use crate::nnet::{
    gather_rows, mse_loss_and_grad, Activation, AdamState, Checkpoint, CheckpointError, Mlp,
    ModelKind, NnetError,
};
use crate::rng::{stream, Purpose};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("invalid baseline config: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Network(#[from] NnetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256, 256],
            lr: 1e-3,
            batch_size: 128,
            epochs: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointPredictor {
    pub mlp: Mlp,
    pub normalizer: Normalizer,
    pub layout: Layout,
    /// Retained demand positions of `x₀` fed to the network.
    pub inputs: Vec<usize>,
    /// Retained dispatch positions of `x₀` the network predicts.
    pub outputs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub loss_history: Vec<f64>,
    pub n_params: usize,
}

#[derive(Serialize, Deserialize)]
struct BaselineMeta {
    normalizer: Normalizer,
    layout: Layout,
    inputs: Vec<usize>,
    outputs: Vec<usize>,
}

fn retained(norm: &Normalizer, idx: Vec<usize>) -> Vec<usize> {
    idx.into_iter().filter(|&i| norm.model_index(i).is_some()).collect()
}

/// Fits the regressor on full `x₀` rows, z-scored by `normalizer`.
pub fn train_baseline(
    rows: &[Vec<f64>],
    normalizer: Normalizer,
    layout: Layout,
    cfg: &BaselineConfig,
) -> Result<(PointPredictor, BaselineReport), BaselineError> {
    if cfg.batch_size == 0 || cfg.epochs == 0 || cfg.hidden.contains(&0) {
        return Err(BaselineError::Config(
            "batch size, epochs and hidden widths must be positive".into(),
        ));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(BaselineError::Config(format!("learning rate {}", cfg.lr)));
    }
    if rows.is_empty() {
        return Err(BaselineError::Config("empty training set".into()));
    }
    if normalizer.full_dim() != layout.dim() || rows.iter().any(|r| r.len() != layout.dim()) {
        return Err(BaselineError::Dimension("records do not match the layout".into()));
    }
    let inputs = retained(&normalizer, layout.demand_indices());
    let outputs = retained(&normalizer, layout.dispatch_indices());
    if inputs.is_empty() || outputs.is_empty() {
        return Err(BaselineError::Config("no varying demand or dispatch coordinates".into()));
    }
    let encode = |idx: &[usize]| {
        Array2::from_shape_fn((rows.len(), idx.len()), |(r, k)| {
            normalizer.normalize_at(idx[k], rows[r][idx[k]])
        })
    };
    let x = encode(&inputs);
    let y = encode(&outputs);

    let mut sizes = vec![inputs.len()];
    sizes.extend(&cfg.hidden);
    sizes.push(outputs.len());
    let mut init_rng = stream(cfg.seed, Purpose::Baseline, 0);
    let mut mlp = Mlp::new(&sizes, Activation::Silu, 1.0, &mut init_rng);
    let mut rng = stream(cfg.seed, Purpose::Baseline, 1);
    let mut adam = AdamState::new(mlp.n_params(), cfg.lr);
    let mut theta = mlp.params();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, grad) =
                mse_loss_and_grad(&mlp, gather_rows(&x, idx).view(), gather_rows(&y, idx).view())?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(BaselineError::NonFiniteLoss { epoch, batch: b });
            }
            adam.step(&mut theta, &grad)?;
            mlp.set_params(&theta);
            total += loss;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::debug!("baseline epoch {epoch}: loss {mean:.6}");
        history.push(mean);
    }
    let report = BaselineReport {
        loss_history: history,
        n_params: mlp.n_params(),
    };
    Ok((
        PointPredictor {
            mlp,
            normalizer,
            layout,
            inputs,
            outputs,
        },
        report,
    ))
}

impl PointPredictor {
    /// Predicted `x₀` from the observation `y = (p_d, q_d)`.
    pub fn predict_record(&self, y: &[f64]) -> Result<Vec<f64>, BaselineError> {
        let nd = 2 * self.layout.n_load();
        if y.len() != nd {
            return Err(BaselineError::Dimension(format!(
                "observation has {} entries, expected {nd}",
                y.len()
            )));
        }
        let x: Vec<f64> = self
            .inputs
            .iter()
            .map(|&i| self.normalizer.normalize_at(i, y[i]))
            .collect();
        let out = self.mlp.forward(Array2::from_shape_vec((1, x.len()), x).expect("row").view());
        let mut rec = self.normalizer.mean.clone();
        rec[..nd].copy_from_slice(y);
        for (k, &i) in self.outputs.iter().enumerate() {
            rec[i] = self.normalizer.mean[i] + self.normalizer.std[i] * out[[0, k]];
        }
        Ok(rec)
    }

    /// Denormalized `(p_g, q_g)` for a per-bus load.
    pub fn predict(&self, load: &Demand) -> Result<(Vec<f64>, Vec<f64>), BaselineError> {
        if load.p.len() <= self.layout.load_buses.iter().copied().max().unwrap_or(0) {
            return Err(BaselineError::Dimension("load vector too short".into()));
        }
        let rec = self.predict_record(&self.layout.observation(load))?;
        let (_, _, p, q) = self.layout.split(&rec);
        Ok((p.to_vec(), q.to_vec()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = BaselineMeta {
            normalizer: self.normalizer.clone(),
            layout: self.layout.clone(),
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
        };
        Checkpoint::new(
            ModelKind::Baseline,
            &self.mlp,
            serde_json::to_value(meta).expect("meta serialization cannot fail"),
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, BaselineError> {
        ck.expect_kind(ModelKind::Baseline)?;
        let meta: BaselineMeta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
        let mlp = ck.mlp()?;
        if mlp.input_dim() != meta.inputs.len() || mlp.output_dim() != meta.outputs.len() {
            return Err(CheckpointError::Format("network and index lists disagree".into()).into());
        }
        Ok(Self {
            mlp,
            normalizer: meta.normalizer,
            layout: meta.layout,
            inputs: meta.inputs,
            outputs: meta.outputs,
        })
    }
}
