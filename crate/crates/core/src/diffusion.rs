//! Denoising diffusion: noise schedules, the forward perturbation, noise
//! matching training, and ancestral sampling in normalized model space.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Layout, Normalizer};
use crate::nnet::{
    gather_rows, AdamState, Activation, Architecture, Checkpoint, CheckpointError, ModelKind,
    NnetError, NoisePredictor, TimeEmbedding,
};
use crate::rng::{stream, Purpose};

/// Chains advanced together through one batched network evaluation. Fixed so
/// that results do not depend on the worker count.
pub const CHAIN_BLOCK: usize = 64;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("chain {chain} became non-finite at step {t}")]
    NonFiniteChain { chain: usize, t: usize },
    #[error(transparent)]
    Network(#[from] NnetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleShape {
    Linear,
    Cosine,
}

/// How the per-step variance expression becomes a noise scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdMode {
    /// square root of `β_t(1−ᾱ_{t−1})/(1−ᾱ_t)`
    #[default]
    Ddpm,
    /// the expression itself
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub shape: ScheduleShape,
    pub std_mode: StdMode,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            beta_start: 5e-4,
            beta_end: 0.1,
            shape: ScheduleShape::Linear,
            std_mode: StdMode::Ddpm,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule, DiffusionError> {
        let s = make_schedule(self.steps, self.beta_start, self.beta_end, self.shape)?
            .with_std_mode(self.std_mode);
        s.check_terminal()?;
        Ok(s)
    }
}

/// Per-step coefficients, stored 0-based; accessors take `t ∈ 1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub shape: ScheduleShape,
    pub std_mode: StdMode,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn make_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    shape: ScheduleShape,
) -> Result<NoiseSchedule, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::Schedule("T must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::Schedule(format!(
            "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let beta: Vec<f64> = match shape {
        ScheduleShape::Linear if steps == 1 => vec![beta_start],
        ScheduleShape::Linear => (0..steps)
            .map(|k| beta_start + (beta_end - beta_start) * k as f64 / (steps - 1) as f64)
            .collect(),
        ScheduleShape::Cosine => {
            let s = 0.008;
            let f = |t: f64| {
                let a = ((t / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos();
                a * a
            };
            (1..=steps)
                .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).clamp(beta_start, beta_end))
                .collect()
        }
    };
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut prod = 1.0;
    for b in &beta {
        prod *= 1.0 - b;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule {
        steps,
        shape,
        std_mode: StdMode::Ddpm,
        beta,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn with_std_mode(mut self, mode: StdMode) -> Self {
        self.std_mode = mode;
        self
    }

    /// The terminal marginal must be close to pure noise.
    pub fn check_terminal(&self) -> Result<(), DiffusionError> {
        let last = self.alpha_bar(self.steps);
        if last > 1e-3 {
            return Err(DiffusionError::Schedule(format!(
                "alpha_bar[T] = {last:.3e} exceeds 1e-3; lengthen the schedule or raise beta_end"
            )));
        }
        Ok(())
    }

    fn idx(&self, t: usize) -> usize {
        assert!((1..=self.steps).contains(&t), "t = {t} outside 1..={}", self.steps);
        t - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[self.idx(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[self.idx(t)]
    }

    /// `ᾱ_{t−1}` with `ᾱ_0 = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 1 {
            1.0
        } else {
            self.alpha_bar(t - 1)
        }
    }

    /// `β_t(1−ᾱ_{t−1})/(1−ᾱ_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar_prev(t)) / (1.0 - self.alpha_bar(t))
    }

    /// Scale multiplying the fresh noise in the reverse update.
    pub fn sigma(&self, t: usize) -> f64 {
        match self.std_mode {
            StdMode::Ddpm => self.posterior_variance(t).sqrt(),
            StdMode::Paper => self.posterior_variance(t),
        }
    }
}

/// `z_t = √ᾱ_t z₀ + √(1−ᾱ_t) ε`.
pub fn forward_perturb(schedule: &NoiseSchedule, z0: &[f64], t: usize, eps: &[f64]) -> Vec<f64> {
    assert_eq!(z0.len(), eps.len());
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect()
}

/// `s = −ε̂ / √(1−ᾱ_t)`.
pub fn score_from_noise(schedule: &NoiseSchedule, eps_hat: &[f64], t: usize) -> Vec<f64> {
    let scale = -1.0 / (1.0 - schedule.alpha_bar(t)).sqrt();
    eps_hat.iter().map(|e| scale * e).collect()
}

/// Clean-sample estimate `x̂₀ = (z_t + (1−ᾱ_t)·s) / √ᾱ_t` from the score.
pub fn estimate_clean(schedule: &NoiseSchedule, z_t: &[f64], score: &[f64], t: usize) -> Vec<f64> {
    let ab = schedule.alpha_bar(t);
    let inv = 1.0 / ab.sqrt();
    z_t.iter()
        .zip(score)
        .map(|(z, s)| inv * (z + (1.0 - ab) * s))
        .collect()
}

/// Reverse update `z_{t−1} = c_t z_t + d_t x̂₀ + σ_t ξ`.
pub fn reverse_step(
    schedule: &NoiseSchedule,
    z_t: &[f64],
    x0_hat: &[f64],
    noise: Option<&[f64]>,
    t: usize,
) -> Vec<f64> {
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar_prev(t);
    let c = schedule.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let d = ab_prev.sqrt() * schedule.beta(t) / (1.0 - ab);
    let sigma = schedule.sigma(t);
    let mut out: Vec<f64> = z_t.iter().zip(x0_hat).map(|(z, x)| c * z + d * x).collect();
    if let Some(xi) = noise {
        for (o, n) in out.iter_mut().zip(xi) {
            *o += sigma * n;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub embed_base: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256, 256],
            embed_dim: 64,
            embed_base: 10_000.0,
            lr: 1e-3,
            batch_size: 128,
            epochs: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(DiffusionError::Config("batch size and epochs must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(DiffusionError::Config(format!("learning rate {}", self.lr)));
        }
        if self.hidden.contains(&0) {
            return Err(DiffusionError::Config("zero-width hidden layer".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionModel {
    pub schedule: NoiseSchedule,
    pub predictor: NoisePredictor,
    pub normalizer: Normalizer,
    pub layout: Option<Layout>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-batch loss of every epoch.
    pub loss_history: Vec<f64>,
    pub n_params: usize,
}

#[derive(Serialize, Deserialize)]
struct DiffusionMeta {
    architecture: Architecture,
    schedule: NoiseSchedule,
    normalizer: Normalizer,
    layout: Option<Layout>,
}

impl DiffusionModel {
    pub fn model_dim(&self) -> usize {
        self.normalizer.model_dim()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = DiffusionMeta {
            architecture: self.predictor.arch().clone(),
            schedule: self.schedule.clone(),
            normalizer: self.normalizer.clone(),
            layout: self.layout.clone(),
        };
        Checkpoint::new(
            ModelKind::Diffusion,
            self.predictor.mlp(),
            serde_json::to_value(meta).expect("meta serialization cannot fail"),
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, DiffusionError> {
        ck.expect_kind(ModelKind::Diffusion)?;
        let meta: DiffusionMeta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
        let predictor = NoisePredictor::from_mlp(meta.architecture, ck.mlp()?)?;
        if predictor.arch().model_dim != meta.normalizer.model_dim() {
            return Err(CheckpointError::Format("normalizer and network disagree".into()).into());
        }
        Ok(Self {
            schedule: meta.schedule,
            predictor,
            normalizer: meta.normalizer,
            layout: meta.layout,
        })
    }
}

fn standard_normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal))
}

/// Noise-matching training over rows of `data` (already in model space):
/// per batch draw `t ~ U{1..T}` and `ε ~ N(0, I)`, perturb, and take one Adam
/// step on `mean ‖ε − ε_θ(z_t, t)‖²`.
pub fn train(
    data: &Array2<f64>,
    normalizer: Normalizer,
    layout: Option<Layout>,
    schedule: NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(DiffusionModel, TrainReport), DiffusionError> {
    cfg.validate()?;
    let (n, dim) = data.dim();
    if n == 0 {
        return Err(DiffusionError::Config("empty training set".into()));
    }
    if dim != normalizer.model_dim() {
        return Err(DiffusionError::Config(format!(
            "data has {dim} columns, normalizer model space has {}",
            normalizer.model_dim()
        )));
    }
    let arch = Architecture {
        model_dim: dim,
        hidden: cfg.hidden.clone(),
        activation: Activation::Silu,
        embedding: TimeEmbedding {
            dim: cfg.embed_dim,
            base: cfg.embed_base,
            steps: schedule.steps,
        },
    };
    let mut init_rng = stream(cfg.seed, Purpose::Init, 0);
    let mut predictor = NoisePredictor::new(arch, &mut init_rng)?;
    let mut rng = stream(cfg.seed, Purpose::Training, 0);
    let mut adam = AdamState::new(predictor.n_params(), cfg.lr);
    let mut theta = predictor.mlp().params();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let x0 = gather_rows(data, rows);
            let t: Vec<usize> = rows.iter().map(|_| rng.random_range(1..=schedule.steps)).collect();
            let eps = standard_normal_matrix(&mut rng, rows.len(), dim);
            let mut z_t = x0;
            for (r, mut row) in z_t.axis_iter_mut(Axis(0)).enumerate() {
                let ab = schedule.alpha_bar(t[r]);
                let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
                row.zip_mut_with(&eps.row(r), |z, e| *z = a * *z + s * e);
            }
            let (loss, grad) = predictor.loss_and_grad(z_t.view(), &t, eps.view())?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(DiffusionError::NonFiniteLoss { epoch, batch: b });
            }
            adam.step(&mut theta, &grad)?;
            predictor.mlp_mut().set_params(&theta);
            total += loss;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        history.push(mean);
    }
    let report = TrainReport {
        loss_history: history,
        n_params: predictor.n_params(),
    };
    Ok((
        DiffusionModel {
            schedule,
            predictor,
            normalizer,
            layout,
        },
        report,
    ))
}

/// Final state of one reverse chain in model space.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutcome {
    pub chain: usize,
    pub z0: Vec<f64>,
    /// Step at which the chain became non-finite, if it did.
    pub failed_at: Option<usize>,
}

/// Runs `n` reverse chains from `t = T` down to `t = 1`. Chain `i` draws its
/// start and noise from stream `(seed, purpose, i)`; fresh noise is added only
/// for `t > 1`. `guide(t, x̂₀)` may rewrite the clean estimate in place before
/// it enters the update.
pub(crate) fn run_chains<G>(
    model: &DiffusionModel,
    n: usize,
    seed: u64,
    purpose: Purpose,
    guide: G,
) -> Result<Vec<ChainOutcome>, DiffusionError>
where
    G: Fn(usize, &mut [f64]) + Sync,
{
    let dim = model.model_dim();
    let sched = &model.schedule;
    let blocks: Vec<Vec<usize>> = (0..n)
        .collect::<Vec<_>>()
        .chunks(CHAIN_BLOCK)
        .map(|c| c.to_vec())
        .collect();
    let results: Result<Vec<Vec<ChainOutcome>>, DiffusionError> = blocks
        .par_iter()
        .map(|chains| {
            let mut rngs: Vec<ChaCha8Rng> =
                chains.iter().map(|&c| stream(seed, purpose, c as u64)).collect();
            let mut z = Array2::zeros((chains.len(), dim));
            for (r, rng) in rngs.iter_mut().enumerate() {
                for v in z.row_mut(r).iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
            }
            let mut failed: Vec<Option<usize>> = vec![None; chains.len()];
            for t in (1..=sched.steps).rev() {
                let ts = vec![t; chains.len()];
                let eps_hat = model.predictor.forward_batch(z.view(), &ts)?;
                for r in 0..chains.len() {
                    if failed[r].is_some() {
                        continue;
                    }
                    let zr = z.row(r).to_vec();
                    let score = score_from_noise(sched, &eps_hat.row(r).to_vec(), t);
                    let mut x0 = estimate_clean(sched, &zr, &score, t);
                    guide(t, &mut x0);
                    let noise: Option<Vec<f64>> = (t > 1)
                        .then(|| (0..dim).map(|_| rngs[r].sample(StandardNormal)).collect());
                    let next = reverse_step(sched, &zr, &x0, noise.as_deref(), t);
                    if next.iter().all(|v| v.is_finite()) {
                        z.row_mut(r).assign(&ndarray::ArrayView1::from(&next));
                    } else {
                        failed[r] = Some(t);
                        z.row_mut(r).fill(0.0);
                    }
                }
            }
            Ok(chains
                .iter()
                .enumerate()
                .map(|(r, &c)| ChainOutcome {
                    chain: c,
                    z0: z.row(r).to_vec(),
                    failed_at: failed[r],
                })
                .collect())
        })
        .collect();
    Ok(results?.into_iter().flatten().collect())
}

/// Draws `n` unconditional records, returned denormalized in `x₀` layout.
pub fn sample(model: &DiffusionModel, n: usize, seed: u64) -> Result<Vec<Vec<f64>>, DiffusionError> {
    let outcomes = run_chains(model, n, seed, Purpose::Sampling, |_, _| {})?;
    outcomes
        .into_iter()
        .map(|o| match o.failed_at {
            Some(t) => Err(DiffusionError::NonFiniteChain { chain: o.chain, t }),
            None => Ok(model.normalizer.denormalize(&o.z0)),
        })
        .collect()
}

/// Same as [`sample`] but in model space.
pub fn sample_model_space(
    model: &DiffusionModel,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, DiffusionError> {
    let outcomes = run_chains(model, n, seed, Purpose::Sampling, |_, _| {})?;
    outcomes
        .into_iter()
        .map(|o| match o.failed_at {
            Some(t) => Err(DiffusionError::NonFiniteChain { chain: o.chain, t }),
            None => Ok(o.z0),
        })
        .collect()
}
