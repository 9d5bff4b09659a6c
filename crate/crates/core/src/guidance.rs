//! Measurement-guided sampling of dispatch given loads.
//!
//! The observation is `y = A x₀` with `A` a row selection of the demand
//! coordinates. At every reverse step the clean estimate is pulled toward the
//! observation, `x̂₀ ← x̂₀ + λ Aᵀ(y − A x̂₀)`, before the posterior update.
//! All of this happens in normalized model space.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Layout, Normalizer, OpfRecord};
use crate::diffusion::{run_chains, DiffusionError, DiffusionModel, NoiseSchedule};
use crate::grid::{Demand, Network};
use crate::restore::{restore_with, score, RestoreOptions, WarmStartScore};
use crate::rng::Purpose;

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("invalid guidance spec: {0}")]
    Spec(String),
    #[error("model has no record layout; cannot separate dispatch from loads")]
    MissingLayout,
    #[error("no samples to choose from")]
    Empty,
    #[error("sample from chain {0} has not been scored")]
    Unscored(usize),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignMode {
    /// `x̂₀ + λAᵀ(y − Ax̂₀)`: moves the estimate toward the observation.
    #[default]
    Corrected,
    /// `x̂₀ − λAᵀ(y − Ax̂₀)`, the sign printed in the sampling algorithm.
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSchedule {
    #[default]
    Constant,
    /// `λ_t = λ (1 − ᾱ_t)`.
    NoiseScaled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSpec {
    /// Rows of `A`: the coordinates that are observed.
    pub selected_indices: Vec<usize>,
    pub y: Vec<f64>,
    pub lambda: f64,
    pub sign_mode: SignMode,
    #[serde(default)]
    pub lambda_schedule: LambdaSchedule,
}

impl GuidanceSpec {
    /// Validates against a state of length `dim`.
    pub fn new(
        selected_indices: Vec<usize>,
        y: Vec<f64>,
        lambda: f64,
        sign_mode: SignMode,
        dim: usize,
    ) -> Result<Self, GuidanceError> {
        let spec = Self {
            selected_indices,
            y,
            lambda,
            sign_mode,
            lambda_schedule: LambdaSchedule::Constant,
        };
        spec.validate(dim)?;
        Ok(spec)
    }

    /// Observes the demand blocks of `x₀` at `load`.
    pub fn for_load(
        layout: &Layout,
        load: &Demand,
        lambda: f64,
        sign_mode: SignMode,
    ) -> Result<Self, GuidanceError> {
        Self::new(
            layout.demand_indices(),
            layout.observation(load),
            lambda,
            sign_mode,
            layout.dim(),
        )
    }

    pub fn with_lambda_schedule(mut self, schedule: LambdaSchedule) -> Self {
        self.lambda_schedule = schedule;
        self
    }

    pub fn validate(&self, dim: usize) -> Result<(), GuidanceError> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(GuidanceError::Spec(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.y.len() != self.selected_indices.len() {
            return Err(GuidanceError::Spec(format!(
                "{} observations for {} selected coordinates",
                self.y.len(),
                self.selected_indices.len()
            )));
        }
        if self.y.iter().any(|v| !v.is_finite()) {
            return Err(GuidanceError::Spec("non-finite observation".into()));
        }
        let mut seen = vec![false; dim];
        for &i in &self.selected_indices {
            if i >= dim {
                return Err(GuidanceError::Spec(format!("index {i} outside state of length {dim}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(GuidanceError::Spec(format!("index {i} selected twice")));
            }
        }
        Ok(())
    }

    /// `A x`.
    pub fn apply_a(&self, x: &[f64]) -> Vec<f64> {
        self.selected_indices.iter().map(|&i| x[i]).collect()
    }

    /// `Aᵀ u` for a state of length `dim`.
    pub fn apply_at(&self, u: &[f64], dim: usize) -> Vec<f64> {
        let mut x = vec![0.0; dim];
        for (&i, &v) in self.selected_indices.iter().zip(u) {
            x[i] = v;
        }
        x
    }

    /// Applies the correction with scale `lambda` in place.
    pub fn apply_with(&self, lambda: f64, x0_hat: &mut [f64]) {
        let sign = match self.sign_mode {
            SignMode::Corrected => 1.0,
            SignMode::Paper => -1.0,
        };
        for (&i, &y) in self.selected_indices.iter().zip(&self.y) {
            x0_hat[i] += sign * lambda * (y - x0_hat[i]);
        }
    }

    /// One guidance correction of a clean estimate.
    pub fn guidance_step(&self, x0_hat: &[f64]) -> Vec<f64> {
        let mut out = x0_hat.to_vec();
        self.apply_with(self.lambda, &mut out);
        out
    }

    /// Guidance scale at reverse step `t`.
    pub fn lambda_at(&self, schedule: &NoiseSchedule, t: usize) -> f64 {
        match self.lambda_schedule {
            LambdaSchedule::Constant => self.lambda,
            LambdaSchedule::NoiseScaled => self.lambda * (1.0 - schedule.alpha_bar(t)),
        }
    }

    /// Re-expresses the spec in model space: indices move to their retained
    /// positions and `y` is z-scored. Coordinates the normalizer dropped as
    /// constant are fixed already and leave the operator.
    pub fn to_model_space(&self, normalizer: &Normalizer) -> Result<Self, GuidanceError> {
        self.validate(normalizer.full_dim())?;
        let mut selected = Vec::new();
        let mut y = Vec::new();
        for (&i, &v) in self.selected_indices.iter().zip(&self.y) {
            if let Some(m) = normalizer.model_index(i) {
                selected.push(m);
                y.push(normalizer.normalize_at(i, v));
            }
        }
        Ok(Self {
            selected_indices: selected,
            y,
            ..self.clone()
        })
    }

    /// `‖y − A x‖∞`.
    pub fn residual(&self, x: &[f64]) -> f64 {
        self.selected_indices
            .iter()
            .zip(&self.y)
            .fold(0.0f64, |m, (&i, &y)| m.max((y - x[i]).abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum ChainStatus {
    Ok,
    /// The chain state became non-finite at this step.
    NonFinite { t: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmStartSample {
    pub chain: usize,
    pub seed: u64,
    /// Full denormalized record; NaN for failed chains.
    pub x0: Vec<f64>,
    pub p_g: Vec<f64>,
    pub q_g: Vec<f64>,
    /// `‖y − A x₀‖∞` in normalized units.
    pub residual: f64,
    pub status: ChainStatus,
    /// Filled in by [`score_samples`].
    pub score: Option<WarmStartScore>,
}

impl WarmStartSample {
    pub fn is_ok(&self) -> bool {
        self.status == ChainStatus::Ok
    }
}

/// Runs `n` guided reverse chains. Chain `i` uses the same random stream as
/// chain `i` of unconditional sampling with the same seed.
pub fn sample_conditional(
    model: &DiffusionModel,
    spec: &GuidanceSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<WarmStartSample>, GuidanceError> {
    let layout = model.layout.as_ref().ok_or(GuidanceError::MissingLayout)?;
    let mspec = spec.to_model_space(&model.normalizer)?;
    let sched = &model.schedule;
    let outcomes = run_chains(model, n, seed, Purpose::Sampling, |t, x0| {
        mspec.apply_with(mspec.lambda_at(sched, t), x0)
    })?;
    let n_gen = layout.n_gen;
    Ok(outcomes
        .into_iter()
        .map(|o| {
            let (x0, residual, status) = match o.failed_at {
                None => (
                    model.normalizer.denormalize(&o.z0),
                    mspec.residual(&o.z0),
                    ChainStatus::Ok,
                ),
                Some(t) => (
                    vec![f64::NAN; layout.dim()],
                    f64::INFINITY,
                    ChainStatus::NonFinite { t },
                ),
            };
            let (_, _, p_g, q_g) = layout.split(&x0);
            debug_assert_eq!(p_g.len(), n_gen);
            WarmStartSample {
                chain: o.chain,
                seed,
                p_g: p_g.to_vec(),
                q_g: q_g.to_vec(),
                x0,
                residual,
                status,
                score: None,
            }
        })
        .collect())
}

/// Restores every successful sample at `load` and scores it against
/// `reference`. Samples whose chain failed or whose restoration did not
/// converge stay unscored. Returns the number scored.
pub fn score_samples(
    net: &Network,
    load: &Demand,
    reference: &OpfRecord,
    samples: &mut [WarmStartSample],
    opts: &RestoreOptions,
) -> usize {
    samples
        .par_iter_mut()
        .map(|s| {
            s.score = None;
            if !s.is_ok() {
                return 0;
            }
            let Ok(res) = restore_with(net, load, &s.p_g, &s.q_g, opts) else {
                return 0;
            };
            match score(net, reference, &res, &s.p_g, &s.q_g) {
                Ok(sc) => {
                    s.score = Some(sc);
                    1
                }
                Err(_) => 0,
            }
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Criterion {
    Cost,
    VoltageViolation,
    /// `cost · restored_cost + violation · voltage_violation`.
    Weighted { cost: f64, violation: f64 },
}

impl Criterion {
    pub fn value(&self, s: &WarmStartScore) -> f64 {
        match *self {
            Criterion::Cost => s.restored_cost,
            Criterion::VoltageViolation => s.voltage_violation,
            Criterion::Weighted { cost, violation } => {
                cost * s.restored_cost + violation * s.voltage_violation
            }
        }
    }
}

/// The sample minimizing `criterion`; ties go to the lowest chain index.
pub fn best_of(
    samples: &[WarmStartSample],
    criterion: Criterion,
) -> Result<&WarmStartSample, GuidanceError> {
    let mut best: Option<(&WarmStartSample, f64)> = None;
    for s in samples {
        let sc = s.score.as_ref().ok_or(GuidanceError::Unscored(s.chain))?;
        let v = criterion.value(sc);
        let better = match best {
            None => true,
            Some((b, bv)) => v < bv || (v == bv && s.chain < b.chain),
        };
        if better {
            best = Some((s, v));
        }
    }
    best.map(|(s, _)| s).ok_or(GuidanceError::Empty)
}
