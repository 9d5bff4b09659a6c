//! Experiment statistics: tail means, ε-closeness rates, the sample-count
//! bound `M ≥ log(1 − δ) / log(1 − p_ε)`, and the two summary tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::OpfRecord;
use crate::diffusion::DiffusionModel;
use crate::grid::Network;
use crate::guidance::{sample_conditional, score_samples, GuidanceError, GuidanceSpec, SignMode};
use crate::restore::{RestoreOptions, WarmStartScore};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("value out of domain: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
}

/// Mean of the largest `⌈q·n⌉` values.
pub fn cvar(values: &[f64], q: f64) -> Result<f64, EvalError> {
    if values.is_empty() {
        return Err(EvalError::Empty("cvar of no values"));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(EvalError::Domain(format!("tail fraction {q} not in (0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
    Ok(sorted[..k].iter().sum::<f64>() / k as f64)
}

/// `c ≤ c*·(1 + ε/100)`.
pub fn is_eps_close(cost: f64, c_star: f64, epsilon_pct: f64) -> bool {
    cost <= c_star * (1.0 + epsilon_pct / 100.0)
}

fn check_table(costs: &[Vec<f64>], c_star: &[f64]) -> Result<usize, EvalError> {
    if costs.is_empty() {
        return Err(EvalError::Empty("no loads"));
    }
    if c_star.len() != costs.len() {
        return Err(EvalError::Shape(format!(
            "{} optimal costs for {} loads",
            c_star.len(),
            costs.len()
        )));
    }
    let n = costs[0].len();
    if n == 0 || costs.iter().any(|c| c.len() != n) {
        return Err(EvalError::Shape("every load needs the same positive sample count".into()));
    }
    Ok(n)
}

/// Mean over loads of the fraction of ε-close samples. `costs[l][s]` is the
/// restored cost of sample `s` at load `l`; a failed sample should be
/// `+∞` (never close).
pub fn estimate_p_eps(costs: &[Vec<f64>], c_star: &[f64], epsilon_pct: f64) -> Result<f64, EvalError> {
    let n = check_table(costs, c_star)?;
    let total: f64 = costs
        .iter()
        .zip(c_star)
        .map(|(c, &cs)| c.iter().filter(|&&v| is_eps_close(v, cs, epsilon_pct)).count() as f64 / n as f64)
        .sum();
    Ok(total / costs.len() as f64)
}

/// `⌈log(1 − δ) / log(1 − p_ε)⌉`; `p_ε = 1` needs one sample.
pub fn sample_complexity(p_eps: f64, delta: f64) -> Result<u64, EvalError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(EvalError::Domain(format!("delta {delta} not in (0, 1)")));
    }
    if p_eps == 1.0 {
        return Ok(1);
    }
    if !(p_eps > 0.0 && p_eps < 1.0) {
        return Err(EvalError::Domain(format!("p_eps {p_eps} not in (0, 1]")));
    }
    let m = ((1.0 - delta).ln() / (1.0 - p_eps).ln()).ceil();
    Ok((m as u64).max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub epsilon_pct: f64,
    pub p_eps: f64,
    pub delta: f64,
    /// `None` when no sample was ε-close, so the bound is undefined.
    pub m_bound: Option<u64>,
    /// ε-close samples among the first `M` draws, averaged over loads and
    /// rounded. Counted over all draws when `M` exceeds the sample count.
    pub n_eps_observed: Option<u64>,
}

/// Table rows from restored costs, one per `(ε, δ)`.
pub fn complexity_rows(
    costs: &[Vec<f64>],
    c_star: &[f64],
    epsilons_pct: &[f64],
    deltas: &[f64],
) -> Result<Vec<ComplexityRow>, EvalError> {
    let n = check_table(costs, c_star)?;
    let mut rows = Vec::new();
    for &eps in epsilons_pct {
        let p = estimate_p_eps(costs, c_star, eps)?;
        for &delta in deltas {
            let m_bound = if p > 0.0 { Some(sample_complexity(p, delta)?) } else { None };
            let n_eps_observed = m_bound.map(|m| {
                let take = (m as usize).min(n);
                let total: usize = costs
                    .iter()
                    .zip(c_star)
                    .map(|(c, &cs)| c[..take].iter().filter(|&&v| is_eps_close(v, cs, eps)).count())
                    .sum();
                (total as f64 / costs.len() as f64).round() as u64
            });
            rows.push(ComplexityRow {
                epsilon_pct: eps,
                p_eps: p,
                delta,
                m_bound,
                n_eps_observed,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub n_samples: usize,
    pub lambda: f64,
    pub sign_mode: SignMode,
    pub seed: u64,
    pub restore: RestoreOptions,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_samples: 250,
            lambda: 1.0,
            sign_mode: SignMode::Corrected,
            seed: 0,
            restore: RestoreOptions::default(),
        }
    }
}

/// Guided samples for every test record, restored and scored. Load `l` uses
/// seed `cfg.seed + l`.
pub fn scored_samples(
    model: &DiffusionModel,
    net: &Network,
    records: &[OpfRecord],
    cfg: &SamplingConfig,
) -> Result<Vec<Vec<Option<WarmStartScore>>>, EvalError> {
    let layout = model.layout.as_ref().ok_or(GuidanceError::MissingLayout)?;
    let mut out = Vec::with_capacity(records.len());
    for (l, rec) in records.iter().enumerate() {
        let load = rec.demand(layout, net.n_bus());
        let spec = GuidanceSpec::for_load(layout, &load, cfg.lambda, cfg.sign_mode)?;
        let seed = cfg.seed.wrapping_add(l as u64);
        let mut samples = sample_conditional(model, &spec, cfg.n_samples, seed)?;
        let scored = score_samples(net, &load, rec, &mut samples, &cfg.restore);
        log::info!("load {l}: {scored}/{} samples restored", cfg.n_samples);
        out.push(samples.into_iter().map(|s| s.score).collect());
    }
    Ok(out)
}

/// Restored costs with failures mapped to `+∞`.
pub fn restored_costs(scores: &[Vec<Option<WarmStartScore>>]) -> Vec<Vec<f64>> {
    scores
        .iter()
        .map(|l| l.iter().map(|s| s.map_or(f64::INFINITY, |s| s.restored_cost)).collect())
        .collect()
}

/// Samples, restores and tabulates sample complexity over `records`, with
/// each record's optimal objective as `c*`.
pub fn complexity_table(
    model: &DiffusionModel,
    net: &Network,
    records: &[OpfRecord],
    epsilons_pct: &[f64],
    deltas: &[f64],
    cfg: &SamplingConfig,
) -> Result<Vec<ComplexityRow>, EvalError> {
    let scores = scored_samples(model, net, records, cfg)?;
    let c_star: Vec<f64> = records.iter().map(|r| r.objective).collect();
    complexity_rows(&restored_costs(&scores), &c_star, epsilons_pct, deltas)
}

pub fn render_complexity_csv(rows: &[ComplexityRow]) -> String {
    let mut s = String::from("epsilon_pct,p_eps,delta,m_bound,n_eps_observed\n");
    let opt = |v: Option<u64>| v.map_or(String::new(), |v| v.to_string());
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.epsilon_pct,
            r.p_eps,
            r.delta,
            opt(r.m_bound),
            opt(r.n_eps_observed)
        );
    }
    s
}

pub fn render_complexity_text(rows: &[ComplexityRow]) -> String {
    let mut s = format!("{:>6} {:>8} {:>6} {:>6} {:>6}\n", "eps%", "p_eps", "delta", "M", "N_eps");
    let opt = |v: Option<u64>| v.map_or("-".to_string(), |v| v.to_string());
    for r in rows {
        let _ = writeln!(
            s,
            "{:>6} {:>8.4} {:>6} {:>6} {:>6}",
            r.epsilon_pct,
            r.p_eps,
            r.delta,
            opt(r.m_bound),
            opt(r.n_eps_observed)
        );
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub cvar10: f64,
}

impl MetricSummary {
    fn of(values: &[f64]) -> Result<Self, EvalError> {
        Ok(Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            cvar10: cvar(values, 0.1)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSummary {
    pub optimality_gap: MetricSummary,
    pub optimality_gap_pct: MetricSummary,
    pub setpoint_error: MetricSummary,
    pub voltage_violation: MetricSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmStartTable {
    pub n_loads: usize,
    pub diffopf: SolverSummary,
    pub baseline: SolverSummary,
}

fn summarize(per_load: &[WarmStartScore]) -> Result<SolverSummary, EvalError> {
    let col = |f: fn(&WarmStartScore) -> f64| per_load.iter().map(f).collect::<Vec<_>>();
    Ok(SolverSummary {
        optimality_gap: MetricSummary::of(&col(|s| s.optimality_gap))?,
        optimality_gap_pct: MetricSummary::of(&col(|s| s.optimality_gap_pct))?,
        setpoint_error: MetricSummary::of(&col(|s| s.setpoint_error))?,
        voltage_violation: MetricSummary::of(&col(|s| s.voltage_violation))?,
    })
}

/// Mean and CVaR₁₀% over loads of each metric. For the sampler, each
/// metric takes the best scored sample of its load under that metric.
pub fn warmstart_table(
    diffopf: &[Vec<Option<WarmStartScore>>],
    baseline: &[Option<WarmStartScore>],
) -> Result<WarmStartTable, EvalError> {
    if diffopf.is_empty() {
        return Err(EvalError::Empty("no loads"));
    }
    if diffopf.len() != baseline.len() {
        return Err(EvalError::Shape(format!(
            "{} sampler loads vs {} baseline loads",
            diffopf.len(),
            baseline.len()
        )));
    }
    let mut best = Vec::with_capacity(diffopf.len());
    for (l, samples) in diffopf.iter().enumerate() {
        let ok: Vec<&WarmStartScore> = samples.iter().flatten().collect();
        if ok.is_empty() {
            return Err(EvalError::Domain(format!("load {l} has no restored sample")));
        }
        let min = |f: fn(&WarmStartScore) -> f64| ok.iter().map(|s| f(s)).fold(f64::INFINITY, f64::min);
        best.push(WarmStartScore {
            restored_cost: min(|s| s.restored_cost),
            optimality_gap: min(|s| s.optimality_gap),
            optimality_gap_pct: min(|s| s.optimality_gap_pct),
            setpoint_error: min(|s| s.setpoint_error),
            voltage_violation: min(|s| s.voltage_violation),
        });
    }
    let base: Vec<WarmStartScore> = baseline
        .iter()
        .enumerate()
        .map(|(l, s)| s.ok_or_else(|| EvalError::Domain(format!("baseline failed to restore at load {l}"))))
        .collect::<Result<_, _>>()?;
    Ok(WarmStartTable {
        n_loads: diffopf.len(),
        diffopf: summarize(&best)?,
        baseline: summarize(&base)?,
    })
}

impl WarmStartTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "solver,gap_mean,gap_cvar10,gap_pct_mean,gap_pct_cvar10,setpoint_mean,setpoint_cvar10,violation_mean,violation_cvar10\n",
        );
        for (name, r) in [("diffopf", &self.diffopf), ("baseline", &self.baseline)] {
            let _ = writeln!(
                s,
                "{name},{},{},{},{},{},{},{},{}",
                r.optimality_gap.mean,
                r.optimality_gap.cvar10,
                r.optimality_gap_pct.mean,
                r.optimality_gap_pct.cvar10,
                r.setpoint_error.mean,
                r.setpoint_error.cvar10,
                r.voltage_violation.mean,
                r.voltage_violation.cvar10
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<9} {:>22} {:>22} {:>17} {:>17}\n",
            "solver", "gap mean", "gap cvar10", "setpoint mean", "violation mean"
        );
        for (name, r) in [("DiffOPF", &self.diffopf), ("baseline", &self.baseline)] {
            let _ = writeln!(
                s,
                "{name:<9} {:>13.1} ({:>5.1}%) {:>13.1} ({:>5.1}%) {:>17.4} {:>17.4}",
                r.optimality_gap.mean,
                r.optimality_gap_pct.mean,
                r.optimality_gap.cvar10,
                r.optimality_gap_pct.cvar10,
                r.setpoint_error.mean,
                r.voltage_violation.mean
            );
        }
        let _ = writeln!(s, "({} loads)", self.n_loads);
        s
    }
}

/// Two-column `gap violation` series, one line per scored sample.
pub fn gap_violation_series(scores: &[Option<WarmStartScore>]) -> String {
    let mut s = String::from("# optimality_gap voltage_violation\n");
    for sc in scores.iter().flatten() {
        let _ = writeln!(s, "{} {}", sc.optimality_gap, sc.voltage_violation);
    }
    s
}
