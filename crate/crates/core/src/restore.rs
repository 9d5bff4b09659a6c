//! Load-flow restoration: the closest dispatch to a warm start that satisfies
//! the power-flow equations, and the warm-start quality metrics.
//!
//! Restoration solves
//!
//! ```text
//! minimize ‖p̃_g − p_g‖² + ‖q̃_g − q_g‖²   subject to   Δp = 0, Δq = 0
//! ```
//!
//! over `(ṽ, θ̃, p̃_g, q̃_g)` with `θ̃_slack = 0` and no inequality constraints.
//! An augmented-Lagrangian outer loop wraps damped Gauss–Newton inner solves,
//! and a final minimum-norm Newton correction tightens the equalities.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acopf::{
    objective_with_c1, residual_jacobian, solve_lu, stacked_residual, PowerFlowState, VarLayout,
};
use crate::dataset::OpfRecord;
use crate::grid::{Demand, Network};

#[derive(Debug, Error, PartialEq)]
pub enum RestoreError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("restoration did not converge; metrics need a converged result")]
    NotConverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RestoreStatus {
    Converged,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestorationResult {
    pub state: PowerFlowState,
    pub projection_objective: f64,
    /// Largest absolute power-balance mismatch at `state`.
    pub max_residual: f64,
    pub status: RestoreStatus,
    pub iterations: usize,
}

impl RestorationResult {
    pub fn is_converged(&self) -> bool {
        self.status == RestoreStatus::Converged
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RestoreOptions {
    pub max_outer: usize,
    pub max_inner: usize,
    /// Equality tolerance for convergence.
    pub tol_eq: f64,
}

impl Default for RestoreOptions {
    fn default() -> Self {
        Self {
            max_outer: 60,
            max_inner: 40,
            tol_eq: 1e-8,
        }
    }
}

struct Problem<'a> {
    net: &'a Network,
    load: &'a Demand,
    layout: VarLayout,
    /// every variable except the slack angle
    free: Vec<usize>,
    /// positions of the dispatch variables within `free`
    dispatch: Vec<usize>,
    target: Vec<f64>,
}

impl Problem<'_> {
    fn state(&self, y: &DVector<f64>) -> PowerFlowState {
        let mut x = vec![0.0; self.layout.len()];
        for (k, &i) in self.free.iter().enumerate() {
            x[i] = y[k];
        }
        PowerFlowState::from_vector(self.net, &x)
    }

    fn eq(&self, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(stacked_residual(self.net, &self.state(y), self.load))
    }

    fn eq_jac(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let full = residual_jacobian(self.net, &self.state(y), self.load).to_dense();
        let mut out = DMatrix::zeros(full.nrows(), self.free.len());
        for (k, &i) in self.free.iter().enumerate() {
            out.set_column(k, &full.column(i));
        }
        out
    }

    fn misfit(&self, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.dispatch.len(),
            self.dispatch.iter().zip(&self.target).map(|(&k, w)| y[k] - w),
        )
    }

    fn objective(&self, y: &DVector<f64>) -> f64 {
        self.misfit(y).norm_squared()
    }

    /// Gradient of `½‖dispatch − target‖²` in free coordinates.
    fn misfit_grad(&self, y: &DVector<f64>) -> DVector<f64> {
        let m = self.misfit(y);
        let mut g = DVector::zeros(self.free.len());
        for (j, &k) in self.dispatch.iter().enumerate() {
            g[k] = m[j];
        }
        g
    }
}

/// Damped Gauss–Newton on `½‖dispatch − w‖² + (ρ/2)‖g + λ/ρ‖²`.
fn inner_solve(p: &Problem<'_>, y: &mut DVector<f64>, lam: &DVector<f64>, rho: f64, max_iter: usize) -> usize {
    let n = y.len();
    let merit = |y: &DVector<f64>| {
        let g = p.eq(y) + lam / rho;
        0.5 * p.objective(y) + 0.5 * rho * g.norm_squared()
    };
    let mut damping = 1e-10;
    let mut current = merit(y);
    for it in 0..max_iter {
        let g = p.eq(y);
        let jac = p.eq_jac(y);
        let shifted = &g + lam / rho;
        let grad = p.misfit_grad(y) + jac.tr_mul(&shifted) * rho;
        if grad.amax() <= 1e-13 * (1.0 + rho) {
            return it;
        }
        let mut normal = jac.tr_mul(&jac) * rho;
        for &k in &p.dispatch {
            normal[(k, k)] += 1.0;
        }
        let scale = normal.diagonal().amax().max(1.0);
        let mut accepted = false;
        for _ in 0..20 {
            let mut m = normal.clone();
            for d in 0..n {
                m[(d, d)] += damping * scale;
            }
            let Some(step) = solve_lu(&m, &(-&grad)) else {
                damping *= 10.0;
                continue;
            };
            let trial = &*y + &step;
            let value = merit(&trial);
            if value.is_finite() && value <= current {
                let small = step.amax() <= 1e-15 * (1.0 + y.amax());
                *y = trial;
                current = value;
                damping = (damping * 0.1).max(1e-12);
                accepted = true;
                if small {
                    return it + 1;
                }
                break;
            }
            damping *= 10.0;
        }
        if !accepted {
            return it + 1;
        }
    }
    max_iter
}

/// Minimum-norm Newton corrections on the equalities alone.
fn polish(p: &Problem<'_>, y: &mut DVector<f64>) {
    for _ in 0..6 {
        let g = p.eq(y);
        if g.amax() <= 1e-13 {
            return;
        }
        let jac = p.eq_jac(y);
        let Some(w) = solve_lu(&(&jac * jac.transpose()), &(-&g)) else {
            return;
        };
        let trial = &*y + jac.tr_mul(&w);
        if p.eq(&trial).amax() >= g.amax() {
            return;
        }
        *y = trial;
    }
}

/// Projects the dispatch `(p_g, q_g)` onto the power-flow manifold for the
/// given demand, starting from `v = 1`, `θ = 0`.
pub fn restore(
    net: &Network,
    load: &Demand,
    p_g: &[f64],
    q_g: &[f64],
) -> Result<RestorationResult, RestoreError> {
    restore_with(net, load, p_g, q_g, &RestoreOptions::default())
}

pub fn restore_with(
    net: &Network,
    load: &Demand,
    p_g: &[f64],
    q_g: &[f64],
    opts: &RestoreOptions,
) -> Result<RestorationResult, RestoreError> {
    if load.p.len() != net.n_bus() || load.q.len() != net.n_bus() {
        return Err(RestoreError::Dimension(format!(
            "load covers {} buses, network has {}",
            load.p.len(),
            net.n_bus()
        )));
    }
    if p_g.len() != net.n_gen() || q_g.len() != net.n_gen() {
        return Err(RestoreError::Dimension(format!(
            "warm start has {} / {} dispatch entries, network has {} generators",
            p_g.len(),
            q_g.len(),
            net.n_gen()
        )));
    }
    if p_g.iter().chain(q_g).any(|v| !v.is_finite()) {
        return Err(RestoreError::Dimension("warm start is not finite".into()));
    }
    let layout = VarLayout::new(net);
    let slack_theta = layout.theta(net.slack());
    let free: Vec<usize> = (0..layout.len()).filter(|&i| i != slack_theta).collect();
    let dispatch: Vec<usize> = layout
        .dispatch_range()
        .map(|i| free.iter().position(|&f| f == i).expect("dispatch is free"))
        .collect();
    let mut target = p_g.to_vec();
    target.extend_from_slice(q_g);
    let p = Problem {
        net,
        load,
        layout,
        free,
        dispatch,
        target,
    };

    let init = PowerFlowState {
        v: vec![1.0; net.n_bus()],
        theta: vec![0.0; net.n_bus()],
        p_g: p_g.to_vec(),
        q_g: q_g.to_vec(),
    };
    let x0 = init.to_vector();
    let mut y = DVector::from_iterator(p.free.len(), p.free.iter().map(|&i| x0[i]));
    let mut lam = DVector::zeros(2 * net.n_bus());
    let mut rho = 10.0;
    let mut prev_infeas = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..opts.max_outer {
        iterations += inner_solve(&p, &mut y, &lam, rho, opts.max_inner);
        let g = p.eq(&y);
        let infeas = g.amax();
        lam += &g * rho;
        if infeas <= 1e-3 * opts.tol_eq {
            converged = true;
            break;
        }
        if infeas > 0.25 * prev_infeas {
            rho = (rho * 10.0).min(1e12);
        }
        prev_infeas = infeas;
    }
    polish(&p, &mut y);
    let max_residual = p.eq(&y).amax();
    let status = if max_residual <= opts.tol_eq && (converged || stationary(&p, &y)) {
        RestoreStatus::Converged
    } else {
        RestoreStatus::MaxIter
    };
    Ok(RestorationResult {
        state: p.state(&y),
        projection_objective: p.objective(&y),
        max_residual,
        status,
        iterations,
    })
}

/// First-order optimality: the misfit gradient lies in the row space of the
/// constraint Jacobian.
fn stationary(p: &Problem<'_>, y: &DVector<f64>) -> bool {
    let jac = p.eq_jac(y);
    let grad = p.misfit_grad(y);
    let Some(nu) = solve_lu(&(&jac * jac.transpose()), &(-(&jac * &grad))) else {
        return false;
    };
    let r = &grad + jac.tr_mul(&nu);
    r.amax() <= 1e-6 * (1.0 + grad.amax())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmStartScore {
    /// Cost of the restored dispatch under the record's realized costs.
    pub restored_cost: f64,
    pub optimality_gap: f64,
    pub optimality_gap_pct: f64,
    pub setpoint_error: f64,
    pub voltage_violation: f64,
}

/// `‖max(0, v − v̄)‖₂ + ‖max(0, v̲ − v)‖₂`.
pub fn voltage_violation(net: &Network, v: &[f64]) -> f64 {
    let mut over = 0.0;
    let mut under = 0.0;
    for (bus, &vb) in net.buses().iter().zip(v) {
        let o = (vb - bus.v_max).max(0.0);
        let u = (bus.v_min - vb).max(0.0);
        over += o * o;
        under += u * u;
    }
    over.sqrt() + under.sqrt()
}

/// Warm-start metrics against the historical record: cost gap to the
/// record's optimum, squared distance from warm start to restored dispatch,
/// and voltage-limit violation of the restored state.
pub fn score(
    net: &Network,
    record: &OpfRecord,
    result: &RestorationResult,
    warm_p: &[f64],
    warm_q: &[f64],
) -> Result<WarmStartScore, RestoreError> {
    if !result.is_converged() {
        return Err(RestoreError::NotConverged);
    }
    if warm_p.len() != net.n_gen()
        || warm_q.len() != net.n_gen()
        || record.c1_realized.len() != net.n_gen()
    {
        return Err(RestoreError::Dimension("dispatch length".into()));
    }
    let s = &result.state;
    let restored_cost = objective_with_c1(net, &s.p_g, &record.c1_realized);
    let gap = (restored_cost - record.objective).abs();
    let setpoint_error: f64 = s
        .p_g
        .iter()
        .zip(warm_p)
        .chain(s.q_g.iter().zip(warm_q))
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(WarmStartScore {
        restored_cost,
        optimality_gap: gap,
        optimality_gap_pct: 100.0 * gap / record.objective.abs().max(f64::MIN_POSITIVE),
        setpoint_error,
        voltage_violation: voltage_violation(net, &s.v),
    })
}
