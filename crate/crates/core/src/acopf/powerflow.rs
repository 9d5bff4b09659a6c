//! Newton–Raphson power flow over a chosen set of free variables.

use nalgebra::{DMatrix, DVector};

use super::flows::{residual_jacobian, stacked_residual};
use super::ipm::solve_lu;
use super::{check_load, OpfError, PowerFlowState, VarLayout};
use crate::grid::{Demand, Network};

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowResult {
    pub state: PowerFlowState,
    pub iterations: usize,
    pub max_residual: f64,
}

/// The classic bus-type split: angles free except at the slack, magnitudes
/// free at buses without generation, and at every generator bus the reactive
/// output of its first generator; the slack's first generator also takes up
/// the active-power mismatch.
pub fn standard_free_vars(net: &Network) -> Result<Vec<usize>, OpfError> {
    let layout = VarLayout::new(net);
    let n = net.n_bus();
    let mut first_gen = vec![None; n];
    for (k, &b) in net.gen_bus().iter().enumerate() {
        first_gen[b].get_or_insert(k);
    }
    let slack_gen = first_gen[net.slack()].ok_or_else(|| {
        OpfError::Dimension("slack bus has no generator to absorb the mismatch".into())
    })?;
    let mut free = Vec::with_capacity(2 * n);
    for b in 0..n {
        if b != net.slack() {
            free.push(layout.theta(b));
        }
        match first_gen[b] {
            Some(k) => free.push(layout.q_g(k)),
            None => free.push(layout.v(b)),
        }
    }
    free.push(layout.p_g(slack_gen));
    Ok(free)
}

/// Drives `[Δp; Δq]` to zero by Newton steps on the variables in `free`
/// (indices into the [`VarLayout`] vector); every other variable stays at
/// its value in `init`. `free` must hold exactly `2·n_bus` distinct indices.
pub fn newton_power_flow(
    net: &Network,
    load: &Demand,
    init: &PowerFlowState,
    free: &[usize],
    tol: f64,
    max_iter: usize,
) -> Result<PowerFlowResult, OpfError> {
    check_load(net, load)?;
    init.check_dims(net)?;
    let layout = VarLayout::new(net);
    let m = 2 * net.n_bus();
    if free.len() != m {
        return Err(OpfError::Dimension(format!(
            "{} free variables for {m} balance equations",
            free.len()
        )));
    }
    if free.iter().any(|&i| i >= layout.len()) {
        return Err(OpfError::Dimension("free variable index out of range".into()));
    }

    let mut x = init.to_vector();
    let mut state = init.clone();
    let mut residual = stacked_residual(net, &state, load);
    let mut norm = residual.iter().fold(0.0f64, |a, r| a.max(r.abs()));
    for iter in 0..=max_iter {
        if norm <= tol {
            return Ok(PowerFlowResult {
                state,
                iterations: iter,
                max_residual: norm,
            });
        }
        if iter == max_iter || !norm.is_finite() {
            break;
        }
        let full = residual_jacobian(net, &state, load).to_dense();
        let mut jac = DMatrix::zeros(m, m);
        for (c, &var) in free.iter().enumerate() {
            jac.set_column(c, &full.column(var));
        }
        let rhs = -DVector::from_vec(residual);
        let step = solve_lu(&jac, &rhs).ok_or(OpfError::Singular)?;
        for (c, &var) in free.iter().enumerate() {
            x[var] += step[c];
        }
        state = PowerFlowState::from_vector(net, &x);
        residual = stacked_residual(net, &state, load);
        norm = residual.iter().fold(0.0f64, |a, r| a.max(r.abs()));
    }
    Err(OpfError::NoConvergence {
        iterations: max_iter,
        residual: norm,
    })
}
