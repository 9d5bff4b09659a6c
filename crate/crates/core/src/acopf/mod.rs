//! AC power-flow physics and the AC-OPF solver.

mod flows;
mod ipm;
mod opf;
mod powerflow;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Demand, Network};

pub use flows::{line_flows, power_balance_residual, residual_jacobian, LineFlow};
pub(crate) use flows::stacked_residual;
pub(crate) use ipm::solve_lu;
pub use opf::{solve_opf, solve_opf_with, OpfOptions, OpfSolution, SolveStatus};
pub use powerflow::{newton_power_flow, standard_free_vars, PowerFlowResult};

#[derive(Debug, Error, PartialEq)]
pub enum OpfError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("power flow did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("singular power-flow Jacobian")]
    Singular,
}

/// Voltages and dispatch; the decision variables of the OPF problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowState {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub p_g: Vec<f64>,
    pub q_g: Vec<f64>,
}

impl PowerFlowState {
    /// `v = 1`, `θ = 0`, dispatch at the midpoint of its bounds.
    pub fn flat_start(net: &Network) -> Self {
        Self {
            v: vec![1.0; net.n_bus()],
            theta: vec![0.0; net.n_bus()],
            p_g: net
                .generators()
                .iter()
                .map(|g| 0.5 * (g.p_min + g.p_max))
                .collect(),
            q_g: net
                .generators()
                .iter()
                .map(|g| 0.5 * (g.q_min + g.q_max))
                .collect(),
        }
    }

    pub fn check_dims(&self, net: &Network) -> Result<(), OpfError> {
        let ok = self.v.len() == net.n_bus()
            && self.theta.len() == net.n_bus()
            && self.p_g.len() == net.n_gen()
            && self.q_g.len() == net.n_gen();
        if ok {
            Ok(())
        } else {
            Err(OpfError::Dimension(format!(
                "state has ({}, {}, {}, {}) entries, network needs ({n}, {n}, {g}, {g})",
                self.v.len(),
                self.theta.len(),
                self.p_g.len(),
                self.q_g.len(),
                n = net.n_bus(),
                g = net.n_gen()
            )))
        }
    }

    pub fn to_vector(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(2 * (self.v.len() + self.p_g.len()));
        x.extend_from_slice(&self.v);
        x.extend_from_slice(&self.theta);
        x.extend_from_slice(&self.p_g);
        x.extend_from_slice(&self.q_g);
        x
    }

    pub fn from_vector(net: &Network, x: &[f64]) -> Self {
        let layout = VarLayout::new(net);
        assert_eq!(x.len(), layout.len());
        let (n, g) = (net.n_bus(), net.n_gen());
        Self {
            v: x[..n].to_vec(),
            theta: x[n..2 * n].to_vec(),
            p_g: x[2 * n..2 * n + g].to_vec(),
            q_g: x[2 * n + g..].to_vec(),
        }
    }
}

/// Position of each decision variable in the stacked vector `(v, θ, p_g, q_g)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarLayout {
    n_bus: usize,
    n_gen: usize,
}

impl VarLayout {
    pub fn new(net: &Network) -> Self {
        Self {
            n_bus: net.n_bus(),
            n_gen: net.n_gen(),
        }
    }

    pub fn len(&self) -> usize {
        2 * (self.n_bus + self.n_gen)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn v(&self, bus: usize) -> usize {
        bus
    }

    pub fn theta(&self, bus: usize) -> usize {
        self.n_bus + bus
    }

    pub fn p_g(&self, gen: usize) -> usize {
        2 * self.n_bus + gen
    }

    pub fn q_g(&self, gen: usize) -> usize {
        2 * self.n_bus + self.n_gen + gen
    }

    pub fn dispatch_range(&self) -> std::ops::Range<usize> {
        2 * self.n_bus..self.len()
    }
}

/// Coordinate-format sparse matrix; duplicate entries are summed.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        self.entries.push((row, col, value));
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries
            .iter()
            .filter(|(r, c, _)| *r == row && *c == col)
            .map(|(_, _, v)| v)
            .sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for &(r, c, v) in &self.entries {
            m[(r, c)] += v;
        }
        m
    }
}

/// Total generation cost `Σ c2 p² + c1 p + c0`.
pub fn objective(net: &Network, state: &PowerFlowState) -> f64 {
    net.generators()
        .iter()
        .zip(&state.p_g)
        .map(|(g, &p)| g.cost(p))
        .sum()
}

/// Cost with linear coefficients replaced by `c1`.
pub fn objective_with_c1(net: &Network, p_g: &[f64], c1: &[f64]) -> f64 {
    net.generators()
        .iter()
        .zip(p_g)
        .zip(c1)
        .map(|((g, &p), &c)| g.cost_c2 * p * p + c * p + g.cost_c0)
        .sum()
}

pub(crate) fn check_load(net: &Network, load: &Demand) -> Result<(), OpfError> {
    if load.p.len() != net.n_bus() || load.q.len() != net.n_bus() {
        return Err(OpfError::Dimension(format!(
            "load has {} / {} entries, network has {} buses",
            load.p.len(),
            load.q.len(),
            net.n_bus()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Bus, Generator};

    fn single_gen(c2: f64, c1: f64, c0: f64) -> Network {
        let bus = Bus {
            id: 1,
            v_min: 0.9,
            v_max: 1.1,
            g_sh: 0.0,
            b_sh: 0.0,
            is_slack: true,
        };
        let gen = Generator {
            bus: 1,
            p_min: 0.0,
            p_max: 5.0,
            q_min: -1.0,
            q_max: 1.0,
            cost_c2: c2,
            cost_c1: c1,
            cost_c0: c0,
        };
        Network::new(100.0, vec![bus], vec![gen], vec![], vec![]).unwrap()
    }

    #[test]
    fn objective_arithmetic() {
        let net = single_gen(1.0, 2.0, 0.0);
        let mut s = PowerFlowState::flat_start(&net);
        s.p_g[0] = 3.0;
        assert_eq!(objective(&net, &s), 15.0);
        let net = single_gen(1.0, 2.0, 7.5);
        s.p_g[0] = 0.0;
        assert_eq!(objective(&net, &s), 7.5);
    }

    #[test]
    fn state_vector_round_trip() {
        let net = single_gen(0.0, 1.0, 0.0);
        let s = PowerFlowState {
            v: vec![1.01],
            theta: vec![0.0],
            p_g: vec![0.3],
            q_g: vec![-0.2],
        };
        assert_eq!(PowerFlowState::from_vector(&net, &s.to_vector()), s);
        let bad = PowerFlowState {
            v: vec![1.0, 1.0],
            ..s
        };
        assert!(bad.check_dims(&net).is_err());
    }

    #[test]
    fn sparse_sums_duplicates() {
        let mut m = SparseMatrix::new(2, 2);
        m.push(0, 1, 1.5);
        m.push(0, 1, 0.5);
        assert_eq!(m.get(0, 1), 2.0);
        assert_eq!(m.to_dense()[(0, 1)], 2.0);
    }
}
