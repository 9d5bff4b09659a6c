//! Line flows, bus power balance and their first and second derivatives.
//!
//! Every branch flow is a function of four local variables
//! `(v_a, v_b, θ_a, θ_b)` with the shape
//!
//! ```text
//! value = c·v_a² + s·v_a·v_b·F(θ_a − θ_b)
//! ```
//!
//! where `F` is either `g cos δ + b sin δ` (active) or `g sin δ − b cos δ`
//! (reactive). The π-model uses `s = −1` with self terms `c = g` and
//! `c = −(b + b_ch/2)`; the literal model uses `s = +1, c = 0`.

use nalgebra::DMatrix;

use super::{PowerFlowState, SparseMatrix, VarLayout};
use crate::grid::{Demand, FlowModel, Network};

/// Value, local gradient and local Hessian of one directed branch term.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BranchTerm {
    pub value: f64,
    pub grad: [f64; 4],
    pub hess: [[f64; 4]; 4],
}

fn branch_term(c: f64, s: f64, va: f64, vb: f64, f: f64, fp: f64, fpp: f64) -> BranchTerm {
    let vv = va * vb;
    let mut hess = [[0.0; 4]; 4];
    hess[0][0] = 2.0 * c;
    hess[0][1] = s * f;
    hess[0][2] = s * vb * fp;
    hess[0][3] = -s * vb * fp;
    hess[1][2] = s * va * fp;
    hess[1][3] = -s * va * fp;
    hess[2][2] = s * vv * fpp;
    hess[2][3] = -s * vv * fpp;
    hess[3][3] = s * vv * fpp;
    for i in 0..4 {
        for j in 0..i {
            hess[i][j] = hess[j][i];
        }
    }
    BranchTerm {
        value: c * va * va + s * vv * f,
        grad: [2.0 * c * va + s * vb * f, s * va * f, s * vv * fp, -s * vv * fp],
        hess,
    }
}

/// Active and reactive flow leaving bus `a` toward bus `b` on one line.
#[derive(Debug, Clone, Copy)]
pub(crate) struct DirectedFlow {
    pub a: usize,
    pub b: usize,
    pub p: BranchTerm,
    pub q: BranchTerm,
}

impl DirectedFlow {
    /// Global variable indices of the local `(v_a, v_b, θ_a, θ_b)` ordering.
    pub fn vars(&self, layout: &VarLayout) -> [usize; 4] {
        [
            layout.v(self.a),
            layout.v(self.b),
            layout.theta(self.a),
            layout.theta(self.b),
        ]
    }
}

/// Both orientations of every line, in line order: `[l0 i→j, l0 j→i, l1 i→j, ...]`.
pub(crate) fn directed_flows(net: &Network, v: &[f64], theta: &[f64]) -> Vec<DirectedFlow> {
    let model = net.flow_model();
    let mut out = Vec::with_capacity(2 * net.n_line());
    for (line, &(i, j)) in net.lines().iter().zip(net.line_ends()) {
        for (a, b) in [(i, j), (j, i)] {
            let d = theta[a] - theta[b];
            let (sin, cos) = d.sin_cos();
            let fa = line.g * cos + line.b * sin;
            let fa_p = -line.g * sin + line.b * cos;
            let fr = line.g * sin - line.b * cos;
            let fr_p = fa;
            let (s, cp, cq) = match model {
                FlowModel::Pi => (-1.0, line.g, -(line.b + 0.5 * line.b_ch)),
                FlowModel::Paper => (1.0, 0.0, 0.0),
            };
            out.push(DirectedFlow {
                a,
                b,
                p: branch_term(cp, s, v[a], v[b], fa, fa_p, -fa),
                q: branch_term(cq, s, v[a], v[b], fr, fr_p, -fr),
            });
        }
    }
    out
}

/// Flow of one line in both orientations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFlow {
    pub p_from: f64,
    pub q_from: f64,
    pub p_to: f64,
    pub q_to: f64,
}

impl LineFlow {
    pub fn s_from_sq(&self) -> f64 {
        self.p_from * self.p_from + self.q_from * self.q_from
    }

    pub fn s_to_sq(&self) -> f64 {
        self.p_to * self.p_to + self.q_to * self.q_to
    }
}

pub fn line_flows(net: &Network, state: &PowerFlowState) -> Vec<LineFlow> {
    directed_flows(net, &state.v, &state.theta)
        .chunks(2)
        .map(|pair| LineFlow {
            p_from: pair[0].p.value,
            q_from: pair[0].q.value,
            p_to: pair[1].p.value,
            q_to: pair[1].q.value,
        })
        .collect()
}

fn shunts_active(net: &Network) -> bool {
    net.flow_model() == FlowModel::Pi
}

/// Per-bus mismatch `(Δp, Δq)`: generation − demand − flows leaving the bus
/// (and, for the π-model, shunt consumption).
pub fn power_balance_residual(
    net: &Network,
    state: &PowerFlowState,
    load: &Demand,
) -> (Vec<f64>, Vec<f64>) {
    let n = net.n_bus();
    let mut dp: Vec<f64> = (0..n).map(|b| -load.p[b]).collect();
    let mut dq: Vec<f64> = (0..n).map(|b| -load.q[b]).collect();
    for (k, &b) in net.gen_bus().iter().enumerate() {
        dp[b] += state.p_g[k];
        dq[b] += state.q_g[k];
    }
    for flow in directed_flows(net, &state.v, &state.theta) {
        dp[flow.a] -= flow.p.value;
        dq[flow.a] -= flow.q.value;
    }
    if shunts_active(net) {
        for (b, bus) in net.buses().iter().enumerate() {
            let v2 = state.v[b] * state.v[b];
            dp[b] -= bus.g_sh * v2;
            dq[b] += bus.b_sh * v2;
        }
    }
    (dp, dq)
}

/// Stacked residual `[Δp; Δq]`.
pub(crate) fn stacked_residual(net: &Network, state: &PowerFlowState, load: &Demand) -> Vec<f64> {
    let (mut dp, dq) = power_balance_residual(net, state, load);
    dp.extend(dq);
    dp
}

/// Jacobian of `[Δp; Δq]` with respect to `(v, θ, p_g, q_g)` in [`VarLayout`] order.
pub fn residual_jacobian(net: &Network, state: &PowerFlowState, _load: &Demand) -> SparseMatrix {
    let layout = VarLayout::new(net);
    let n = net.n_bus();
    let mut jac = SparseMatrix::new(2 * n, layout.len());
    for (k, &b) in net.gen_bus().iter().enumerate() {
        jac.push(b, layout.p_g(k), 1.0);
        jac.push(n + b, layout.q_g(k), 1.0);
    }
    for flow in directed_flows(net, &state.v, &state.theta) {
        let vars = flow.vars(&layout);
        for (col, (gp, gq)) in vars.iter().zip(flow.p.grad.iter().zip(&flow.q.grad)) {
            jac.push(flow.a, *col, -gp);
            jac.push(n + flow.a, *col, -gq);
        }
    }
    if shunts_active(net) {
        for (b, bus) in net.buses().iter().enumerate() {
            if bus.g_sh != 0.0 {
                jac.push(b, layout.v(b), -2.0 * bus.g_sh * state.v[b]);
            }
            if bus.b_sh != 0.0 {
                jac.push(n + b, layout.v(b), 2.0 * bus.b_sh * state.v[b]);
            }
        }
    }
    jac
}

/// Adds `Σ_b λp_b ∇²Δp_b + λq_b ∇²Δq_b` into `hess`.
pub(crate) fn add_balance_hessian(
    net: &Network,
    flows: &[DirectedFlow],
    lam_p: &[f64],
    lam_q: &[f64],
    hess: &mut DMatrix<f64>,
) {
    let layout = VarLayout::new(net);
    for flow in flows {
        let vars = flow.vars(&layout);
        let (wp, wq) = (lam_p[flow.a], lam_q[flow.a]);
        for r in 0..4 {
            for c in 0..4 {
                hess[(vars[r], vars[c])] -= wp * flow.p.hess[r][c] + wq * flow.q.hess[r][c];
            }
        }
    }
    if shunts_active(net) {
        for (b, bus) in net.buses().iter().enumerate() {
            let iv = layout.v(b);
            hess[(iv, iv)] += -2.0 * bus.g_sh * lam_p[b] + 2.0 * bus.b_sh * lam_q[b];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Bus, Generator, Line};

    fn one_line(g: f64, b: f64, b_ch: f64, model: FlowModel) -> Network {
        let buses = vec![
            Bus {
                id: 1,
                v_min: 0.9,
                v_max: 1.1,
                g_sh: 0.0,
                b_sh: 0.0,
                is_slack: true,
            },
            Bus {
                id: 2,
                v_min: 0.9,
                v_max: 1.1,
                g_sh: 0.0,
                b_sh: 0.0,
                is_slack: false,
            },
        ];
        let gens = vec![Generator {
            bus: 1,
            p_min: 0.0,
            p_max: 2.0,
            q_min: -2.0,
            q_max: 2.0,
            cost_c2: 0.0,
            cost_c1: 1.0,
            cost_c0: 0.0,
        }];
        let lines = vec![Line {
            from: 1,
            to: 2,
            g,
            b,
            b_ch,
            s_max: 10.0,
        }];
        Network::with_flow_model(100.0, buses, gens, lines, vec![], model).unwrap()
    }

    fn state(v: [f64; 2], theta: [f64; 2]) -> PowerFlowState {
        PowerFlowState {
            v: v.to_vec(),
            theta: theta.to_vec(),
            p_g: vec![0.0],
            q_g: vec![0.0],
        }
    }

    #[test]
    fn literal_model_at_flat_start() {
        let net = one_line(0.9901, -9.901, 0.0, FlowModel::Paper);
        let f = line_flows(&net, &state([1.0, 1.0], [0.0, 0.0]))[0];
        assert!((f.p_from - 0.9901).abs() < 1e-12);
        assert!((f.q_from - 9.901).abs() < 1e-12);
    }

    #[test]
    fn lossless_pi_line_at_flat_start_carries_nothing() {
        let net = one_line(0.0, -10.0, 0.0, FlowModel::Pi);
        let f = line_flows(&net, &state([1.0, 1.0], [0.0, 0.0]))[0];
        assert_eq!(f.p_from, 0.0);
        assert_eq!(f.p_to, 0.0);
    }

    #[test]
    fn literal_model_angle_difference() {
        let net = one_line(0.0, -10.0, 0.0, FlowModel::Paper);
        let f = line_flows(&net, &state([1.0, 1.0], [0.1, 0.0]))[0];
        assert!((f.p_from - (-10.0 * 0.1f64.sin())).abs() < 1e-12);
        assert!((f.p_from + 0.9983).abs() < 1e-4);
    }

    #[test]
    fn literal_model_angle_derivative_at_flat_start() {
        let net = one_line(0.3, -10.0, 0.0, FlowModel::Paper);
        let flows = directed_flows(&net, &[1.0, 1.0], &[0.0, 0.0]);
        // ∂f_p/∂θ_i = v_i v_j b cos(0)
        assert!((flows[0].p.grad[2] - (-10.0)).abs() < 1e-12);
    }

    #[test]
    fn isolated_bus_balances_trivially() {
        let net = one_line(1.0, -10.0, 0.0, FlowModel::Pi);
        let (dp, dq) = power_balance_residual(
            &net,
            &state([1.0, 1.0], [0.0, 0.0]),
            &Demand::zeros(2),
        );
        assert_eq!(dp, vec![0.0, 0.0]);
        assert_eq!(dq, vec![0.0, 0.0]);
    }

    #[test]
    fn demand_only_mismatch() {
        let net = one_line(0.0, -10.0, 0.0, FlowModel::Pi);
        let mut load = Demand::zeros(2);
        load.p[1] = 0.5;
        let (dp, _) = power_balance_residual(&net, &state([1.0, 1.0], [0.0, 0.0]), &load);
        assert_eq!(dp[1], -0.5);
    }

    #[test]
    fn generator_column_is_identity() {
        let net = one_line(1.0, -10.0, 0.1, FlowModel::Pi);
        let jac = residual_jacobian(&net, &state([1.0, 1.0], [0.0, 0.0]), &Demand::zeros(2))
            .to_dense();
        let layout = VarLayout::new(&net);
        assert_eq!(jac[(0, layout.p_g(0))], 1.0);
        assert_eq!(jac[(2, layout.q_g(0))], 1.0);
        assert_eq!(jac[(1, layout.p_g(0))], 0.0);
    }

    #[test]
    fn directions_share_series_terms() {
        let net = one_line(0.7, -6.0, 0.2, FlowModel::Pi);
        let flows = directed_flows(&net, &[1.02, 0.97], &[0.0, -0.05]);
        // swapping the endpoints maps one orientation onto the other
        let swapped = directed_flows(&net, &[0.97, 1.02], &[-0.05, 0.0]);
        assert!((flows[0].p.value - swapped[1].p.value).abs() < 1e-15);
        assert!((flows[1].q.value - swapped[0].q.value).abs() < 1e-15);
    }
}
