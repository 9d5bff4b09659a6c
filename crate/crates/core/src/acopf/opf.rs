use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::flows::{add_balance_hessian, directed_flows, residual_jacobian, stacked_residual};
use super::ipm::{solve_lu, Ipm, IpmOptions, IpmStatus, Nlp};
use super::{check_load, OpfError, PowerFlowState, VarLayout};
use crate::grid::{Demand, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpfSolution {
    pub state: PowerFlowState,
    pub objective: f64,
    pub status: SolveStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
}

impl OpfSolution {
    pub fn is_converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    /// One-line JSON export of the solve.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("solution serialization cannot fail")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpfOptions {
    pub tol_kkt: f64,
    pub tol_feas: f64,
    pub max_iter: usize,
    pub enforce_flow_limits: bool,
    /// Number of starts; starts after the first perturb the flat start.
    pub n_starts: usize,
    pub seed: u64,
}

impl Default for OpfOptions {
    fn default() -> Self {
        Self {
            tol_kkt: 1e-6,
            tol_feas: 1e-6,
            max_iter: 200,
            enforce_flow_limits: true,
            n_starts: 1,
            seed: 0,
        }
    }
}

/// Bound on one variable; `lo == hi` becomes an equality.
#[derive(Debug, Clone, Copy)]
struct VarBound {
    var: usize,
    lo: f64,
    hi: f64,
}

struct OpfProblem<'a> {
    net: &'a Network,
    load: &'a Demand,
    layout: VarLayout,
    c2: Vec<f64>,
    c1: Vec<f64>,
    c0: Vec<f64>,
    cost_scale: f64,
    fixed: Vec<(usize, f64)>,
    upper: Vec<(usize, f64)>,
    lower: Vec<(usize, f64)>,
    limited_lines: Vec<usize>,
}

impl<'a> OpfProblem<'a> {
    fn new(net: &'a Network, load: &'a Demand, c1: Vec<f64>, limits: bool) -> Self {
        let layout = VarLayout::new(net);
        let mut bounds = Vec::new();
        for (b, bus) in net.buses().iter().enumerate() {
            bounds.push(VarBound {
                var: layout.v(b),
                lo: bus.v_min,
                hi: bus.v_max,
            });
        }
        for (k, gen) in net.generators().iter().enumerate() {
            bounds.push(VarBound {
                var: layout.p_g(k),
                lo: gen.p_min,
                hi: gen.p_max,
            });
            bounds.push(VarBound {
                var: layout.q_g(k),
                lo: gen.q_min,
                hi: gen.q_max,
            });
        }
        let mut fixed = vec![(layout.theta(net.slack()), 0.0)];
        let (mut upper, mut lower) = (Vec::new(), Vec::new());
        for bd in bounds {
            if bd.lo == bd.hi {
                fixed.push((bd.var, bd.lo));
                continue;
            }
            if bd.hi.is_finite() {
                upper.push((bd.var, bd.hi));
            }
            if bd.lo.is_finite() {
                lower.push((bd.var, bd.lo));
            }
        }
        let limited_lines = if limits {
            (0..net.n_line())
                .filter(|&l| net.lines()[l].s_max.is_finite())
                .collect()
        } else {
            Vec::new()
        };
        let gens = net.generators();
        let c2: Vec<f64> = gens.iter().map(|g| g.cost_c2).collect();
        let c0: Vec<f64> = gens.iter().map(|g| g.cost_c0).collect();
        let grad_scale = gens
            .iter()
            .zip(&c1)
            .map(|(g, c)| c.abs() + 2.0 * g.cost_c2 * g.p_max.abs().max(g.p_min.abs()))
            .fold(1.0f64, f64::max);
        Self {
            net,
            load,
            layout,
            c2,
            c1,
            c0,
            cost_scale: 1.0 / grad_scale,
            fixed,
            upper,
            lower,
            limited_lines,
        }
    }

    fn state(&self, x: &DVector<f64>) -> PowerFlowState {
        PowerFlowState::from_vector(self.net, x.as_slice())
    }

    fn cost(&self, x: &DVector<f64>) -> f64 {
        (0..self.c1.len())
            .map(|k| {
                let p = x[self.layout.p_g(k)];
                self.c2[k] * p * p + self.c1[k] * p + self.c0[k]
            })
            .sum()
    }
}

impl Nlp for OpfProblem<'_> {
    fn n_vars(&self) -> usize {
        self.layout.len()
    }

    fn objective(&self, x: &DVector<f64>) -> f64 {
        self.cost_scale * self.cost(x)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut grad = DVector::zeros(self.layout.len());
        for k in 0..self.c1.len() {
            let i = self.layout.p_g(k);
            grad[i] = self.cost_scale * (2.0 * self.c2[k] * x[i] + self.c1[k]);
        }
        grad
    }

    fn equalities(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = stacked_residual(self.net, &self.state(x), self.load);
        g.extend(self.fixed.iter().map(|&(i, val)| x[i] - val));
        DVector::from_vec(g)
    }

    fn eq_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let jac = residual_jacobian(self.net, &self.state(x), self.load);
        let rows = jac.nrows() + self.fixed.len();
        let mut out = DMatrix::zeros(rows, self.layout.len());
        for &(r, c, v) in jac.entries() {
            out[(r, c)] += v;
        }
        for (k, &(i, _)) in self.fixed.iter().enumerate() {
            out[(jac.nrows() + k, i)] = 1.0;
        }
        out
    }

    fn inequalities(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut h = Vec::with_capacity(
            2 * self.limited_lines.len() + self.upper.len() + self.lower.len(),
        );
        if !self.limited_lines.is_empty() {
            let s = self.state(x);
            let flows = directed_flows(self.net, &s.v, &s.theta);
            for &l in &self.limited_lines {
                let smax = self.net.lines()[l].s_max;
                for f in &flows[2 * l..2 * l + 2] {
                    h.push(f.p.value * f.p.value + f.q.value * f.q.value - smax * smax);
                }
            }
        }
        h.extend(self.upper.iter().map(|&(i, hi)| x[i] - hi));
        h.extend(self.lower.iter().map(|&(i, lo)| lo - x[i]));
        DVector::from_vec(h)
    }

    fn ineq_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let rows = 2 * self.limited_lines.len() + self.upper.len() + self.lower.len();
        let mut jac = DMatrix::zeros(rows, self.layout.len());
        let mut r = 0;
        if !self.limited_lines.is_empty() {
            let s = self.state(x);
            let flows = directed_flows(self.net, &s.v, &s.theta);
            for &l in &self.limited_lines {
                for f in &flows[2 * l..2 * l + 2] {
                    let vars = f.vars(&self.layout);
                    for k in 0..4 {
                        jac[(r, vars[k])] +=
                            2.0 * (f.p.value * f.p.grad[k] + f.q.value * f.q.grad[k]);
                    }
                    r += 1;
                }
            }
        }
        for &(i, _) in &self.upper {
            jac[(r, i)] = 1.0;
            r += 1;
        }
        for &(i, _) in &self.lower {
            jac[(r, i)] = -1.0;
            r += 1;
        }
        jac
    }

    fn lagrangian_hessian(
        &self,
        x: &DVector<f64>,
        lam: &DVector<f64>,
        mu: &DVector<f64>,
    ) -> DMatrix<f64> {
        let n = self.layout.len();
        let nb = self.net.n_bus();
        let mut hess = DMatrix::zeros(n, n);
        for k in 0..self.c2.len() {
            let i = self.layout.p_g(k);
            hess[(i, i)] += 2.0 * self.cost_scale * self.c2[k];
        }
        let s = self.state(x);
        let flows = directed_flows(self.net, &s.v, &s.theta);
        add_balance_hessian(
            self.net,
            &flows,
            &lam.as_slice()[..nb],
            &lam.as_slice()[nb..2 * nb],
            &mut hess,
        );
        for (row, &l) in self.limited_lines.iter().enumerate() {
            for (d, f) in flows[2 * l..2 * l + 2].iter().enumerate() {
                let w = mu[2 * row + d];
                if w == 0.0 {
                    continue;
                }
                let vars = f.vars(&self.layout);
                for a in 0..4 {
                    for b in 0..4 {
                        let val = f.p.grad[a] * f.p.grad[b]
                            + f.p.value * f.p.hess[a][b]
                            + f.q.grad[a] * f.q.grad[b]
                            + f.q.value * f.q.hess[a][b];
                        hess[(vars[a], vars[b])] += 2.0 * w * val;
                    }
                }
            }
        }
        hess
    }
}

/// Minimum-norm Newton corrections `dx = -Jᵀ(JJᵀ)⁻¹g` on the equalities.
fn polish_equalities<P: Nlp>(problem: &P, x: &mut DVector<f64>, tol: f64) {
    for _ in 0..8 {
        let g = problem.equalities(x);
        if g.amax() <= tol {
            return;
        }
        let jac = problem.eq_jacobian(x);
        let jjt = &jac * jac.transpose();
        let Some(w) = solve_lu(&jjt, &(-&g)) else {
            return;
        };
        let dx = jac.tr_mul(&w);
        let trial = &*x + dx;
        if problem.equalities(&trial).amax() >= g.amax() {
            return;
        }
        *x = trial;
    }
}

fn start_point(net: &Network, base: &PowerFlowState, start: usize, seed: u64) -> PowerFlowState {
    if start == 0 {
        return base.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(start as u64);
    let mut s = base.clone();
    for (b, bus) in net.buses().iter().enumerate() {
        s.v[b] = rng.random_range(bus.v_min..=bus.v_max);
        if b != net.slack() {
            s.theta[b] = rng.random_range(-0.2..=0.2);
        }
    }
    for (k, gen) in net.generators().iter().enumerate() {
        s.p_g[k] = rng.random_range(gen.p_min..=gen.p_max);
    }
    s
}

/// Solves the AC-OPF with default options.
pub fn solve_opf(
    net: &Network,
    load: &Demand,
    cost_override: Option<&[f64]>,
    init: Option<&PowerFlowState>,
) -> Result<OpfSolution, OpfError> {
    solve_opf_with(net, load, cost_override, init, &OpfOptions::default())
}

/// Solves the AC-OPF to a local optimum. With `n_starts > 1` the converged
/// start with the lowest objective wins (ties keep the earliest start).
pub fn solve_opf_with(
    net: &Network,
    load: &Demand,
    cost_override: Option<&[f64]>,
    init: Option<&PowerFlowState>,
    opts: &OpfOptions,
) -> Result<OpfSolution, OpfError> {
    check_load(net, load)?;
    let c1 = match cost_override {
        Some(c) if c.len() != net.n_gen() => {
            return Err(OpfError::Dimension(format!(
                "cost override has {} entries, network has {} generators",
                c.len(),
                net.n_gen()
            )))
        }
        Some(c) => c.to_vec(),
        None => net.nominal_c1(),
    };
    let base = match init {
        Some(s) => {
            s.check_dims(net)?;
            s.clone()
        }
        None => PowerFlowState::flat_start(net),
    };
    let problem = OpfProblem::new(net, load, c1, opts.enforce_flow_limits);
    let ipm_opts = IpmOptions {
        tol_kkt: opts.tol_kkt,
        tol_feas: opts.tol_feas,
        max_iter: opts.max_iter,
    };

    let mut best: Option<OpfSolution> = None;
    for start in 0..opts.n_starts.max(1) {
        let x0 = start_point(net, &base, start, opts.seed);
        let mut res = Ipm::new(&problem, ipm_opts).solve(DVector::from_vec(x0.to_vector()));
        let status = match res.status {
            IpmStatus::Converged => {
                polish_equalities(&problem, &mut res.x, 1e-11);
                let layout = VarLayout::new(net);
                let shift = res.x[layout.theta(net.slack())];
                for b in 0..net.n_bus() {
                    res.x[layout.theta(b)] -= shift;
                }
                SolveStatus::Converged
            }
            IpmStatus::MaxIter if res.feas <= 1e-3 => SolveStatus::MaxIter,
            _ => SolveStatus::Infeasible,
        };
        let state = problem.state(&res.x);
        let sol = OpfSolution {
            objective: objective_of(&problem, &res.x),
            state,
            status,
            kkt_residual: res.kkt_residual,
            iterations: res.iterations,
        };
        best = Some(match best {
            None => sol,
            Some(prev) => pick(prev, sol),
        });
    }
    Ok(best.expect("at least one start"))
}

fn objective_of(problem: &OpfProblem<'_>, x: &DVector<f64>) -> f64 {
    problem.cost(x)
}

fn pick(a: OpfSolution, b: OpfSolution) -> OpfSolution {
    match (a.is_converged(), b.is_converged()) {
        (true, false) => a,
        (false, true) => b,
        _ if b.objective < a.objective => b,
        _ => a,
    }
}
