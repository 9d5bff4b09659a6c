//! Primal–dual interior-point method for
//!
//! ```text
//! minimize f(x)  subject to  g(x) = 0,  h(x) ≤ 0
//! ```
//!
//! Inequalities carry slacks `z > 0` (`h(x) + z = 0`) and multipliers `μ > 0`.
//! Each iteration condenses the Newton step on the perturbed KKT conditions
//! into the reduced system
//!
//! ```text
//! [ ∇²L + J_hᵀ Z⁻¹ M J_h   J_gᵀ ] [dx]   [ -(∇L + J_hᵀ Z⁻¹ (μ∘h + γ)) ]
//! [ J_g                    0    ] [dλ] = [ -g                         ]
//! ```
//!
//! The barrier target `γ` follows Mehrotra's rule `σ = (μ_aff / μ)³` from a
//! pure Newton (affine) predictor solved with the same factorization. Steps
//! stop short of the slack/multiplier boundary and are halved only when they
//! inflate the perturbed KKT residual norm more than tenfold.
//! Convergence tests follow the scaled conditions used by MATPOWER's MIPS.

use nalgebra::{DMatrix, DVector};

pub(crate) trait Nlp {
    fn n_vars(&self) -> usize;
    fn objective(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn equalities(&self, x: &DVector<f64>) -> DVector<f64>;
    fn eq_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
    fn inequalities(&self, x: &DVector<f64>) -> DVector<f64>;
    fn ineq_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
    /// Hessian of `f + λᵀg + μᵀh`.
    fn lagrangian_hessian(
        &self,
        x: &DVector<f64>,
        lam: &DVector<f64>,
        mu: &DVector<f64>,
    ) -> DMatrix<f64>;
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct IpmOptions {
    pub tol_kkt: f64,
    pub tol_feas: f64,
    pub max_iter: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum IpmStatus {
    Converged,
    MaxIter,
    Failed,
}

#[derive(Debug, Clone)]
pub(crate) struct IpmResult {
    pub x: DVector<f64>,
    /// Multipliers of the equality and inequality constraints.
    #[cfg_attr(not(test), allow(dead_code))]
    pub lam: DVector<f64>,
    #[cfg_attr(not(test), allow(dead_code))]
    pub mu: DVector<f64>,
    pub iterations: usize,
    /// max of the scaled gradient and complementarity conditions
    pub kkt_residual: f64,
    /// scaled primal infeasibility
    pub feas: f64,
    pub status: IpmStatus,
}

const STEP_FRACTION: f64 = 0.99995;
const MAX_BACKTRACKS: usize = 10;
/// Full steps are taken unless they blow the perturbed KKT residual up by more
/// than this factor.
const MERIT_GROWTH: f64 = 10.0;

pub(crate) struct Ipm<'a, P: Nlp> {
    problem: &'a P,
    opts: IpmOptions,
}

struct Conditions {
    feas: f64,
    grad: f64,
    comp: f64,
    cost: f64,
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn max_step(value: &DVector<f64>, delta: &DVector<f64>) -> f64 {
    let mut alpha: f64 = 1.0;
    for (v, d) in value.iter().zip(delta.iter()) {
        if *d < 0.0 {
            alpha = alpha.min(-STEP_FRACTION * v / d);
        }
    }
    alpha
}

/// LU solve with diagonal regularization on failure.
pub(crate) fn solve_lu(a: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let solved = a.clone().lu().solve(rhs);
    if let Some(x) = solved.filter(|x| x.iter().all(|v| v.is_finite())) {
        return Some(x);
    }
    let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut reg = a.clone();
    for k in 0..reg.nrows() {
        reg[(k, k)] += 1e-10 * scale;
    }
    reg.lu().solve(rhs).filter(|x| x.iter().all(|v| v.is_finite()))
}

impl<'a, P: Nlp> Ipm<'a, P> {
    pub fn new(problem: &'a P, opts: IpmOptions) -> Self {
        Self { problem, opts }
    }

    fn conditions(
        &self,
        x: &DVector<f64>,
        z: &DVector<f64>,
        lam: &DVector<f64>,
        mu: &DVector<f64>,
        lx: &DVector<f64>,
        g: &DVector<f64>,
        h: &DVector<f64>,
        f: f64,
        f_prev: f64,
    ) -> Conditions {
        let xnorm = inf_norm(x);
        let znorm = inf_norm(z);
        let hmax = h.iter().fold(0.0f64, |m, v| m.max(*v));
        let feas = inf_norm(g).max(hmax) / (1.0 + xnorm.max(znorm));
        let grad = inf_norm(lx) / (1.0 + inf_norm(lam).max(inf_norm(mu)));
        let comp = if z.is_empty() {
            0.0
        } else {
            z.dot(mu) / (1.0 + xnorm)
        };
        let cost = (f - f_prev).abs() / (1.0 + f_prev.abs());
        Conditions {
            feas,
            grad,
            comp,
            cost,
        }
    }

    /// Norm of the KKT residual perturbed by barrier target `gamma`.
    fn merit(
        &self,
        x: &DVector<f64>,
        z: &DVector<f64>,
        lam: &DVector<f64>,
        mu: &DVector<f64>,
        gamma: f64,
    ) -> f64 {
        let p = self.problem;
        let g = p.equalities(x);
        let h = p.inequalities(x);
        let mut lx = p.gradient(x) + p.eq_jacobian(x).tr_mul(lam);
        if !h.is_empty() {
            lx += p.ineq_jacobian(x).tr_mul(mu);
        }
        let mut total = lx.norm_squared() + g.norm_squared();
        for k in 0..h.len() {
            let rh = h[k] + z[k];
            let rc = mu[k] * z[k] - gamma;
            total += rh * rh + rc * rc;
        }
        total.sqrt()
    }

    pub fn solve(&self, x0: DVector<f64>) -> IpmResult {
        let p = self.problem;
        let n = p.n_vars();
        let mut x = x0;
        let mut g = p.equalities(&x);
        let mut h = p.inequalities(&x);
        let (neq, niq) = (g.len(), h.len());

        let z0 = 1.0;
        let mut z = DVector::from_element(niq, z0);
        let mut mu = DVector::from_element(niq, z0);
        for k in 0..niq {
            if h[k] < -z0 {
                z[k] = -h[k];
            }
            if 1.0 / z[k] > z0 {
                mu[k] = 1.0 / z[k];
            }
        }
        let mut lam = DVector::zeros(neq);
        let mut f = p.objective(&x);
        let mut f_prev = f;

        let mut best: Option<IpmResult> = None;
        let mut status = IpmStatus::MaxIter;
        let mut iterations = 0;

        for iter in 0..=self.opts.max_iter {
            let jg = p.eq_jacobian(&x);
            let jh = p.ineq_jacobian(&x);
            let mut lx = p.gradient(&x) + jg.tr_mul(&lam);
            if niq > 0 {
                lx += jh.tr_mul(&mu);
            }
            let c = self.conditions(&x, &z, &lam, &mu, &lx, &g, &h, f, f_prev);
            let kkt = c.grad.max(c.comp);
            let snapshot = IpmResult {
                x: x.clone(),
                lam: lam.clone(),
                mu: mu.clone(),
                iterations: iter,
                kkt_residual: kkt.max(c.feas),
                feas: c.feas,
                status: IpmStatus::MaxIter,
            };
            if best
                .as_ref()
                .is_none_or(|b| snapshot.kkt_residual < b.kkt_residual)
            {
                best = Some(snapshot);
            }
            iterations = iter;
            let cost_ok = iter > 0 && c.cost <= self.opts.tol_kkt;
            if c.feas <= self.opts.tol_feas
                && c.grad <= self.opts.tol_kkt
                && c.comp <= self.opts.tol_kkt
                && (cost_ok || c.grad <= 1e-3 * self.opts.tol_kkt)
            {
                status = IpmStatus::Converged;
                break;
            }
            if iter == self.opts.max_iter {
                break;
            }

            // condensed Newton system
            let hess = p.lagrangian_hessian(&x, &lam, &mu);
            let mut m = hess;
            let mut weights = DVector::zeros(niq);
            for k in 0..niq {
                weights[k] = mu[k] / z[k];
            }
            if niq > 0 {
                let mut scaled = jh.clone();
                for (k, mut row) in scaled.row_iter_mut().enumerate() {
                    row *= weights[k];
                }
                m += jh.tr_mul(&scaled);
            }
            let dim = n + neq;
            let mut kkt_mat = DMatrix::zeros(dim, dim);
            kkt_mat.view_mut((0, 0), (n, n)).copy_from(&m);
            kkt_mat.view_mut((n, 0), (neq, n)).copy_from(&jg);
            kkt_mat.view_mut((0, n), (n, neq)).copy_from(&jg.transpose());
            let lu = kkt_mat.clone().lu();

            let direction = |gamma: f64| -> Option<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> {
                let mut shift = DVector::zeros(niq);
                for k in 0..niq {
                    shift[k] = (mu[k] * h[k] + gamma) / z[k];
                }
                let nvec = if niq > 0 {
                    &lx + jh.tr_mul(&shift)
                } else {
                    lx.clone()
                };
                let mut rhs = DVector::zeros(dim);
                rhs.rows_mut(0, n).copy_from(&(-nvec));
                rhs.rows_mut(n, neq).copy_from(&(-&g));
                let sol = lu
                    .solve(&rhs)
                    .filter(|s| s.iter().all(|v| v.is_finite()))
                    .or_else(|| solve_lu(&kkt_mat, &rhs))?;
                let dx = sol.rows(0, n).into_owned();
                let dlam = sol.rows(n, neq).into_owned();
                let dz = if niq > 0 {
                    -&h - &z - &jh * &dx
                } else {
                    DVector::zeros(0)
                };
                let mut dmu = DVector::zeros(niq);
                for k in 0..niq {
                    dmu[k] = -mu[k] + (gamma - mu[k] * dz[k]) / z[k];
                }
                Some((dx, dlam, dz, dmu))
            };

            let mu_avg = if niq > 0 { z.dot(&mu) / niq as f64 } else { 0.0 };
            let gamma = if niq > 0 {
                match direction(0.0) {
                    Some((_, _, dz, dmu)) => {
                        let ap = max_step(&z, &dz);
                        let ad = max_step(&mu, &dmu);
                        let z_aff = &z + &dz * ap;
                        let mu_aff = &mu + &dmu * ad;
                        let ratio = (z_aff.dot(&mu_aff) / niq as f64) / mu_avg;
                        let sigma = ratio.powi(3).clamp(1e-3, 0.5);
                        sigma * mu_avg
                    }
                    None => 0.1 * mu_avg,
                }
            } else {
                0.0
            };

            let Some((dx, dlam, dz, dmu)) = direction(gamma) else {
                status = IpmStatus::Failed;
                break;
            };
            if !dx.iter().all(|v| v.is_finite()) {
                status = IpmStatus::Failed;
                break;
            }
            let alpha_p = max_step(&z, &dz);
            let alpha_d = max_step(&mu, &dmu);

            let merit0 = self.merit(&x, &z, &lam, &mu, gamma);
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..=MAX_BACKTRACKS {
                let xt = &x + &dx * (t * alpha_p);
                let zt = &z + &dz * (t * alpha_p);
                let lt = &lam + &dlam * (t * alpha_d);
                let mt = &mu + &dmu * (t * alpha_d);
                let merit = self.merit(&xt, &zt, &lt, &mt, gamma);
                let cand = (xt, zt, lt, mt);
                if merit.is_finite() && merit <= MERIT_GROWTH * merit0 {
                    accepted = Some(cand);
                    break;
                }
                accepted = Some(cand);
                t *= 0.5;
            }
            let (xt, zt, lt, mt) = accepted.expect("at least one trial step");
            if !xt.iter().all(|v| v.is_finite()) {
                status = IpmStatus::Failed;
                break;
            }
            x = xt;
            z = zt;
            lam = lt;
            mu = mt;
            g = p.equalities(&x);
            h = p.inequalities(&x);
            f_prev = f;
            f = p.objective(&x);
        }

        if status == IpmStatus::Converged {
            let jg = p.eq_jacobian(&x);
            let mut lx = p.gradient(&x) + jg.tr_mul(&lam);
            if niq > 0 {
                lx += p.ineq_jacobian(&x).tr_mul(&mu);
            }
            let c = self.conditions(&x, &z, &lam, &mu, &lx, &g, &h, f, f_prev);
            return IpmResult {
                x,
                lam,
                mu,
                iterations,
                kkt_residual: c.grad.max(c.comp).max(c.feas),
                feas: c.feas,
                status,
            };
        }
        let mut out = best.expect("at least one iterate evaluated");
        out.iterations = iterations;
        out.status = status;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// minimize (x0 - 2)² + (x1 - 1)²  s.t.  x0 + x1 = 2,  x0 ≤ 1.2
    struct Toy;

    impl Nlp for Toy {
        fn n_vars(&self) -> usize {
            2
        }
        fn objective(&self, x: &DVector<f64>) -> f64 {
            (x[0] - 2.0).powi(2) + (x[1] - 1.0).powi(2)
        }
        fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![2.0 * (x[0] - 2.0), 2.0 * (x[1] - 1.0)])
        }
        fn equalities(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![x[0] + x[1] - 2.0])
        }
        fn eq_jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0])
        }
        fn inequalities(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![x[0] - 1.2])
        }
        fn ineq_jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0])
        }
        fn lagrangian_hessian(
            &self,
            _x: &DVector<f64>,
            _lam: &DVector<f64>,
            _mu: &DVector<f64>,
        ) -> DMatrix<f64> {
            DMatrix::identity(2, 2) * 2.0
        }
    }

    #[test]
    fn solves_toy_qp_with_active_bound() {
        let opts = IpmOptions {
            tol_kkt: 1e-8,
            tol_feas: 1e-8,
            max_iter: 100,
        };
        let res = Ipm::new(&Toy, opts).solve(DVector::from_vec(vec![0.0, 0.0]));
        assert_eq!(res.status, IpmStatus::Converged);
        // the equality-only optimum (1.5, 0.5) violates the bound
        assert!((res.x[0] - 1.2).abs() < 1e-6, "{}", res.x);
        assert!((res.x[1] - 0.8).abs() < 1e-6);
        assert!((res.lam[0] - 0.4).abs() < 1e-5, "{}", res.lam);
        assert!((res.mu[0] - 1.2).abs() < 1e-5, "{}", res.mu);
    }
}
