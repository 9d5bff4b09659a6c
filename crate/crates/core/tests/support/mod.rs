#![allow(dead_code)]

use diffopf::acopf::{
    line_flows, newton_power_flow, objective, power_balance_residual, residual_jacobian,
    standard_free_vars, PowerFlowState,
};
use diffopf::grid::{Demand, Network};
use diffopf::nnet::{Activation, Architecture, NoisePredictor, TimeEmbedding};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn random_state(net: &Network, rng: &mut ChaCha8Rng) -> PowerFlowState {
    PowerFlowState {
        v: (0..net.n_bus()).map(|_| rng.random_range(0.85..1.15)).collect(),
        theta: (0..net.n_bus()).map(|_| rng.random_range(-0.6..0.6)).collect(),
        p_g: (0..net.n_gen()).map(|_| rng.random_range(-1.0..3.0)).collect(),
        q_g: (0..net.n_gen()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

pub fn stacked(net: &Network, s: &PowerFlowState, load: &Demand) -> Vec<f64> {
    let (mut dp, dq) = power_balance_residual(net, s, load);
    dp.extend(dq);
    dp
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

/// Largest entrywise relative gap between the analytic Jacobian and central
/// differences, with unit floor on the denominator.
pub fn jacobian_error(net: &Network, s: &PowerFlowState, load: &Demand) -> f64 {
    let jac = residual_jacobian(net, s, load).to_dense();
    let x = s.to_vector();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for col in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[col] += h;
        xm[col] -= h;
        let rp = stacked(net, &PowerFlowState::from_vector(net, &xp), load);
        let rm = stacked(net, &PowerFlowState::from_vector(net, &xm), load);
        for row in 0..rp.len() {
            let fd = (rp[row] - rm[row]) / (2.0 * h);
            let a = jac[(row, col)];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1.0));
        }
    }
    worst
}

/// Exhaustive search: generator 2 output on a 1e-3 grid, generator-bus
/// voltage magnitudes on a grid that includes both bounds; Newton closes the
/// remaining power flow and infeasible points are skipped.
pub fn brute_force_case3(net: &Network, load: &Demand) -> f64 {
    let free = standard_free_vars(net).unwrap();
    let g2 = &net.generators()[1];
    let vgrid: Vec<f64> = (0..=10).map(|k| 0.95 + 0.01 * k as f64).collect();
    let mut best = f64::INFINITY;
    let steps = ((g2.p_max - g2.p_min) / 1e-3).round() as usize;
    let mut warm = PowerFlowState::flat_start(net);
    for &v1 in &vgrid {
        for &v2 in &vgrid {
            for k in 0..=steps {
                let p2 = g2.p_min + k as f64 * 1e-3;
                let mut init = warm.clone();
                init.v[0] = v1;
                init.v[1] = v2;
                init.p_g[1] = p2;
                let Ok(pf) = newton_power_flow(net, load, &init, &free, 1e-10, 25) else {
                    continue;
                };
                let s = &pf.state;
                warm = s.clone();
                let ok_v = s.v.iter().zip(net.buses()).all(|(v, b)| *v >= b.v_min && *v <= b.v_max);
                let ok_g = s.p_g.iter().zip(&s.q_g).zip(net.generators()).all(|((p, q), g)| {
                    *p >= g.p_min && *p <= g.p_max && *q >= g.q_min && *q <= g.q_max
                });
                let ok_f = line_flows(net, s).iter().zip(net.lines()).all(|(f, l)| {
                    f.s_from_sq() <= l.s_max * l.s_max && f.s_to_sq() <= l.s_max * l.s_max
                });
                if ok_v && ok_g && ok_f {
                    best = best.min(objective(net, s));
                }
            }
        }
    }
    best
}


/// Relative inf-norm gap between the analytic noise-loss gradient and
/// central differences on a small random predictor.
pub fn noise_gradient_error(seed: u64) -> f64 {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 2 + (seed as usize % 3);
    let arch = Architecture {
        model_dim: dim,
        hidden: vec![6, 5],
        activation: Activation::Silu,
        embedding: TimeEmbedding {
            dim: 4,
            base: 10_000.0,
            steps: 20,
        },
    };
    let mut net = NoisePredictor::new(arch, &mut rng).unwrap();
    // perturb away from the small-output initialization
    let theta: Vec<f64> = net
        .mlp()
        .params()
        .iter()
        .map(|p| p + 0.3 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    net.mlp_mut().set_params(&theta);
    let batch = 3;
    let z = Array2::from_shape_simple_fn((batch, dim), || rng.sample(StandardNormal));
    let eps = Array2::from_shape_simple_fn((batch, dim), || rng.sample(StandardNormal));
    let t: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=20)).collect();
    let (_, grad) = net.loss_and_grad(z.view(), &t, eps.view()).unwrap();
    let mut fd = vec![0.0; theta.len()];
    let mut probe = net.clone();
    for k in 0..theta.len() {
        let mut th = theta.clone();
        th[k] = theta[k] + h;
        probe.mlp_mut().set_params(&th);
        let up = probe.loss(z.view(), &t, eps.view()).unwrap();
        th[k] = theta[k] - h;
        probe.mlp_mut().set_params(&th);
        let down = probe.loss(z.view(), &t, eps.view()).unwrap();
        fd[k] = (up - down) / (2.0 * h);
    }
    let diff: Vec<f64> = grad.iter().zip(&fd).map(|(a, b)| a - b).collect();
    max_abs(&diff) / max_abs(&fd)
}
