mod support;

use diffopf::nnet::{
    mse_loss_and_grad, time_embed, Activation, AdamState, Architecture, Checkpoint, Mlp, ModelKind,
    NoisePredictor, TimeEmbedding,
};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn arch(model_dim: usize, hidden: Vec<usize>) -> Architecture {
    Architecture {
        model_dim,
        hidden,
        activation: Activation::Silu,
        embedding: TimeEmbedding {
            dim: 4,
            base: 10_000.0,
            steps: 20,
        },
    }
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

#[test]
fn noise_loss_gradient_matches_central_differences() {
    for seed in 0..20u64 {
        let rel = support::noise_gradient_error(seed);
        assert!(rel <= 1e-4, "seed {seed}: relative error {rel}");
    }
}

#[test]
fn regression_gradient_matches_central_differences() {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut mlp = Mlp::new(&[3, 7, 2], Activation::Silu, 1.0, &mut rng);
    let x = normal(&mut rng, 5, 3);
    let y = normal(&mut rng, 5, 2);
    let theta = mlp.params();
    let (_, grad) = mse_loss_and_grad(&mlp, x.view(), y.view()).unwrap();
    let mut fd = Vec::new();
    for k in 0..theta.len() {
        let mut th = theta.clone();
        th[k] += h;
        mlp.set_params(&th);
        let up = mse_loss_and_grad(&mlp, x.view(), y.view()).unwrap().0;
        th[k] -= 2.0 * h;
        mlp.set_params(&th);
        let down = mse_loss_and_grad(&mlp, x.view(), y.view()).unwrap().0;
        fd.push((up - down) / (2.0 * h));
    }
    let diff: Vec<f64> = grad.iter().zip(&fd).map(|(a, b)| a - b).collect();
    assert!(inf_norm(&diff) / inf_norm(&fd) <= 1e-4);
}

#[test]
fn frozen_seed_output_is_locked() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let net = NoisePredictor::new(arch(3, vec![8, 8]), &mut rng).unwrap();
    let out = net.forward(&[0.1, -0.2, 0.3], 7).unwrap();
    let golden = [-0.007019335950611113, 0.010863545223415424, -0.027248281150547234];
    for (o, g) in out.iter().zip(golden) {
        assert!((o - g).abs() <= 1e-12, "{out:?}");
    }
}

#[test]
fn fixed_set_loss_decreases_every_epoch() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut net = NoisePredictor::new(arch(3, vec![16, 16]), &mut rng).unwrap();
    let n = 16;
    let z = normal(&mut rng, n, 3);
    let eps = normal(&mut rng, n, 3);
    let t: Vec<usize> = (0..n).map(|_| rng.random_range(1..=20)).collect();
    let mut adam = AdamState::new(net.n_params(), 1e-3);
    let mut theta = net.mlp().params();
    let mut losses = vec![net.loss(z.view(), &t, eps.view()).unwrap()];
    for _ in 0..10 {
        for rows in [0..8, 8..16] {
            let (_, g) = net
                .loss_and_grad(
                    z.slice(ndarray::s![rows.clone(), ..]),
                    &t[rows.clone()],
                    eps.slice(ndarray::s![rows, ..]),
                )
                .unwrap();
            adam.step(&mut theta, &g).unwrap();
            net.mlp_mut().set_params(&theta);
        }
        losses.push(net.loss(z.view(), &t, eps.view()).unwrap());
    }
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn adam_runs_are_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mlp = Mlp::new(&[2, 4, 1], Activation::Silu, 1.0, &mut rng);
        let x = normal(&mut rng, 6, 2);
        let y = normal(&mut rng, 6, 1);
        let mut adam = AdamState::new(mlp.n_params(), 1e-2);
        let mut theta = mlp.params();
        for _ in 0..25 {
            let (_, g) = mse_loss_and_grad(&mlp, x.view(), y.view()).unwrap();
            adam.step(&mut theta, &g).unwrap();
            mlp.set_params(&theta);
        }
        theta
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_file_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mlp = Mlp::new(&[3, 5, 3], Activation::Silu, 0.1, &mut rng);
    let ck = Checkpoint::new(ModelKind::Diffusion, &mlp, serde_json::json!({"k": [1, 2]}));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.mlp().unwrap(), mlp);
    let text = std::fs::read_to_string(&path).unwrap().replacen("\"k\"", "\"j\"", 1);
    std::fs::write(&path, text).unwrap();
    assert!(Checkpoint::load(&path).is_err());
    assert!(Checkpoint::load(dir.path().join("missing.json")).is_err());
}

#[test]
fn embedding_rejects_out_of_range_steps() {
    assert!(time_embed(0, 10, 4, 1e4).is_err());
    assert!(time_embed(11, 10, 4, 1e4).is_err());
    assert!(time_embed(10, 10, 3, 1e4).is_err());
}

proptest! {
    #[test]
    fn embedding_is_bounded(t in 1usize..=1000, half in 1usize..32) {
        let e = time_embed(t, 1000, 2 * half, 1e4).unwrap();
        prop_assert_eq!(e.len(), 2 * half);
        prop_assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn params_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mlp = Mlp::new(&[2, 3, 2], Activation::Silu, 1.0, &mut rng);
        let mut theta = mlp.params();
        theta.iter_mut().for_each(|p| *p *= 2.0);
        mlp.set_params(&theta);
        prop_assert_eq!(mlp.params(), theta);
    }
}
