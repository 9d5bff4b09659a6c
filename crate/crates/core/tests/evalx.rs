use diffopf::evalx::{
    complexity_rows, cvar, estimate_p_eps, render_complexity_csv, sample_complexity, warmstart_table,
    EvalError,
};
use diffopf::restore::WarmStartScore;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn score(gap: f64, viol: f64) -> WarmStartScore {
    WarmStartScore {
        restored_cost: 100.0 + gap,
        optimality_gap: gap,
        optimality_gap_pct: gap,
        setpoint_error: 2.0 * gap,
        voltage_violation: viol,
    }
}

#[test]
fn bound_holds_in_bernoulli_simulation() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for p in [0.07, 0.49, 0.77, 0.94, 0.02, 0.03, 0.05, 0.17] {
        for delta in [0.9, 0.95, 0.99] {
            let m = sample_complexity(p, delta).unwrap();
            let trials = 10_000;
            let hits = (0..trials)
                .filter(|_| (0..m).any(|_| rng.random_bool(p)))
                .count();
            let freq = hits as f64 / trials as f64;
            assert!(freq >= delta - 0.02, "p={p} delta={delta} M={m}: {freq}");
            // M − 1 draws fall short of δ in exact arithmetic
            if m > 1 {
                assert!(1.0 - (1.0 - p).powi(m as i32 - 1) < delta);
            }
        }
    }
}

#[test]
fn exact_optimum_everywhere_needs_one_sample() {
    let costs = vec![vec![5.0; 7]; 3];
    let rows = complexity_rows(&costs, &[5.0; 3], &[0.5, 1.0], &[0.9, 0.99]).unwrap();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!(r.p_eps, 1.0);
        assert_eq!(r.m_bound, Some(1));
        assert_eq!(r.n_eps_observed, Some(1));
    }
    let csv = render_complexity_csv(&rows);
    assert!(csv.starts_with("epsilon_pct,p_eps,delta,m_bound,n_eps_observed\n"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn no_close_sample_leaves_bound_undefined() {
    let costs = vec![vec![f64::INFINITY, 9.0]; 2];
    let rows = complexity_rows(&costs, &[1.0, 1.0], &[5.0], &[0.9]).unwrap();
    assert_eq!(rows[0].p_eps, 0.0);
    assert_eq!(rows[0].m_bound, None);
    assert_eq!(rows[0].n_eps_observed, None);
    assert!(render_complexity_csv(&rows).ends_with("5,0,0.9,,\n"));
}

#[test]
fn observed_count_uses_first_m_draws() {
    // one load, close draws at positions 0 and 3, p = 0.5 → M(0.9) = 4
    let costs = vec![vec![1.0, 3.0, 3.0, 1.0, 1.0, 1.0, 3.0, 3.0]];
    let rows = complexity_rows(&costs, &[1.0], &[1.0], &[0.9]).unwrap();
    assert_eq!(rows[0].p_eps, 0.5);
    assert_eq!(rows[0].m_bound, Some(4));
    assert_eq!(rows[0].n_eps_observed, Some(2));
}

#[test]
fn synthetic_closeness_rate_is_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let c_star = vec![100.0; 100];
    let costs: Vec<Vec<f64>> = (0..100)
        .map(|_| {
            (0..250)
                .map(|_| if rng.random_bool(0.3) { 100.2 } else { 110.0 })
                .collect()
        })
        .collect();
    let p = estimate_p_eps(&costs, &c_star, 1.0).unwrap();
    assert!((p - 0.3).abs() <= 0.03, "{p}");
}

#[test]
fn warmstart_table_by_hand() {
    let diffopf = vec![
        vec![Some(score(3.0, 0.2)), Some(score(1.0, 0.5)), None],
        vec![Some(score(2.0, 0.1))],
        vec![None, Some(score(4.0, 0.0))],
    ];
    let baseline = vec![Some(score(5.0, 0.3)), Some(score(6.0, 0.3)), Some(score(10.0, 0.6))];
    let t = warmstart_table(&diffopf, &baseline).unwrap();
    assert_eq!(t.n_loads, 3);
    // per-load minima: gaps 1, 2, 4; violations 0.2, 0.1, 0.0
    assert!((t.diffopf.optimality_gap.mean - 7.0 / 3.0).abs() < 1e-12);
    assert_eq!(t.diffopf.optimality_gap.cvar10, 4.0);
    assert_eq!(t.diffopf.setpoint_error.cvar10, 8.0);
    assert!((t.diffopf.voltage_violation.mean - 0.1).abs() < 1e-12);
    assert_eq!(t.diffopf.voltage_violation.cvar10, 0.2);
    assert_eq!(t.baseline.optimality_gap.mean, 7.0);
    assert_eq!(t.baseline.optimality_gap.cvar10, 10.0);
    assert_eq!(t.to_csv().lines().count(), 3);
    assert!(t.to_text().contains("(3 loads)"));
}

#[test]
fn warmstart_table_edges() {
    let zero = vec![vec![Some(score(0.0, 0.0))]; 4];
    let t = warmstart_table(&zero, &[Some(score(0.0, 0.0)); 4]).unwrap();
    assert_eq!(t.diffopf, t.baseline);
    assert_eq!(t.diffopf.optimality_gap.mean, 0.0);
    assert_eq!(t.diffopf.optimality_gap.cvar10, 0.0);

    let one = warmstart_table(&[vec![Some(score(2.5, 0.1))]], &[Some(score(1.5, 0.4))]).unwrap();
    assert_eq!(one.diffopf.optimality_gap.mean, 2.5);
    assert_eq!(one.diffopf.optimality_gap.cvar10, 2.5);
    assert_eq!(one.baseline.voltage_violation.cvar10, 0.4);

    assert!(matches!(
        warmstart_table(&zero, &[Some(score(0.0, 0.0))]),
        Err(EvalError::Shape(_))
    ));
    assert!(warmstart_table(&[vec![None]], &[Some(score(0.0, 0.0))]).is_err());
    assert!(warmstart_table(&[vec![Some(score(0.0, 0.0))]], &[None]).is_err());
    assert!(warmstart_table(&[], &[]).is_err());
}

proptest! {
    #[test]
    fn cvar_matches_sorted_tail(values in prop::collection::vec(-1e3f64..1e3, 1..80), q in 0.01f64..=1.0) {
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let k = ((q * values.len() as f64).ceil() as usize).max(1);
        let oracle = sorted[..k].iter().sum::<f64>() / k as f64;
        let got = cvar(&values, q).unwrap();
        prop_assert!((got - oracle).abs() <= 1e-9 * (1.0 + oracle.abs()));
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        prop_assert!((cvar(&values, 1.0).unwrap() - mean).abs() <= 1e-9 * (1.0 + mean.abs()));
        prop_assert!(got >= mean - 1e-9 * (1.0 + mean.abs()));
    }

    #[test]
    fn bound_is_monotone(p in 0.001f64..0.999, dp in 0.0f64..0.3, d in 0.05f64..0.98, dd in 0.0f64..0.015) {
        let m = sample_complexity(p, d).unwrap();
        let p2 = (p + dp).min(0.999);
        prop_assert!(sample_complexity(p2, d).unwrap() <= m);
        prop_assert!(sample_complexity(p, d + dd).unwrap() >= m);
        // smallest M with 1 − (1 − p)^M ≥ δ
        let miss = (1.0 - p).powf(m as f64);
        prop_assert!(1.0 - miss >= d - 1e-12);
    }
}
