//! Exit criteria for the whole pipeline. Runs every criterion, prints one
//! line per criterion and exits non-zero if any of them fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use diffopf::acopf::{newton_power_flow, solve_opf, standard_free_vars, PowerFlowState};
use diffopf::baseline::{train_baseline, BaselineConfig, PointPredictor};
use diffopf::cases;
use diffopf::dataset::{generate, write_records, Dataset, GenerateConfig, Normalizer};
use diffopf::diffusion::{
    estimate_clean, forward_perturb, score_from_noise, train, DiffusionModel, ScheduleConfig,
    TrainConfig,
};
use diffopf::evalx::{
    complexity_rows, restored_costs, sample_complexity, scored_samples, warmstart_table,
    SamplingConfig,
};
use diffopf::grid::Network;
use diffopf::guidance::{sample_conditional, GuidanceSpec, SignMode, WarmStartSample};
use diffopf::restore::{restore, score, WarmStartScore};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Verdict = Result<String, String>;

fn case(name: &str) -> Network {
    cases::builtin(name).unwrap().unwrap()
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Printed sample-count table: `(p_ε, [M at δ = 0.9, 0.95, 0.99])`.
const PRINTED_TABLE: [(f64, [u64; 3]); 8] = [
    (0.07, [32, 41, 63]),
    (0.49, [4, 5, 7]),
    (0.77, [2, 3, 4]),
    (0.94, [1, 1, 1]),
    (0.02, [135, 175, 269]),
    (0.03, [71, 93, 142]),
    (0.05, [42, 54, 83]),
    (0.17, [13, 17, 26]),
];
const DELTAS: [f64; 3] = [0.9, 0.95, 0.99];

fn table_arithmetic() -> Verdict {
    let mut wrong = Vec::new();
    for (p, ms) in PRINTED_TABLE {
        for (delta, m) in DELTAS.iter().zip(ms) {
            let got = sample_complexity(p, *delta).map_err(|e| e.to_string())?;
            if got != m {
                wrong.push(format!("({p}, {delta}) -> {got}, table {m}"));
            }
        }
    }
    check(wrong.is_empty(), || format!("{}/24 differ: {}", wrong.len(), wrong.join("; ")))?;
    Ok("24/24 exact".into())
}

fn bound_validity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = f64::INFINITY;
    for (p, _) in PRINTED_TABLE {
        for delta in DELTAS {
            let m = sample_complexity(p, delta).map_err(|e| e.to_string())?;
            let hits = (0..10_000).filter(|_| (0..m).any(|_| rng.random_bool(p))).count();
            let margin = hits as f64 / 1e4 - (delta - 0.02);
            check(margin >= 0.0, || format!("p={p} delta={delta} M={m}: {hits}/10000"))?;
            worst = worst.min(margin);
        }
    }
    Ok(format!("smallest margin over δ - 0.02: {worst:.4}"))
}

fn gradients() -> Verdict {
    let mut worst_nn = 0.0f64;
    for seed in 0..20 {
        worst_nn = worst_nn.max(support::noise_gradient_error(seed));
    }
    check(worst_nn <= 1e-4, || format!("noise loss gradient error {worst_nn:e}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_jac = 0.0f64;
    for name in ["case3", "case5_pjm"] {
        let net = case(name);
        let load = net.nominal_load().clone();
        for _ in 0..100 {
            let s = support::random_state(&net, &mut rng);
            worst_jac = worst_jac.max(support::jacobian_error(&net, &s, &load));
        }
    }
    check(worst_jac <= 1e-6, || format!("Jacobian error {worst_jac:e}"))?;
    Ok(format!("network {worst_nn:.1e}, Jacobian {worst_jac:.1e}"))
}

fn forward_moments() -> Verdict {
    let s = ScheduleConfig::default().build().map_err(|e| e.to_string())?;
    let z0 = [1.3, -0.4, 0.0];
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for t in [1, s.steps / 2, s.steps] {
        let draws: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let eps: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
                forward_perturb(&s, &z0, t, &eps)
            })
            .collect();
        let sd = (1.0 - s.alpha_bar(t)).sqrt();
        for j in 0..3 {
            let mean = draws.iter().map(|d| d[j]).sum::<f64>() / n as f64;
            let var = draws.iter().map(|d| (d[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let expect = s.alpha_bar(t).sqrt() * z0[j];
            let se_mean = sd / (n as f64).sqrt();
            let se_std = sd / (2.0 * n as f64).sqrt();
            check((mean - expect).abs() <= 3.0 * se_mean, || format!("t={t} mean {mean} vs {expect}"))?;
            check((var.sqrt() - sd).abs() <= 3.0 * se_std, || format!("t={t} std {} vs {sd}", var.sqrt()))?;
        }
    }
    Ok(format!("t in {{1, {}, {}}}", s.steps / 2, s.steps))
}

fn clean_estimate_identity() -> Verdict {
    let s = ScheduleConfig::default().build().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z0: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
    let mut worst = 0.0f64;
    for t in 1..=s.steps {
        let eps: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
        let zt = forward_perturb(&s, &z0, t, &eps);
        let x0 = estimate_clean(&s, &zt, &score_from_noise(&s, &eps, t), t);
        for (a, b) in x0.iter().zip(&z0) {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst <= 1e-12, || format!("max error {worst:e}"))?;
    Ok(format!("max error {worst:.1e} over {} steps", s.steps))
}

fn opf_numerics() -> Verdict {
    let mut worst_pf = 0.0f64;
    for name in ["case2", "case5_pjm"] {
        let net = case(name);
        let load = net.nominal_load().clone();
        let free = standard_free_vars(&net).map_err(|e| e.to_string())?;
        let pf = newton_power_flow(&net, &load, &PowerFlowState::flat_start(&net), &free, 1e-10, 30)
            .map_err(|e| format!("{name}: {e}"))?;
        let r = support::max_abs(&support::stacked(&net, &pf.state, &load));
        worst_pf = worst_pf.max(r);
    }
    check(worst_pf <= 1e-8, || format!("power-flow residual {worst_pf:e}"))?;
    let net = case("case3");
    let load = net.nominal_load().clone();
    let oracle = support::brute_force_case3(&net, &load);
    let sol = solve_opf(&net, &load, None, None).map_err(|e| e.to_string())?;
    check(sol.is_converged(), || format!("case3 status {:?}", sol.status))?;
    let rel = (sol.objective - oracle).abs() / oracle;
    check(rel <= 1e-3, || format!("case3 objective {} vs grid {oracle}", sol.objective))?;
    Ok(format!("residual {worst_pf:.1e}, case3 gap to grid search {:.4}%", 100.0 * rel))
}

fn restoration() -> Verdict {
    let mut worst = 0.0f64;
    for name in ["case3", "case5_pjm", "bimodal3"] {
        let net = case(name);
        let load = net.nominal_load().clone();
        let sol = solve_opf(&net, &load, None, None).map_err(|e| e.to_string())?;
        let first = restore(&net, &load, &sol.state.p_g, &sol.state.q_g).map_err(|e| e.to_string())?;
        check(first.is_converged(), || format!("{name}: {:?}", first.status))?;
        worst = worst.max(first.projection_objective);
        let second =
            restore(&net, &load, &first.state.p_g, &first.state.q_g).map_err(|e| e.to_string())?;
        check(second.is_converged(), || format!("{name}: second pass {:?}", second.status))?;
        worst = worst.max(second.projection_objective);
        let drift = second
            .state
            .to_vector()
            .iter()
            .zip(first.state.to_vector())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        check(drift <= 1e-5, || format!("{name}: idempotence drift {drift:e}"))?;
    }
    check(worst <= 1e-10, || format!("projection objective {worst:e}"))?;
    Ok(format!("largest projection objective {worst:.1e}"))
}

/// Trained pipeline on the two-regime case shared by criteria 8 to 10.
struct Bimodal {
    net: Network,
    ds: Dataset,
    model: DiffusionModel,
    baseline: PointPredictor,
    setup: Duration,
}

fn bimodal() -> Result<Bimodal, String> {
    let start = Instant::now();
    let net = case("bimodal3");
    let ds = generate(
        &net,
        &GenerateConfig {
            n_records: 2000,
            n_test: 20,
            seed: 1,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let rows: Vec<Vec<f64>> = ds.train.iter().map(|r| r.x0()).collect();
    let norm = Normalizer::fit(&rows).map_err(|e| e.to_string())?;
    let data = Array2::from_shape_fn((rows.len(), norm.model_dim()), |(r, j)| norm.normalize(&rows[r])[j]);
    let layout = ds.manifest.layout.clone();
    let cfg = TrainConfig {
        hidden: vec![128, 128, 128],
        embed_dim: 32,
        epochs: 300,
        batch_size: 128,
        lr: 1e-3,
        seed: 0,
        ..Default::default()
    };
    let schedule = ScheduleConfig::default().build().map_err(|e| e.to_string())?;
    let (model, _) =
        train(&data, norm.clone(), Some(layout.clone()), schedule, &cfg).map_err(|e| e.to_string())?;
    let bcfg = BaselineConfig {
        hidden: vec![128, 128, 128],
        epochs: 100,
        ..Default::default()
    };
    let (baseline, _) = train_baseline(&rows, norm, layout, &bcfg).map_err(|e| e.to_string())?;
    Ok(Bimodal {
        net,
        ds,
        model,
        baseline,
        setup: start.elapsed(),
    })
}

fn chains(b: &Bimodal, sign: SignMode) -> Result<Vec<WarmStartSample>, String> {
    let layout = &b.ds.manifest.layout;
    let load = b.ds.test[0].demand(layout, b.net.n_bus());
    let spec = GuidanceSpec::for_load(layout, &load, 1.0, sign).map_err(|e| e.to_string())?;
    sample_conditional(&b.model, &spec, 250, 7).map_err(|e| e.to_string())
}

fn guidance_consistency(b: &Bimodal) -> Verdict {
    let corrected = chains(b, SignMode::Corrected)?;
    let ok = corrected.iter().filter(|s| s.residual <= 0.05).count();
    check(ok * 100 >= 95 * 250, || format!("{ok}/250 within 0.05"))?;
    let mean = |s: &[WarmStartSample]| s.iter().map(|x| x.residual).sum::<f64>() / s.len() as f64;
    let paper = chains(b, SignMode::Paper)?;
    let (mc, mp) = (mean(&corrected), mean(&paper));
    check(mp > mc, || format!("mean residual corrected {mc} vs paper sign {mp}"))?;
    Ok(format!("{ok}/250 within 0.05; mean residual {mc:.2e} vs {mp:.2} with the opposite sign"))
}

fn multimodality(b: &Bimodal) -> Verdict {
    let layout = &b.ds.manifest.layout;
    let norm = &b.model.normalizer;
    let load = b.ds.test[0].demand(layout, b.net.n_bus());
    let disp = layout.dispatch_indices();
    let project = |x: &[f64]| -> Vec<f64> {
        disp.iter()
            .filter(|&&i| norm.model_index(i).is_some())
            .map(|&i| norm.normalize_at(i, x[i]))
            .collect()
    };
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let nominal = b.net.nominal_c1();
    let mut modes = Vec::new();
    for (lo, hi) in [(0, 1), (1, 0)] {
        let mut c1 = nominal.clone();
        c1[lo] *= 0.6;
        c1[hi] *= 1.4;
        let sol = solve_opf(&b.net, &load, Some(&c1), None).map_err(|e| e.to_string())?;
        check(sol.is_converged(), || format!("mode solve {:?}", sol.status))?;
        let mut x = layout.observation(&load);
        x.extend(&sol.state.p_g);
        x.extend(&sol.state.q_g);
        modes.push(project(&x));
    }
    let sep = dist(&modes[0], &modes[1]);
    check(sep >= 1.0, || format!("modes only {sep:.3} apart"))?;
    let samples = chains(b, SignMode::Corrected)?;
    let near: Vec<usize> = modes
        .iter()
        .map(|m| samples.iter().filter(|s| s.is_ok() && dist(&project(&s.x0), m) <= 0.25).count())
        .collect();
    check(near.iter().all(|&k| k * 10 >= samples.len()), || format!("near modes {near:?} of 250"))?;
    let (p, q) = b.baseline.predict(&load).map_err(|e| e.to_string())?;
    let mut xb = layout.observation(&load);
    xb.extend(p);
    xb.extend(q);
    let pb = project(&xb);
    let (d0, d1) = (dist(&pb, &modes[0]), dist(&pb, &modes[1]));
    check(d0 >= 0.25 && d1 >= 0.25, || format!("baseline {d0:.3}/{d1:.3} from the modes"))?;
    Ok(format!(
        "separation {sep:.2}; {}/{} samples near each mode; baseline {d0:.2}/{d1:.2} away; setup {:.1}s",
        near[0],
        near[1],
        b.setup.as_secs_f64()
    ))
}

fn warm_start_dominance(b: &Bimodal) -> Verdict {
    let layout = &b.ds.manifest.layout;
    let cfg = SamplingConfig {
        n_samples: 32,
        seed: 100,
        ..Default::default()
    };
    let sampled = scored_samples(&b.model, &b.net, &b.ds.test, &cfg).map_err(|e| e.to_string())?;
    let mut base: Vec<Option<WarmStartScore>> = Vec::new();
    for rec in &b.ds.test {
        let load = rec.demand(layout, b.net.n_bus());
        let (p, q) = b.baseline.predict(&load).map_err(|e| e.to_string())?;
        let scored = restore(&b.net, &load, &p, &q)
            .ok()
            .and_then(|r| score(&b.net, rec, &r, &p, &q).ok());
        base.push(scored);
    }
    let mut wins = 0;
    let (mut sum_d, mut sum_b) = (0.0, 0.0);
    for (samples, bl) in sampled.iter().zip(&base) {
        let best = samples
            .iter()
            .flatten()
            .map(|s| s.optimality_gap)
            .fold(f64::INFINITY, f64::min);
        let bg = bl.map_or(f64::INFINITY, |s| s.optimality_gap);
        if best <= bg {
            wins += 1;
        }
        sum_d += best;
        sum_b += bg;
    }
    let n = b.ds.test.len();
    check(n == 20, || format!("{n} held-out loads"))?;
    let (md, mb) = (sum_d / n as f64, sum_b / n as f64);
    check(wins * 10 >= 7 * n, || format!("sampler wins on {wins}/{n} loads"))?;
    check(md < mb, || format!("mean gap {md} vs baseline {mb}"))?;
    if let Ok(table) = warmstart_table(&sampled, &base) {
        print!("{}", table.to_text());
    }
    Ok(format!("wins on {wins}/{n} loads; mean gap {md:.3} vs {mb:.3}"))
}

fn determinism() -> Verdict {
    let net = case("case5_pjm");
    let gen_cfg = GenerateConfig {
        n_records: 40,
        n_test: 3,
        seed: 9,
        ..Default::default()
    };
    let run = || -> Result<Vec<(&'static str, Vec<u8>)>, String> {
        let ds = generate(&net, &gen_cfg).map_err(|e| e.to_string())?;
        let layout = ds.manifest.layout.clone();
        let mut csv = Vec::new();
        write_records(&mut csv, &net, &layout, &ds.train).map_err(|e| e.to_string())?;
        write_records(&mut csv, &net, &layout, &ds.test).map_err(|e| e.to_string())?;
        let rows: Vec<Vec<f64>> = ds.train.iter().map(|r| r.x0()).collect();
        let norm = Normalizer::fit(&rows).map_err(|e| e.to_string())?;
        let data =
            Array2::from_shape_fn((rows.len(), norm.model_dim()), |(r, j)| norm.normalize(&rows[r])[j]);
        let cfg = TrainConfig {
            hidden: vec![32, 32],
            embed_dim: 8,
            epochs: 5,
            batch_size: 16,
            seed: 3,
            ..Default::default()
        };
        let schedule = ScheduleConfig::default().build().map_err(|e| e.to_string())?;
        let (model, report) = train(&data, norm.clone(), Some(layout.clone()), schedule, &cfg)
            .map_err(|e| e.to_string())?;
        let bcfg = BaselineConfig {
            hidden: vec![16],
            epochs: 3,
            batch_size: 16,
            ..Default::default()
        };
        let (baseline, _) = train_baseline(&rows, norm, layout, &bcfg).map_err(|e| e.to_string())?;
        let scfg = SamplingConfig {
            n_samples: 4,
            seed: 5,
            ..Default::default()
        };
        let scores = scored_samples(&model, &net, &ds.test, &scfg).map_err(|e| e.to_string())?;
        let c_star: Vec<f64> = ds.test.iter().map(|r| r.objective).collect();
        let rows = complexity_rows(&restored_costs(&scores), &c_star, &[1.0, 5.0], &DELTAS)
            .map_err(|e| e.to_string())?;
        Ok(vec![
            ("dataset", csv),
            ("manifest", serde_json::to_vec(&ds.manifest).unwrap()),
            ("diffusion checkpoint", model.to_checkpoint().to_json().into_bytes()),
            ("loss history", serde_json::to_vec(&report.loss_history).unwrap()),
            ("baseline checkpoint", baseline.to_checkpoint().to_json().into_bytes()),
            ("restored scores", serde_json::to_vec(&scores).unwrap()),
            ("complexity rows", serde_json::to_vec(&rows).unwrap()),
        ])
    };
    let a = run()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .map_err(|e| e.to_string())?;
    let b = pool.install(run)?;
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        check(x == y, || format!("{name} differs between runs"))?;
    }
    Ok(format!("{} stages byte-identical, second run on 3 threads", a.len()))
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: u32, name: &str, budget: Duration, f: &mut dyn FnMut() -> Verdict| {
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(&mut *f))
            .unwrap_or_else(|_| Err("panicked".into()))
            .and_then(|msg| {
                let took = start.elapsed();
                check(took <= budget, || format!("took {took:?}, budget {budget:?}")).map(|_| msg)
            });
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(msg) => println!("criterion {id:>2} PASS {name} [{secs:.1}s]: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {id:>2} FAIL {name} [{secs:.1}s]: {msg}");
            }
        }
    };
    let s = Duration::from_secs;
    report(1, "sample-count table arithmetic", s(1), &mut table_arithmetic);
    report(2, "sample-count bound validity", s(10), &mut bound_validity);
    report(3, "gradient correctness", s(30), &mut gradients);
    report(4, "forward-process moments", s(5), &mut forward_moments);
    report(5, "clean-sample identity", s(1), &mut clean_estimate_identity);
    report(6, "power-flow and OPF numerics", s(60), &mut opf_numerics);
    report(7, "restoration fixed point", s(10), &mut restoration);

    let start = Instant::now();
    let fixture = bimodal();
    let setup = start.elapsed();
    match &fixture {
        Ok(b) => {
            report(8, "guidance consistency", s(300), &mut || guidance_consistency(b));
            // training time counts against this budget
            report(9, "multi-modality capture", s(900) - setup, &mut || multimodality(b));
            report(10, "warm-start dominance", s(1200), &mut || warm_start_dominance(b));
        }
        Err(e) => {
            for (id, name) in [(8, "guidance consistency"), (9, "multi-modality capture"), (10, "warm-start dominance")] {
                report(id, name, s(0), &mut || Err(format!("bimodal setup failed: {e}")));
            }
        }
    }
    report(11, "determinism", s(600), &mut determinism);

    if failed == 0 {
        println!("all 11 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{failed} of 11 criteria failed");
        ExitCode::FAILURE
    }
}
