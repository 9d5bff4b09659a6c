use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use diffopf::baseline::{train_baseline, PointPredictor};
use diffopf::cases;
use diffopf::dataset::{generate, write_records, Normalizer, OpfRecord};
use diffopf::diffusion::{train as train_diffusion, DiffusionModel};
use diffopf::evalx::{
    complexity_rows, gap_violation_series, render_complexity_csv, render_complexity_text,
    restored_costs, warmstart_table,
};
use diffopf::grid::{load_case, Network};
use diffopf::guidance::{sample_conditional, score_samples, GuidanceSpec};
use diffopf::nnet::Checkpoint;
use diffopf::restore::{restore_with, score, WarmStartScore};
use ndarray::Array2;

use crate::artifacts::{
    load_data, read_json, read_samples, require, write_json, write_samples, write_text,
    LoadSamples, ManifestBuilder, RunDir, StageManifest, DATA_FILES,
};
use crate::config::RunConfig;
use crate::error::CliError;

type Scores = Vec<Vec<Option<WarmStartScore>>>;

fn resolve_case(spec: &str) -> Result<Network, CliError> {
    if let Some(net) = cases::builtin(spec) {
        return Ok(net?);
    }
    if Path::new(spec).is_file() {
        return Ok(load_case(spec)?);
    }
    let known: Vec<&str> = cases::names().collect();
    Err(CliError::Config(format!(
        "case `{spec}` is neither a bundled case ({}) nor a file",
        known.join(", ")
    )))
}

fn training_rows(records: &[OpfRecord]) -> Vec<Vec<f64>> {
    records.iter().map(OpfRecord::x0).collect()
}

fn loss_csv(history: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (e, l) in history.iter().enumerate() {
        let _ = writeln!(s, "{e},{l}");
    }
    s
}

pub fn gen_data(cfg: &RunConfig, run: &RunDir) -> Result<StageManifest, CliError> {
    let start = Instant::now();
    let net = resolve_case(&cfg.case)?;
    let ds = generate(&net, &cfg.dataset)?;
    let dir = run.create_stage("data")?;
    let layout = &ds.manifest.layout;
    let [net_p, man_p, train_p, test_p] = DATA_FILES.map(|f| dir.join(f));
    write_text(&net_p, &net.to_json_string())?;
    write_json(&man_p, &ds.manifest)?;
    for (path, recs) in [(&train_p, &ds.train), (&test_p, &ds.test)] {
        let mut buf = Vec::new();
        write_records(&mut buf, &net, layout, recs)?;
        fs::write(path, buf).map_err(CliError::io(path))?;
    }
    log::info!(
        "generated {} train / {} test records ({} + {} discarded)",
        ds.manifest.n_train,
        ds.manifest.n_test,
        ds.manifest.discarded_train,
        ds.manifest.discarded_test
    );
    let mut m = ManifestBuilder::new(run, "gen-data", cfg.hash());
    m.seed("dataset", cfg.dataset.seed);
    for p in [&net_p, &man_p, &train_p, &test_p] {
        m.output(p)?;
    }
    m.finish("data", start.elapsed())
}

pub fn train(cfg: &RunConfig, run: &RunDir) -> Result<StageManifest, CliError> {
    let start = Instant::now();
    let data = load_data(run, true)?;
    let rows = training_rows(&data.train);
    let norm = Normalizer::fit(&rows)?;
    let matrix =
        Array2::from_shape_fn((rows.len(), norm.model_dim()), |(r, j)| norm.normalize(&rows[r])[j]);
    let schedule = cfg.schedule.build()?;
    let (model, report) = train_diffusion(
        &matrix,
        norm,
        Some(data.manifest.layout.clone()),
        schedule,
        &cfg.train,
    )?;
    log::info!(
        "diffusion: {} parameters, loss {:.4} -> {:.4}",
        report.n_params,
        report.loss_history.first().copied().unwrap_or(f64::NAN),
        report.loss_history.last().copied().unwrap_or(f64::NAN)
    );
    let dir = run.create_stage("model")?;
    let ck = dir.join("diffusion.json");
    model.to_checkpoint().save(&ck)?;
    let loss = dir.join("loss.csv");
    write_text(&loss, &loss_csv(&report.loss_history))?;
    let mut m = ManifestBuilder::new(run, "train", cfg.hash());
    m.seed("train", cfg.train.seed);
    m.input(&run.file("data", "train.csv"))?.input(&run.file("data", "dataset.json"))?;
    m.output(&ck)?.output(&loss)?;
    m.finish("model", start.elapsed())
}

pub fn train_baseline_stage(cfg: &RunConfig, run: &RunDir) -> Result<StageManifest, CliError> {
    let start = Instant::now();
    let data = load_data(run, true)?;
    let rows = training_rows(&data.train);
    let norm = Normalizer::fit(&rows)?;
    let (model, report) = train_baseline(&rows, norm, data.manifest.layout.clone(), &cfg.baseline)?;
    log::info!(
        "baseline: {} parameters, final loss {:.4}",
        report.n_params,
        report.loss_history.last().copied().unwrap_or(f64::NAN)
    );
    let dir = run.create_stage("baseline")?;
    let ck = dir.join("baseline.json");
    model.to_checkpoint().save(&ck)?;
    let loss = dir.join("loss.csv");
    write_text(&loss, &loss_csv(&report.loss_history))?;
    let mut m = ManifestBuilder::new(run, "train-baseline", cfg.hash());
    m.seed("baseline", cfg.baseline.seed);
    m.input(&run.file("data", "train.csv"))?.input(&run.file("data", "dataset.json"))?;
    m.output(&ck)?.output(&loss)?;
    m.finish("baseline", start.elapsed())
}

fn load_diffusion(run: &RunDir) -> Result<(std::path::PathBuf, DiffusionModel), CliError> {
    let path = require(run.file("model", "diffusion.json"), "train")?;
    let model = DiffusionModel::from_checkpoint(&Checkpoint::load(&path)?)?;
    Ok((path, model))
}

pub fn sample(cfg: &RunConfig, run: &RunDir) -> Result<StageManifest, CliError> {
    let start = Instant::now();
    let (ck_path, model) = load_diffusion(run)?;
    let data = load_data(run, false)?;
    let layout = &data.manifest.layout;
    if model.layout.as_ref() != Some(layout) {
        return Err(CliError::Config("checkpoint was trained on a different dataset layout".into()));
    }
    let g = &cfg.guidance;
    let mut loads = Vec::with_capacity(data.test.len());
    let mut sampling_secs = 0.0;
    for (l, rec) in data.test.iter().enumerate() {
        let load = rec.demand(layout, data.net.n_bus());
        let spec = GuidanceSpec::for_load(layout, &load, g.lambda, g.sign_mode)?
            .with_lambda_schedule(g.lambda_schedule);
        let t0 = Instant::now();
        let samples = sample_conditional(&model, &spec, g.n_samples, g.seed.wrapping_add(l as u64))?;
        let secs = t0.elapsed().as_secs_f64();
        sampling_secs += secs;
        let failed = samples.iter().filter(|s| !s.is_ok()).count();
        log::info!(
            "load {l}: {} chains in {secs:.3}s ({:.4}s per sample), {failed} failed",
            g.n_samples,
            secs / g.n_samples as f64
        );
        loads.push(LoadSamples { load: l, samples });
    }
    let dir = run.create_stage("samples")?;
    let out = dir.join("samples.csv");
    write_samples(&out, layout, &loads)?;
    let mut m = ManifestBuilder::new(run, "sample", cfg.hash());
    m.seed("guidance", g.seed);
    m.input(&ck_path)?.input(&run.file("data", "test.csv"))?;
    m.output(&out)?;
    m.note("seconds_per_sample", sampling_secs / (data.test.len() * g.n_samples) as f64);
    m.finish("samples", start.elapsed())
}

pub fn restore(cfg: &RunConfig, run: &RunDir) -> Result<StageManifest, CliError> {
    let start = Instant::now();
    let samples_path = require(run.file("samples", "samples.csv"), "sample")?;
    let base_path = require(run.file("baseline", "baseline.json"), "train-baseline")?;
    let data = load_data(run, false)?;
    let layout = &data.manifest.layout;
    let mut loads = read_samples(&samples_path, layout)?;
    if loads.len() != data.test.len() || loads.iter().enumerate().any(|(l, s)| s.load != l) {
        return Err(CliError::Numeric(format!(
            "{} holds {} loads, the test set has {}",
            samples_path.display(),
            loads.len(),
            data.test.len()
        )));
    }
    let baseline = PointPredictor::from_checkpoint(&Checkpoint::load(&base_path)?)?;
    let mut diffopf: Scores = Vec::with_capacity(loads.len());
    let mut base: Vec<Option<WarmStartScore>> = Vec::with_capacity(loads.len());
    let mut restored = 0;
    for (ls, rec) in loads.iter_mut().zip(&data.test) {
        let load = rec.demand(layout, data.net.n_bus());
        restored += score_samples(&data.net, &load, rec, &mut ls.samples, &cfg.restore);
        diffopf.push(ls.samples.iter().map(|s| s.score).collect());
        let (p, q) = baseline.predict(&load)?;
        let b = restore_with(&data.net, &load, &p, &q, &cfg.restore)
            .ok()
            .and_then(|r| score(&data.net, rec, &r, &p, &q).ok());
        if b.is_none() {
            log::warn!("baseline warm start for load {} did not restore", ls.load);
        }
        base.push(b);
    }
    let total: usize = loads.iter().map(|l| l.samples.len()).sum();
    log::info!("restored {restored}/{total} samples");
    let dir = run.create_stage("restore")?;
    let d_out = dir.join("diffopf_scores.json");
    let b_out = dir.join("baseline_scores.json");
    write_json(&d_out, &diffopf)?;
    write_json(&b_out, &base)?;
    let mut m = ManifestBuilder::new(run, "restore", cfg.hash());
    m.input(&samples_path)?.input(&base_path)?.input(&run.file("data", "test.csv"))?;
    m.output(&d_out)?.output(&b_out)?;
    m.note("restored_fraction", restored as f64 / total.max(1) as f64);
    m.finish("restore", start.elapsed())
}

fn load_scores(run: &RunDir) -> Result<(std::path::PathBuf, Scores), CliError> {
    let path = require(run.file("restore", "diffopf_scores.json"), "restore")?;
    let scores = read_json(&path)?;
    Ok((path, scores))
}

pub fn eval(cfg: &RunConfig, run: &RunDir) -> Result<(StageManifest, String), CliError> {
    let start = Instant::now();
    let (d_path, diffopf) = load_scores(run)?;
    let b_path = require(run.file("restore", "baseline_scores.json"), "restore")?;
    let base: Vec<Option<WarmStartScore>> = read_json(&b_path)?;
    let table = warmstart_table(&diffopf, &base)?;
    let dir = run.create_stage("eval")?;
    let csv = dir.join("warmstart.csv");
    let txt = dir.join("warmstart.txt");
    let d_series = dir.join("gap_violation_diffopf.dat");
    let b_series = dir.join("gap_violation_baseline.dat");
    let text = table.to_text();
    write_text(&csv, &table.to_csv())?;
    write_text(&txt, &text)?;
    let flat: Vec<Option<WarmStartScore>> = diffopf.iter().flatten().copied().collect();
    write_text(&d_series, &gap_violation_series(&flat))?;
    write_text(&b_series, &gap_violation_series(&base))?;
    let mut m = ManifestBuilder::new(run, "eval", cfg.hash());
    m.input(&d_path)?.input(&b_path)?;
    for p in [&csv, &txt, &d_series, &b_series] {
        m.output(p)?;
    }
    Ok((m.finish("eval", start.elapsed())?, text))
}

pub fn complexity(cfg: &RunConfig, run: &RunDir) -> Result<(StageManifest, String), CliError> {
    let start = Instant::now();
    let (d_path, diffopf) = load_scores(run)?;
    let data = load_data(run, false)?;
    if diffopf.len() != data.test.len() {
        return Err(CliError::Numeric(format!(
            "{} scored loads for {} test records",
            diffopf.len(),
            data.test.len()
        )));
    }
    let c_star: Vec<f64> = data.test.iter().map(|r| r.objective).collect();
    let rows = complexity_rows(
        &restored_costs(&diffopf),
        &c_star,
        &cfg.eval.epsilons_pct,
        &cfg.eval.deltas,
    )?;
    let dir = run.create_stage("complexity")?;
    let csv = dir.join("complexity.csv");
    let txt = dir.join("complexity.txt");
    let text = render_complexity_text(&rows);
    write_text(&csv, &render_complexity_csv(&rows))?;
    write_text(&txt, &text)?;
    let mut m = ManifestBuilder::new(run, "complexity", cfg.hash());
    m.input(&d_path)?.input(&run.file("data", "test.csv"))?;
    m.output(&csv)?.output(&txt)?;
    Ok((m.finish("complexity", start.elapsed())?, text))
}

/// The whole pipeline in one run directory.
pub fn bench(cfg: &RunConfig, run: &RunDir) -> Result<String, CliError> {
    let start = Instant::now();
    gen_data(cfg, run)?;
    train(cfg, run)?;
    train_baseline_stage(cfg, run)?;
    sample(cfg, run)?;
    restore(cfg, run)?;
    let (_, warm) = eval(cfg, run)?;
    let (_, comp) = complexity(cfg, run)?;
    Ok(format!(
        "{warm}\n{comp}\nfinished in {:.1}s\n",
        start.elapsed().as_secs_f64()
    ))
}
