//! Operational-history records, their CSV file format, and normalization.
//!
//! A record's joint vector is `x₀ = (p_d, q_d, p_g, q_g)`, where the demand
//! blocks cover the network's load buses (nonzero nominal demand) in bus
//! order and the dispatch blocks cover every generator. Voltages, realized
//! costs and the objective ride along as metadata columns; they never enter
//! `x₀`.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acopf::{solve_opf_with, OpfOptions, PowerFlowState, SolveStatus};
use crate::grid::{Demand, Network};
use crate::rng::{stream, Purpose};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset format error at line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("discard rate too high: {discarded} of {attempts} OPF solves did not converge")]
    DiscardRate { discarded: usize, attempts: usize },
    #[error("invalid dataset request: {0}")]
    Invalid(String),
    #[error("normalizer needs at least two records, got {0}")]
    TooFewRecords(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    PD,
    QD,
    PG,
    QG,
}

impl Quantity {
    fn prefix(self) -> &'static str {
        match self {
            Quantity::PD => "p_d",
            Quantity::QD => "q_d",
            Quantity::PG => "p_g",
            Quantity::QG => "q_g",
        }
    }
}

/// One coordinate of `x₀`: a demand at a bus (by bus id) or a dispatch of a
/// generator (by generator position).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub quantity: Quantity,
    pub element: usize,
}

impl LayoutEntry {
    pub fn name(&self) -> String {
        format!("{}[{}]", self.quantity.prefix(), self.element)
    }
}

/// Map from `x₀` position to `(quantity, element)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub entries: Vec<LayoutEntry>,
    /// Bus positions of the demand blocks.
    pub load_buses: Vec<usize>,
    pub n_gen: usize,
}

impl Layout {
    pub fn for_network(net: &Network) -> Self {
        let load_buses = net.load_buses();
        let mut entries = Vec::new();
        for q in [Quantity::PD, Quantity::QD] {
            entries.extend(load_buses.iter().map(|&b| LayoutEntry {
                quantity: q,
                element: net.buses()[b].id,
            }));
        }
        for q in [Quantity::PG, Quantity::QG] {
            entries.extend((0..net.n_gen()).map(|k| LayoutEntry {
                quantity: q,
                element: k,
            }));
        }
        Self {
            entries,
            load_buses,
            n_gen: net.n_gen(),
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn n_load(&self) -> usize {
        self.load_buses.len()
    }

    /// `x₀` positions of the observed demand `(p_d, q_d)`.
    pub fn demand_indices(&self) -> Vec<usize> {
        (0..2 * self.n_load()).collect()
    }

    /// `x₀` positions of the dispatch `(p_g, q_g)`.
    pub fn dispatch_indices(&self) -> Vec<usize> {
        (2 * self.n_load()..self.dim()).collect()
    }

    pub fn header(&self) -> Vec<String> {
        self.entries.iter().map(LayoutEntry::name).collect()
    }

    /// Splits `x₀` into `(p_d, q_d, p_g, q_g)` slices.
    pub fn split<'a>(&self, x0: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64], &'a [f64]) {
        let (nd, ng) = (self.n_load(), self.n_gen);
        (
            &x0[..nd],
            &x0[nd..2 * nd],
            &x0[2 * nd..2 * nd + ng],
            &x0[2 * nd + ng..2 * nd + 2 * ng],
        )
    }

    /// Full per-bus demand from the demand blocks of `x₀`.
    pub fn demand(&self, n_bus: usize, x0: &[f64]) -> Demand {
        let (pd, qd, _, _) = self.split(x0);
        let mut d = Demand::zeros(n_bus);
        for (k, &b) in self.load_buses.iter().enumerate() {
            d.p[b] = pd[k];
            d.q[b] = qd[k];
        }
        d
    }

    /// Observation vector `y = (p_d, q_d)` restricted to load buses.
    pub fn observation(&self, load: &Demand) -> Vec<f64> {
        let mut y: Vec<f64> = self.load_buses.iter().map(|&b| load.p[b]).collect();
        y.extend(self.load_buses.iter().map(|&b| load.q[b]));
        y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpfRecord {
    pub p_d: Vec<f64>,
    pub q_d: Vec<f64>,
    pub p_g: Vec<f64>,
    pub q_g: Vec<f64>,
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub c1_realized: Vec<f64>,
    pub objective: f64,
    pub solver_status: SolveStatus,
}

impl OpfRecord {
    pub fn x0(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(2 * (self.p_d.len() + self.p_g.len()));
        x.extend_from_slice(&self.p_d);
        x.extend_from_slice(&self.q_d);
        x.extend_from_slice(&self.p_g);
        x.extend_from_slice(&self.q_g);
        x
    }

    pub fn demand(&self, layout: &Layout, n_bus: usize) -> Demand {
        layout.demand(n_bus, &self.x0())
    }

    pub fn state(&self) -> PowerFlowState {
        PowerFlowState {
            v: self.v.clone(),
            theta: self.theta.clone(),
            p_g: self.p_g.clone(),
            q_g: self.q_g.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub n_records: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Per-bus demand scale range relative to nominal.
    pub load_range: (f64, f64),
    /// Relative half-width of the linear-cost randomization.
    pub cost_spread: f64,
    pub max_discard_rate: f64,
    pub opf: OpfOptions,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            n_records: 5000,
            n_test: 100,
            seed: 0,
            load_range: (0.8, 1.0),
            cost_spread: 0.4,
            max_discard_rate: 0.5,
            opf: OpfOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub network_hash: String,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub load_range: (f64, f64),
    pub cost_range: (f64, f64),
    pub discarded_train: usize,
    pub discarded_test: usize,
    pub layout: Layout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<OpfRecord>,
    pub test: Vec<OpfRecord>,
    pub manifest: DatasetManifest,
}

/// Scales nominal demand by an independent `u ~ U[lo, hi]` per bus; active and
/// reactive demand share the factor, so power factors are unchanged.
pub fn sample_load<R: Rng + ?Sized>(net: &Network, rng: &mut R, range: (f64, f64)) -> Demand {
    let nominal = net.nominal_load();
    let mut d = Demand::zeros(net.n_bus());
    for b in 0..net.n_bus() {
        let u = rng.random_range(range.0..=range.1);
        d.p[b] = u * nominal.p[b];
        d.q[b] = u * nominal.q[b];
    }
    d
}

/// `c1 = c1_nom · (1 + w)`, `w ~ U[-spread, spread]` per generator.
pub fn sample_costs<R: Rng + ?Sized>(net: &Network, rng: &mut R, spread: f64) -> Vec<f64> {
    net.generators()
        .iter()
        .map(|g| g.cost_c1 * (1.0 + rng.random_range(-spread..=spread)))
        .collect()
}

fn solve_draw(
    net: &Network,
    layout: &Layout,
    cfg: &GenerateConfig,
    purpose: Purpose,
    index: u64,
) -> OpfRecord {
    let mut rng = stream(cfg.seed, purpose, index);
    let load = sample_load(net, &mut rng, cfg.load_range);
    let c1 = sample_costs(net, &mut rng, cfg.cost_spread);
    let y = layout.observation(&load);
    let nd = layout.n_load();
    match solve_opf_with(net, &load, Some(&c1), None, &cfg.opf) {
        Ok(sol) => OpfRecord {
            p_d: y[..nd].to_vec(),
            q_d: y[nd..].to_vec(),
            p_g: sol.state.p_g,
            q_g: sol.state.q_g,
            v: sol.state.v,
            theta: sol.state.theta,
            c1_realized: c1,
            objective: sol.objective,
            solver_status: sol.status,
        },
        Err(e) => unreachable!("dimensions are consistent by construction: {e}"),
    }
}

fn generate_split(
    net: &Network,
    layout: &Layout,
    cfg: &GenerateConfig,
    n: usize,
    purpose: Purpose,
) -> Result<(Vec<OpfRecord>, usize), DatasetError> {
    let mut records = Vec::with_capacity(n);
    let mut discarded = 0usize;
    let mut next = 0u64;
    while records.len() < n {
        let want = n - records.len();
        let chunk = (want + want / 4 + 1).max(8) as u64;
        let batch: Vec<OpfRecord> = (next..next + chunk)
            .into_par_iter()
            .map(|k| solve_draw(net, layout, cfg, purpose, k))
            .collect();
        next += chunk;
        for rec in batch {
            if records.len() == n {
                break;
            }
            if rec.solver_status == SolveStatus::Converged {
                records.push(rec);
            } else {
                discarded += 1;
            }
        }
        let attempts = records.len() + discarded;
        if attempts >= 20 && discarded as f64 > cfg.max_discard_rate * attempts as f64 {
            return Err(DatasetError::DiscardRate {
                discarded,
                attempts,
            });
        }
    }
    let attempts = records.len() + discarded;
    if discarded as f64 > cfg.max_discard_rate * attempts as f64 {
        return Err(DatasetError::DiscardRate {
            discarded,
            attempts,
        });
    }
    Ok((records, discarded))
}

/// Draws loads and costs, solves each OPF, and keeps the first `n_records`
/// converged solves (plus `n_test` from an independent stream).
pub fn generate(net: &Network, cfg: &GenerateConfig) -> Result<Dataset, DatasetError> {
    if cfg.n_records == 0 {
        return Err(DatasetError::Invalid("n_records must be at least 1".into()));
    }
    let (lo, hi) = cfg.load_range;
    if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
        return Err(DatasetError::Invalid(format!("bad load range ({lo}, {hi})")));
    }
    if !(0.0..1.0).contains(&cfg.cost_spread) {
        return Err(DatasetError::Invalid(format!(
            "cost spread must be in [0, 1), got {}",
            cfg.cost_spread
        )));
    }
    let layout = Layout::for_network(net);
    let (train, discarded_train) =
        generate_split(net, &layout, cfg, cfg.n_records, Purpose::TrainLoads)?;
    let (test, discarded_test) = if cfg.n_test > 0 {
        generate_split(net, &layout, cfg, cfg.n_test, Purpose::TestLoads)?
    } else {
        (Vec::new(), 0)
    };
    if discarded_train + discarded_test > 0 {
        log::info!(
            "discarded {discarded_train} train and {discarded_test} test draws with unconverged OPF"
        );
    }
    Ok(Dataset {
        train,
        test,
        manifest: DatasetManifest {
            network_hash: net.content_hash(),
            n_train: cfg.n_records,
            n_test: cfg.n_test,
            seed: cfg.seed,
            load_range: cfg.load_range,
            cost_range: (1.0 - cfg.cost_spread, 1.0 + cfg.cost_spread),
            discarded_train,
            discarded_test,
            layout,
        },
    })
}

fn status_code(s: SolveStatus) -> u8 {
    match s {
        SolveStatus::Converged => 0,
        SolveStatus::MaxIter => 1,
        SolveStatus::Infeasible => 2,
    }
}

fn status_from_code(code: f64) -> Option<SolveStatus> {
    match code as i64 {
        0 => Some(SolveStatus::Converged),
        1 => Some(SolveStatus::MaxIter),
        2 => Some(SolveStatus::Infeasible),
        _ => None,
    }
}

fn join_row(out: &mut String, values: &[f64]) {
    for (k, v) in values.iter().enumerate() {
        if k > 0 {
            out.push(',');
        }
        write!(out, "{v}").expect("writing to a String cannot fail");
    }
}

/// Writes records as CSV: `x₀` columns named by the layout, then metadata
/// columns `v[bus]`, `theta[bus]`, `c1[gen]`, `objective`, `status`.
pub fn write_records<W: Write>(
    mut w: W,
    net: &Network,
    layout: &Layout,
    records: &[OpfRecord],
) -> Result<(), DatasetError> {
    let mut header = layout.header();
    header.extend(net.buses().iter().map(|b| format!("v[{}]", b.id)));
    header.extend(net.buses().iter().map(|b| format!("theta[{}]", b.id)));
    header.extend((0..net.n_gen()).map(|k| format!("c1[{k}]")));
    header.push("objective".into());
    header.push("status".into());
    writeln!(w, "{}", header.join(","))?;
    let mut line = String::new();
    for rec in records {
        line.clear();
        let mut values = rec.x0();
        values.extend_from_slice(&rec.v);
        values.extend_from_slice(&rec.theta);
        values.extend_from_slice(&rec.c1_realized);
        values.push(rec.objective);
        values.push(status_code(rec.solver_status) as f64);
        join_row(&mut line, &values);
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Writes bare `x₀` vectors (sampled records) under the layout header.
pub fn write_vectors<W: Write>(
    mut w: W,
    layout: &Layout,
    rows: &[Vec<f64>],
) -> Result<(), DatasetError> {
    writeln!(w, "{}", layout.header().join(","))?;
    let mut line = String::new();
    for row in rows {
        line.clear();
        join_row(&mut line, row);
        writeln!(w, "{line}")?;
    }
    Ok(())
}

fn parse_rows<R: BufRead>(r: R) -> Result<(Vec<String>, Vec<Vec<f64>>), DatasetError> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or(DatasetError::Format {
            line: 1,
            message: "empty file".into(),
        })??
        .split(',')
        .map(|s| s.trim().to_string())
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| DatasetError::Format {
                line: k + 2,
                message: e.to_string(),
            })?;
        if row.len() != header.len() {
            return Err(DatasetError::Format {
                line: k + 2,
                message: format!("{} fields, header has {}", row.len(), header.len()),
            });
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// Reads `x₀` vectors, ignoring metadata columns.
pub fn read_vectors<R: BufRead>(r: R, layout: &Layout) -> Result<Vec<Vec<f64>>, DatasetError> {
    let (header, rows) = parse_rows(r)?;
    let names = layout.header();
    if header.len() < names.len() || header[..names.len()] != names[..] {
        return Err(DatasetError::Format {
            line: 1,
            message: "header does not match the dataset layout".into(),
        });
    }
    Ok(rows
        .into_iter()
        .map(|mut r| {
            r.truncate(names.len());
            r
        })
        .collect())
}

/// Reads full records written by [`write_records`].
pub fn read_records<R: BufRead>(
    r: R,
    net: &Network,
    layout: &Layout,
) -> Result<Vec<OpfRecord>, DatasetError> {
    let (header, rows) = parse_rows(r)?;
    let (nb, ng, nd) = (net.n_bus(), net.n_gen(), layout.n_load());
    let dim = layout.dim();
    let expected = dim + 2 * nb + ng + 2;
    if header.len() != expected || header[..dim] != layout.header()[..] {
        return Err(DatasetError::Format {
            line: 1,
            message: format!(
                "expected {expected} record columns matching the layout, found {}",
                header.len()
            ),
        });
    }
    rows.into_iter()
        .enumerate()
        .map(|(k, row)| {
            let status =
                status_from_code(row[expected - 1]).ok_or_else(|| DatasetError::Format {
                    line: k + 2,
                    message: format!("unknown status code {}", row[expected - 1]),
                })?;
            let meta = &row[dim..];
            Ok(OpfRecord {
                p_d: row[..nd].to_vec(),
                q_d: row[nd..2 * nd].to_vec(),
                p_g: row[2 * nd..2 * nd + ng].to_vec(),
                q_g: row[2 * nd + ng..dim].to_vec(),
                v: meta[..nb].to_vec(),
                theta: meta[nb..2 * nb].to_vec(),
                c1_realized: meta[2 * nb..2 * nb + ng].to_vec(),
                objective: meta[2 * nb + ng],
                solver_status: status,
            })
        })
        .collect()
}

/// Per-dimension z-scoring over `x₀`. Dimensions with zero spread are
/// removed from the model space and restored from their stored constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// `x₀` indices kept in the model space, ascending.
    pub retained: Vec<usize>,
}

impl Normalizer {
    /// Identity map on `dim` coordinates.
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
            retained: (0..dim).collect(),
        }
    }

    pub fn fit(rows: &[Vec<f64>]) -> Result<Self, DatasetError> {
        if rows.len() < 2 {
            return Err(DatasetError::TooFewRecords(rows.len()));
        }
        let dim = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
        let retained = (0..dim)
            .filter(|&i| std[i] > 1e-12 * mean[i].abs().max(1.0))
            .collect();
        Ok(Self {
            mean,
            std,
            retained,
        })
    }

    pub fn full_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn model_dim(&self) -> usize {
        self.retained.len()
    }

    /// Indices in `x₀` that were dropped as constant.
    pub fn dropped(&self) -> Vec<usize> {
        (0..self.full_dim())
            .filter(|i| self.retained.binary_search(i).is_err())
            .collect()
    }

    /// Model-space position of an `x₀` index, if retained.
    pub fn model_index(&self, full: usize) -> Option<usize> {
        self.retained.binary_search(&full).ok()
    }

    pub fn normalize(&self, x0: &[f64]) -> Vec<f64> {
        self.retained
            .iter()
            .map(|&i| (x0[i] - self.mean[i]) / self.std[i])
            .collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        let mut x = self.mean.clone();
        for (k, &i) in self.retained.iter().enumerate() {
            x[i] = self.mean[i] + self.std[i] * z[k];
        }
        x
    }

    /// Normalizes one `x₀` coordinate.
    pub fn normalize_at(&self, full: usize, value: f64) -> f64 {
        (value - self.mean[full]) / self.std[full]
    }
}
