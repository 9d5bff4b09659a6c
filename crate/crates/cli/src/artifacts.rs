//! On-disk layout of a run directory and the per-stage manifests.
//!
//! ```text
//! <run>/data/{network.json, dataset.json, train.csv, test.csv}
//! <run>/model/{diffusion.json, loss.csv}
//! <run>/baseline/{baseline.json, loss.csv}
//! <run>/samples/samples.csv
//! <run>/restore/{diffopf_scores.json, baseline_scores.json}
//! <run>/eval/{warmstart.csv, warmstart.txt, gap_violation_*.dat}
//! <run>/complexity/{complexity.csv, complexity.txt}
//! ```
//!
//! Every stage directory also holds a `manifest.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::Duration;

use diffopf::dataset::{read_records, DatasetManifest, Layout, OpfRecord};
use diffopf::grid::Network;
use diffopf::guidance::{ChainStatus, WarmStartSample};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn stage(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn file(&self, stage: &str, name: &str) -> PathBuf {
        self.root.join(stage).join(name)
    }

    /// Creates (or reuses) the directory of `stage`.
    pub fn create_stage(&self, stage: &str) -> Result<PathBuf, CliError> {
        let dir = self.stage(stage);
        fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
        Ok(dir)
    }
}

/// Path of an input artifact, or exit code 4 naming it and the stage that
/// produces it.
pub fn require(path: PathBuf, stage: &'static str) -> Result<PathBuf, CliError> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::Missing { path, stage })
    }
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(CliError::io(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Numeric(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// Paths relative to the run directory, with their SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, f64>,
}

pub struct ManifestBuilder<'a> {
    run: &'a RunDir,
    manifest: StageManifest,
}

impl<'a> ManifestBuilder<'a> {
    pub fn new(run: &'a RunDir, command: &str, config_hash: String) -> Self {
        Self {
            run,
            manifest: StageManifest {
                command: command.into(),
                version: env!("CARGO_PKG_VERSION").into(),
                config_hash,
                seeds: BTreeMap::new(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                wall_time_s: 0.0,
                notes: BTreeMap::new(),
            },
        }
    }

    pub fn seed(&mut self, name: &str, seed: u64) -> &mut Self {
        self.manifest.seeds.insert(name.into(), seed);
        self
    }

    pub fn note(&mut self, name: &str, value: f64) -> &mut Self {
        self.manifest.notes.insert(name.into(), value);
        self
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.run.root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self, CliError> {
        let hash = sha256_file(path)?;
        self.manifest.inputs.insert(self.relative(path), hash);
        Ok(self)
    }

    pub fn output(&mut self, path: &Path) -> Result<&mut Self, CliError> {
        let hash = sha256_file(path)?;
        self.manifest.outputs.insert(self.relative(path), hash);
        Ok(self)
    }

    pub fn finish(mut self, stage: &str, elapsed: Duration) -> Result<StageManifest, CliError> {
        self.manifest.wall_time_s = elapsed.as_secs_f64();
        write_json(&self.run.file(stage, "manifest.json"), &self.manifest)?;
        Ok(self.manifest)
    }
}

/// Network, layout and records written by `gen-data`.
pub struct DataArtifacts {
    pub net: Network,
    pub manifest: DatasetManifest,
    pub train: Vec<OpfRecord>,
    pub test: Vec<OpfRecord>,
}

pub const DATA_FILES: [&str; 4] = ["network.json", "dataset.json", "train.csv", "test.csv"];

pub fn load_data(run: &RunDir, with_train: bool) -> Result<DataArtifacts, CliError> {
    let [net_p, man_p, train_p, test_p] =
        DATA_FILES.map(|f| require(run.file("data", f), "gen-data"));
    let net = diffopf::grid::load_case(net_p?)?;
    let manifest: DatasetManifest = read_json(&man_p?)?;
    let records = |p: PathBuf| -> Result<Vec<OpfRecord>, CliError> {
        let f = fs::File::open(&p).map_err(CliError::io(&p))?;
        Ok(read_records(BufReader::new(f), &net, &manifest.layout)?)
    };
    let train = if with_train { records(train_p?)? } else { Vec::new() };
    let test = records(test_p?)?;
    Ok(DataArtifacts {
        net,
        manifest,
        train,
        test,
    })
}

/// Guided samples of one test load.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadSamples {
    pub load: usize,
    pub samples: Vec<WarmStartSample>,
}

const SAMPLE_META: [&str; 5] = ["load", "chain", "seed", "status", "residual"];

fn status_text(s: ChainStatus) -> String {
    match s {
        ChainStatus::Ok => "ok".into(),
        ChainStatus::NonFinite { t } => format!("nonfinite@{t}"),
    }
}

fn parse_status(s: &str) -> Option<ChainStatus> {
    if s == "ok" {
        return Some(ChainStatus::Ok);
    }
    s.strip_prefix("nonfinite@")?
        .parse()
        .ok()
        .map(|t| ChainStatus::NonFinite { t })
}

/// One row per chain; failed chains keep `NaN` coordinates.
pub fn write_samples(path: &Path, layout: &Layout, loads: &[LoadSamples]) -> Result<(), CliError> {
    let mut s = SAMPLE_META.join(",");
    for h in layout.header() {
        s.push(',');
        s.push_str(&h);
    }
    s.push('\n');
    for ls in loads {
        for smp in &ls.samples {
            let _ = write!(
                s,
                "{},{},{},{},{}",
                ls.load,
                smp.chain,
                smp.seed,
                status_text(smp.status),
                smp.residual
            );
            for v in &smp.x0 {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
    }
    write_text(path, &s)
}

pub fn read_samples(path: &Path, layout: &Layout) -> Result<Vec<LoadSamples>, CliError> {
    let f = fs::File::open(path).map_err(CliError::io(path))?;
    let bad = |line: usize, m: &str| CliError::Numeric(format!("{}:{line}: {m}", path.display()));
    let mut lines = BufReader::new(f).lines();
    let header = lines
        .next()
        .transpose()
        .map_err(CliError::io(path))?
        .ok_or_else(|| bad(1, "empty file"))?;
    let expected: Vec<String> = SAMPLE_META
        .iter()
        .map(|s| s.to_string())
        .chain(layout.header())
        .collect();
    if header.split(',').ne(expected.iter().map(String::as_str)) {
        return Err(bad(1, "header does not match the dataset layout"));
    }
    let mut out: Vec<LoadSamples> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(CliError::io(path))?;
        let n = i + 2;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != expected.len() {
            return Err(bad(n, "wrong number of fields"));
        }
        let int = |c: &str| c.parse::<u64>().map_err(|_| bad(n, "bad integer"));
        let load = int(cells[0])? as usize;
        let chain = int(cells[1])? as usize;
        let seed = int(cells[2])?;
        let status = parse_status(cells[3]).ok_or_else(|| bad(n, "bad status"))?;
        let residual: f64 = cells[4].parse().map_err(|_| bad(n, "bad residual"))?;
        let x0 = cells[5..]
            .iter()
            .map(|c| c.parse::<f64>().map_err(|_| bad(n, "bad value")))
            .collect::<Result<Vec<_>, _>>()?;
        let (_, _, p_g, q_g) = layout.split(&x0);
        let smp = WarmStartSample {
            chain,
            seed,
            p_g: p_g.to_vec(),
            q_g: q_g.to_vec(),
            x0,
            residual,
            status,
            score: None,
        };
        match out.last_mut() {
            Some(ls) if ls.load == load => ls.samples.push(smp),
            _ => out.push(LoadSamples {
                load,
                samples: vec![smp],
            }),
        }
    }
    Ok(out)
}
