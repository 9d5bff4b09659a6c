//! Static network description and the JSON case-file format.
//!
//! All electrical quantities are per-unit on `base_mva`; generator cost
//! coefficients are in dollars (c2 in $/p.u.², c1 in $/p.u., c0 in $).
//!
//! A case file looks like
//!
//! ```json
//! {
//!   "base_mva": 100.0,
//!   "buses": [{"id": 1, "v_min": 0.9, "v_max": 1.1, "is_slack": true}, ...],
//!   "generators": [{"bus": 1, "p_min": 0.0, "p_max": 4.0, "q_min": -3.0,
//!                   "q_max": 3.0, "cost_c2": 0.0, "cost_c1": 1400.0, "cost_c0": 0.0}],
//!   "lines": [{"from": 1, "to": 2, "r": 0.00281, "x": 0.0281, "b_ch": 0.00712, "s_max": 4.0}],
//!   "nominal_load": [{"bus": 2, "p_d": 3.0, "q_d": 0.9861}]
//! }
//! ```
//!
//! Lines may give their series branch either as an impedance (`r`, `x`) or as
//! an admittance (`g`, `b`). Shunts (`g_sh`, `b_sh`) and `b_ch` default to zero.
//!
//! Mapping from MATPOWER-style data: divide bus `Gs`/`Bs`, loads and generator
//! limits by `baseMVA`; copy `Vmin`/`Vmax`; `BR_R`, `BR_X`, `BR_B` map to `r`,
//! `x`, `b_ch` and `RATE_A / baseMVA` to `s_max`; polynomial cost terms are
//! rescaled by `baseMVA²` (c2) and `baseMVA` (c1).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("failed to read case file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("case parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid case: {0}")]
    Invalid(String),
}

/// Which line-flow equations the network uses.
///
/// `Pi` is the full π-model (series self terms, line charging, bus shunts).
/// `Paper` evaluates `f = v_i v_j [g cos + b sin]` and `f = v_i v_j [g sin - b cos]`
/// literally, without self terms, charging or shunts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowModel {
    #[default]
    Pi,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub v_min: f64,
    pub v_max: f64,
    #[serde(default)]
    pub g_sh: f64,
    #[serde(default)]
    pub b_sh: f64,
    #[serde(default)]
    pub is_slack: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    #[serde(default)]
    pub cost_c2: f64,
    #[serde(default)]
    pub cost_c1: f64,
    #[serde(default)]
    pub cost_c0: f64,
}

impl Generator {
    pub fn cost(&self, p: f64) -> f64 {
        self.cost_c2 * p * p + self.cost_c1 * p + self.cost_c0
    }
}

/// A branch with series admittance `g + jb` and total charging susceptance `b_ch`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub g: f64,
    pub b: f64,
    #[serde(default)]
    pub b_ch: f64,
    pub s_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadEntry {
    pub bus: usize,
    pub p_d: f64,
    pub q_d: f64,
}

/// Per-bus active and reactive demand, indexed by bus position.
#[derive(Debug, Clone, PartialEq)]
pub struct Demand {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl Demand {
    pub fn zeros(n_bus: usize) -> Self {
        Self {
            p: vec![0.0; n_bus],
            q: vec![0.0; n_bus],
        }
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LineRecord {
    from: usize,
    to: usize,
    #[serde(default)]
    g: Option<f64>,
    #[serde(default)]
    b: Option<f64>,
    #[serde(default)]
    r: Option<f64>,
    #[serde(default)]
    x: Option<f64>,
    #[serde(default)]
    b_ch: f64,
    s_max: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseFile {
    base_mva: f64,
    buses: Vec<Bus>,
    generators: Vec<Generator>,
    lines: Vec<LineRecord>,
    #[serde(default)]
    nominal_load: Vec<LoadEntry>,
    #[serde(default)]
    flow_model: FlowModel,
}

#[derive(Serialize)]
struct CaseFileOut<'a> {
    base_mva: f64,
    flow_model: FlowModel,
    buses: &'a [Bus],
    generators: &'a [Generator],
    lines: &'a [Line],
    nominal_load: &'a [LoadEntry],
}

/// Validated, immutable network. Element order follows the case file.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    base_mva: f64,
    flow_model: FlowModel,
    buses: Vec<Bus>,
    generators: Vec<Generator>,
    lines: Vec<Line>,
    nominal_load: Vec<LoadEntry>,
    bus_index: HashMap<usize, usize>,
    gen_bus: Vec<usize>,
    line_ends: Vec<(usize, usize)>,
    slack: usize,
    nominal: Demand,
}

/// Series and shunt admittance terms in element order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceTerms {
    pub line_g: Vec<f64>,
    pub line_b: Vec<f64>,
    pub line_b_ch: Vec<f64>,
    pub bus_g_sh: Vec<f64>,
    pub bus_b_sh: Vec<f64>,
}

fn invalid(msg: impl Into<String>) -> CaseError {
    CaseError::Invalid(msg.into())
}

impl Network {
    pub fn new(
        base_mva: f64,
        buses: Vec<Bus>,
        generators: Vec<Generator>,
        lines: Vec<Line>,
        nominal_load: Vec<LoadEntry>,
    ) -> Result<Self, CaseError> {
        Self::with_flow_model(
            base_mva,
            buses,
            generators,
            lines,
            nominal_load,
            FlowModel::Pi,
        )
    }

    pub fn with_flow_model(
        base_mva: f64,
        buses: Vec<Bus>,
        generators: Vec<Generator>,
        lines: Vec<Line>,
        nominal_load: Vec<LoadEntry>,
        flow_model: FlowModel,
    ) -> Result<Self, CaseError> {
        if !(base_mva.is_finite() && base_mva > 0.0) {
            return Err(invalid(format!("base_mva must be positive, got {base_mva}")));
        }
        if buses.is_empty() {
            return Err(invalid("network has no buses"));
        }
        let mut bus_index = HashMap::with_capacity(buses.len());
        for (k, bus) in buses.iter().enumerate() {
            if bus_index.insert(bus.id, k).is_some() {
                return Err(invalid(format!("duplicate bus id {}", bus.id)));
            }
            let finite = [bus.v_min, bus.v_max, bus.g_sh, bus.b_sh]
                .iter()
                .all(|v| v.is_finite());
            if !finite {
                return Err(invalid(format!("bus {}: non-finite field", bus.id)));
            }
            if bus.v_min <= 0.0 {
                return Err(invalid(format!(
                    "bus {}: v_min must be positive, got {}",
                    bus.id, bus.v_min
                )));
            }
            if bus.v_min > bus.v_max {
                return Err(invalid(format!(
                    "bus {}: v_min ({}) exceeds v_max ({})",
                    bus.id, bus.v_min, bus.v_max
                )));
            }
        }
        let slacks: Vec<usize> = buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.is_slack)
            .map(|(k, _)| k)
            .collect();
        if slacks.len() != 1 {
            return Err(invalid(format!(
                "exactly one slack bus required, found {}",
                slacks.len()
            )));
        }

        let mut gen_bus = Vec::with_capacity(generators.len());
        for (k, gen) in generators.iter().enumerate() {
            let idx = *bus_index.get(&gen.bus).ok_or_else(|| {
                invalid(format!("generator {k}: unknown bus {}", gen.bus))
            })?;
            let fields = [
                gen.p_min,
                gen.p_max,
                gen.q_min,
                gen.q_max,
                gen.cost_c2,
                gen.cost_c1,
                gen.cost_c0,
            ];
            if !fields.iter().all(|v| v.is_finite()) {
                return Err(invalid(format!("generator {k}: non-finite field")));
            }
            if gen.p_min > gen.p_max {
                return Err(invalid(format!(
                    "generator {k}: p_min ({}) exceeds p_max ({})",
                    gen.p_min, gen.p_max
                )));
            }
            if gen.q_min > gen.q_max {
                return Err(invalid(format!(
                    "generator {k}: q_min ({}) exceeds q_max ({})",
                    gen.q_min, gen.q_max
                )));
            }
            if gen.cost_c2 < 0.0 {
                return Err(invalid(format!(
                    "generator {k}: cost_c2 must be nonnegative, got {}",
                    gen.cost_c2
                )));
            }
            gen_bus.push(idx);
        }

        let mut line_ends = Vec::with_capacity(lines.len());
        for (k, line) in lines.iter().enumerate() {
            let from = *bus_index
                .get(&line.from)
                .ok_or_else(|| invalid(format!("line {k}: unknown from bus {}", line.from)))?;
            let to = *bus_index
                .get(&line.to)
                .ok_or_else(|| invalid(format!("line {k}: unknown to bus {}", line.to)))?;
            if from == to {
                return Err(invalid(format!(
                    "line {k}: from and to are both bus {}",
                    line.from
                )));
            }
            if ![line.g, line.b, line.b_ch, line.s_max]
                .iter()
                .all(|v| v.is_finite())
            {
                return Err(invalid(format!("line {k}: non-finite field")));
            }
            if line.g == 0.0 && line.b == 0.0 {
                return Err(invalid(format!("line {k}: zero series admittance")));
            }
            if line.s_max <= 0.0 {
                return Err(invalid(format!(
                    "line {k}: s_max must be positive, got {}",
                    line.s_max
                )));
            }
            line_ends.push((from, to));
        }

        let mut nominal = Demand::zeros(buses.len());
        for entry in &nominal_load {
            let idx = *bus_index
                .get(&entry.bus)
                .ok_or_else(|| invalid(format!("nominal_load: unknown bus {}", entry.bus)))?;
            if !(entry.p_d.is_finite() && entry.q_d.is_finite()) {
                return Err(invalid(format!(
                    "nominal_load at bus {}: non-finite demand",
                    entry.bus
                )));
            }
            nominal.p[idx] += entry.p_d;
            nominal.q[idx] += entry.q_d;
        }

        Ok(Self {
            base_mva,
            flow_model,
            buses,
            generators,
            lines,
            nominal_load,
            bus_index,
            gen_bus,
            line_ends,
            slack: slacks[0],
            nominal,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self, CaseError> {
        let file: CaseFile = serde_json::from_str(text).map_err(|e| CaseError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let mut lines = Vec::with_capacity(file.lines.len());
        for (k, rec) in file.lines.into_iter().enumerate() {
            let (g, b) = match (rec.g, rec.b, rec.r, rec.x) {
                (Some(g), Some(b), None, None) => (g, b),
                (None, None, r, x) if r.is_some() || x.is_some() => {
                    let r = r.unwrap_or(0.0);
                    let x = x.unwrap_or(0.0);
                    let z2 = r * r + x * x;
                    if z2 == 0.0 {
                        return Err(invalid(format!("line {k}: zero series impedance")));
                    }
                    (r / z2, -x / z2)
                }
                _ => {
                    return Err(invalid(format!(
                        "line {k}: give either (g, b) or (r, x)"
                    )))
                }
            };
            lines.push(Line {
                from: rec.from,
                to: rec.to,
                g,
                b,
                b_ch: rec.b_ch,
                s_max: rec.s_max,
            });
        }
        Self::with_flow_model(
            file.base_mva,
            file.buses,
            file.generators,
            lines,
            file.nominal_load,
            file.flow_model,
        )
    }

    /// Serializes to the case-file format; series branches are written as (g, b).
    pub fn to_json_string(&self) -> String {
        let out = CaseFileOut {
            base_mva: self.base_mva,
            flow_model: self.flow_model,
            buses: &self.buses,
            generators: &self.generators,
            lines: &self.lines,
            nominal_load: &self.nominal_load,
        };
        serde_json::to_string_pretty(&out).expect("network serialization cannot fail")
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json_string().as_bytes()))
    }

    pub fn base_mva(&self) -> f64 {
        self.base_mva
    }

    pub fn flow_model(&self) -> FlowModel {
        self.flow_model
    }

    /// Copy of the network evaluated with a different flow model.
    pub fn with_model(&self, model: FlowModel) -> Self {
        let mut net = self.clone();
        net.flow_model = model;
        net
    }

    /// Copy with every line's apparent-flow limit removed.
    pub fn without_flow_limits(&self) -> Self {
        let mut net = self.clone();
        for line in &mut net.lines {
            line.s_max = f64::INFINITY;
        }
        net
    }

    /// Copy with generator linear costs replaced.
    pub fn with_linear_costs(&self, c1: &[f64]) -> Self {
        assert_eq!(c1.len(), self.generators.len());
        let mut net = self.clone();
        for (gen, &c) in net.generators.iter_mut().zip(c1) {
            gen.cost_c1 = c;
        }
        net
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn generators(&self) -> &[Generator] {
        &self.generators
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }

    pub fn n_gen(&self) -> usize {
        self.generators.len()
    }

    pub fn n_line(&self) -> usize {
        self.lines.len()
    }

    pub fn slack(&self) -> usize {
        self.slack
    }

    pub fn bus_position(&self, id: usize) -> Option<usize> {
        self.bus_index.get(&id).copied()
    }

    /// Bus position of each generator.
    pub fn gen_bus(&self) -> &[usize] {
        &self.gen_bus
    }

    /// (from, to) bus positions of each line.
    pub fn line_ends(&self) -> &[(usize, usize)] {
        &self.line_ends
    }

    pub fn nominal_load(&self) -> &Demand {
        &self.nominal
    }

    pub fn nominal_load_entries(&self) -> &[LoadEntry] {
        &self.nominal_load
    }

    /// Bus positions with nonzero nominal active or reactive demand, ascending.
    pub fn load_buses(&self) -> Vec<usize> {
        (0..self.n_bus())
            .filter(|&k| self.nominal.p[k] != 0.0 || self.nominal.q[k] != 0.0)
            .collect()
    }

    pub fn nominal_c1(&self) -> Vec<f64> {
        self.generators.iter().map(|g| g.cost_c1).collect()
    }
}

pub fn load_case(path: impl AsRef<Path>) -> Result<Network, CaseError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CaseError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Network::from_json_str(&text)
}

pub fn admittance_terms(net: &Network) -> AdmittanceTerms {
    AdmittanceTerms {
        line_g: net.lines.iter().map(|l| l.g).collect(),
        line_b: net.lines.iter().map(|l| l.b).collect(),
        line_b_ch: net.lines.iter().map(|l| l.b_ch).collect(),
        bus_g_sh: net.buses.iter().map(|b| b.g_sh).collect(),
        bus_b_sh: net.buses.iter().map(|b| b.b_sh).collect(),
    }
}
