//! Network cases (buses, branches, generators) and their admittance matrices.
//!
//! Cases are read from a JSON schema or MATPOWER-style `.m` text. Externally
//! buses carry arbitrary integer ids and angles in degrees; internally
//! everything is 0-based and in radians, with the external ids retained for
//! reporting.

mod matpower;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Deserialize;
use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Role of a bus in the power-flow formulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

/// A single bus. Demands and shunts are per-unit on the system base.
#[derive(Debug, Clone)]
pub struct Bus {
    /// External id as written in the case file.
    pub id: i64,
    pub kind: BusKind,
    pub p_demand: f64,
    pub q_demand: f64,
    pub g_shunt: f64,
    pub b_shunt: f64,
    /// Voltage magnitude target (slack/PV) or initial guess (PQ).
    pub v_mag_setpoint: f64,
    /// Radians. Only the slack setpoint pins the solution angle.
    pub v_ang_setpoint: f64,
}

/// A branch (line or transformer) between two internal bus indices.
///
/// `tap` and `shift` model an ideal transformer at the from end with ratio
/// `tap * exp(j*shift)`; plain lines use `tap = 1, shift = 0`.
#[derive(Debug, Clone)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    /// Total line-charging susceptance, split half per end.
    pub b_charge: f64,
    pub tap: f64,
    pub shift: f64,
    pub in_service: bool,
}

/// A generator injection attached to a bus (internal index).
#[derive(Debug, Clone)]
pub struct Generator {
    pub bus: usize,
    pub p_gen: f64,
    pub q_gen: f64,
    pub v_setpoint: f64,
}

/// A validated, connected network on a common MVA base.
#[derive(Debug, Clone)]
pub struct NetworkCase {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
    /// Internal index of the unique slack bus.
    pub slack_index: usize,
}

/// Bus-level and branch-end admittance matrices of a case.
///
/// `y_from`/`y_to` have one row per branch; row `l` maps bus voltages to the
/// current entering branch `l` at its from/to end, so `y_bus` decomposes as
/// the end-current contributions plus bus shunts.
#[derive(Debug, Clone)]
pub struct AdmittanceSet {
    pub y_bus: DMatrix<Complex64>,
    pub y_from: DMatrix<Complex64>,
    pub y_to: DMatrix<Complex64>,
}

impl NetworkCase {
    /// Number of buses.
    pub fn n(&self) -> usize {
        self.buses.len()
    }

    /// Number of branches (including any out of service).
    pub fn l(&self) -> usize {
        self.branches.len()
    }

    /// Internal index of the bus with external id `id`, if present.
    pub fn bus_index(&self, id: i64) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    /// Net scheduled active injection per bus (generation minus demand).
    pub fn scheduled_p(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.buses.iter().map(|b| -b.p_demand).collect();
        for g in &self.generators {
            p[g.bus] += g.p_gen;
        }
        p
    }

    /// Net scheduled reactive injection per bus (generation minus demand).
    pub fn scheduled_q(&self) -> Vec<f64> {
        let mut q: Vec<f64> = self.buses.iter().map(|b| -b.q_demand).collect();
        for g in &self.generators {
            q[g.bus] += g.q_gen;
        }
        q
    }

    /// Structural checks shared by both case formats.
    pub fn validate(&self) -> Result<()> {
        if self.base_mva <= 0.0 {
            return Err(Error::InvalidCase(format!(
                "base_mva must be positive, got {}",
                self.base_mva
            )));
        }
        if self.buses.is_empty() {
            return Err(Error::InvalidCase("case has no buses".into()));
        }

        let mut seen = HashMap::new();
        for b in &self.buses {
            if seen.insert(b.id, ()).is_some() {
                return Err(Error::InvalidCase(format!("duplicate bus id {}", b.id)));
            }
            if b.v_mag_setpoint <= 0.0 {
                return Err(Error::InvalidCase(format!(
                    "bus {} has non-positive voltage setpoint {}",
                    b.id, b.v_mag_setpoint
                )));
            }
        }

        let slacks: Vec<i64> = self
            .buses
            .iter()
            .filter(|b| b.kind == BusKind::Slack)
            .map(|b| b.id)
            .collect();
        match slacks.len() {
            0 => return Err(Error::InvalidCase("no slack bus".into())),
            1 => {}
            _ => {
                return Err(Error::InvalidCase(format!(
                    "multiple slack buses: {slacks:?}"
                )))
            }
        }
        if self.buses[self.slack_index].kind != BusKind::Slack {
            return Err(Error::InvalidCase("slack_index does not point at the slack bus".into()));
        }

        let n = self.n();
        for (l, br) in self.branches.iter().enumerate() {
            if br.from >= n || br.to >= n {
                return Err(Error::InvalidCase(format!(
                    "branch {l} references a bus index out of range"
                )));
            }
            if br.from == br.to {
                return Err(Error::InvalidCase(format!(
                    "branch {l} is a self-loop at bus {}",
                    self.buses[br.from].id
                )));
            }
            if br.tap <= 0.0 {
                return Err(Error::InvalidCase(format!(
                    "branch {l} ({} -> {}) has non-positive tap {}",
                    self.buses[br.from].id, self.buses[br.to].id, br.tap
                )));
            }
            if br.r == 0.0 && br.x == 0.0 {
                return Err(Error::InvalidCase(format!(
                    "branch {l} ({} -> {}) has zero series impedance",
                    self.buses[br.from].id, self.buses[br.to].id
                )));
            }
        }
        for g in &self.generators {
            if g.bus >= n {
                return Err(Error::InvalidCase("generator references a bus index out of range".into()));
            }
        }

        // Connectivity over in-service branches only.
        let mut adj = vec![Vec::new(); n];
        for br in self.branches.iter().filter(|b| b.in_service) {
            adj[br.from].push(br.to);
            adj[br.to].push(br.from);
        }
        let mut reached = vec![false; n];
        let mut queue = vec![self.slack_index];
        reached[self.slack_index] = true;
        while let Some(i) = queue.pop() {
            for &j in &adj[i] {
                if !reached[j] {
                    reached[j] = true;
                    queue.push(j);
                }
            }
        }
        let isolated: Vec<i64> = (0..n)
            .filter(|&i| !reached[i])
            .map(|i| self.buses[i].id)
            .collect();
        if !isolated.is_empty() {
            return Err(Error::InvalidCase(format!(
                "network is disconnected; buses unreachable from the slack: {isolated:?}"
            )));
        }
        Ok(())
    }
}

/// Assemble bus and branch-end admittance matrices for `case`.
pub fn build_admittance(case: &NetworkCase) -> Result<AdmittanceSet> {
    let n = case.n();
    let l = case.l();
    let mut y_bus = DMatrix::<Complex64>::zeros(n, n);
    let mut y_from = DMatrix::<Complex64>::zeros(l, n);
    let mut y_to = DMatrix::<Complex64>::zeros(l, n);

    for (idx, br) in case.branches.iter().enumerate() {
        if !br.in_service {
            continue; // rows stay zero, no bus coupling
        }
        if br.tap <= 0.0 {
            return Err(Error::InvalidCase(format!("branch {idx} has non-positive tap")));
        }
        if br.r == 0.0 && br.x == 0.0 {
            return Err(Error::InvalidCase(format!("branch {idx} has zero series impedance")));
        }
        let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
        let ysh = Complex64::new(0.0, br.b_charge / 2.0);
        let t = Complex64::from_polar(br.tap, br.shift);

        let y_ff = (ys + ysh) / (br.tap * br.tap);
        let y_ft = -ys / t.conj();
        let y_tf = -ys / t;
        let y_tt = ys + ysh;

        y_from[(idx, br.from)] = y_ff;
        y_from[(idx, br.to)] = y_ft;
        y_to[(idx, br.from)] = y_tf;
        y_to[(idx, br.to)] = y_tt;

        y_bus[(br.from, br.from)] += y_ff;
        y_bus[(br.from, br.to)] += y_ft;
        y_bus[(br.to, br.from)] += y_tf;
        y_bus[(br.to, br.to)] += y_tt;
    }

    for (i, b) in case.buses.iter().enumerate() {
        y_bus[(i, i)] += Complex64::new(b.g_shunt, b.b_shunt);
    }

    Ok(AdmittanceSet { y_bus, y_from, y_to })
}

// ---------------------------------------------------------------------------
// JSON case format
// ---------------------------------------------------------------------------

fn default_one() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonBus {
    id: i64,
    kind: BusKind,
    #[serde(default)]
    p_demand: f64,
    #[serde(default)]
    q_demand: f64,
    #[serde(default)]
    g_shunt: f64,
    #[serde(default)]
    b_shunt: f64,
    #[serde(default = "default_one")]
    v_mag_setpoint: f64,
    /// Degrees in the file.
    #[serde(default)]
    v_ang_setpoint: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonBranch {
    from: i64,
    to: i64,
    r: f64,
    x: f64,
    #[serde(default)]
    b_charge: f64,
    #[serde(default = "default_one")]
    tap: f64,
    /// Degrees in the file.
    #[serde(default)]
    shift: f64,
    #[serde(default = "default_true")]
    in_service: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonGen {
    bus: i64,
    #[serde(default)]
    p_gen: f64,
    #[serde(default)]
    q_gen: f64,
    #[serde(default = "default_one")]
    v_setpoint: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonCase {
    base_mva: f64,
    buses: Vec<JsonBus>,
    branches: Vec<JsonBranch>,
    #[serde(default)]
    gens: Vec<JsonGen>,
}

/// Parse the JSON case schema. Demands, shunts and injections are per-unit;
/// angles are degrees in the file.
pub fn parse_json_case(text: &str) -> Result<NetworkCase> {
    let raw: JsonCase = serde_json::from_str(text)?;

    let buses: Vec<Bus> = raw
        .buses
        .iter()
        .map(|b| Bus {
            id: b.id,
            kind: b.kind,
            p_demand: b.p_demand,
            q_demand: b.q_demand,
            g_shunt: b.g_shunt,
            b_shunt: b.b_shunt,
            v_mag_setpoint: b.v_mag_setpoint,
            v_ang_setpoint: b.v_ang_setpoint.to_radians(),
        })
        .collect();

    let index_of = |id: i64, what: &str| -> Result<usize> {
        buses
            .iter()
            .position(|b| b.id == id)
            .ok_or_else(|| Error::InvalidCase(format!("{what} references unknown bus id {id}")))
    };

    let mut branches = Vec::with_capacity(raw.branches.len());
    for (l, br) in raw.branches.iter().enumerate() {
        branches.push(Branch {
            from: index_of(br.from, &format!("branch {l}"))?,
            to: index_of(br.to, &format!("branch {l}"))?,
            r: br.r,
            x: br.x,
            b_charge: br.b_charge,
            tap: br.tap,
            shift: br.shift.to_radians(),
            in_service: br.in_service,
        });
    }

    let mut generators = Vec::with_capacity(raw.gens.len());
    for g in &raw.gens {
        generators.push(Generator {
            bus: index_of(g.bus, "generator")?,
            p_gen: g.p_gen,
            q_gen: g.q_gen,
            v_setpoint: g.v_setpoint,
        });
    }

    let slack_index = buses
        .iter()
        .position(|b| b.kind == BusKind::Slack)
        .ok_or_else(|| Error::InvalidCase("no slack bus".into()))?;

    let case = NetworkCase {
        base_mva: raw.base_mva,
        buses,
        branches,
        generators,
        slack_index,
    };
    case.validate()?;
    Ok(case)
}

pub use matpower::parse_matpower_case;

/// Read a case from disk, dispatching on the file extension
/// (`.json` for the JSON schema, anything else as MATPOWER-style text).
pub fn parse_case_file(path: &Path) -> Result<NetworkCase> {
    let text = std::fs::read_to_string(path)?;
    if path.extension().map(|e| e == "json").unwrap_or(false) {
        parse_json_case(&text)
    } else {
        parse_matpower_case(&text)
    }
}
