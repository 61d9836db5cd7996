//! Meter sets: synthesis from a solved case, fractional placement sampling,
//! noise injection, and numerical observability.
//!
//! All randomness flows through explicitly seeded ChaCha streams, so every
//! operation is reproducible from its recorded seed.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{AdmittanceSet, NetworkCase};
use crate::power_flow::{complex_injections, line_flows, rotate_to_slack_reference, PowerFlowSolution};

/// What a meter reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeterKind {
    PInjection,
    QInjection,
    PFlow,
    QFlow,
    VMagnitude,
    VAngle,
}

impl MeterKind {
    /// The five kinds that are generated from a solved case (exact angle
    /// meters are added separately, only where a PMU is placed).
    pub const GENERATED: [MeterKind; 5] = [
        MeterKind::PInjection,
        MeterKind::QInjection,
        MeterKind::PFlow,
        MeterKind::QFlow,
        MeterKind::VMagnitude,
    ];

    pub fn is_flow(self) -> bool {
        matches!(self, MeterKind::PFlow | MeterKind::QFlow)
    }
}

/// Which end of a branch a flow meter sits at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowEnd {
    From,
    To,
}

/// Where a meter sits: a bus, or one end of a branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Location {
    Bus { bus: usize },
    Branch { branch: usize, end: FlowEnd },
}

impl Location {
    pub fn bus(&self) -> Option<usize> {
        match self {
            Location::Bus { bus } => Some(*bus),
            _ => None,
        }
    }
    pub fn branch(&self) -> Option<(usize, FlowEnd)> {
        match self {
            Location::Branch { branch, end } => Some((*branch, *end)),
            _ => None,
        }
    }
}

/// One meter reading. `sigma` is the assumed noise standard deviation;
/// only exact angle meters may carry `sigma == 0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Measurement {
    pub kind: MeterKind,
    pub location: Location,
    pub value: f64,
    pub sigma: f64,
}

impl Measurement {
    fn check(&self, case: &NetworkCase) -> Result<()> {
        let ok = match (self.kind, &self.location) {
            (MeterKind::PFlow | MeterKind::QFlow, Location::Branch { branch, .. }) => {
                *branch < case.l()
            }
            (MeterKind::PFlow | MeterKind::QFlow, _) => false,
            (_, Location::Bus { bus }) => *bus < case.n(),
            (_, Location::Branch { .. }) => false,
        };
        if !ok {
            return Err(Error::BadMeasurement(format!(
                "{:?} at {:?} is not a valid location",
                self.kind, self.location
            )));
        }
        if self.kind == MeterKind::VAngle {
            if self.sigma != 0.0 {
                return Err(Error::BadMeasurement(
                    "angle meters are exact; sigma must be 0".into(),
                ));
            }
        } else if self.sigma <= 0.0 {
            return Err(Error::BadMeasurement(format!(
                "{:?} meter needs a positive sigma, got {}",
                self.kind, self.sigma
            )));
        }
        Ok(())
    }
}

/// An ordered meter list plus the provenance needed to replay it.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub measurements: Vec<Measurement>,
    /// Seed used by `sample_placement`, if sampling produced this set.
    pub placement_seed: Option<u64>,
    /// Seed used by `add_noise`, if noise was applied.
    pub noise_seed: Option<u64>,
    /// Seed used by `add_pmu_angles`, if PMUs were placed.
    pub pmu_seed: Option<u64>,
    /// Slack-referenced voltages of the generating power flow.
    pub truth: Option<Vec<Complex64>>,
    /// Cached result of the last observability check.
    pub observable: Option<bool>,
}

impl MeasurementSet {
    /// Number of meters.
    pub fn m(&self) -> usize {
        self.measurements.len()
    }

    /// Validates every meter and the no-duplicates rule.
    pub fn validate(&self, case: &NetworkCase) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for meas in &self.measurements {
            meas.check(case)?;
            if !seen.insert((meas.kind, meas.location)) {
                return Err(Error::BadMeasurement(format!(
                    "duplicate meter {:?} at {:?}",
                    meas.kind, meas.location
                )));
            }
        }
        Ok(())
    }

    /// Indices of meters of one kind, in set order.
    pub fn positions_of(&self, kind: MeterKind) -> Vec<usize> {
        self.measurements
            .iter()
            .enumerate()
            .filter(|(_, m)| m.kind == kind)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Noise levels per meter class, as standard deviations in per-unit.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SigmaConfig {
    pub injection: f64,
    pub flow: f64,
    pub v_magnitude: f64,
}

impl Default for SigmaConfig {
    fn default() -> Self {
        SigmaConfig { injection: 0.01, flow: 0.008, v_magnitude: 0.004 }
    }
}

impl SigmaConfig {
    fn for_kind(&self, kind: MeterKind) -> f64 {
        match kind {
            MeterKind::PInjection | MeterKind::QInjection => self.injection,
            MeterKind::PFlow | MeterKind::QFlow => self.flow,
            MeterKind::VMagnitude => self.v_magnitude,
            MeterKind::VAngle => 0.0,
        }
    }
}

/// Exact meter readings of every generated kind at every legal location:
/// P/Q injection at each bus, P/Q flow at the from end of each in-service
/// branch, and voltage magnitude at each bus — in that fixed order.
///
/// Values and the stored truth are expressed in the slack-referenced frame
/// (slack angle exactly zero); only angles are affected by that choice.
pub fn generate_true_measurements(
    case: &NetworkCase,
    adm: &AdmittanceSet,
    sol: &PowerFlowSolution,
    sigmas: &SigmaConfig,
) -> MeasurementSet {
    let v = rotate_to_slack_reference(case, &sol.v);
    let inj = complex_injections(&adm.y_bus, &v);
    let flows = line_flows(case, adm, &v);
    let n = case.n();

    let mut measurements = Vec::new();
    for kind in MeterKind::GENERATED {
        match kind {
            MeterKind::PInjection | MeterKind::QInjection => {
                for bus in 0..n {
                    let s = inj[bus];
                    let value = if kind == MeterKind::PInjection { s.re } else { s.im };
                    measurements.push(Measurement {
                        kind,
                        location: Location::Bus { bus },
                        value,
                        sigma: sigmas.for_kind(kind),
                    });
                }
            }
            MeterKind::PFlow | MeterKind::QFlow => {
                for (branch, br) in case.branches.iter().enumerate() {
                    if !br.in_service {
                        continue;
                    }
                    let s = flows.from[branch];
                    let value = if kind == MeterKind::PFlow { s.re } else { s.im };
                    measurements.push(Measurement {
                        kind,
                        location: Location::Branch { branch, end: FlowEnd::From },
                        value,
                        sigma: sigmas.for_kind(kind),
                    });
                }
            }
            MeterKind::VMagnitude => {
                for bus in 0..n {
                    measurements.push(Measurement {
                        kind,
                        location: Location::Bus { bus },
                        value: v[bus].norm(),
                        sigma: sigmas.for_kind(kind),
                    });
                }
            }
            MeterKind::VAngle => unreachable!(),
        }
    }

    MeasurementSet {
        measurements,
        truth: Some(v),
        ..Default::default()
    }
}

/// Per-kind retention fractions for placement sampling.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Fractions {
    pub p_injection: f64,
    pub q_injection: f64,
    pub p_flow: f64,
    pub q_flow: f64,
    pub v_magnitude: f64,
}

impl Fractions {
    /// The same fraction for every generated kind.
    pub fn uniform(f: f64) -> Self {
        Fractions { p_injection: f, q_injection: f, p_flow: f, q_flow: f, v_magnitude: f }
    }

    fn for_kind(&self, kind: MeterKind) -> f64 {
        match kind {
            MeterKind::PInjection => self.p_injection,
            MeterKind::QInjection => self.q_injection,
            MeterKind::PFlow => self.p_flow,
            MeterKind::QFlow => self.q_flow,
            MeterKind::VMagnitude => self.v_magnitude,
            MeterKind::VAngle => 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("p_injection", self.p_injection),
            ("q_injection", self.q_injection),
            ("p_flow", self.p_flow),
            ("q_flow", self.q_flow),
            ("v_magnitude", self.v_magnitude),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("fraction {name} = {f} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// How many meters of a kind survive a fraction: `ceil(f * available)`.
pub fn retained_count(fraction: f64, available: usize) -> usize {
    (fraction * available as f64).ceil() as usize
}

const PLACEMENT_ATTEMPTS: usize = 100;

/// Keep `ceil(fraction * count)` uniformly sampled meters of each generated
/// kind, re-sampling (same seeded stream) until the result is observable or
/// the attempt budget runs out.
pub fn sample_placement(
    full: &MeasurementSet,
    case: &NetworkCase,
    adm: &AdmittanceSet,
    fractions: &Fractions,
    seed: u64,
) -> Result<MeasurementSet> {
    fractions.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut detail = String::new();
    for attempt in 0..PLACEMENT_ATTEMPTS {
        let mut keep = vec![false; full.m()];
        for kind in MeterKind::GENERATED {
            let pos = full.positions_of(kind);
            let want = retained_count(fractions.for_kind(kind), pos.len());
            let picked = rand::seq::index::sample(&mut rng, pos.len(), want.min(pos.len()));
            for p in picked.iter() {
                keep[pos[p]] = true;
            }
        }
        // Angle meters, if the caller sampled an augmented set, always stay.
        for (i, m) in full.measurements.iter().enumerate() {
            if m.kind == MeterKind::VAngle {
                keep[i] = true;
            }
        }
        let measurements: Vec<Measurement> = full
            .measurements
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(m, _)| m.clone())
            .collect();
        let mut set = MeasurementSet {
            measurements,
            placement_seed: Some(seed),
            noise_seed: full.noise_seed,
            pmu_seed: full.pmu_seed,
            truth: full.truth.clone(),
            observable: None,
        };
        if check_observability(&set, case, adm) {
            set.observable = Some(true);
            return Ok(set);
        }
        if attempt == PLACEMENT_ATTEMPTS - 1 {
            detail = format!(
                "{} of {} meters retained, {} state variables",
                set.m(),
                full.m(),
                2 * case.n() - 1
            );
        }
    }
    Err(Error::Unobservable { attempts: PLACEMENT_ATTEMPTS, detail })
}

/// Add zero-mean Gaussian noise of each meter's own sigma. Exact meters
/// (`sigma == 0`) are left untouched and consume no randomness, so appending
/// angle meters never changes the noise drawn for the rest of the set.
pub fn add_noise(set: &MeasurementSet, seed: u64) -> MeasurementSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = set.clone();
    for m in &mut out.measurements {
        if m.sigma > 0.0 {
            let draw: f64 = StandardNormal.sample(&mut rng);
            m.value += m.sigma * draw;
        }
    }
    out.noise_seed = Some(seed);
    out
}

/// Place exact angle meters at a fraction of the buses that already carry a
/// voltage-magnitude meter. Values are the truth angles in the
/// slack-referenced frame; the set must carry its generating truth.
pub fn add_pmu_angles(
    set: &MeasurementSet,
    fraction: f64,
    seed: u64,
) -> Result<MeasurementSet> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("PMU fraction {fraction} outside [0, 1]")));
    }
    let truth = set
        .truth
        .as_ref()
        .ok_or_else(|| Error::BadMeasurement("angle placement needs the set's truth voltages".into()))?;

    let eligible: Vec<usize> = set
        .measurements
        .iter()
        .filter(|m| m.kind == MeterKind::VMagnitude)
        .filter_map(|m| m.location.bus())
        .collect();
    let want = retained_count(fraction, eligible.len());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, eligible.len(), want.min(eligible.len()));
    let mut buses: Vec<usize> = picked.iter().map(|p| eligible[p]).collect();
    buses.sort_unstable();

    let mut out = set.clone();
    for bus in buses {
        out.measurements.push(Measurement {
            kind: MeterKind::VAngle,
            location: Location::Bus { bus },
            value: truth[bus].arg(),
            sigma: 0.0,
        });
    }
    out.pmu_seed = Some(seed);
    out.observable = None;
    Ok(out)
}

/// Numerical observability: the measurement Jacobian at a flat state
/// (1 per unit, zero angles) has full column rank over the `2n - 1` free
/// variables, judged by singular values above `1e-8` of the largest.
pub fn check_observability(set: &MeasurementSet, case: &NetworkCase, adm: &AdmittanceSet) -> bool {
    let p = 2 * case.n() - 1;
    if set.m() < p {
        return false;
    }
    let flat = crate::wls::StateVector::flat(case.n());
    let jac = crate::wls::measurement_jacobian(&flat, set, case, adm);
    let svd = jac.svd(false, false);
    let smax = svd.singular_values.max();
    if smax <= 0.0 {
        return false;
    }
    let rank = svd.singular_values.iter().filter(|&&s| s > 1e-8 * smax).count();
    rank == p
}
