//! Unbalanced Mach-Zehnder optics: port amplitudes, local intensities,
//! per-pair joint probability tables and closed-form ensemble means.
//!
//! Intensities are normalized to I0 = 1. The experimenter phases φ_A and φ_B
//! absorb the static 2π·f0·τ term, so only the per-pair detuning δ and pump
//! jitter ε spread the phases:
//!
//! ```text
//! φ_j = φ_A + 2π(δ + ε/2)τ        ψ_j = φ_B + 2π(−δ + ε/2)τ
//! φ_j + ψ_j = φ_A + φ_B + 2π·ε·τ
//! ```

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spdc_source::{PairSample, SpectralModel, GHZ_PER_PS, SPEED_OF_LIGHT_MM_PER_PS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InterferometerError {
    #[error("invalid detector port {0}; ports are numbered 1..=4")]
    InvalidPort(u8),
    #[error("delta_L_mm must be > 0, got {0}")]
    NonPositiveImbalance(f64),
    #[error("interferometer imbalances differ: Alice {alice} mm, Bob {bob} mm")]
    MismatchedImbalance { alice: f64, bob: f64 },
    #[error("expected an {expected:?} interferometer, got {got:?}")]
    WrongParty { expected: Party, got: Party },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Party {
    Alice,
    Bob,
}

/// One unbalanced interferometer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmziConfig {
    pub delta_l_mm: f64,
    /// Phase plate setting, canonical in [0, 2π).
    pub phase_rad: f64,
    pub party: Party,
}

impl NmziConfig {
    pub fn new(party: Party, delta_l_mm: f64, phase_rad: f64) -> Result<Self, InterferometerError> {
        if !(delta_l_mm > 0.0 && delta_l_mm.is_finite()) {
            return Err(InterferometerError::NonPositiveImbalance(delta_l_mm));
        }
        Ok(NmziConfig {
            delta_l_mm,
            phase_rad: canonical_phase(phase_rad),
            party,
        })
    }

    pub fn alice(delta_l_mm: f64, phase_rad: f64) -> Result<Self, InterferometerError> {
        Self::new(Party::Alice, delta_l_mm, phase_rad)
    }

    pub fn bob(delta_l_mm: f64, phase_rad: f64) -> Result<Self, InterferometerError> {
        Self::new(Party::Bob, delta_l_mm, phase_rad)
    }

    /// Long-arm delay ΔL / c in ps.
    pub fn tau_ps(&self) -> f64 {
        tau_ps(self.delta_l_mm)
    }
}

pub fn tau_ps(delta_l_mm: f64) -> f64 {
    delta_l_mm / SPEED_OF_LIGHT_MM_PER_PS
}

/// Wraps a phase into [0, 2π).
pub fn canonical_phase(phase: f64) -> f64 {
    let p = phase.rem_euclid(TAU);
    if p >= TAU {
        0.0
    } else {
        p
    }
}

/// Detector ports. Ports 1 and 2 belong to Alice, 3 and 4 to Bob.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Port {
    P1,
    P2,
    P3,
    P4,
}

impl Port {
    pub const ALL: [Port; 4] = [Port::P1, Port::P2, Port::P3, Port::P4];

    pub fn number(self) -> u8 {
        match self {
            Port::P1 => 1,
            Port::P2 => 2,
            Port::P3 => 3,
            Port::P4 => 4,
        }
    }

    pub fn party(self) -> Party {
        match self {
            Port::P1 | Port::P2 => Party::Alice,
            Port::P3 | Port::P4 => Party::Bob,
        }
    }

    /// Sign of the long-path term: −1 for the dark-at-zero ports 1 and 3.
    pub fn sign(self) -> f64 {
        match self {
            Port::P1 | Port::P3 => -1.0,
            Port::P2 | Port::P4 => 1.0,
        }
    }

    /// Index within the owning interferometer (0 or 1).
    fn local_index(self) -> usize {
        match self {
            Port::P1 | Port::P3 => 0,
            Port::P2 | Port::P4 => 1,
        }
    }
}

impl TryFrom<u8> for Port {
    type Error = InterferometerError;

    fn try_from(n: u8) -> Result<Self, Self::Error> {
        match n {
            1 => Ok(Port::P1),
            2 => Ok(Port::P2),
            3 => Ok(Port::P3),
            4 => Ok(Port::P4),
            _ => Err(InterferometerError::InvalidPort(n)),
        }
    }
}

/// An (Alice port, Bob port) combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PortPair {
    #[serde(rename = "13")]
    P13,
    #[serde(rename = "14")]
    P14,
    #[serde(rename = "23")]
    P23,
    #[serde(rename = "24")]
    P24,
}

impl PortPair {
    pub const ALL: [PortPair; 4] = [PortPair::P13, PortPair::P14, PortPair::P23, PortPair::P24];

    pub fn new(alice: Port, bob: Port) -> Result<Self, InterferometerError> {
        match (alice, bob) {
            (Port::P1, Port::P3) => Ok(PortPair::P13),
            (Port::P1, Port::P4) => Ok(PortPair::P14),
            (Port::P2, Port::P3) => Ok(PortPair::P23),
            (Port::P2, Port::P4) => Ok(PortPair::P24),
            (a, _) if a.party() != Party::Alice => Err(InterferometerError::InvalidPort(a.number())),
            (_, b) => Err(InterferometerError::InvalidPort(b.number())),
        }
    }

    pub fn alice(self) -> Port {
        match self {
            PortPair::P13 | PortPair::P14 => Port::P1,
            PortPair::P23 | PortPair::P24 => Port::P2,
        }
    }

    pub fn bob(self) -> Port {
        match self {
            PortPair::P13 | PortPair::P23 => Port::P3,
            PortPair::P14 | PortPair::P24 => Port::P4,
        }
    }

    /// +1 where the gated fringe goes as 1 + cos, −1 where it goes as 1 − cos.
    pub fn joint_sign(self) -> f64 {
        self.alice().sign() * self.bob().sign()
    }

    pub fn label(self) -> &'static str {
        match self {
            PortPair::P13 => "13",
            PortPair::P14 => "14",
            PortPair::P23 => "23",
            PortPair::P24 => "24",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Arrival-time slot of a detected pair, by which arm each photon took.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Slot {
    /// Alice short, Bob long: τ_AB = −τ.
    ShortLong,
    /// Both short or both long, coherently summed: τ_AB = 0.
    Central,
    /// Alice long, Bob short: τ_AB = +τ.
    LongShort,
}

impl Slot {
    pub const ALL: [Slot; 3] = [Slot::ShortLong, Slot::Central, Slot::LongShort];

    /// Nominal τ_AB = t_A − t_B in units of τ.
    pub fn delay_sign(self) -> i8 {
        match self {
            Slot::ShortLong => -1,
            Slot::Central => 0,
            Slot::LongShort => 1,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// A sampled joint detection class. `long_long` only matters for
/// [`Slot::Central`], where it fixes the absolute arrival times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JointOutcome {
    pub ports: PortPair,
    pub slot: Slot,
    pub long_long: bool,
}

impl JointOutcome {
    /// Long-arm delays (Alice, Bob) as multiples of τ.
    pub fn arm_delays(&self) -> (u8, u8) {
        match self.slot {
            Slot::ShortLong => (0, 1),
            Slot::LongShort => (1, 0),
            Slot::Central if self.long_long => (1, 1),
            Slot::Central => (0, 0),
        }
    }
}

/// Complex coefficients (a_S, a_L) on |S⟩ and |L⟩ for both output ports of one
/// interferometer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PortAmplitudes {
    pub party: Party,
    pub ports: [(Complex64, Complex64); 2],
}

impl PortAmplitudes {
    pub fn port(&self, port: Port) -> Result<(Complex64, Complex64), InterferometerError> {
        if port.party() != self.party {
            return Err(InterferometerError::InvalidPort(port.number()));
        }
        Ok(self.ports[port.local_index()])
    }

    /// Multiplies every coefficient by e^{iη}.
    pub fn with_global_phase(mut self, eta: f64) -> Self {
        let g = Complex64::from_polar(1.0, eta);
        for (s, l) in self.ports.iter_mut() {
            *s *= g;
            *l *= g;
        }
        self
    }

    /// Port probability |a_S|² + |a_L|² for incoherent arms.
    pub fn port_weight(&self, index: usize) -> f64 {
        let (s, l) = self.ports[index];
        s.norm_sqr() + l.norm_sqr()
    }
}

/// Output amplitudes for phase `phase`:
/// first port (1/2)(|S⟩ − e^{iφ}|L⟩), second port (i/2)(|S⟩ + e^{iφ}|L⟩).
pub fn port_amplitudes(cfg: &NmziConfig, phase: f64) -> PortAmplitudes {
    let half = Complex64::new(0.5, 0.0);
    let i_half = Complex64::new(0.0, 0.5);
    let e = Complex64::from_polar(1.0, phase);
    PortAmplitudes {
        party: cfg.party,
        ports: [(half, -half * e), (i_half, i_half * e)],
    }
}

/// Single-photon intensity at `port` for a coherent photon with phase
/// `phase_j`: (1 ∓ cos φ)/2, minus for ports 1 and 3.
pub fn local_intensity(port: Port, phase_j: f64) -> f64 {
    0.5 * (1.0 + port.sign() * phase_j.cos())
}

fn gaussian_phase_visibility(sigma_per_ps: f64, tau_ps: f64) -> f64 {
    (-2.0 * PI * PI * (sigma_per_ps * tau_ps).powi(2)).exp()
}

/// Visibility of the joint fringe over the pump jitter, exp(−2π²σ_p²τ²).
pub fn pump_visibility(model: &SpectralModel, delta_l_mm: f64) -> f64 {
    gaussian_phase_visibility(model.pump_sigma_ghz() * GHZ_PER_PS, tau_ps(delta_l_mm))
}

/// Visibility of a single-party fringe over the ensemble. Each photon's
/// frequency spread combines the detuning and half the pump jitter.
pub fn local_visibility(model: &SpectralModel, delta_l_mm: f64) -> f64 {
    let sd = model.detuning_sigma_thz();
    let sp = 0.5 * model.pump_sigma_ghz() * GHZ_PER_PS;
    gaussian_phase_visibility((sd * sd + sp * sp).sqrt(), tau_ps(delta_l_mm))
}

/// Visibility of cos(φ_j − ψ_j), whose spread is 2δ.
pub fn difference_visibility(model: &SpectralModel, delta_l_mm: f64) -> f64 {
    gaussian_phase_visibility(2.0 * model.detuning_sigma_thz(), tau_ps(delta_l_mm))
}

/// Ensemble-averaged single-party intensity, (1 ∓ V_loc cos φ)/2.
/// Flat 1/2 in the wideband regime, the full local fringe when Δf → 0.
pub fn local_mean_intensity(port: Port, base_phase: f64, model: &SpectralModel, delta_l_mm: f64) -> f64 {
    0.5 * (1.0 + port.sign() * local_visibility(model, delta_l_mm) * base_phase.cos())
}

/// Per-pair phases (φ_j, ψ_j) seen by Alice and Bob.
pub fn pair_phases(phi_a: f64, phi_b: f64, pair: &PairSample, tau_ps: f64) -> (f64, f64) {
    let common = PI * pair.pump_jitter_ghz * GHZ_PER_PS * tau_ps;
    let split = TAU * pair.detuning_thz * tau_ps;
    (phi_a + split + common, phi_b - split + common)
}

/// Joint distribution over (port pair, slot) for one pair. Entries are held
/// in a fixed order: port pairs 13, 14, 23, 24, each over slots SL, CENTRAL, LS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbabilityTable {
    entries: [f64; 12],
}

impl ProbabilityTable {
    fn index(pair: PortPair, slot: Slot) -> usize {
        pair.index() * 3 + slot.index()
    }

    pub fn from_entries(entries: [f64; 12]) -> Self {
        ProbabilityTable { entries }
    }

    pub fn entries(&self) -> &[f64; 12] {
        &self.entries
    }

    pub fn get(&self, pair: PortPair, slot: Slot) -> f64 {
        self.entries[Self::index(pair, slot)]
    }

    /// All (class, probability) entries in table order.
    pub fn iter(&self) -> impl Iterator<Item = (PortPair, Slot, f64)> + '_ {
        PortPair::ALL
            .into_iter()
            .flat_map(|p| Slot::ALL.into_iter().map(move |s| (p, s)))
            .map(|(p, s)| (p, s, self.get(p, s)))
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().sum()
    }

    pub fn slot_marginal(&self, slot: Slot) -> f64 {
        PortPair::ALL.iter().map(|&p| self.get(p, slot)).sum()
    }

    pub fn port_marginal(&self, port: Port) -> f64 {
        self.iter()
            .filter(|(p, _, _)| p.alice() == port || p.bob() == port)
            .map(|(_, _, v)| v)
            .sum()
    }
}

/// Builds the per-pair table from the amplitude products. Side slots take a
/// single path product; the central slot sums the SS and LL products
/// coherently, so it depends on φ_j + ψ_j alone.
pub fn joint_probability_table(
    cfg_a: &NmziConfig,
    cfg_b: &NmziConfig,
    pair: &PairSample,
) -> Result<ProbabilityTable, InterferometerError> {
    check_pair(cfg_a, cfg_b)?;
    let (phi_j, psi_j) = pair_phases(cfg_a.phase_rad, cfg_b.phase_rad, pair, cfg_a.tau_ps());
    Ok(table_from_phases(cfg_a, cfg_b, phi_j, psi_j))
}

pub(crate) fn check_pair(cfg_a: &NmziConfig, cfg_b: &NmziConfig) -> Result<(), InterferometerError> {
    if cfg_a.party != Party::Alice {
        return Err(InterferometerError::WrongParty {
            expected: Party::Alice,
            got: cfg_a.party,
        });
    }
    if cfg_b.party != Party::Bob {
        return Err(InterferometerError::WrongParty {
            expected: Party::Bob,
            got: cfg_b.party,
        });
    }
    if cfg_a.delta_l_mm != cfg_b.delta_l_mm {
        return Err(InterferometerError::MismatchedImbalance {
            alice: cfg_a.delta_l_mm,
            bob: cfg_b.delta_l_mm,
        });
    }
    Ok(())
}

pub(crate) fn table_from_phases(cfg_a: &NmziConfig, cfg_b: &NmziConfig, phi_j: f64, psi_j: f64) -> ProbabilityTable {
    let amp_a = port_amplitudes(cfg_a, phi_j);
    let amp_b = port_amplitudes(cfg_b, psi_j);
    let mut entries = [0.0; 12];
    for pair in PortPair::ALL {
        let (a_s, a_l) = amp_a.ports[pair.alice().local_index()];
        let (b_s, b_l) = amp_b.ports[pair.bob().local_index()];
        entries[ProbabilityTable::index(pair, Slot::ShortLong)] = (a_s * b_l).norm_sqr();
        entries[ProbabilityTable::index(pair, Slot::Central)] = (a_s * b_s + a_l * b_l).norm_sqr();
        entries[ProbabilityTable::index(pair, Slot::LongShort)] = (a_l * b_s).norm_sqr();
    }
    ProbabilityTable { entries }
}

/// Ensemble-mean central-slot rate per pair, (1 ± V_p cos(φ_A + φ_B))/8.
pub fn gated_correlation_mean(phi_a: f64, phi_b: f64, model: &SpectralModel, delta_l_mm: f64, ports: PortPair) -> f64 {
    (1.0 + ports.joint_sign() * pump_visibility(model, delta_l_mm) * (phi_a + phi_b).cos()) / 8.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UngatedEstimator {
    /// Product of the two ensemble-mean local intensities.
    Factorized,
    /// Ensemble mean of the per-pair intensity product.
    Paired,
}

/// Ungated intensity correlation ⟨I_A I_B⟩ between two ports.
///
/// The paired form expands the product of the two local fringes; with
/// independent Gaussian δ and ε every term averages in closed form:
///
/// ```text
/// 4⟨I_A I_B⟩ = 1 + s_A V_loc cos φ_A + s_B V_loc cos φ_B
///              + ½ s_A s_B (V_p cos(φ_A + φ_B) + V_Δ cos(φ_A − φ_B))
/// ```
///
/// In the wideband regime V_loc and V_Δ vanish, leaving (1 ± ½V_p cos Σ)/4.
pub fn ungated_correlation_mean(
    phi_a: f64,
    phi_b: f64,
    model: &SpectralModel,
    delta_l_mm: f64,
    ports: PortPair,
    estimator: UngatedEstimator,
) -> f64 {
    match estimator {
        UngatedEstimator::Factorized => {
            local_mean_intensity(ports.alice(), phi_a, model, delta_l_mm)
                * local_mean_intensity(ports.bob(), phi_b, model, delta_l_mm)
        }
        UngatedEstimator::Paired => {
            let (sa, sb) = (ports.alice().sign(), ports.bob().sign());
            let v_loc = local_visibility(model, delta_l_mm);
            let v_p = pump_visibility(model, delta_l_mm);
            let v_d = difference_visibility(model, delta_l_mm);
            (1.0 + sa * v_loc * phi_a.cos()
                + sb * v_loc * phi_b.cos()
                + 0.5 * sa * sb * (v_p * (phi_a + phi_b).cos() + v_d * (phi_a - phi_b).cos()))
                / 4.0
        }
    }
}
