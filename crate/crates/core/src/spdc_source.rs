//! Photon-pair source: spectral ensemble, pair sampling and the operating
//! regime check for unbalanced interferometers.
//!
//! Units throughout: optical frequencies in THz (= 1/ps), pump linewidth and
//! pump jitter in GHz, times in ps, lengths in mm.

use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{self, Parallelism, Stream};

/// Speed of light in mm/ps (exact SI value).
pub const SPEED_OF_LIGHT_MM_PER_PS: f64 = 0.299_792_458;

/// FWHM of a Gaussian divided by its standard deviation, `2√(2 ln 2)`.
pub const GAUSSIAN_FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

/// GHz expressed in 1/ps.
pub const GHZ_PER_PS: f64 = 1e-3;

/// Relative slack on the regime inequalities. The usual quoted conversions
/// (1 GHz ↔ 30 cm) round c to 3·10⁸ m/s, 0.07 % above its exact value.
pub const REGIME_SLACK: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParameterError {
    #[error("{field} must be {requirement}, got {value}")]
    OutOfRange {
        field: &'static str,
        requirement: &'static str,
        value: f64,
    },
}

fn require(cond: bool, field: &'static str, requirement: &'static str, value: f64) -> Result<(), ParameterError> {
    if cond {
        Ok(())
    } else {
        Err(ParameterError::OutOfRange {
            field,
            requirement,
            value,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectralShape {
    #[default]
    Gaussian,
}

/// Spectral description of the pair ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralModel {
    /// Degenerate center frequency f0 (THz); the pump sits at 2·f0.
    pub f0_thz: f64,
    /// FWHM of the signal detuning distribution (THz).
    pub delta_f_thz: f64,
    /// FWHM of the pump frequency jitter (GHz).
    pub pump_linewidth_ghz: f64,
    pub shape: SpectralShape,
}

impl SpectralModel {
    pub fn new(f0_thz: f64, delta_f_thz: f64, pump_linewidth_ghz: f64) -> Result<Self, ParameterError> {
        let model = SpectralModel {
            f0_thz,
            delta_f_thz,
            pump_linewidth_ghz,
            shape: SpectralShape::Gaussian,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), ParameterError> {
        require(self.f0_thz > 0.0 && self.f0_thz.is_finite(), "f0_thz", "> 0", self.f0_thz)?;
        require(
            self.delta_f_thz > 0.0 && self.delta_f_thz.is_finite(),
            "delta_f_thz",
            "> 0",
            self.delta_f_thz,
        )?;
        require(
            self.pump_linewidth_ghz >= 0.0 && self.pump_linewidth_ghz.is_finite(),
            "pump_linewidth_ghz",
            ">= 0",
            self.pump_linewidth_ghz,
        )
    }

    /// Standard deviation of the signal detuning δ (THz).
    pub fn detuning_sigma_thz(&self) -> f64 {
        self.delta_f_thz / GAUSSIAN_FWHM_PER_SIGMA
    }

    /// Standard deviation of the pump jitter ε (GHz).
    pub fn pump_sigma_ghz(&self) -> f64 {
        self.pump_linewidth_ghz / GAUSSIAN_FWHM_PER_SIGMA
    }

    /// Pair coherence length `c / pump_linewidth` in mm; infinite for a
    /// monochromatic pump.
    pub fn coherence_length_mm(&self) -> f64 {
        if self.pump_linewidth_ghz == 0.0 {
            f64::INFINITY
        } else {
            SPEED_OF_LIGHT_MM_PER_PS / (self.pump_linewidth_ghz * GHZ_PER_PS)
        }
    }

    /// Single-photon coherence time `1 / delta_f` (ps), the width of one
    /// arrival-time slot.
    pub fn slot_time_ps(&self) -> f64 {
        1.0 / self.delta_f_thz
    }
}

/// One emitted photon pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub id: u64,
    pub t_emit_ps: f64,
    /// Signed signal detuning δ (THz); the idler carries −δ.
    pub detuning_thz: f64,
    /// Signed pump frequency jitter ε (GHz), split evenly over both photons.
    pub pump_jitter_ghz: f64,
}

impl PairSample {
    pub fn signal_frequency_thz(&self, model: &SpectralModel) -> f64 {
        model.f0_thz + self.detuning_thz + 0.5 * self.pump_jitter_ghz * GHZ_PER_PS
    }

    pub fn idler_frequency_thz(&self, model: &SpectralModel) -> f64 {
        model.f0_thz - self.detuning_thz + 0.5 * self.pump_jitter_ghz * GHZ_PER_PS
    }
}

/// Draws `n` pairs with the default execution backend.
pub fn sample_pairs(
    model: &SpectralModel,
    n: usize,
    mean_rate_hz: f64,
    seed: u64,
) -> Result<Vec<PairSample>, ParameterError> {
    sample_pairs_with(model, n, mean_rate_hz, seed, Parallelism::default())
}

/// Draws `n` pairs: Gaussian detuning and pump jitter with the model's FWHMs,
/// emission times from a homogeneous Poisson process. The output does not
/// depend on `par`.
pub fn sample_pairs_with(
    model: &SpectralModel,
    n: usize,
    mean_rate_hz: f64,
    seed: u64,
    par: Parallelism,
) -> Result<Vec<PairSample>, ParameterError> {
    model.validate()?;
    require(n >= 1, "n_pairs", ">= 1", n as f64)?;
    require(
        mean_rate_hz > 0.0 && mean_rate_hz.is_finite(),
        "pair_rate_hz",
        "> 0",
        mean_rate_hz,
    )?;

    let sigma_d = model.detuning_sigma_thz();
    let sigma_p = model.pump_sigma_ghz();
    let gap = Exp::new(mean_rate_hz * 1e-12).expect("rate checked above");
    let detuning = Normal::new(0.0, sigma_d).expect("finite sigma");
    let jitter = Normal::new(0.0, sigma_p).expect("finite sigma");

    let mut chunks = par::map_chunks(par::chunk_count(n), par, |c| {
        let mut rng = par::substream(seed, Stream::Pairs, c as u64);
        par::chunk_range(n, c)
            .map(|i| {
                let dt = gap.sample(&mut rng);
                let d = detuning.sample(&mut rng);
                let e = if sigma_p > 0.0 { jitter.sample(&mut rng) } else { 0.0 };
                PairSample {
                    id: i as u64,
                    t_emit_ps: dt,
                    detuning_thz: d,
                    pump_jitter_ghz: e,
                }
            })
            .collect::<Vec<_>>()
    });

    // Gaps become absolute times with one sequential prefix sum.
    let mut out = Vec::with_capacity(n);
    let mut t = 0.0;
    for chunk in chunks.iter_mut() {
        for p in chunk.iter_mut() {
            t += p.t_emit_ps;
            p.t_emit_ps = t;
        }
        out.append(chunk);
    }
    Ok(out)
}

/// Verdicts on the Franson operating regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    /// Interferometer delay ΔL / c (ps).
    pub tau_ps: f64,
    /// Δf·τ; must exceed min_factor·π for flat singles.
    pub decoherence_ratio: f64,
    /// ΔL / l_c; must stay below 1/min_factor for a high-visibility pair fringe.
    pub coherence_ratio: f64,
    pub coherence_length_mm: f64,
    pub slot_time_ps: f64,
    pub detector_jitter_ps: f64,
    pub min_factor: f64,
    /// Singles decohere over the ensemble (ΔL ≫ c/Δf).
    pub locals_decohered: bool,
    /// Each pair stays coherent across the imbalance (ΔL ≪ l_c).
    pub pair_coherent: bool,
    /// Arrival slots at −τ, 0, +τ are resolvable: τ ≥ min_factor·(t_slot + jitter).
    pub slots_separable: bool,
    /// Event-mode time tags are meaningful: locals decohered and slots separable.
    pub event_mode_permitted: bool,
}

impl RegimeReport {
    pub fn all_conditions_hold(&self) -> bool {
        self.locals_decohered && self.pair_coherent && self.slots_separable
    }
}

/// Checks the two regime inequalities and slot separability for matched
/// interferometers with imbalance `delta_l_mm`.
pub fn validate_regime(
    model: &SpectralModel,
    delta_l_mm: f64,
    min_factor: f64,
    detector_jitter_ps: f64,
) -> Result<RegimeReport, ParameterError> {
    model.validate()?;
    require(delta_l_mm > 0.0 && delta_l_mm.is_finite(), "delta_L_mm", "> 0", delta_l_mm)?;
    require(min_factor > 0.0 && min_factor.is_finite(), "min_factor", "> 0", min_factor)?;
    require(
        detector_jitter_ps >= 0.0 && detector_jitter_ps.is_finite(),
        "jitter_sigma_ps",
        ">= 0",
        detector_jitter_ps,
    )?;

    let tau_ps = delta_l_mm / SPEED_OF_LIGHT_MM_PER_PS;
    let decoherence_ratio = model.delta_f_thz * tau_ps;
    let coherence_length_mm = model.coherence_length_mm();
    let coherence_ratio = delta_l_mm / coherence_length_mm;
    let slot_time_ps = model.slot_time_ps();
    let keep = 1.0 - REGIME_SLACK;

    let locals_decohered = decoherence_ratio >= min_factor * std::f64::consts::PI * keep;
    let pair_coherent = coherence_length_mm >= min_factor * delta_l_mm * keep;
    let slots_separable = tau_ps >= min_factor * (slot_time_ps + detector_jitter_ps) * keep;

    Ok(RegimeReport {
        tau_ps,
        decoherence_ratio,
        coherence_ratio,
        coherence_length_mm,
        slot_time_ps,
        detector_jitter_ps,
        min_factor,
        locals_decohered,
        pair_coherent,
        slots_separable,
        event_mode_permitted: locals_decohered && slots_separable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn model(delta_f: f64, pump: f64) -> SpectralModel {
        SpectralModel::new(370.0, delta_f, pump).unwrap()
    }

    #[test]
    fn coherence_length_matches_linewidth_conversion() {
        assert_relative_eq!(model(1.0, 1.0).coherence_length_mm(), 299.792458, max_relative = 1e-12);
        assert_relative_eq!(model(1.0, 10.0).coherence_length_mm(), 29.9792458, max_relative = 1e-12);
        assert!(model(1.0, 0.0).coherence_length_mm().is_infinite());
        assert_relative_eq!(model(2.0, 0.0).slot_time_ps(), 0.5);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(SpectralModel::new(0.0, 1.0, 1.0).is_err());
        assert!(SpectralModel::new(370.0, 0.0, 1.0).is_err());
        assert!(SpectralModel::new(370.0, 1.0, -1.0).is_err());
        let m = model(1.0, 1.0);
        assert!(sample_pairs(&m, 0, 1e6, 1).is_err());
        assert!(sample_pairs(&m, 10, 0.0, 1).is_err());
        assert!(sample_pairs(&m, 10, -5.0, 1).is_err());
        assert!(validate_regime(&m, 0.0, 10.0, 0.0).is_err());
    }

    #[test]
    fn near_monochromatic_detuning() {
        let pairs = sample_pairs(&model(1e-9, 1.0), 10_000, 1e6, 3).unwrap();
        assert!(pairs.iter().all(|p| p.detuning_thz.abs() < 1e-6));
    }

    #[test]
    fn zero_linewidth_means_zero_jitter() {
        let pairs = sample_pairs(&model(1.0, 0.0), 10_000, 1e6, 3).unwrap();
        assert!(pairs.iter().all(|p| p.pump_jitter_ghz == 0.0));
    }

    #[test]
    fn detuning_statistics_match_fwhm() {
        let n = 1_000_000;
        let pairs = sample_pairs(&model(1.0, 1.0), n, 1e6, 11).unwrap();
        let sigma = 1.0 / GAUSSIAN_FWHM_PER_SIGMA;
        let mean = pairs.iter().map(|p| p.detuning_thz).sum::<f64>() / n as f64;
        let var = pairs.iter().map(|p| (p.detuning_thz - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 4.0 * sigma / (n as f64).sqrt(), "mean {mean}");
        let fwhm = var.sqrt() * GAUSSIAN_FWHM_PER_SIGMA;
        assert!((fwhm - 1.0).abs() < 0.01, "fwhm {fwhm}");
    }

    #[test]
    fn emission_times_follow_the_rate() {
        let n = 200_000;
        let pairs = sample_pairs(&model(1.0, 1.0), n, 1e6, 5).unwrap();
        assert!(pairs.windows(2).all(|w| w[0].t_emit_ps <= w[1].t_emit_ps));
        // mean gap 1e6 ps, relative std error 1/sqrt(n)
        let mean_gap = pairs.last().unwrap().t_emit_ps / n as f64;
        assert!((mean_gap / 1e6 - 1.0).abs() < 4.0 / (n as f64).sqrt());
        assert!(pairs.iter().enumerate().all(|(i, p)| p.id == i as u64));
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let m = model(1.0, 1.0);
        let a = sample_pairs_with(&m, 50_000, 1e6, 9, Parallelism::Sequential).unwrap();
        let b = sample_pairs_with(&m, 50_000, 1e6, 9, Parallelism::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn regime_at_usual_operating_point() {
        let r = validate_regime(&model(1.0, 1.0), 30.0, 10.0, 5.0).unwrap();
        assert_relative_eq!(r.tau_ps, 30.0 / 0.299792458, max_relative = 1e-14);
        assert_relative_eq!(r.tau_ps, 100.069_228_559_445_6, max_relative = 1e-12);
        assert!(r.decoherence_ratio > 100.0 && r.decoherence_ratio < 100.1);
        assert!(r.locals_decohered);
        assert!(r.pair_coherent);
        assert!(r.slots_separable);
        assert!(r.event_mode_permitted);
    }

    #[test]
    fn narrowband_fails_decoherence() {
        let r = validate_regime(&model(0.001, 1.0), 30.0, 10.0, 5.0).unwrap();
        assert!((r.decoherence_ratio - 0.1).abs() < 1e-3);
        assert!(!r.locals_decohered);
        assert!(!r.event_mode_permitted);
    }

    #[test]
    fn imbalance_equal_to_coherence_length_fails_pair_coherence() {
        let m = model(1.0, 1.0);
        let r = validate_regime(&m, m.coherence_length_mm(), 10.0, 0.0).unwrap();
        assert!(!r.pair_coherent);
    }

    #[test]
    fn pair_incoherence_does_not_block_event_mode() {
        let r = validate_regime(&model(1.0, 4.0), 30.0, 10.0, 5.0).unwrap();
        assert!(!r.pair_coherent);
        assert!(r.event_mode_permitted);
    }

    proptest! {
        #[test]
        fn same_seed_same_pairs(seed in any::<u64>(), n in 1usize..3000) {
            let m = model(1.0, 2.0);
            prop_assert_eq!(sample_pairs(&m, n, 1e6, seed).unwrap(), sample_pairs(&m, n, 1e6, seed).unwrap());
        }

        #[test]
        fn energy_conservation(seed in any::<u64>()) {
            let m = model(1.0, 5.0);
            for p in sample_pairs(&m, 200, 1e6, seed).unwrap() {
                let excess_ghz = (p.signal_frequency_thz(&m) + p.idler_frequency_thz(&m) - 2.0 * m.f0_thz) / GHZ_PER_PS;
                prop_assert!((excess_ghz - p.pump_jitter_ghz).abs() < 1e-6);
            }
        }

        #[test]
        fn decoherence_verdict_monotone_in_imbalance(dl in 0.01f64..100.0, extra in 0.0f64..100.0, df in 0.001f64..5.0) {
            let m = model(df, 1.0);
            let short = validate_regime(&m, dl, 10.0, 0.0).unwrap();
            let long = validate_regime(&m, dl + extra, 10.0, 0.0).unwrap();
            prop_assert!(!short.locals_decohered || long.locals_decohered);
        }
    }
}
