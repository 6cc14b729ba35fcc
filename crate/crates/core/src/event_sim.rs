//! Time-tag generation: per-pair outcome draws turned into four detector
//! streams with efficiency, timing jitter and dark counts.

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interferometer::{
    check_pair, pair_phases, table_from_phases, InterferometerError, JointOutcome, NmziConfig, PortPair,
    ProbabilityTable, Slot,
};
use crate::par::{self, Parallelism, Stream};
use crate::spdc_source::{validate_regime, PairSample, ParameterError, RegimeReport, SpectralModel};

/// Default factor standing in for "much greater than".
pub const DEFAULT_MIN_FACTOR: f64 = 10.0;

const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("probability table is not normalized (total {0})")]
    Unnormalized(f64),
    #[error("no photon pairs to simulate")]
    EmptyPairs,
    #[error("regime does not permit event mode: Δf·τ = {:.3}, τ = {:.3} ps, slot time + jitter = {:.3} ps", .0.decoherence_ratio, .0.tau_ps, .0.slot_time_ps + .0.detector_jitter_ps)]
    RegimeViolation(RegimeReport),
    #[error("{field} must be {requirement}, got {value}")]
    Detector {
        field: &'static str,
        requirement: &'static str,
        value: f64,
    },
    #[error(transparent)]
    Parameter(#[from] ParameterError),
    #[error(transparent)]
    Interferometer(#[from] InterferometerError),
}

/// Single-photon detector imperfections, shared by all four channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub efficiency: f64,
    pub jitter_sigma_ps: f64,
    pub dark_rate_hz: f64,
}

impl Default for DetectorModel {
    fn default() -> Self {
        DetectorModel {
            efficiency: 1.0,
            jitter_sigma_ps: 5.0,
            dark_rate_hz: 0.0,
        }
    }
}

impl DetectorModel {
    pub fn ideal() -> Self {
        DetectorModel {
            efficiency: 1.0,
            jitter_sigma_ps: 0.0,
            dark_rate_hz: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let check = |ok: bool, field, requirement, value| {
            if ok {
                Ok(())
            } else {
                Err(SimError::Detector {
                    field,
                    requirement,
                    value,
                })
            }
        };
        check((0.0..=1.0).contains(&self.efficiency), "efficiency", "in [0, 1]", self.efficiency)?;
        check(
            self.jitter_sigma_ps >= 0.0 && self.jitter_sigma_ps.is_finite(),
            "jitter_sigma_ps",
            ">= 0",
            self.jitter_sigma_ps,
        )?;
        check(
            self.dark_rate_hz >= 0.0 && self.dark_rate_hz.is_finite(),
            "dark_rate_hz",
            ">= 0",
            self.dark_rate_hz,
        )
    }
}

/// Provenance carried by every stream.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StreamOrigin {
    pub seed: u64,
    pub config_hash: Option<String>,
}

/// Detection timestamps (integer ps) for one channel, strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeTagStream {
    pub channel: u8,
    pub tags: Vec<u64>,
    pub origin: StreamOrigin,
}

impl TimeTagStream {
    pub fn new(channel: u8, tags: Vec<u64>) -> Self {
        TimeTagStream {
            channel,
            tags,
            origin: StreamOrigin::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn is_sorted(&self) -> bool {
        self.tags.windows(2).all(|w| w[0] < w[1])
    }

    /// Merges several streams into one (e.g. both ports of a party).
    pub fn merged(channel: u8, streams: &[&TimeTagStream]) -> TimeTagStream {
        let mut tags: Vec<u64> = streams.iter().flat_map(|s| s.tags.iter().copied()).collect();
        tags.sort_unstable();
        tags.dedup();
        TimeTagStream {
            channel,
            tags,
            origin: streams.first().map(|s| s.origin.clone()).unwrap_or_default(),
        }
    }
}

/// Inverse-CDF draw over the 12 outcome classes; central outcomes get a fair
/// coin for SS versus LL.
pub fn sample_outcome<R: Rng + ?Sized>(table: &ProbabilityTable, rng: &mut R) -> Result<JointOutcome, SimError> {
    let total = table.total();
    if (total - 1.0).abs() > NORMALIZATION_TOL || table.entries().iter().any(|&p| p.is_nan() || p < 0.0) {
        return Err(SimError::Unnormalized(total));
    }
    Ok(draw_outcome(table, rng))
}

fn draw_outcome<R: Rng + ?Sized>(table: &ProbabilityTable, rng: &mut R) -> JointOutcome {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut chosen = None;
    for (pair, slot, p) in table.iter() {
        if p <= 0.0 {
            continue;
        }
        cum += p;
        chosen = Some((pair, slot));
        if u < cum {
            break;
        }
    }
    let (ports, slot) = chosen.unwrap_or((PortPair::P13, Slot::Central));
    let long_long = slot == Slot::Central && rng.random::<bool>();
    JointOutcome {
        ports,
        slot,
        long_long,
    }
}

/// Event-mode simulator for a matched interferometer pair.
#[derive(Debug, Clone, Copy)]
pub struct EventSimulator {
    pub alice: NmziConfig,
    pub bob: NmziConfig,
    pub model: SpectralModel,
    pub detector: DetectorModel,
    pub min_factor: f64,
    pub parallelism: Parallelism,
}

impl EventSimulator {
    pub fn new(alice: NmziConfig, bob: NmziConfig, model: SpectralModel, detector: DetectorModel) -> Self {
        EventSimulator {
            alice,
            bob,
            model,
            detector,
            min_factor: DEFAULT_MIN_FACTOR,
            parallelism: Parallelism::default(),
        }
    }

    pub fn with_parallelism(mut self, par: Parallelism) -> Self {
        self.parallelism = par;
        self
    }

    pub fn with_min_factor(mut self, min_factor: f64) -> Self {
        self.min_factor = min_factor;
        self
    }

    /// Checks configuration and the regime; returns the regime report.
    pub fn check(&self) -> Result<RegimeReport, SimError> {
        check_pair(&self.alice, &self.bob)?;
        self.detector.validate()?;
        let report = validate_regime(
            &self.model,
            self.alice.delta_l_mm,
            self.min_factor,
            self.detector.jitter_sigma_ps,
        )?;
        if !report.event_mode_permitted {
            return Err(SimError::RegimeViolation(report));
        }
        Ok(report)
    }

    /// Draws an outcome per pair and emits the four channel streams.
    pub fn simulate(&self, pairs: &[PairSample], seed: u64) -> Result<[TimeTagStream; 4], SimError> {
        self.check()?;
        let tau = self.alice.tau_ps();
        let (phi_a, phi_b) = (self.alice.phase_rad, self.bob.phase_rad);
        self.emit(pairs, seed, |range, rng_out| {
            range
                .map(|i| {
                    let (x, y) = pair_phases(phi_a, phi_b, &pairs[i], tau);
                    let table = table_from_phases(&self.alice, &self.bob, x, y);
                    draw_outcome(&table, rng_out)
                })
                .collect()
        })
    }

    /// Emits streams for outcomes chosen by the caller, one per pair.
    pub fn simulate_with_outcomes(
        &self,
        pairs: &[PairSample],
        outcomes: &[JointOutcome],
        seed: u64,
    ) -> Result<[TimeTagStream; 4], SimError> {
        self.check()?;
        assert_eq!(pairs.len(), outcomes.len(), "one outcome per pair");
        self.emit(pairs, seed, |range, _| outcomes[range].to_vec())
    }

    fn emit<F>(&self, pairs: &[PairSample], seed: u64, outcomes_for: F) -> Result<[TimeTagStream; 4], SimError>
    where
        F: Fn(std::ops::Range<usize>, &mut rand_chacha::ChaCha8Rng) -> Vec<JointOutcome> + Sync + Send,
    {
        if pairs.is_empty() {
            return Err(SimError::EmptyPairs);
        }
        let tau = self.alice.tau_ps();
        let det = self.detector;
        let jitter = Normal::new(0.0, det.jitter_sigma_ps).expect("validated");
        let n = pairs.len();

        let chunks = par::map_chunks(par::chunk_count(n), self.parallelism, |c| {
            let range = par::chunk_range(n, c);
            let mut rng_out = par::substream(seed, Stream::Outcomes, c as u64);
            let mut rng_det = par::substream(seed, Stream::Jitter, c as u64);
            let outcomes = outcomes_for(range.clone(), &mut rng_out);
            let mut per_channel: [Vec<u64>; 4] = Default::default();
            for (pair, outcome) in pairs[range].iter().zip(outcomes) {
                let (da, db) = outcome.arm_delays();
                let hits = [
                    (outcome.ports.alice().number(), da),
                    (outcome.ports.bob().number(), db),
                ];
                for (channel, delay) in hits {
                    let keep = det.efficiency >= 1.0 || rng_det.random::<f64>() < det.efficiency;
                    let dt = if det.jitter_sigma_ps > 0.0 {
                        jitter.sample(&mut rng_det)
                    } else {
                        0.0
                    };
                    if keep {
                        let t = pair.t_emit_ps + f64::from(delay) * tau + dt;
                        per_channel[usize::from(channel - 1)].push(t.round().max(0.0) as u64);
                    }
                }
            }
            per_channel
        });

        let span_ps = pairs.iter().map(|p| p.t_emit_ps).fold(0.0, f64::max) + tau;
        let mut streams: [TimeTagStream; 4] = std::array::from_fn(|k| TimeTagStream {
            channel: k as u8 + 1,
            tags: Vec::new(),
            origin: StreamOrigin {
                seed,
                config_hash: None,
            },
        });
        for (k, stream) in streams.iter_mut().enumerate() {
            let total: usize = chunks.iter().map(|c| c[k].len()).sum();
            let mut tags = Vec::with_capacity(total);
            for chunk in &chunks {
                tags.extend_from_slice(&chunk[k]);
            }
            if det.dark_rate_hz > 0.0 {
                let mut rng = par::substream(seed, Stream::Darks, k as u64 + 1);
                tags.extend(dark_counts(det.dark_rate_hz, span_ps, &mut rng));
            }
            par::sort_tags(&mut tags, self.parallelism);
            // two clicks inside one 1 ps bin register once
            tags.dedup();
            stream.tags = tags;
        }
        Ok(streams)
    }
}

fn dark_counts<R: Rng + ?Sized>(rate_hz: f64, span_ps: f64, rng: &mut R) -> Vec<u64> {
    let gap = Exp::new(rate_hz * 1e-12).expect("positive rate");
    let mut out = Vec::new();
    let mut t = gap.sample(rng);
    while t <= span_ps {
        out.push(t.round() as u64);
        t += gap.sample(rng);
    }
    out
}

/// Simulates the four channel streams with the default execution backend.
pub fn simulate_streams(
    cfg_a: &NmziConfig,
    cfg_b: &NmziConfig,
    model: &SpectralModel,
    pairs: &[PairSample],
    det: &DetectorModel,
    seed: u64,
) -> Result<[TimeTagStream; 4], SimError> {
    EventSimulator::new(*cfg_a, *cfg_b, *model, *det).simulate(pairs, seed)
}
