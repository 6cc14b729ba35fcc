//! End-to-end runs built from a config: event simulation, coincidence
//! counting, phase scans, CHSH and the analytic-vs-Monte-Carlo report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    self, AnalysisError, AnalyticPrediction, ChshResult, ChshSettings, ChshTerm, CompareReport, Correlation,
    Estimate, Expectation, FringeScan, GatedCounts, PredictedPoint, ScanPoint, ScanVariable,
};
use crate::coincidence::{self, CoincidenceError, DelayHistogram};
use crate::config::{ConfigError, ExperimentConfig};
use crate::event_sim::{EventSimulator, SimError, TimeTagStream};
use crate::interferometer::{
    self, gated_correlation_mean, local_intensity, local_mean_intensity, pair_phases, InterferometerError, Port,
    PortPair, UngatedEstimator,
};
use crate::io::RunManifest;
use crate::par::{self, Parallelism};
use crate::spdc_source::{sample_pairs_with, validate_regime, PairSample, ParameterError, RegimeReport};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Parameter(#[from] ParameterError),
    #[error(transparent)]
    Interferometer(#[from] InterferometerError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Coincidence(#[from] CoincidenceError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("run inputs disagree: {0}")]
    Inconsistent(String),
}

impl PipelineError {
    pub fn is_regime_violation(&self) -> bool {
        matches!(self, PipelineError::Sim(SimError::RegimeViolation(_)))
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Regime report for a config, without refusing anything.
pub fn regime_report(cfg: &ExperimentConfig) -> Result<RegimeReport> {
    cfg.validate()?;
    Ok(validate_regime(&cfg.model(), cfg.delta_l_mm, cfg.min_factor, cfg.jitter_sigma_ps)?)
}

fn simulator(cfg: &ExperimentConfig, par: Parallelism) -> Result<EventSimulator> {
    let (alice, bob) = cfg.interferometers()?;
    Ok(EventSimulator::new(alice, bob, cfg.model(), cfg.detector())
        .with_min_factor(cfg.min_factor)
        .with_parallelism(par))
}

/// Manifest describing a plain run of `cfg`.
pub fn run_manifest(cfg: &ExperimentConfig) -> RunManifest {
    RunManifest {
        config_hash: cfg.config_hash(),
        base_config_hash: None,
        chsh_term: None,
        seed: cfg.seed,
        tau_ps: cfg.tau_ps(),
        format: cfg.tag_format,
        files: Vec::new(),
        config: cfg.clone(),
    }
}

/// Manifest for one CHSH term derived from `base`.
pub fn chsh_manifest(base: &ExperimentConfig, term: ChshTerm) -> RunManifest {
    RunManifest {
        base_config_hash: Some(base.config_hash()),
        chsh_term: Some(term),
        ..run_manifest(&base.for_chsh_term(term))
    }
}

/// A simulated run: its pairs are not kept, only the detector streams.
#[derive(Debug, Clone)]
pub struct SimulatedRun {
    pub manifest: RunManifest,
    pub streams: [TimeTagStream; 4],
}

fn simulate_pairs(cfg: &ExperimentConfig, pairs: &[PairSample], seed: u64, par: Parallelism) -> Result<[TimeTagStream; 4]> {
    let mut streams = simulator(cfg, par)?.simulate(pairs, seed)?;
    let hash = cfg.config_hash();
    for s in &mut streams {
        s.origin.config_hash = Some(hash.clone());
    }
    Ok(streams)
}

/// Samples pairs and simulates the four detector streams for a manifest.
pub fn simulate(manifest: RunManifest) -> Result<SimulatedRun> {
    simulate_with(manifest, Parallelism::default())
}

pub fn simulate_with(manifest: RunManifest, par: Parallelism) -> Result<SimulatedRun> {
    let cfg = &manifest.config;
    cfg.validate()?;
    simulator(cfg, par)?.check()?;
    let pairs = sample_pairs_with(&cfg.model(), cfg.n_pairs, cfg.pair_rate_hz, cfg.seed, par)?;
    let streams = simulate_pairs(cfg, &pairs, cfg.seed, par)?;
    Ok(SimulatedRun { manifest, streams })
}

/// Coincidence counts of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceSummary {
    pub config_hash: String,
    pub base_config_hash: Option<String>,
    pub chsh_term: Option<ChshTerm>,
    pub phi_a: f64,
    pub phi_b: f64,
    pub tau_ps: f64,
    pub window_half_width_ps: i64,
    /// Tags per channel 1..4.
    pub singles: [u64; 4],
    /// Central-window coincidences per port pair (13, 14, 23, 24).
    pub gated: GatedCounts,
    pub side_minus: [u64; 4],
    pub side_plus: [u64; 4],
    /// Histogram areas of the −τ, 0 and +τ peaks (Alice merged against Bob merged).
    pub peak_areas: [u64; 3],
    pub correlation: Option<Correlation>,
    pub histogram: DelayHistogram,
}

fn check_stream_hashes(manifest: &RunManifest, streams: &[TimeTagStream; 4]) -> Result<()> {
    for s in streams {
        if let Some(h) = &s.origin.config_hash {
            if *h != manifest.config_hash {
                return Err(PipelineError::Inconsistent(format!(
                    "channel {} was made with config {h}, manifest says {}",
                    s.channel, manifest.config_hash
                )));
            }
        }
    }
    if manifest.config.config_hash() != manifest.config_hash {
        return Err(PipelineError::Inconsistent("manifest config does not match its hash".into()));
    }
    Ok(())
}

/// Matches the four port pairs in the three slot windows and histograms the
/// merged delays.
pub fn coincide(manifest: &RunManifest, streams: &[TimeTagStream; 4]) -> Result<CoincidenceSummary> {
    check_stream_hashes(manifest, streams)?;
    let cfg = &manifest.config;
    let tau = cfg.tau_ps();
    let windows = coincidence::slot_windows(tau, cfg.window_half_width_ps)?;
    let mut gated = [0u64; 4];
    let mut side_minus = [0u64; 4];
    let mut side_plus = [0u64; 4];
    for pair in PortPair::ALL {
        let a = &streams[usize::from(pair.alice().number() - 1)];
        let b = &streams[usize::from(pair.bob().number() - 1)];
        let m = coincidence::match_slots(a, b, &windows)?;
        let k = pair as usize;
        side_minus[k] = m[0].count as u64;
        gated[k] = m[1].count as u64;
        side_plus[k] = m[2].count as u64;
    }
    let alice = TimeTagStream::merged(0, &[&streams[0], &streams[1]]);
    let bob = TimeTagStream::merged(0, &[&streams[2], &streams[3]]);
    let histogram = coincidence::delay_histogram(&alice, &bob, cfg.bin_width_ps, cfg.histogram_range_ps)?;
    let hw = cfg.window_half_width_ps as f64;
    let peak_areas = [-tau, 0.0, tau].map(|c| histogram.area(c - hw, c + hw));
    let gated = GatedCounts(gated);
    Ok(CoincidenceSummary {
        config_hash: manifest.config_hash.clone(),
        base_config_hash: manifest.base_config_hash.clone(),
        chsh_term: manifest.chsh_term,
        phi_a: cfg.phi_a_rad,
        phi_b: cfg.phi_b_rad,
        tau_ps: tau,
        window_half_width_ps: cfg.window_half_width_ps,
        singles: std::array::from_fn(|k| streams[k].len() as u64),
        gated,
        side_minus,
        side_plus,
        peak_areas,
        correlation: analysis::correlation_e(&gated).ok(),
        histogram,
    })
}

/// CHSH report with its closed-form expectation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChshReport {
    pub config_hash: String,
    pub settings: ChshSettings,
    pub pump_visibility: f64,
    /// 2√2·V_p at the canonical settings; in general the S built from V_p cos(a − b).
    pub analytic_s: f64,
    pub result: ChshResult,
}

/// Closed-form S for the given settings: E(a, b) = V_p cos(a − b).
pub fn analytic_chsh(cfg: &ExperimentConfig) -> f64 {
    let v = interferometer::pump_visibility(&cfg.model(), cfg.delta_l_mm);
    let s = cfg.chsh_settings();
    let e = |t: ChshTerm| {
        let (a, b) = s.angles(t);
        v * (a - b).cos()
    };
    (e(ChshTerm::AB) - e(ChshTerm::ABPrime) + e(ChshTerm::APrimeB) + e(ChshTerm::APrimeBPrime)).abs()
}

/// Combines four per-setting summaries of the same base config.
pub fn chsh_from_summaries(cfg: &ExperimentConfig, summaries: &[CoincidenceSummary]) -> Result<ChshReport> {
    cfg.validate()?;
    let base = cfg.config_hash();
    let mut correlations = BTreeMap::new();
    for s in summaries {
        let term = s
            .chsh_term
            .ok_or_else(|| PipelineError::Inconsistent(format!("summary {} is not a CHSH run", s.config_hash)))?;
        if s.base_config_hash.as_deref() != Some(base.as_str()) {
            return Err(PipelineError::Inconsistent(format!(
                "summary for {term:?} was derived from another config"
            )));
        }
        let expected = cfg.for_chsh_term(term).config_hash();
        if s.config_hash != expected {
            return Err(PipelineError::Inconsistent(format!("summary for {term:?} has unexpected settings")));
        }
        let c = analysis::correlation_e(&s.gated)?;
        if correlations.insert(term, c).is_some() {
            return Err(PipelineError::Inconsistent(format!("two summaries for {term:?}")));
        }
    }
    let result = analysis::chsh_s(&cfg.chsh_settings(), &correlations)?;
    Ok(ChshReport {
        config_hash: base,
        settings: cfg.chsh_settings(),
        pump_visibility: interferometer::pump_visibility(&cfg.model(), cfg.delta_l_mm),
        analytic_s: analytic_chsh(cfg),
        result,
    })
}

/// All four CHSH settings simulated and counted in process.
pub fn chsh(cfg: &ExperimentConfig) -> Result<(ChshReport, Vec<CoincidenceSummary>)> {
    let mut summaries = Vec::with_capacity(4);
    for term in ChshTerm::ALL {
        let run = simulate(chsh_manifest(cfg, term))?;
        summaries.push(coincide(&run.manifest, &run.streams)?);
    }
    Ok((chsh_from_summaries(cfg, &summaries)?, summaries))
}

/// Per-pair Monte Carlo means of the local intensities and the two ungated
/// correlation estimators over one batch of pairs.
fn ungated_mc(pairs: &[PairSample], phi_a: f64, phi_b: f64, tau: f64, par: Parallelism) -> ([Estimate; 4], [Estimate; 4], [Estimate; 4]) {
    // sums[0..4]: I per port, sums[4..8]: I_A I_B per port pair; [8..16]: squares
    let n = pairs.len();
    let partials = par::map_chunks(par::chunk_count(n), par, |c| {
        let mut sums = [0.0f64; 16];
        for pair in &pairs[par::chunk_range(n, c)] {
            let (x, y) = pair_phases(phi_a, phi_b, pair, tau);
            let i = [
                local_intensity(Port::P1, x),
                local_intensity(Port::P2, x),
                local_intensity(Port::P3, y),
                local_intensity(Port::P4, y),
            ];
            for (k, pp) in PortPair::ALL.iter().enumerate() {
                let v = i[usize::from(pp.alice().number() - 1)] * i[usize::from(pp.bob().number() - 1)];
                sums[4 + k] += v;
                sums[12 + k] += v * v;
            }
            for k in 0..4 {
                sums[k] += i[k];
                sums[8 + k] += i[k] * i[k];
            }
        }
        sums
    });
    let mut total = [0.0f64; 16];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    let n = n as u64;
    let local: [Estimate; 4] = std::array::from_fn(|k| Estimate::from_moments(total[k], total[8 + k], n));
    let paired = std::array::from_fn(|k| Estimate::from_moments(total[4 + k], total[12 + k], n));
    let factorized = std::array::from_fn(|k| {
        let pp = PortPair::ALL[k];
        local[usize::from(pp.alice().number() - 1)].product(local[usize::from(pp.bob().number() - 1)])
    });
    (local, paired, factorized)
}

/// Simulates one scan point from its own seed.
pub fn scan_point(cfg: &ExperimentConfig, k: usize, x: f64, phi_a: f64, phi_b: f64, par: Parallelism) -> Result<ScanPoint> {
    let point_cfg = ExperimentConfig {
        seed: cfg.point_seed(k),
        ..cfg.with_phases(phi_a, phi_b)
    };
    let pairs = sample_pairs_with(&point_cfg.model(), cfg.n_pairs, cfg.pair_rate_hz, point_cfg.seed, par)?;
    let streams = simulate_pairs(&point_cfg, &pairs, point_cfg.seed, par)?;
    let summary = coincide(&run_manifest(&point_cfg), &streams)?;
    let (local_mc, ungated_paired_mc, ungated_factorized_mc) = ungated_mc(&pairs, phi_a, phi_b, cfg.tau_ps(), par);
    Ok(ScanPoint {
        x,
        phi_a,
        phi_b,
        n_pairs: pairs.len() as u64,
        singles: summary.singles,
        gated: summary.gated.0,
        side_minus: summary.side_minus,
        side_plus: summary.side_plus,
        peak_areas: summary.peak_areas,
        local_mc,
        ungated_paired_mc,
        ungated_factorized_mc,
    })
}

/// Event-mode phase scan over the config's grid.
pub fn scan_event(cfg: &ExperimentConfig) -> Result<FringeScan> {
    scan_event_with(cfg, Parallelism::default())
}

pub fn scan_event_with(cfg: &ExperimentConfig, par: Parallelism) -> Result<FringeScan> {
    cfg.validate()?;
    simulator(cfg, par)?.check()?;
    let points = cfg
        .scan_grid()
        .into_iter()
        .enumerate()
        .map(|(k, (x, pa, pb))| scan_point(cfg, k, x, pa, pb, par))
        .collect::<Result<Vec<_>>>()?;
    Ok(FringeScan::new(cfg.scan_variable, cfg.config_hash(), points)?)
}

/// Probability that two jittered, ps-rounded tags of one pair land within
/// ±hw of their nominal delay.
pub fn window_capture(jitter_sigma_ps: f64, half_width_ps: i64) -> f64 {
    // each rounding adds a uniform ±0.5 ps error, variance 1/12
    let var = 2.0 * jitter_sigma_ps * jitter_sigma_ps + 2.0 / 12.0;
    if jitter_sigma_ps == 0.0 {
        return 1.0;
    }
    libm::erf((half_width_ps as f64 + 0.5) / (2.0 * var).sqrt())
}

/// Closed-form expectations of every event-mode observable on the scan grid.
pub fn predict(cfg: &ExperimentConfig) -> Result<AnalyticPrediction> {
    cfg.validate()?;
    let model = cfg.model();
    let dl = cfg.delta_l_mm;
    let n = cfg.n_pairs as f64;
    let eta = cfg.efficiency;
    let span_ps = n / cfg.pair_rate_hz * 1e12;
    let darks = cfg.dark_rate_hz * span_ps * 1e-12;
    let capture = window_capture(cfg.jitter_sigma_ps, cfg.window_half_width_ps);
    let width = (2 * cfg.window_half_width_ps + 1) as f64;

    let binomial = |p: f64| Expectation {
        mean: n * p,
        variance: n * p * (1.0 - p),
    };
    let points = cfg
        .scan_grid()
        .into_iter()
        .map(|(x, pa, pb)| {
            let local: [f64; 4] = [
                local_mean_intensity(Port::P1, pa, &model, dl),
                local_mean_intensity(Port::P2, pa, &model, dl),
                local_mean_intensity(Port::P3, pb, &model, dl),
                local_mean_intensity(Port::P4, pb, &model, dl),
            ];
            let singles: [Expectation; 4] = std::array::from_fn(|k| {
                let e = binomial(eta * local[k]);
                Expectation {
                    mean: e.mean + darks,
                    variance: e.variance + darks,
                }
            });
            let accidental = |pp: PortPair| {
                let a = singles[usize::from(pp.alice().number() - 1)].mean;
                let b = singles[usize::from(pp.bob().number() - 1)].mean;
                a * b * width / span_ps
            };
            let gated = PortPair::ALL.map(|pp| {
                let e = binomial(eta * eta * capture * gated_correlation_mean(pa, pb, &model, dl, pp));
                let acc = accidental(pp);
                Expectation {
                    mean: e.mean + acc,
                    variance: e.variance + acc,
                }
            });
            let side = {
                let e = binomial(eta * eta * capture / 4.0);
                let acc: f64 = PortPair::ALL.iter().map(|&pp| accidental(pp)).sum();
                Expectation {
                    mean: e.mean + acc,
                    variance: e.variance + acc,
                }
            };
            let ungated = |est| PortPair::ALL.map(|pp| interferometer::ungated_correlation_mean(pa, pb, &model, dl, pp, est));
            PredictedPoint {
                x,
                phi_a: pa,
                phi_b: pb,
                singles,
                gated,
                side_minus: side,
                side_plus: side,
                local,
                ungated_paired: ungated(UngatedEstimator::Paired),
                ungated_factorized: ungated(UngatedEstimator::Factorized),
            }
        })
        .collect();
    Ok(AnalyticPrediction {
        config_hash: cfg.config_hash(),
        variable: cfg.scan_variable,
        points,
    })
}

/// Column names of [`analytic_table`].
pub const ANALYTIC_COLUMNS: &[&str] = &[
    "x",
    "phi_a",
    "phi_b",
    "singles_1",
    "singles_2",
    "singles_3",
    "singles_4",
    "gated_13",
    "gated_14",
    "gated_23",
    "gated_24",
    "gated_13_postselected",
    "gated_14_postselected",
    "gated_23_postselected",
    "gated_24_postselected",
    "side_slot",
    "ungated_factorized_13",
    "ungated_factorized_14",
    "ungated_factorized_23",
    "ungated_factorized_24",
    "ungated_paired_13",
    "ungated_paired_14",
    "ungated_paired_23",
    "ungated_paired_24",
];

/// Per-pair probabilities on the scan grid. `gated_XY` is the probability of
/// a central-slot detection at X and Y, `gated_XY_postselected` the same
/// conditioned on the central slot (weight 1/2), and `side_slot` the weight of
/// each side slot per port pair.
pub fn analytic_table(cfg: &ExperimentConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let model = cfg.model();
    let dl = cfg.delta_l_mm;
    Ok(cfg
        .scan_grid()
        .into_iter()
        .map(|(x, pa, pb)| {
            let mut row = vec![x, pa, pb];
            row.extend([pa, pa, pb, pb].iter().zip(Port::ALL).map(|(&ph, port)| local_mean_intensity(port, ph, &model, dl)));
            let gated = PortPair::ALL.map(|pp| gated_correlation_mean(pa, pb, &model, dl, pp));
            row.extend(gated);
            row.extend(gated.map(|g| 2.0 * g));
            row.push(1.0 / 16.0);
            for est in [UngatedEstimator::Factorized, UngatedEstimator::Paired] {
                row.extend(PortPair::ALL.map(|pp| interferometer::ungated_correlation_mean(pa, pb, &model, dl, pp, est)));
            }
            row
        })
        .collect())
}

/// Column names of [`event_table`].
pub const EVENT_COLUMNS: &[&str] = &[
    "x",
    "phi_a",
    "phi_b",
    "singles_1",
    "singles_2",
    "singles_3",
    "singles_4",
    "gated_13",
    "gated_14",
    "gated_23",
    "gated_24",
    "side_minus",
    "side_plus",
];

pub fn event_table(scan: &FringeScan) -> Vec<Vec<f64>> {
    scan.points
        .iter()
        .map(|p| {
            let mut row = vec![p.x, p.phi_a, p.phi_b];
            row.extend(p.singles.map(|v| v as f64));
            row.extend(p.gated.map(|v| v as f64));
            row.push(p.side_minus.iter().sum::<u64>() as f64);
            row.push(p.side_plus.iter().sum::<u64>() as f64);
            row
        })
        .collect()
}

/// Analytic prediction against a Monte Carlo scan of the same config.
pub fn compare(cfg: &ExperimentConfig, scan: &FringeScan) -> Result<CompareReport> {
    let pred = predict(cfg)?;
    let mut report = analysis::compare_report(&pred, scan)?;
    report.notes.push(format!(
        "pump visibility V_p = {:.6}, local visibility V_loc = {:.3e}",
        interferometer::pump_visibility(&cfg.model(), cfg.delta_l_mm),
        interferometer::local_visibility(&cfg.model(), cfg.delta_l_mm)
    ));
    Ok(report)
}

/// Scan variable names as accepted on the command line.
pub fn parse_scan_variable(s: &str) -> Option<ScanVariable> {
    match s {
        "phi_a" => Some(ScanVariable::PhiA),
        "phi_b" => Some(ScanVariable::PhiB),
        "joint" => Some(ScanVariable::Joint),
        "synchronized" => Some(ScanVariable::Synchronized),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            n_pairs: 20_000,
            scan_steps: 8,
            ..Default::default()
        }
    }

    #[test]
    fn capture_matches_plain_erf_closely() {
        let c = window_capture(5.0, 25);
        assert!((c - libm::erf(25.0 / 10.0)).abs() < 1e-3, "{c}");
        assert_eq!(window_capture(0.0, 3), 1.0);
    }

    #[test]
    fn coincide_rejects_foreign_streams() {
        let cfg = small();
        let run = simulate(run_manifest(&cfg)).unwrap();
        let other = run_manifest(&cfg.with_phases(0.3, 0.0));
        assert!(matches!(coincide(&other, &run.streams), Err(PipelineError::Inconsistent(_))));
    }

    #[test]
    fn narrowband_simulation_is_refused() {
        let cfg = ExperimentConfig {
            delta_f_thz: 1e-4,
            ..small()
        };
        let err = simulate(run_manifest(&cfg)).unwrap_err();
        assert!(err.is_regime_violation(), "{err}");
        // analytic mode still answers
        assert_eq!(analytic_table(&cfg).unwrap().len(), 8);
    }

    #[test]
    fn summaries_from_mixed_bases_are_rejected() {
        let cfg = small();
        let mut summaries: Vec<_> = ChshTerm::ALL
            .iter()
            .map(|&t| {
                let run = simulate(chsh_manifest(&cfg, t)).unwrap();
                coincide(&run.manifest, &run.streams).unwrap()
            })
            .collect();
        chsh_from_summaries(&cfg, &summaries).unwrap();
        let other = ExperimentConfig { seed: 99, ..cfg.clone() };
        let run = simulate(chsh_manifest(&other, ChshTerm::AB)).unwrap();
        summaries[0] = coincide(&run.manifest, &run.streams).unwrap();
        assert!(chsh_from_summaries(&cfg, &summaries).is_err());
        summaries.pop();
        assert!(chsh_from_summaries(&other, &summaries).is_err());
    }

    #[test]
    fn analytic_chsh_at_canonical_settings() {
        let cfg = ExperimentConfig {
            pump_linewidth_ghz: 0.0,
            ..Default::default()
        };
        assert!((analytic_chsh(&cfg) - 2.0 * std::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn event_scan_has_one_row_per_point() {
        let scan = scan_event(&small()).unwrap();
        let rows = event_table(&scan);
        assert_eq!(rows.len(), 8);
        assert!(rows.iter().all(|r| r.len() == EVENT_COLUMNS.len()));
        let table = analytic_table(&small()).unwrap();
        assert!(table.iter().all(|r| r.len() == ANALYTIC_COLUMNS.len()));
    }
}
