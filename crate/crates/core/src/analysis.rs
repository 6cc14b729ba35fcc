//! Fringe fits, correlation values, CHSH and analytic-versus-Monte-Carlo
//! comparison.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI, TAU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interferometer::{Port, PortPair};

/// |z| above which a comparison row is flagged.
pub const Z_FLAG: f64 = 4.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("scan needs at least {min} points, got {got}")]
    TooFewPoints { min: usize, got: usize },
    #[error("scan spans {span:.4} rad; a full 2π period is required")]
    ShortSpan { span: f64 },
    #[error("phase points and rates differ in length ({phases} vs {rates})")]
    LengthMismatch { phases: usize, rates: usize },
    #[error("fringe mean level is not positive ({0})")]
    NonPositiveMean(f64),
    #[error("no gated coincidences to form a correlation")]
    ZeroCounts,
    #[error("missing CHSH setting {0:?}")]
    MissingSetting(ChshTerm),
    #[error("config hash mismatch: predictions {predicted}, scan {measured}")]
    ConfigMismatch { predicted: String, measured: String },
    #[error("prediction and scan have different phase grids")]
    GridMismatch,
}

/// Least-squares fit of r(x) = m·(1 + V cos(k·x + c)).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FringeFit {
    pub visibility: f64,
    /// Phase offset c in [0, 2π); meaningless when `phase_identifiable` is false.
    pub phase_offset: f64,
    pub mean: f64,
    /// RMS residual relative to the mean level.
    pub residual: f64,
    pub phase_identifiable: bool,
}

fn solve3(mut m: [[f64; 4]; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        for row in 0..3 {
            if row != col {
                let f = m[row][col] / m[col][col];
                let pivot_row = m[col];
                for (v, p) in m[row].iter_mut().zip(pivot_row).skip(col) {
                    *v -= f * p;
                }
            }
        }
    }
    Some([m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]])
}

/// Linear fit of y = A + B cos(kx) + C sin(kx), returning (A, B, C, rss).
fn linear_fit(xs: &[f64], ys: &[f64], k: f64) -> Option<(f64, f64, f64, f64)> {
    let mut m = [[0.0; 4]; 3];
    for (&x, &y) in xs.iter().zip(ys) {
        let basis = [1.0, (k * x).cos(), (k * x).sin()];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] += basis[r] * basis[c];
            }
            m[r][3] += basis[r] * y;
        }
    }
    let [a, b, c] = solve3(m)?;
    let rss = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| (y - a - b * (k * x).cos() - c * (k * x).sin()).powi(2))
        .sum();
    Some((a, b, c, rss))
}

fn check_lengths(xs: &[f64], ys: &[f64]) -> Result<(), AnalysisError> {
    if xs.len() != ys.len() {
        return Err(AnalysisError::LengthMismatch {
            phases: xs.len(),
            rates: ys.len(),
        });
    }
    if xs.len() < 3 {
        return Err(AnalysisError::TooFewPoints { min: 3, got: xs.len() });
    }
    Ok(())
}

fn fit_at_frequency(xs: &[f64], ys: &[f64], k: f64) -> Result<FringeFit, AnalysisError> {
    check_lengths(xs, ys)?;
    let scale = ys.iter().fold(0.0f64, |acc, y| acc.max(y.abs()));
    if scale == 0.0 {
        return Ok(FringeFit {
            visibility: 0.0,
            phase_offset: 0.0,
            mean: 0.0,
            residual: 0.0,
            phase_identifiable: false,
        });
    }
    let (a, b, c, rss) = linear_fit(xs, ys, k).ok_or(AnalysisError::TooFewPoints { min: 3, got: xs.len() })?;
    if a <= 0.0 {
        return Err(AnalysisError::NonPositiveMean(a));
    }
    let amplitude = b.hypot(c);
    let identifiable = amplitude > 1e-12 * scale;
    Ok(FringeFit {
        visibility: if identifiable { (amplitude / a).min(1.0) } else { 0.0 },
        phase_offset: if identifiable { (-c).atan2(b).rem_euclid(TAU) } else { 0.0 },
        mean: a,
        residual: (rss / xs.len() as f64).sqrt() / a,
        phase_identifiable: identifiable,
    })
}

/// Fits a unit-frequency fringe r(x) = m(1 + V cos(x + c)).
pub fn fit_sinusoid(xs: &[f64], ys: &[f64]) -> Result<FringeFit, AnalysisError> {
    fit_at_frequency(xs, ys, 1.0)
}

/// Fringe fit with the angular frequency k free, searched over [k_min, k_max].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyFit {
    pub frequency: f64,
    pub fit: FringeFit,
}

pub fn fit_fringe_frequency(xs: &[f64], ys: &[f64], k_min: f64, k_max: f64) -> Result<FrequencyFit, AnalysisError> {
    check_lengths(xs, ys)?;
    let rss = |k: f64| linear_fit(xs, ys, k).map_or(f64::INFINITY, |f| f.3);
    const GRID: usize = 2000;
    let step = (k_max - k_min) / GRID as f64;
    let best = (0..=GRID)
        .map(|i| k_min + i as f64 * step)
        .min_by(|&a, &b| rss(a).total_cmp(&rss(b)))
        .unwrap_or(k_min);
    // golden-section refinement inside the neighbouring grid cells
    let (mut lo, mut hi) = ((best - step).max(k_min), (best + step).min(k_max));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let x1 = hi - g * (hi - lo);
        let x2 = lo + g * (hi - lo);
        if rss(x1) < rss(x2) {
            hi = x2;
        } else {
            lo = x1;
        }
    }
    let k = 0.5 * (lo + hi);
    Ok(FrequencyFit {
        frequency: k,
        fit: fit_at_frequency(xs, ys, k)?,
    })
}

/// Mean estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
}

impl Estimate {
    /// Sample mean and standard error of a set of values.
    pub fn from_moments(sum: f64, sum_sq: f64, n: u64) -> Self {
        let n_f = n as f64;
        let mean = sum / n_f;
        let var = if n > 1 {
            ((sum_sq - n_f * mean * mean) / (n_f - 1.0)).max(0.0)
        } else {
            0.0
        };
        Estimate {
            mean,
            std_err: (var / n_f).sqrt(),
        }
    }

    /// Product of two independent estimates, first-order error propagation.
    pub fn product(self, other: Estimate) -> Estimate {
        Estimate {
            mean: self.mean * other.mean,
            std_err: (other.mean.powi(2) * self.std_err.powi(2) + self.mean.powi(2) * other.std_err.powi(2)).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanVariable {
    PhiA,
    PhiB,
    /// φ_A + φ_B, with φ_B held at its configured value.
    Joint,
    /// φ_A = φ_B = x.
    Synchronized,
}

/// Counts and estimates at one phase setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    /// Value of the scanned variable.
    pub x: f64,
    pub phi_a: f64,
    pub phi_b: f64,
    pub n_pairs: u64,
    /// Tags per channel 1..4.
    pub singles: [u64; 4],
    /// Central-window coincidences per port pair (13, 14, 23, 24).
    pub gated: [u64; 4],
    pub side_minus: [u64; 4],
    pub side_plus: [u64; 4],
    /// Delay-histogram peak areas at −τ, 0, +τ.
    pub peak_areas: [u64; 3],
    /// Per-pair local intensity averaged over the sampled pairs, per port.
    pub local_mc: [Estimate; 4],
    /// Per-pair intensity product averaged over the pairs, per port pair.
    pub ungated_paired_mc: [Estimate; 4],
    /// Product of the two sample-mean local intensities, per port pair.
    pub ungated_factorized_mc: [Estimate; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Observable {
    Singles(Port),
    Gated(PortPair),
    /// (1,3) + (2,4) central counts, the 1 + cos fringe.
    GatedEven,
    SideMinus,
    SidePlus,
}

/// A phase sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FringeScan {
    pub variable: ScanVariable,
    pub config_hash: String,
    pub points: Vec<ScanPoint>,
}

pub const MIN_SCAN_POINTS: usize = 8;

impl FringeScan {
    pub fn new(variable: ScanVariable, config_hash: String, points: Vec<ScanPoint>) -> Result<Self, AnalysisError> {
        let xs: Vec<f64> = points.iter().map(|p| p.x).collect();
        check_scan_grid(&xs)?;
        Ok(FringeScan {
            variable,
            config_hash,
            points,
        })
    }

    pub fn phases(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.x).collect()
    }

    pub fn series(&self, obs: Observable) -> Vec<f64> {
        self.points
            .iter()
            .map(|p| match obs {
                Observable::Singles(port) => p.singles[usize::from(port.number() - 1)] as f64,
                Observable::Gated(pair) => p.gated[pair as usize] as f64,
                Observable::GatedEven => (p.gated[PortPair::P13 as usize] + p.gated[PortPair::P24 as usize]) as f64,
                Observable::SideMinus => p.side_minus.iter().sum::<u64>() as f64,
                Observable::SidePlus => p.side_plus.iter().sum::<u64>() as f64,
            })
            .collect()
    }
}

/// At least eight points, and the grid (taken as uniform with an exclusive
/// endpoint) covers a full period.
pub fn check_scan_grid(xs: &[f64]) -> Result<(), AnalysisError> {
    if xs.len() < MIN_SCAN_POINTS {
        return Err(AnalysisError::TooFewPoints {
            min: MIN_SCAN_POINTS,
            got: xs.len(),
        });
    }
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = xs.len() as f64;
    let span = (hi - lo) * n / (n - 1.0);
    if span < TAU - 1e-9 {
        return Err(AnalysisError::ShortSpan { span });
    }
    Ok(())
}

pub fn fit_fringe(scan: &FringeScan, obs: Observable) -> Result<FringeFit, AnalysisError> {
    fit_sinusoid(&scan.phases(), &scan.series(obs))
}

/// Gated coincidence counts for the four port pairs, ordered 13, 14, 23, 24.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GatedCounts(pub [u64; 4]);

impl GatedCounts {
    pub fn get(&self, pair: PortPair) -> u64 {
        self.0[pair as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub value: f64,
    pub std_err: f64,
    pub total: u64,
}

/// E = (N13 + N24 − N14 − N23) / (N13 + N24 + N14 + N23), with the binomial
/// standard error √((1 − E²)/N).
pub fn correlation_e(counts: &GatedCounts) -> Result<Correlation, AnalysisError> {
    let even = counts.get(PortPair::P13) + counts.get(PortPair::P24);
    let odd = counts.get(PortPair::P14) + counts.get(PortPair::P23);
    let total = even + odd;
    if total == 0 {
        return Err(AnalysisError::ZeroCounts);
    }
    let e = (even as f64 - odd as f64) / total as f64;
    Ok(Correlation {
        value: e,
        std_err: ((1.0 - e * e).max(0.0) / total as f64).sqrt(),
        total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ChshTerm {
    AB,
    ABPrime,
    APrimeB,
    APrimeBPrime,
}

impl ChshTerm {
    pub const ALL: [ChshTerm; 4] = [ChshTerm::AB, ChshTerm::ABPrime, ChshTerm::APrimeB, ChshTerm::APrimeBPrime];

    fn sign(self) -> f64 {
        if self == ChshTerm::ABPrime {
            -1.0
        } else {
            1.0
        }
    }
}

/// Analyzer settings. The pair fringe goes as cos(φ_A + φ_B), so Bob's phase
/// plate is set to −b to realize E(a, b) = V cos(a − b).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChshSettings {
    pub a: f64,
    pub a_prime: f64,
    pub b: f64,
    pub b_prime: f64,
}

impl Default for ChshSettings {
    fn default() -> Self {
        ChshSettings {
            a: 0.0,
            a_prime: FRAC_PI_2,
            b: PI / 4.0,
            b_prime: 3.0 * PI / 4.0,
        }
    }
}

impl ChshSettings {
    pub fn angles(&self, term: ChshTerm) -> (f64, f64) {
        match term {
            ChshTerm::AB => (self.a, self.b),
            ChshTerm::ABPrime => (self.a, self.b_prime),
            ChshTerm::APrimeB => (self.a_prime, self.b),
            ChshTerm::APrimeBPrime => (self.a_prime, self.b_prime),
        }
    }

    /// Phase plate values (φ_A, φ_B) for a term.
    pub fn phases(&self, term: ChshTerm) -> (f64, f64) {
        let (a, b) = self.angles(term);
        (a, -b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChshTermResult {
    pub term: ChshTerm,
    pub a: f64,
    pub b: f64,
    pub e: f64,
    pub std_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChshResult {
    pub terms: Vec<ChshTermResult>,
    pub s: f64,
    pub std_err: f64,
}

impl ChshResult {
    pub fn violates_local_bound(&self) -> bool {
        self.s > 2.0
    }
}

/// S = |E(a,b) − E(a,b′) + E(a′,b) + E(a′,b′)|, errors added in quadrature.
pub fn chsh_s(settings: &ChshSettings, correlations: &BTreeMap<ChshTerm, Correlation>) -> Result<ChshResult, AnalysisError> {
    let mut terms = Vec::with_capacity(4);
    let (mut s, mut var) = (0.0, 0.0);
    for term in ChshTerm::ALL {
        let c = correlations.get(&term).ok_or(AnalysisError::MissingSetting(term))?;
        let (a, b) = settings.angles(term);
        s += term.sign() * c.value;
        var += c.std_err * c.std_err;
        terms.push(ChshTermResult {
            term,
            a,
            b,
            e: c.value,
            std_err: c.std_err,
        });
    }
    Ok(ChshResult {
        terms,
        s: s.abs(),
        std_err: var.sqrt(),
    })
}

/// Expected value of a count or mean, with its sampling variance.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Expectation {
    pub mean: f64,
    pub variance: f64,
}

/// Closed-form expectations for every observable in a scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedPoint {
    pub x: f64,
    pub phi_a: f64,
    pub phi_b: f64,
    pub singles: [Expectation; 4],
    pub gated: [Expectation; 4],
    pub side_minus: Expectation,
    pub side_plus: Expectation,
    pub local: [f64; 4],
    pub ungated_paired: [f64; 4],
    pub ungated_factorized: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticPrediction {
    pub config_hash: String,
    pub variable: ScanVariable,
    pub points: Vec<PredictedPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub observable: String,
    pub x: f64,
    pub analytic: f64,
    pub estimate: f64,
    pub sigma: f64,
    pub z: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UngatedRow {
    pub ports: PortPair,
    pub x: f64,
    pub factorized: f64,
    pub paired: f64,
    pub difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub config_hash: String,
    pub rows: Vec<ReportRow>,
    /// Informational: the two ungated estimators side by side.
    pub ungated: Vec<UngatedRow>,
    pub notes: Vec<String>,
    pub max_abs_z: f64,
    pub flagged: usize,
}

impl CompareReport {
    pub fn all_consistent(&self) -> bool {
        self.flagged == 0
    }
}

fn z_score(analytic: f64, estimate: f64, sigma: f64) -> f64 {
    let d = estimate - analytic;
    if d == 0.0 {
        0.0
    } else if sigma > 0.0 {
        d / sigma
    } else {
        d.signum() * f64::INFINITY
    }
}

pub const UNGATED_NOTE: &str = "ungated correlation: the factorized estimator <I_A><I_B> is the flat I0^2/4 \
classical separable-product value; the paired estimator <I_A I_B> keeps a half-visibility \
(1 -/+ V_p cos(phi_A + phi_B)/2)/4 fringe because the detuning cancels in the phase sum";

/// Compares closed-form expectations with a Monte Carlo scan run from the
/// same configuration.
pub fn compare_report(pred: &AnalyticPrediction, scan: &FringeScan) -> Result<CompareReport, AnalysisError> {
    if pred.config_hash != scan.config_hash {
        return Err(AnalysisError::ConfigMismatch {
            predicted: pred.config_hash.clone(),
            measured: scan.config_hash.clone(),
        });
    }
    if pred.points.len() != scan.points.len() || pred.points.iter().zip(&scan.points).any(|(p, s)| p.x != s.x) {
        return Err(AnalysisError::GridMismatch);
    }

    let mut rows = Vec::new();
    let mut push = |observable: String, x: f64, analytic: f64, estimate: f64, sigma: f64| {
        let z = z_score(analytic, estimate, sigma);
        rows.push(ReportRow {
            observable,
            x,
            analytic,
            estimate,
            sigma,
            z,
            flagged: z.is_nan() || z.abs() > Z_FLAG,
        });
    };
    let mut ungated = Vec::new();

    for (p, s) in pred.points.iter().zip(&scan.points) {
        for port in Port::ALL {
            let k = usize::from(port.number() - 1);
            let e = p.singles[k];
            push(format!("singles_ch{}", port.number()), p.x, e.mean, s.singles[k] as f64, e.variance.sqrt());
            push(
                format!("local_intensity_ch{}", port.number()),
                p.x,
                p.local[k],
                s.local_mc[k].mean,
                s.local_mc[k].std_err,
            );
        }
        for pair in PortPair::ALL {
            let k = pair as usize;
            let e = p.gated[k];
            push(format!("gated_{}", pair.label()), p.x, e.mean, s.gated[k] as f64, e.variance.sqrt());
            push(
                format!("ungated_paired_{}", pair.label()),
                p.x,
                p.ungated_paired[k],
                s.ungated_paired_mc[k].mean,
                s.ungated_paired_mc[k].std_err,
            );
            push(
                format!("ungated_factorized_{}", pair.label()),
                p.x,
                p.ungated_factorized[k],
                s.ungated_factorized_mc[k].mean,
                s.ungated_factorized_mc[k].std_err,
            );
            ungated.push(UngatedRow {
                ports: pair,
                x: p.x,
                factorized: p.ungated_factorized[k],
                paired: p.ungated_paired[k],
                difference: p.ungated_paired[k] - p.ungated_factorized[k],
            });
        }
        let side_m: u64 = s.side_minus.iter().sum();
        let side_p: u64 = s.side_plus.iter().sum();
        push("side_minus".into(), p.x, p.side_minus.mean, side_m as f64, p.side_minus.variance.sqrt());
        push("side_plus".into(), p.x, p.side_plus.mean, side_p as f64, p.side_plus.variance.sqrt());
    }

    let max_abs_z = rows.iter().map(|r| r.z.abs()).fold(0.0, f64::max);
    let flagged = rows.iter().filter(|r| r.flagged).count();
    Ok(CompareReport {
        config_hash: pred.config_hash.clone(),
        rows,
        ungated,
        notes: vec![UNGATED_NOTE.to_string()],
        max_abs_z,
        flagged,
    })
}
