//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails. Tolerances are pinned below.

use std::f64::consts::{PI, SQRT_2, TAU};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use franson::analysis::{self, fit_fringe, fit_fringe_frequency, ChshTerm, FringeScan, Observable, ScanVariable};
use franson::coincidence::{match_coincidences, match_slots, CoincidenceWindow};
use franson::config::{ExperimentConfig, TagFormat};
use franson::event_sim::TimeTagStream;
use franson::interferometer::{
    gated_correlation_mean, local_intensity, local_mean_intensity, ungated_correlation_mean, Port, PortPair,
    UngatedEstimator,
};
use franson::io;
use franson::pipeline::{self, CoincidenceSummary};
use franson::spdc_source::SpectralModel;
use franson::Parallelism;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CLOSED_FORM_TOL: f64 = 1e-12;
const CLOSED_FORM_DRAWS: usize = 10_000;
const SINGLES_MAX_VISIBILITY: f64 = 0.01;
const GATED_VISIBILITY_TOL: f64 = 0.02;
const GATED_MIN_VISIBILITY_NO_PUMP: f64 = 0.995;
const PHASE_OFFSET_TOL: f64 = 0.05;
const FREQUENCY_RATIO_TOL: f64 = 0.05;
const SIDE_MAX_VISIBILITY: f64 = 0.02;
const N_SIGMA: f64 = 3.0;
const CHSH_TOL: f64 = 0.05;
const MATCHER_TRIALS: usize = 100;
const MATCHER_MAX_TAGS: usize = 10_000;
const COMPARE_MAX_Z: f64 = 4.0;
/// Pump linewidth with V_p < 1/√2 at ΔL = 30 mm.
const BROAD_PUMP_GHZ: f64 = 4.0;
/// Held phase during the joint scans, so the fringe is seen to follow the sum.
const HELD_PHI_B: f64 = 0.7;

// Independent closed forms. Units: THz and ps, linewidths converted from GHz.
const C_MM_PER_PS: f64 = 0.299_792_458;

fn sigma_from_fwhm(fwhm: f64) -> f64 {
    fwhm / (2.0 * (2.0 * 2f64.ln()).sqrt())
}

fn oracle_tau(dl: f64) -> f64 {
    dl / C_MM_PER_PS
}

fn oracle_visibility(sigma_per_ps: f64, tau: f64) -> f64 {
    (-2.0 * PI * PI * sigma_per_ps * sigma_per_ps * tau * tau).exp()
}

fn oracle_vp(m: &SpectralModel, dl: f64) -> f64 {
    oracle_visibility(sigma_from_fwhm(m.pump_linewidth_ghz * 1e-3), oracle_tau(dl))
}

fn oracle_vloc(m: &SpectralModel, dl: f64) -> f64 {
    let sd = sigma_from_fwhm(m.delta_f_thz);
    let sp = sigma_from_fwhm(m.pump_linewidth_ghz * 1e-3) / 2.0;
    oracle_visibility((sd * sd + sp * sp).sqrt(), oracle_tau(dl))
}

fn oracle_vdiff(m: &SpectralModel, dl: f64) -> f64 {
    oracle_visibility(2.0 * sigma_from_fwhm(m.delta_f_thz), oracle_tau(dl))
}

/// Ports 1 and 3 carry the minus sign.
fn port_sign(p: Port) -> f64 {
    match p {
        Port::P1 | Port::P3 => -1.0,
        Port::P2 | Port::P4 => 1.0,
    }
}

fn oracle_paired(pa: f64, pb: f64, m: &SpectralModel, dl: f64, pp: PortPair) -> f64 {
    let (sa, sb) = (port_sign(pp.alice()), port_sign(pp.bob()));
    let vl = oracle_vloc(m, dl);
    (1.0 + sa * vl * pa.cos()
        + sb * vl * pb.cos()
        + 0.5 * sa * sb * (oracle_vp(m, dl) * (pa + pb).cos() + oracle_vdiff(m, dl) * (pa - pb).cos()))
        / 4.0
}

fn wrap(phase: f64) -> f64 {
    let p = phase.rem_euclid(TAU);
    if p > PI {
        p - TAU
    } else {
        p
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Scans shared between criteria.
struct Scans {
    phi_a: FringeScan,
    joint: FringeScan,
    joint_cfg: ExperimentConfig,
    joint_no_pump: FringeScan,
    synchronized: FringeScan,
}

fn base() -> ExperimentConfig {
    ExperimentConfig::default()
}

fn run_scans() -> Scans {
    let phi_a_cfg = ExperimentConfig {
        scan_variable: ScanVariable::PhiA,
        ..base()
    };
    let joint_cfg = ExperimentConfig {
        scan_variable: ScanVariable::Joint,
        phi_b_rad: HELD_PHI_B,
        ..base()
    };
    let no_pump = ExperimentConfig {
        pump_linewidth_ghz: 0.0,
        ..joint_cfg.clone()
    };
    let sync_cfg = ExperimentConfig {
        scan_variable: ScanVariable::Synchronized,
        ..base()
    };
    Scans {
        phi_a: pipeline::scan_event(&phi_a_cfg).expect("phi_a scan"),
        joint: pipeline::scan_event(&joint_cfg).expect("joint scan"),
        joint_no_pump: pipeline::scan_event(&no_pump).expect("joint scan without pump jitter"),
        synchronized: pipeline::scan_event(&sync_cfg).expect("synchronized scan"),
        joint_cfg,
    }
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc1);
    let mut worst = 0.0f64;
    for _ in 0..CLOSED_FORM_DRAWS {
        let m = SpectralModel::new(
            rng.random_range(300.0..450.0),
            rng.random_range(1e-4..2.0),
            rng.random_range(0.0..10.0),
        )
        .unwrap();
        let dl = rng.random_range(1.0..100.0);
        let (pa, pb) = (rng.random_range(-TAU..TAU), rng.random_range(-TAU..TAU));
        let phase = rng.random_range(-20.0..20.0);
        for port in Port::ALL {
            let s = port_sign(port);
            worst = worst.max((local_intensity(port, phase) - 0.5 * (1.0 + s * phase.cos())).abs());
            let base_phase = if port.number() <= 2 { pa } else { pb };
            let want = 0.5 * (1.0 + s * oracle_vloc(&m, dl) * base_phase.cos());
            worst = worst.max((local_mean_intensity(port, base_phase, &m, dl) - want).abs());
        }
        for pp in PortPair::ALL {
            let js = port_sign(pp.alice()) * port_sign(pp.bob());
            let gated = (1.0 + js * oracle_vp(&m, dl) * (pa + pb).cos()) / 8.0;
            worst = worst.max((gated_correlation_mean(pa, pb, &m, dl, pp) - gated).abs());
            let fact = 0.25
                * (1.0 + port_sign(pp.alice()) * oracle_vloc(&m, dl) * pa.cos())
                * (1.0 + port_sign(pp.bob()) * oracle_vloc(&m, dl) * pb.cos());
            let got = ungated_correlation_mean(pa, pb, &m, dl, pp, UngatedEstimator::Factorized);
            worst = worst.max((got - fact).abs());
            let got = ungated_correlation_mean(pa, pb, &m, dl, pp, UngatedEstimator::Paired);
            worst = worst.max((got - oracle_paired(pa, pb, &m, dl, pp)).abs());
        }
    }
    outcome(
        worst <= CLOSED_FORM_TOL,
        format!("{CLOSED_FORM_DRAWS} draws, max |error| = {worst:.2e} (tol {CLOSED_FORM_TOL:.0e})"),
    )
}

fn criterion_2(s: &Scans) -> Outcome {
    let vs: Vec<f64> = Port::ALL
        .iter()
        .map(|&p| fit_fringe(&s.phi_a, Observable::Singles(p)).unwrap().visibility)
        .collect();
    let worst = vs.iter().copied().fold(0.0, f64::max);
    outcome(
        worst <= SINGLES_MAX_VISIBILITY,
        format!("singles visibility per channel {vs:.4?}, max {worst:.4} (limit {SINGLES_MAX_VISIBILITY})"),
    )
}

fn criterion_3(s: &Scans) -> Outcome {
    let cfg = &s.joint_cfg;
    let vp = oracle_vp(&cfg.model(), cfg.delta_l_mm);
    let fit = fit_fringe(&s.joint, Observable::GatedEven).unwrap();
    let fit0 = fit_fringe(&s.joint_no_pump, Observable::GatedEven).unwrap();
    let (off, off0) = (wrap(fit.phase_offset), wrap(fit0.phase_offset));
    let pass = (fit.visibility - vp).abs() <= GATED_VISIBILITY_TOL
        && fit0.visibility >= GATED_MIN_VISIBILITY_NO_PUMP
        && off.abs() <= PHASE_OFFSET_TOL
        && off0.abs() <= PHASE_OFFSET_TOL;
    outcome(
        pass,
        format!(
            "V = {:.4} (oracle {vp:.4} ± {GATED_VISIBILITY_TOL}), V(pump 0) = {:.4} (>= {GATED_MIN_VISIBILITY_NO_PUMP}), \
             offsets {off:+.4} / {off0:+.4} rad (tol {PHASE_OFFSET_TOL})",
            fit.visibility, fit0.visibility
        ),
    )
}

fn criterion_4(s: &Scans) -> Outcome {
    let xs = s.synchronized.phases();
    let gated = fit_fringe_frequency(&xs, &s.synchronized.series(Observable::GatedEven), 0.5, 3.0).unwrap();
    let narrow = SpectralModel::new(370.0, 1e-6, 0.0).unwrap();
    let local: Vec<f64> = xs
        .iter()
        .map(|&x| local_mean_intensity(Port::P2, x, &narrow, 30.0))
        .collect();
    let local_fit = fit_fringe_frequency(&xs, &local, 0.5, 3.0).unwrap();
    let ratio = gated.frequency / local_fit.frequency;
    outcome(
        (ratio - 2.0).abs() <= FREQUENCY_RATIO_TOL,
        format!(
            "gated period {:.4} rad, narrowband local period {:.4} rad, ratio {ratio:.4} (2 ± {FREQUENCY_RATIO_TOL})",
            TAU / gated.frequency,
            TAU / local_fit.frequency
        ),
    )
}

fn criterion_5(s: &Scans) -> Outcome {
    let vm = fit_fringe(&s.joint, Observable::SideMinus).unwrap().visibility;
    let vpl = fit_fringe(&s.joint, Observable::SidePlus).unwrap().visibility;
    // pooled over every phase setting of the scan
    let [a, b, c] = [0, 1, 2].map(|k| s.joint.points.iter().map(|p| p.peak_areas[k]).sum::<u64>() as f64);
    let n = a + b + c;
    let ps = [0.25, 0.5, 0.25];
    let zs: Vec<f64> = [a, b, c]
        .iter()
        .zip(ps)
        .map(|(&k, p)| (k - n * p) / (n * p * (1.0 - p)).sqrt())
        .collect();
    let pass = vm <= SIDE_MAX_VISIBILITY && vpl <= SIDE_MAX_VISIBILITY && zs.iter().all(|z| z.abs() <= N_SIGMA);
    outcome(
        pass,
        format!(
            "side visibility {vm:.4} / {vpl:.4} (limit {SIDE_MAX_VISIBILITY}); peaks {a}:{b}:{c}, z = {zs:.2?} (limit {N_SIGMA})"
        ),
    )
}

fn criterion_6(s: &Scans) -> Outcome {
    let cfg = &s.joint_cfg;
    let m = cfg.model();
    let (mut worst_f, mut worst_p) = (0.0f64, 0.0f64);
    let mut lines = Vec::new();
    for p in &s.joint.points {
        for pp in PortPair::ALL {
            let k = pp as usize;
            let f = p.ungated_factorized_mc[k];
            let pr = p.ungated_paired_mc[k];
            worst_f = worst_f.max((f.mean - 0.25).abs() / f.std_err);
            let want = oracle_paired(p.phi_a, p.phi_b, &m, cfg.delta_l_mm, pp);
            worst_p = worst_p.max((pr.mean - want).abs() / pr.std_err);
            if pp == PortPair::P13 {
                lines.push(format!(
                    "      x = {:.3}: factorized {:.5} ± {:.5}, paired {:.5} ± {:.5} (oracle {want:.5})",
                    p.x, f.mean, f.std_err, pr.mean, pr.std_err
                ));
            }
        }
    }
    println!("    {}", analysis::UNGATED_NOTE);
    println!("    port pair 13 across the joint scan:");
    for l in &lines {
        println!("{l}");
    }
    outcome(
        worst_f <= N_SIGMA && worst_p <= N_SIGMA,
        format!(
            "factorized max |z| vs flat 0.25 = {worst_f:.2}, paired max |z| vs trig-average oracle = {worst_p:.2} (limit {N_SIGMA})"
        ),
    )
}

/// simulate → tag files → coincide → summary JSON → chsh, for one base config.
fn chsh_through_files(cfg: &ExperimentConfig, dir: &Path) -> pipeline::ChshReport {
    let mut summaries = Vec::new();
    for term in ChshTerm::ALL {
        let run_dir = dir.join(format!("{term:?}"));
        let run = pipeline::simulate(pipeline::chsh_manifest(cfg, term)).unwrap();
        io::write_run(&run_dir, run.manifest, &run.streams).unwrap();
        let loaded = io::read_run(&run_dir).unwrap();
        let summary = pipeline::coincide(&loaded.manifest, &loaded.streams).unwrap();
        let path = run_dir.join("coincidences.json");
        io::write_json(&path, &summary).unwrap();
        summaries.push(io::read_json::<CoincidenceSummary>(&path).unwrap());
    }
    pipeline::chsh_from_summaries(cfg, &summaries).unwrap()
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut parts = Vec::new();
    let mut pass = true;
    for (k, pump) in [0.0, 1.0].into_iter().enumerate() {
        let cfg = ExperimentConfig {
            pump_linewidth_ghz: pump,
            ..base()
        };
        let want = 2.0 * SQRT_2 * oracle_vp(&cfg.model(), cfg.delta_l_mm);
        let r = chsh_through_files(&cfg, &dir.path().join(format!("p{k}")));
        pass &= (r.result.s - want).abs() <= CHSH_TOL;
        parts.push(format!("pump {pump} GHz: S = {:.4} ± {:.4} (oracle {want:.4})", r.result.s, r.result.std_err));
    }
    let cfg = ExperimentConfig {
        pump_linewidth_ghz: BROAD_PUMP_GHZ,
        ..base()
    };
    let vp = oracle_vp(&cfg.model(), cfg.delta_l_mm);
    let r = chsh_through_files(&cfg, &dir.path().join("broad"));
    pass &= vp < 1.0 / SQRT_2 && r.result.s < 2.0;
    parts.push(format!("pump {BROAD_PUMP_GHZ} GHz (V_p = {vp:.4}): S = {:.4} < 2", r.result.s));
    outcome(pass, parts.join("; "))
}

/// Every A tag in time order takes the earliest unmatched B tag inside the
/// window; quadratic scan over all B tags.
fn brute_force(a: &[u64], b: &[u64], w: &CoincidenceWindow) -> Vec<(usize, usize)> {
    let mut used = vec![false; b.len()];
    let mut out = Vec::new();
    for (i, &ta) in a.iter().enumerate() {
        for (j, &tb) in b.iter().enumerate() {
            let d = ta as i64 - tb as i64 - w.offset_ps;
            if !used[j] && d.abs() <= w.half_width_ps {
                used[j] = true;
                out.push((i, j));
                break;
            }
        }
    }
    out
}

fn random_tags(rng: &mut ChaCha8Rng, n: usize, span: u64) -> Vec<u64> {
    let mut v: Vec<u64> = (0..n).map(|_| rng.random_range(0..span)).collect();
    v.sort_unstable();
    v.dedup();
    v
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc8);
    let mut mismatches = 0;
    let mut total_matches = 0;
    for trial in 0..MATCHER_TRIALS {
        let n = if trial % 10 == 0 {
            MATCHER_MAX_TAGS
        } else {
            rng.random_range(1..=MATCHER_MAX_TAGS)
        };
        let hw = rng.random_range(1..60i64);
        let offset = rng.random_range(-150..150i64);
        let w = CoincidenceWindow::new(offset, hw).unwrap();
        let (a, b) = match trial % 4 {
            // sparse random streams
            0 => (random_tags(&mut rng, n, 1_000 * n as u64), random_tags(&mut rng, n, 1_000 * n as u64)),
            // dense: many candidates per window
            1 => (random_tags(&mut rng, n, 10 * n as u64), random_tags(&mut rng, n, 10 * n as u64)),
            // B placed exactly on or just past the window edges
            _ => {
                // shifted so every edge placement stays non-negative
                let a: Vec<u64> = random_tags(&mut rng, n, 1_000 * n as u64).into_iter().map(|t| t + 500).collect();
                let b: Vec<u64> = a
                    .iter()
                    .map(|&t| {
                        let edge = [-hw - 1, -hw, hw, hw + 1, 0][rng.random_range(0..5)];
                        (t as i64 - offset - edge) as u64
                    })
                    .collect();
                let mut b = b;
                b.sort_unstable();
                b.dedup();
                (a, b)
            }
        };
        let sa = TimeTagStream::new(1, a.clone());
        let sb = TimeTagStream::new(3, b.clone());
        let got = match_coincidences(&sa, &sb, &w).unwrap();
        let want = brute_force(&a, &b, &w);
        total_matches += want.len();
        if got.pairs != want || got.count != want.len() {
            mismatches += 1;
        }
        // the multi-window matcher with one window is the same matcher
        if match_slots(&sa, &sb, &[w]).unwrap()[0].pairs != want {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{MATCHER_TRIALS} stream pairs (n <= {MATCHER_MAX_TAGS}), {total_matches} matches, {mismatches} mismatches"),
    )
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut ok = true;
    for format in [TagFormat::Csv, TagFormat::Binary] {
        let cfg = ExperimentConfig {
            tag_format: format,
            ..base()
        };
        let mut outputs = Vec::new();
        for (k, par) in [Parallelism::default(), Parallelism::default(), Parallelism::Sequential]
            .into_iter()
            .enumerate()
        {
            let dir = tmp.path().join(format!("{format:?}{k}"));
            let run = pipeline::simulate_with(pipeline::run_manifest(&cfg), par).unwrap();
            io::write_run(&dir, run.manifest, &run.streams).unwrap();
            let loaded = io::read_run(&dir).unwrap();
            let s = pipeline::coincide(&loaded.manifest, &loaded.streams).unwrap();
            outputs.push((dir_bytes(&dir), io::to_json_string(&s)));
        }
        ok &= outputs.windows(2).all(|w| w[0] == w[1]);
    }
    let small = ExperimentConfig {
        n_pairs: 100_000,
        ..base()
    };
    let c1 = io::to_json_string(&pipeline::chsh(&small).unwrap().0);
    let c2 = io::to_json_string(&pipeline::chsh(&small).unwrap().0);
    let scan = ExperimentConfig {
        n_pairs: 50_000,
        ..base()
    };
    let s1 = io::to_json_string(&pipeline::scan_event_with(&scan, Parallelism::Sequential).unwrap());
    let s2 = io::to_json_string(&pipeline::scan_event(&scan).unwrap());
    ok &= c1 == c2 && s1 == s2;
    outcome(
        ok,
        "tag files (csv, binary), coincidence, chsh and scan JSON identical across repeated and sequential runs",
    )
}

fn criterion_10(s: &Scans) -> Outcome {
    let report = pipeline::compare(&s.joint_cfg, &s.joint).unwrap();
    let worst = report
        .rows
        .iter()
        .max_by(|a, b| a.z.abs().total_cmp(&b.z.abs()))
        .unwrap();
    outcome(
        report.rows.iter().all(|r| r.z.abs() <= COMPARE_MAX_Z),
        format!(
            "{} rows, max |z| = {:.2} ({} at x = {:.3}) (limit {COMPARE_MAX_Z})",
            report.rows.len(),
            report.max_abs_z,
            worst.observable,
            worst.x
        ),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut results: Vec<(u8, &str, Outcome)> = Vec::new();
    let mut report = |id: u8, name: &'static str, o: Outcome| {
        println!("[{}] {id:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };

    report(1, "closed-form fidelity", criterion_1());
    report(8, "matcher vs brute force", criterion_8());
    report(9, "determinism", criterion_9());
    let scans = run_scans();
    report(2, "uniform local intensities", criterion_2(&scans));
    report(3, "nonlocal gated fringe", criterion_3(&scans));
    report(4, "fringe doubling", criterion_4(&scans));
    report(5, "slot selection", criterion_5(&scans));
    report(6, "ungated estimators", criterion_6(&scans));
    report(7, "CHSH violation", criterion_7());
    report(10, "analytic vs event mode", criterion_10(&scans));

    let failed: Vec<u8> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} passed in {:.1} s",
        results.len() - failed.len(),
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
