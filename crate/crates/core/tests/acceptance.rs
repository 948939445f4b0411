//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! `cargo test --test acceptance` runs everything; trailing numbers select criteria
//! (`cargo test --test acceptance -- 1 2 9`). Set ACCEPTANCE_STRICT=1 to turn any FAIL into a
//! nonzero exit status.

use std::cell::OnceCell;
use std::time::Instant;

use faer::{c64, Mat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rydswitch::cli;
use rydswitch::compare::{compare_methods, MethodInputs};
use rydswitch::config::{RunConfig, Task};
use rydswitch::instanton::{barriers, noise_covariance, BarrierRow, GmamSettings};
use rydswitch::large_deviation::{bimodality_report, inverse_legendre, legendre, mean_rate, scgf, scgf_adaptive, KinkSettings};
use rydswitch::linalg::{hermitian_eigenvalues, trace_prod};
use rydswitch::meanfield::{bistable_triple, find_fixed_points, integrate_mf, phase_diagram, BlochState, Regime};
use rydswitch::model::{apply_lindblad, DickeBasis, Operator, DEFAULT_N_CAP};
use rydswitch::qjmc::{
    run_ensemble, switching_sweep, tau_scaling, waiting_time_stats, EnsembleConfig, JumpScheme, SwitchStats,
    SwitchingConfig, TauScaling,
};
use rydswitch::spectral::{
    excitation_density, extract_mm, full_spectrum, gap_scaling, propagate_master, pure_state, ratio_scaling,
    slow_spectrum, RatioScaling,
};
use rydswitch::ModelParams;

const CAP: usize = DEFAULT_N_CAP;
const QJMC_DELTAS: [f64; 4] = [3.2, 3.4, 3.6, 3.8];
const QJMC_SIZES: [usize; 6] = [12, 16, 20, 24, 28, 32];
const EXTRA_SIZES: [usize; 1] = [8];
const RATIO_SIZES: [usize; 7] = [12, 16, 20, 24, 28, 32, 36];
const SEED: u64 = 20240601;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

/// Results shared between criteria, computed on first use.
#[derive(Default)]
struct Shared {
    switching: OnceCell<Vec<(SwitchStats, TauScaling)>>,
    barriers: OnceCell<Vec<BarrierRow>>,
    ratios: OnceCell<Vec<RatioScaling>>,
}

impl Shared {
    fn switching(&self) -> &[(SwitchStats, TauScaling)] {
        self.switching.get_or_init(|| {
            let cfg = SwitchingConfig { target_waits: 40, max_time: 1.5e6, ..Default::default() };
            QJMC_DELTAS
                .iter()
                .map(|&d| {
                    let template = ModelParams::standard(1, d);
                    let mut runs = switching_sweep(&template, &QJMC_SIZES, &cfg, SEED).unwrap();
                    let mut stats = waiting_time_stats(&runs);
                    // budget-capped at the top end: fit needs 4 sizes, so add smaller ones
                    if stats.fit_dark.is_none() || stats.fit_bright.is_none() {
                        runs.extend(switching_sweep(&template, &EXTRA_SIZES, &cfg, SEED).unwrap());
                        runs.sort_by_key(|r| r.n_atoms);
                        stats = waiting_time_stats(&runs);
                    }
                    let taus = tau_scaling(&stats);
                    (stats, taus)
                })
                .collect()
        })
    }

    fn barriers(&self) -> &[BarrierRow] {
        self.barriers.get_or_init(|| {
            let st = GmamSettings::default();
            (0..=10).map(|i| barriers(&ModelParams::standard(1, 3.1 + 0.1 * i as f64), &st).unwrap().0).collect()
        })
    }

    fn ratios(&self) -> &[RatioScaling] {
        self.ratios.get_or_init(|| {
            QJMC_DELTAS.iter().map(|&d| ratio_scaling(&ModelParams::standard(1, d), &RATIO_SIZES, CAP).unwrap()).collect()
        })
    }
}

fn c1_phase_diagram() -> Verdict {
    let start = Instant::now();
    let grid: Vec<f64> = (0..=300).map(|i| 2.0 + 0.01 * i as f64).collect();
    let pd = phase_diagram(&grid, &ModelParams::standard(1, 0.0)).unwrap();
    let fps = find_fixed_points(&ModelParams::standard(1, 3.4)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let stable = fps.iter().filter(|f| f.is_stable()).count();
    let unstable = fps.len() - stable;
    let mut regimes: Vec<Regime> = pd.rows.iter().map(|r| r.label.regime).collect();
    regimes.dedup();
    let b = &pd.boundaries;
    let pass = b.len() == 2
        && b[0] > 2.9
        && b[0] < 3.1
        && b[1] > 4.1
        && b[1] < 4.3
        && regimes == [Regime::MonostableI, Regime::Bistable, Regime::MonostableII]
        && stable == 2
        && unstable == 1
        && secs < 1.0;
    verdict(pass, format!("boundaries {b:.4?}, regimes {regimes:?}, {stable} stable + {unstable} unstable at 3.4, {secs:.3} s"))
}

/// Optical Bloch equations for (1, sx, sy, sz) with H = (Omega sx - Delta sz)/2 and decay gamma.
fn bloch_generator(omega: f64, delta: f64, gamma: f64) -> Mat<f64> {
    let rows = [
        [0.0, 0.0, 0.0, 0.0],
        [0.0, -gamma / 2.0, delta, 0.0],
        [0.0, -delta, -gamma / 2.0, -omega],
        [-gamma, 0.0, omega, -gamma],
    ];
    Mat::from_fn(4, 4, |i, j| rows[i][j])
}

fn c2_single_atom() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for (omega, delta) in [(1.5, 3.4), (1.5, 0.0), (0.7, -2.0), (3.0, 1.1)] {
        let p = ModelParams { n_atoms: 1, rabi: omega, detuning: delta, interaction: 0.0, decay: 1.0 };
        let got = full_spectrum(&p).unwrap().eigenvalues;
        let mut want: Vec<c64> = bloch_generator(omega, delta, 1.0).eigenvalues().unwrap();
        // pair each computed eigenvalue with its nearest unused oracle value
        for z in &got {
            let (k, d) = want.iter().enumerate().map(|(k, w)| (k, (w - z).norm())).min_by(|a, b| a.1.partial_cmp(&b.1).unwrap()).unwrap();
            worst = worst.max(d);
            want.remove(k);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(worst < 1e-9 && secs < 1.0, format!("max eigenvalue deviation {worst:.2e}, {secs:.3} s"))
}

fn c3_gap_scaling() -> Verdict {
    let sizes: Vec<usize> = (8..=36).step_by(4).collect();
    let fits: Vec<(f64, f64, f64)> = [2.4, 3.4, 4.4]
        .iter()
        .map(|&d| {
            let g = gap_scaling(&ModelParams::standard(1, d), &sizes, CAP).unwrap();
            (d, g.a, g.r2)
        })
        .collect();
    let pass = fits[0].1.abs() < 0.02 && fits[1..].iter().all(|&(_, a, r2)| a < -0.05 && r2 > 0.98);
    let txt: Vec<String> = fits.iter().map(|(d, a, r2)| format!("delta {d}: a = {a:.4}, R2 = {r2:.4}")).collect();
    verdict(pass, txt.join("; "))
}

fn c4_metastable_manifold() -> Verdict {
    let (dark, _, bright) = bistable_triple(&ModelParams::standard(1, 3.4)).unwrap();
    let mut errors = Vec::new();
    let mut ok = true;
    let mut notes = Vec::new();
    let mut last = (0.0, 0.0);
    for n in [16, 28, 36] {
        let spec = slow_spectrum(&ModelParams::standard(n, 3.4), CAP).unwrap();
        let mm = extract_mm(&spec).unwrap();
        errors.push(mm.mm_error);
        last = (mm.ne_plus, mm.ne_minus);
        if n == 28 {
            let ov = trace_prod(&mm.rho_plus, &mm.rho_minus).norm();
            let tr = [&mm.rho_plus, &mm.rho_minus].map(|r| (rydswitch::linalg::trace(r) - c64::new(1.0, 0.0)).norm());
            let min_eig = [&mm.rho_plus, &mm.rho_minus]
                .map(|r| hermitian_eigenvalues(r).unwrap().into_iter().fold(f64::INFINITY, f64::min));
            ok &= ov < 1e-10 && tr.iter().all(|t| *t < 1e-10) && min_eig.iter().all(|e| *e > -1e-10);
            notes.push(format!("N=28: overlap {ov:.1e}, trace err {:.1e}, min eig {:.1e}", tr[0].max(tr[1]), min_eig[0].min(min_eig[1])));
        }
    }
    ok &= errors[1] < errors[0];
    let dev = ((last.0 - dark.ne()).abs(), (last.1 - bright.ne()).abs());
    ok &= dev.0 < 0.05 && dev.1 < 0.05;
    notes.push(format!("mm_error N=16/28/36: {:.3e}/{:.3e}/{:.3e}", errors[0], errors[1], errors[2]));
    notes.push(format!("N=36 ne+ {:.4} (MF {:.4}), ne- {:.4} (MF {:.4})", last.0, dark.ne(), last.1, bright.ne()));
    verdict(ok, notes.join("; "))
}

fn c5_occupation_ratio() -> Verdict {
    let fits: Vec<(f64, f64, f64)> = [3.2, 3.4, 3.8]
        .iter()
        .map(|&d| {
            let r = ratio_scaling(&ModelParams::standard(1, d), &RATIO_SIZES, CAP).unwrap();
            let f = r.fit.unwrap();
            (d, f.slope, f.r2)
        })
        .collect();
    let linear = fits.iter().all(|f| f.2 > 0.95);
    let signs: Vec<f64> = fits.iter().map(|f| f.1.signum()).collect();
    let flips = signs[0] < 0.0 && signs[2] > 0.0 && signs.windows(2).all(|w| w[1] >= w[0]);
    let txt: Vec<String> = fits.iter().map(|(d, s, r2)| format!("delta {d}: slope {s:.4}, R2 {r2:.4}")).collect();
    verdict(linear && flips, txt.join("; "))
}

fn c6_large_deviations() -> Verdict {
    let mut ok = true;
    let mut notes = Vec::new();
    let mut theta0_worst: f64 = 0.0;
    for (d, n) in [(2.4, 24), (3.4, 24), (3.4, 28)] {
        let p = ModelParams::standard(n, d);
        let curve = scgf_adaptive(&p, -0.5, 0.5, 101, 5, CAP).unwrap();
        let i0 = curve.s_grid.iter().position(|s| *s == 0.0).unwrap();
        theta0_worst = theta0_worst.max(curve.theta[i0].abs());
        let (rate, _) = mean_rate(&p, 1e-3, CAP).unwrap();
        let ne_ss = excitation_density(slow_spectrum(&p, CAP).unwrap().rho_ss());
        let rel = (rate - n as f64 * ne_ss).abs() / (n as f64 * ne_ss);
        let rep = bimodality_report(&legendre(&curve).unwrap(), KinkSettings::default());
        let shape_ok = if d < 3.0 {
            rep.n_maxima == 1 && (rep.maxima[0] - rate).abs() < 0.01 * rate
        } else {
            let (dark, _, bright) = bistable_triple(&p).unwrap();
            let want = [n as f64 * dark.ne(), n as f64 * bright.ne()];
            rep.n_maxima == 2 && rep.maxima.iter().zip(want).all(|(m, w)| (m - w).abs() < 0.1 * w)
        };
        ok &= rel < 1e-3 && shape_ok;
        notes.push(format!("N={n} delta={d}: rate err {rel:.1e}, maxima {:.3?}", rep.maxima));
    }
    ok &= theta0_worst < 1e-9;
    notes.insert(0, format!("max |theta(0)| {theta0_worst:.1e}"));
    verdict(ok, notes.join("; "))
}

fn c7_unraveling() -> Verdict {
    let p = ModelParams::standard(4, 3.4);
    let checkpoints: Vec<f64> = (1..=20).map(|k| 2.0 * k as f64).collect();
    let cfg = EnsembleConfig {
        n_traj: 2000,
        checkpoints: checkpoints.clone(),
        dt: 0.005,
        scheme: JumpScheme::Bernoulli,
        seed: SEED,
        rate_from: 20.0,
        keep_density: false,
    };
    let ens = run_ensemble(&p, &cfg).unwrap();
    let mut rho0_psi = vec![c64::new(0.0, 0.0); 5];
    rho0_psi[0] = c64::new(1.0, 0.0);
    let exact = propagate_master(&p, &pure_state(DickeBasis::new(4), &rho0_psi), &checkpoints).unwrap();
    let z: Vec<f64> = exact.iter().enumerate().map(|(k, r)| (ens.mean_ne[k] - excitation_density(r)).abs() / ens.se_ne[k]).collect();
    let worst = z.iter().cloned().fold(0.0, f64::max);
    let target = 4.0 * excitation_density(full_spectrum(&p).unwrap().rho_ss());
    let r = ens.photon_rate;
    let rz = (r.mean - target).abs() / r.se;
    verdict(
        worst < 3.0 && rz < 3.0,
        format!("max |z| of n_e over 20 checkpoints {worst:.2}; jump rate {:.4} +- {:.4} vs {target:.4} (z = {rz:.2})", r.mean, r.se),
    )
}

fn c8_waiting_times(sh: &Shared) -> Verdict {
    let all = sh.switching();
    let mut notes = Vec::new();
    let mut vd = Vec::new();
    let mut vb = Vec::new();
    for (stats, _) in all {
        let used: Vec<usize> = stats.rows.iter().filter(|r| r.dark_ok && r.bright_ok).map(|r| r.n_atoms).collect();
        let fd = stats.fit_dark;
        let fb = stats.fit_bright;
        notes.push(format!(
            "delta {}: sizes {:?}, v_d {} (R2 {}), v_b {} (R2 {})",
            stats.delta,
            used,
            fd.map_or("-".into(), |f| format!("{:.4}", f.a)),
            fd.map_or("-".into(), |f| format!("{:.3}", f.r2)),
            fb.map_or("-".into(), |f| format!("{:.4}", f.a)),
            fb.map_or("-".into(), |f| format!("{:.3}", f.r2)),
        ));
        vd.push(fd);
        vb.push(fb);
    }
    let at34 = 1;
    let fits_ok = matches!((vd[at34], vb[at34]), (Some(d), Some(b)) if d.r2 > 0.9 && b.r2 > 0.9 && b.a > d.a);
    let trend = vd.iter().chain(&vb).all(|f| f.is_some()) && {
        let d: Vec<f64> = vd.iter().map(|f| f.unwrap().a).collect();
        let b: Vec<f64> = vb.iter().map(|f| f.unwrap().a).collect();
        d.windows(2).all(|w| w[1] > w[0]) && b.windows(2).all(|w| w[1] < w[0])
    };
    verdict(fits_ok && trend, notes.join("; "))
}

fn c9_instantons(sh: &Shared) -> Verdict {
    let start = Instant::now();
    let st = GmamSettings::default();
    let mut ok = true;
    let mut worst_h: f64 = 0.0;
    let mut worst_down: f64 = 0.0;
    let mut min_inc = f64::INFINITY;
    let mut slowest: f64 = 0.0;
    let mut rows = Vec::new();
    for i in 0..=10 {
        let d = 3.1 + 0.1 * i as f64;
        let t = Instant::now();
        let (row, dp, bp) = barriers(&ModelParams::standard(1, d), &st).unwrap();
        slowest = slowest.max(t.elapsed().as_secs_f64());
        worst_h = worst_h.max(row.energy_residual);
        for path in [&dp, &bp] {
            worst_down = worst_down.max(path.downhill_action().abs());
            min_inc = min_inc.min(path.increments.iter().cloned().fold(f64::INFINITY, f64::min));
        }
        ok &= row.converged && row.phi_d >= 0.0 && row.phi_b >= 0.0;
        rows.push(row);
    }
    let _ = sh.barriers.set(rows.clone());
    let d_up = rows.windows(2).all(|w| w[1].phi_d > w[0].phi_d);
    let b_down = rows.windows(2).all(|w| w[1].phi_b < w[0].phi_b);
    let x: Vec<f64> = rows.iter().map(|r| r.delta).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.phi_db).collect();
    let cross = rydswitch::linalg::zero_crossing(&x, &y);
    ok &= worst_h < 1e-6 && min_inc >= -1e-12 && worst_down < 1e-8 && d_up && b_down && cross.is_some() && slowest < 60.0;
    verdict(
        ok,
        format!(
            "all converged: {}; max |H| {worst_h:.1e}; min dS {min_inc:.1e}; downhill action {worst_down:.1e}; phi_d up {d_up}, phi_b down {b_down}; crossing {:?}; slowest delta {slowest:.1} s (total {:.0} s)",
            rows.iter().all(|r| r.converged),
            cross.map(|c| (c * 1e4).round() / 1e4),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn c10_cross_method(sh: &Shared) -> Verdict {
    let sw = sh.switching();
    let inputs = MethodInputs {
        ratios: sh.ratios().to_vec(),
        gaps: vec![],
        switching: sw.iter().map(|s| s.0.clone()).collect(),
        taus: sw.iter().map(|s| (s.0.delta, s.1.clone())).collect(),
        barriers: sh.barriers().iter().filter(|b| QJMC_DELTAS.iter().any(|d| (d - b.delta).abs() < 1e-9)).cloned().collect(),
    };
    let t = compare_methods(&inputs);
    let rows: Vec<String> = t
        .rows
        .iter()
        .map(|r| {
            let f = |v: Option<f64>| v.map_or("-".into(), |x| format!("{x:+.4}"));
            format!("delta {}: ED {} QJMC {} OPA {} tau {}", r.delta, f(r.phi_db_spectral), f(r.phi_db_qjmc), f(r.phi_db_instanton), f(r.tau_exponent_qjmc))
        })
        .collect();
    let all_complete = t.rows.iter().all(|r| r.complete);
    let signs = all_complete && t.signs_agree();
    let spread = t.crossing_spread();
    let crossings = [t.crossing_spectral, t.crossing_qjmc, t.crossing_instanton];
    let tau_ok = t.tau_peak_qjmc.is_some_and(|p| crossings.iter().flatten().all(|c| (p - c).abs() <= 0.3));
    let pass = signs && spread.is_some_and(|s| s <= 0.2) && tau_ok;
    verdict(
        pass,
        format!(
            "{}; signs agree {signs}; crossings ED {:?} QJMC {:?} OPA {:?} (spread {:?}); tau peak {:?}",
            rows.join("; "),
            t.crossing_spectral,
            t.crossing_qjmc,
            t.crossing_instanton,
            spread,
            t.tau_peak_qjmc
        ),
    )
}

fn random_density(d: usize, rng: &mut ChaCha8Rng) -> Mat<c64> {
    let a = Mat::<c64>::from_fn(d, d, |_, _| c64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    let rho = &a * a.adjoint();
    let tr = rydswitch::linalg::trace(&rho);
    Mat::from_fn(d, d, |i, j| rho[(i, j)] / tr)
}

fn c11_properties() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut notes = Vec::new();
    let mut ok = true;

    // trace and Hermiticity preservation of the generator
    let (mut tr_worst, mut herm_worst): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let n = rng.random_range(1..=12);
        let p = ModelParams::standard(n, rng.random_range(2.0..5.0));
        let rho = Operator::new(DickeBasis::new(n), random_density(n + 1, &mut rng)).unwrap();
        let l = apply_lindblad(&rho, &p).unwrap();
        tr_worst = tr_worst.max(l.trace().norm());
        herm_worst = herm_worst.max(l.hermiticity_defect());
    }
    ok &= tr_worst < 1e-12 && herm_worst < 1e-12;
    notes.push(format!("trace {tr_worst:.1e}, hermiticity {herm_worst:.1e}"));

    // eigenvalues come in conjugate pairs
    let mut pair_worst: f64 = 0.0;
    for n in [3, 6, 9] {
        let e = full_spectrum(&ModelParams::standard(n, 3.4)).unwrap().eigenvalues;
        for z in &e {
            let best = e.iter().map(|w| (w - z.conj()).norm()).fold(f64::INFINITY, f64::min);
            pair_worst = pair_worst.max(best);
        }
    }
    ok &= pair_worst < 1e-9;
    notes.push(format!("conjugate pairs {pair_worst:.1e}"));

    // mean-field flow stays in the unit ball; noise covariance is PSD there
    let mut radius: f64 = 0.0;
    let mut min_eig = f64::INFINITY;
    for _ in 0..200 {
        let v = loop {
            let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            if v.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
                break v;
            }
        };
        let c = noise_covariance(&v);
        let m = Mat::<f64>::from_fn(3, 3, |i, j| c[i][j]);
        let eig = m.self_adjoint_eigenvalues(faer::Side::Lower).unwrap();
        min_eig = min_eig.min(eig.into_iter().fold(f64::INFINITY, f64::min));
        let tr = integrate_mf(BlochState::from_array(v), &ModelParams::standard(1, rng.random_range(2.0..5.0)), 20.0, 0.01).unwrap();
        radius = radius.max(tr.states.iter().map(|s| s.radius()).fold(0.0, f64::max));
    }
    ok &= radius <= 1.0 + 1e-9 && min_eig >= -1e-12;
    notes.push(format!("max radius {radius:.10}, min covariance eigenvalue {min_eig:.1e}"));

    // Legendre involution on a computed SCGF
    let p = ModelParams::standard(8, 2.4);
    let s: Vec<f64> = (0..=100).map(|i| -0.5 + 0.01 * i as f64).collect();
    let curve = scgf(&p, &s, CAP).unwrap();
    let rf = legendre(&curve).unwrap();
    let inv = (2..s.len() - 2).map(|i| (inverse_legendre(&rf, s[i]) - curve.theta[i]).abs()).fold(0.0, f64::max);
    ok &= inv < 1e-4;
    notes.push(format!("Legendre involution {inv:.1e}"));

    // byte-identical reruns of the command-line pipeline
    let base = std::env::temp_dir().join(format!("rydswitch-acceptance-{}", std::process::id()));
    let mut cfg = RunConfig::from_json(
        r#"{"sweep": {"n_list": [4, 6, 8], "delta_list": [3.4]}, "seed": 3,
            "trajectories": {"switching": {"max_time": 2000, "target_waits": 5, "chunk": 500}, "sample_t_final": 20},
            "instanton": {"gmam": {"k_points": 40, "shooting_dirs": 50}}}"#,
    )
    .unwrap();
    let mut hashes = Vec::new();
    for run in ["a", "b"] {
        cfg.output_dir = base.join(run);
        let report = cli::run(&cfg, Task::Compare).unwrap();
        ok &= !report.failed();
        let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(cfg.output_dir.join("manifest.json")).unwrap()).unwrap();
        hashes.push(m["files"].clone());
    }
    let same = hashes[0] == hashes[1] && hashes[0].as_object().is_some_and(|o| !o.is_empty());
    ok &= same;
    notes.push(format!("reruns identical {same}"));
    let _ = std::fs::remove_dir_all(&base);

    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 120.0;
    notes.push(format!("{secs:.1} s"));
    verdict(ok, notes.join("; "))
}

fn main() {
    rydswitch::init_sequential_linalg();
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |k: u32| selected.is_empty() || selected.contains(&k);
    let sh = Shared::default();
    let criteria: Vec<(u32, &str, Box<dyn Fn(&Shared) -> Verdict>)> = vec![
        (1, "mean-field phase diagram", Box::new(|_| c1_phase_diagram())),
        (2, "single-atom spectrum oracle", Box::new(|_| c2_single_atom())),
        (3, "gap scaling", Box::new(|_| c3_gap_scaling())),
        (4, "metastable manifold", Box::new(|_| c4_metastable_manifold())),
        (5, "occupation ratio scaling", Box::new(|_| c5_occupation_ratio())),
        (6, "large-deviation functions", Box::new(|_| c6_large_deviations())),
        (7, "quantum-jump unraveling", Box::new(|_| c7_unraveling())),
        (8, "waiting-time scaling", Box::new(c8_waiting_times)),
        (9, "instanton barriers", Box::new(c9_instantons)),
        (10, "cross-method consistency", Box::new(c10_cross_method)),
        (11, "property suites", Box::new(|_| c11_properties())),
    ];
    let mut failed = 0;
    for (k, name, f) in criteria.iter().filter(|c| wanted(c.0)) {
        let start = Instant::now();
        let v = f(&sh);
        let secs = start.elapsed().as_secs_f64();
        if !v.pass {
            failed += 1;
        }
        println!("{} criterion {k} ({name}) [{secs:.1} s]: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    println!("acceptance: {failed} failing criteria");
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
