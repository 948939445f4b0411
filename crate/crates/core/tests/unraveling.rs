use rydswitch::linalg::trace_norm_hermitian;
use rydswitch::model::DickeBasis;
use rydswitch::qjmc::{run_ensemble, EnsembleConfig, JumpScheme};
use rydswitch::spectral::{propagate_master, pure_state};
use rydswitch::ModelParams;

use faer::{c64, Mat};

fn ground(d: usize) -> Vec<c64> {
    let mut v = vec![c64::new(0.0, 0.0); d];
    v[0] = c64::new(1.0, 0.0);
    v
}

fn check(n: usize, scheme: JumpScheme, dt: f64) {
    let p = ModelParams::standard(n, 3.4);
    let checkpoints: Vec<f64> = (1..=8).map(|k| k as f64).collect();
    let cfg = EnsembleConfig { n_traj: 1500, checkpoints: checkpoints.clone(), dt, scheme, seed: 42, rate_from: 0.0, keep_density: true };
    let ens = run_ensemble(&p, &cfg).unwrap();
    let rho0 = pure_state(DickeBasis::new(n), &ground(n + 1));
    let exact = propagate_master(&p, &rho0, &checkpoints).unwrap();
    for (k, r) in exact.iter().enumerate() {
        let diff: Mat<c64> = Mat::from_fn(n + 1, n + 1, |i, j| ens.density[k][(i, j)] - r[(i, j)]);
        let td = 0.5 * trace_norm_hermitian(&diff).unwrap();
        assert!(td < 5.0 * ens.density_se[k], "N={n} {scheme:?} t={}: {td} vs se {}", checkpoints[k], ens.density_se[k]);
    }
}

#[test]
fn ensemble_density_matches_master_equation() {
    for n in [2, 4, 6] {
        check(n, JumpScheme::Bernoulli, 0.02 / n as f64);
        check(n, JumpScheme::WaitingTime, 0.02);
    }
}

#[test]
fn photon_rate_matches_steady_population() {
    let p = ModelParams::standard(4, 3.4);
    let ss = rydswitch::spectral::full_spectrum(&p).unwrap();
    let target = 4.0 * rydswitch::spectral::excitation_density(ss.rho_ss());
    let cfg = EnsembleConfig {
        n_traj: 400,
        checkpoints: vec![60.0],
        dt: 0.02,
        scheme: JumpScheme::WaitingTime,
        seed: 9,
        rate_from: 10.0,
        keep_density: false,
    };
    let ens = run_ensemble(&p, &cfg).unwrap();
    let r = ens.photon_rate;
    assert!((r.mean - target).abs() < 3.0 * r.se, "{} +- {} vs {target}", r.mean, r.se);
}
