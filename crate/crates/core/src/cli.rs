//! Task orchestration behind the command line: sweeps, artifacts, manifest.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::compare::{compare_methods, MethodInputs};
use crate::config::{RunConfig, Task};
use crate::error::{Error, Result};
use crate::instanton::{barriers, InstantonPath};
use crate::large_deviation::{bimodality_report, legendre, mean_rate, scgf_adaptive, KinkSettings};
use crate::linalg::line_fit;
use crate::meanfield::phase_diagram;
use crate::output::{delta_tag, num, opt, tag, ArtifactWriter, FileEntry};
use crate::qjmc::{
    evolve_trajectory, switching_sweep, tau_scaling, waiting_time_stats, DetectorConfig, TrajectoryConfig,
};
use crate::spectral::{fit_gaps, mm_row, pdf_from_density_matrix, sorted_eigenvalues, MmRow, RatioScaling};

/// Tasks executed for a verb, in order.
pub fn plan(task: Task) -> Vec<Task> {
    use Task::*;
    match task {
        All => vec![PhaseDiagram, Spectrum, Metastable, Ld, Trajectories, Instanton, Compare],
        Compare => vec![Spectrum, Metastable, Trajectories, Instanton, Compare],
        t => vec![t],
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TaskOutcome {
    pub task: &'static str,
    pub ok: bool,
    pub error: Option<String>,
    pub wall_seconds: f64,
    pub summary: Value,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub outcomes: Vec<TaskOutcome>,
}

impl RunReport {
    pub fn failed(&self) -> bool {
        self.outcomes.iter().any(|o| !o.ok)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    program: &'static str,
    version: &'static str,
    task: &'static str,
    seed: u64,
    config: &'a RunConfig,
    tasks: &'a [TaskOutcome],
    files: &'a std::collections::BTreeMap<String, FileEntry>,
}

/// Run `task` (with its prerequisites) and write everything under `cfg.output_dir`. Task
/// failures are recorded in the report; only I/O on the output directory is fatal.
pub fn run(cfg: &RunConfig, task: Task) -> Result<RunReport> {
    cfg.validate()?;
    let mut out = ArtifactWriter::new(&cfg.output_dir)?;
    let mut store = MethodInputs::default();
    let mut outcomes = Vec::new();
    for t in plan(task) {
        let start = Instant::now();
        let res = match t {
            Task::PhaseDiagram => task_phase_diagram(cfg, &mut out),
            Task::Spectrum => task_spectrum(cfg, &mut out, &mut store),
            Task::Metastable => task_metastable(cfg, &mut out, &mut store),
            Task::Ld => task_ld(cfg, &mut out),
            Task::Trajectories => task_trajectories(cfg, &mut out, &mut store),
            Task::Instanton => task_instanton(cfg, &mut out, &mut store),
            Task::Compare => task_compare(&mut out, &store),
            Task::All => unreachable!(),
        };
        let wall_seconds = start.elapsed().as_secs_f64();
        let outcome = match res {
            Ok(summary) => TaskOutcome { task: t.name(), ok: true, error: None, wall_seconds, summary },
            Err(e @ Error::Io(_)) => return Err(e),
            Err(e) => {
                log::error!("task {} failed: {e}", t.name());
                TaskOutcome { task: t.name(), ok: false, error: Some(e.to_string()), wall_seconds, summary: Value::Null }
            }
        };
        log::info!("task {} done in {:.1}s", t.name(), wall_seconds);
        outcomes.push(outcome);
    }
    let files = out.files().clone();
    let manifest = Manifest {
        program: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        task: task.name(),
        seed: cfg.seed,
        config: cfg,
        tasks: &outcomes,
        files: &files,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))? + "\n";
    std::fs::write(out.root().join("manifest.json"), text)?;
    Ok(RunReport { outcomes })
}

fn cells(cfg: &RunConfig) -> Vec<(f64, usize)> {
    cfg.sweep.delta_list.iter().flat_map(|&d| cfg.sweep.n_list.iter().map(move |&n| (d, n))).collect()
}

fn task_phase_diagram(cfg: &RunConfig, out: &mut ArtifactWriter) -> Result<Value> {
    let o = cfg.phase_diagram;
    let grid: Vec<f64> = (0..o.points)
        .map(|i| o.delta_min + (o.delta_max - o.delta_min) * i as f64 / (o.points - 1) as f64)
        .collect();
    let pd = phase_diagram(&grid, &cfg.model.params(1, 0.0))?;
    let rows = pd.rows.iter().map(|r| {
        let l = &r.label;
        vec![
            num(r.delta),
            l.n_stable.to_string(),
            l.regime.name().to_string(),
            opt(l.stable_ne.first().copied()),
            opt(l.stable_ne.get(1).copied()),
            opt(l.unstable_ne.first().copied()),
        ]
    });
    out.csv("phase_diagram.csv", &["delta", "n_stable", "regime", "ne_1", "ne_2", "ne_unstable"], rows)?;
    Ok(json!({ "boundaries": pd.boundaries }))
}

/// Runs `f` on every item in parallel, keeping input order. Failures are collected, not fatal.
fn par_cells<T: Send>(items: &[(f64, usize)], f: impl Fn(f64, usize) -> Result<T> + Sync) -> Vec<(f64, usize, Result<T>)> {
    // biggest matrices first so they do not trail at the end
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(items[i].1));
    let mut done: Vec<(usize, (f64, usize, Result<T>))> =
        order.par_iter().map(|&i| (i, (items[i].0, items[i].1, f(items[i].0, items[i].1)))).collect();
    done.sort_by_key(|d| d.0);
    done.into_iter().map(|d| d.1).collect()
}

fn first_error<T>(results: &[(f64, usize, Result<T>)]) -> Option<String> {
    results.iter().find_map(|(d, n, r)| r.as_ref().err().map(|e| format!("N = {n}, delta = {d}: {e}")))
}

fn task_spectrum(cfg: &RunConfig, out: &mut ArtifactWriter, store: &mut MethodInputs) -> Result<Value> {
    let results = par_cells(&cells(cfg), |d, n| sorted_eigenvalues(&cfg.model.params(n, d), 0.0, cfg.n_cap));
    let rows = results.iter().filter_map(|(d, n, r)| {
        r.as_ref().ok().map(|e| vec![n.to_string(), num(*d), num(e[1].re), num(e[1].im), opt(e.get(2).map(|z| z.re)), num(-e[1].re)])
    });
    out.csv("spectrum.csv", &["N", "delta", "re_lambda1", "im_lambda1", "re_lambda2", "gap"], rows.collect::<Vec<_>>())?;
    let mut fits = Vec::new();
    for &d in &cfg.sweep.delta_list {
        let gaps: Vec<(usize, f64)> =
            results.iter().filter(|c| c.0 == d).filter_map(|(_, n, r)| r.as_ref().ok().map(|e| (*n, -e[1].re))).collect();
        match fit_gaps(gaps) {
            Ok(g) => fits.push((d, g)),
            Err(e) => log::warn!("no gap fit at delta = {d}: {e}"),
        }
    }
    out.csv(
        "gap_fits.csv",
        &["delta", "a", "b", "r2"],
        fits.iter().map(|(d, g)| vec![num(*d), num(g.a), num(g.b), num(g.r2)]),
    )?;
    store.gaps = fits;
    match first_error(&results) {
        Some(e) => Err(Error::Eigensolver(e)),
        None => Ok(json!({ "cells": results.len() })),
    }
}

fn task_metastable(cfg: &RunConfig, out: &mut ArtifactWriter, store: &mut MethodInputs) -> Result<Value> {
    let hw = cfg.metastable.half_width;
    let results = par_cells(&cells(cfg), |d, n| {
        let (row, mm) = mm_row(&cfg.model.params(n, d), cfg.n_cap)?;
        let pdfs = [&mm.rho_ss, &mm.rho_plus, &mm.rho_minus].map(|r| pdf_from_density_matrix(r, hw));
        let [a, b, c] = pdfs;
        Ok((row, [a?, b?, c?]))
    });
    let mut skipped = Vec::new();
    let mut rows: Vec<MmRow> = Vec::new();
    let mut failure = None;
    for (d, n, r) in &results {
        match r {
            Ok((row, pdfs)) => {
                rows.push(*row);
                for (name, pdf) in ["ss", "plus", "minus"].iter().zip(pdfs) {
                    let body = pdf.centers.iter().zip(&pdf.densities).map(|(c, v)| vec![num(*c), num(*v)]);
                    out.csv(&format!("pdf_{name}_{}.csv", tag(*n, *d)), &["center", "density"], body)?;
                }
            }
            // no real slow mode outside the bistable window
            Err(Error::ComplexGap { .. }) | Err(Error::DegenerateManifold(_)) => skipped.push(json!([n, d])),
            Err(e) => failure = failure.or(Some(format!("N = {n}, delta = {d}: {e}"))),
        }
    }
    out.csv(
        "mm.csv",
        &["N", "delta", "ne_ss", "ne_plus", "ne_minus", "d_plus", "d_minus", "r", "mm_error"],
        rows.iter().map(|r| {
            vec![
                r.n_atoms.to_string(),
                num(r.delta),
                num(r.ne_ss),
                num(r.ne_plus),
                num(r.ne_minus),
                num(r.d_plus),
                num(r.d_minus),
                num(r.r),
                num(r.mm_error),
            ]
        }),
    )?;
    let mut ratios = Vec::new();
    for &d in &cfg.sweep.delta_list {
        let sel: Vec<MmRow> = rows.iter().filter(|r| r.delta == d && r.r > 0.0).copied().collect();
        let fit = if sel.len() >= 3 {
            let x: Vec<f64> = sel.iter().map(|r| r.n_atoms as f64).collect();
            let y: Vec<f64> = sel.iter().map(|r| r.r.ln()).collect();
            line_fit(&x, &y).ok()
        } else {
            None
        };
        let excluded = cfg.sweep.n_list.iter().filter(|n| !sel.iter().any(|r| r.n_atoms == **n)).copied().collect();
        ratios.push(RatioScaling { delta: d, rows: sel, fit, excluded });
    }
    out.csv(
        "ratio_fits.csv",
        &["delta", "slope", "intercept", "r2"],
        ratios.iter().filter_map(|r| r.fit.map(|f| vec![num(r.delta), num(f.slope), num(f.intercept), num(f.r2)])),
    )?;
    store.ratios = ratios;
    match failure {
        Some(e) => Err(Error::Eigensolver(e)),
        None => Ok(json!({ "cells": rows.len(), "skipped": skipped })),
    }
}

fn task_ld(cfg: &RunConfig, out: &mut ArtifactWriter) -> Result<Value> {
    let o = &cfg.ld;
    let items: Vec<(f64, usize)> = cfg.ld_deltas().iter().flat_map(|&d| cfg.ld_sizes().iter().map(move |&n| (d, n))).collect();
    let mut summary = Vec::new();
    let mut failure = None;
    // each SCGF is already parallel over the tilt grid
    for (d, n) in items {
        let p = cfg.model.params(n, d);
        let res = (|| -> Result<_> {
            let curve = scgf_adaptive(&p, o.s_min, o.s_max, o.points, o.refine, cfg.n_cap)?;
            let rf = legendre(&curve)?;
            let rep = bimodality_report(&rf, KinkSettings::default());
            let (rate, _) = mean_rate(&p, 1e-3, cfg.n_cap)?;
            Ok((curve, rf, rep, rate))
        })();
        match res {
            Ok((curve, rf, rep, rate)) => {
                let dir = format!("ld/{}", tag(n, d));
                let body = curve.s_grid.iter().zip(&curve.theta).map(|(s, t)| vec![num(*s), num(*t)]);
                out.csv(&format!("{dir}/scgf.csv"), &["s", "theta"], body)?;
                let kpa = rf.k_per_atom();
                let body = (0..rf.k.len()).map(|i| vec![num(rf.k[i]), num(kpa[i]), num(rf.phi[i]), num(-rf.phi[i])]);
                out.csv(&format!("{dir}/rate_function.csv"), &["k", "k_per_atom", "phi", "neg_phi"], body)?;
                summary.push(json!({ "N": n, "delta": d, "mean_rate": rate, "n_maxima": rep.n_maxima, "maxima": rep.maxima }));
            }
            Err(e) => failure = failure.or(Some(format!("N = {n}, delta = {d}: {e}"))),
        }
    }
    match failure {
        Some(e) => Err(Error::Eigensolver(e)),
        None => Ok(Value::Array(summary)),
    }
}

fn task_trajectories(cfg: &RunConfig, out: &mut ArtifactWriter, store: &mut MethodInputs) -> Result<Value> {
    let o = &cfg.trajectories;
    let sw = &o.switching;
    let mut switch_rows = Vec::new();
    let mut wait_rows = Vec::new();
    let mut fit_rows = Vec::new();
    let mut tau_rows = Vec::new();
    let mut sidecar = Vec::new();
    let mut skipped = Vec::new();
    for &d in &cfg.sweep.delta_list {
        let template = cfg.model.params(1, d);
        let det = match sw.detector {
            Some(det) => det,
            None => match DetectorConfig::from_mean_field(&template.with_n(cfg.sweep.n_list[0])) {
                Ok(det) => det,
                Err(Error::NotBistable(_)) => {
                    skipped.push(d);
                    continue;
                }
                Err(e) => return Err(e),
            },
        };
        let runs = switching_sweep(&template, &cfg.sweep.n_list, &crate::qjmc::SwitchingConfig { detector: Some(det), ..sw.clone() }, cfg.seed)?;
        for r in &runs {
            for pair in r.switches.windows(2) {
                let ((w0, s0), (w1, s1)) = (pair[0], pair[1]);
                if w0 == w1 {
                    switch_rows.push(vec![r.n_atoms.to_string(), num(d), s1.direction.name().to_string(), num(s1.time - s0.time)]);
                }
            }
            sidecar.push(json!({
                "N": r.n_atoms, "delta": d, "seed": r.seed, "dt": sw.dt, "scheme": sw.scheme,
                "thresholds": r.detector, "total_time": r.total_time, "jumps": r.jumps,
                "dark_waits": r.waits.dark.len(), "bright_waits": r.waits.bright.len(),
            }));
            if o.sample_t_final > 0.0 {
                let p = template.with_n(r.n_atoms);
                let tc = TrajectoryConfig {
                    dt: sw.dt,
                    t_final: o.sample_t_final,
                    seed: r.seed,
                    stream: sw.walkers as u64,
                    record_stride: (o.sample_every / sw.dt).round().max(1.0) as usize,
                    scheme: sw.scheme,
                    detector: Some(det),
                    initial: None,
                    record_states: false,
                };
                let rec = evolve_trajectory(&p, &tc)?;
                let body = rec.times.iter().zip(&rec.ne).map(|(t, v)| vec![num(*t), num(*v)]);
                out.csv(&format!("trajectory_{}.csv", tag(r.n_atoms, d)), &["t", "ne"], body)?;
            }
        }
        let stats = waiting_time_stats(&runs);
        for w in &stats.rows {
            wait_rows.push(vec![
                num(d),
                w.n_atoms.to_string(),
                num(w.dark.mean),
                num(w.dark.se),
                w.dark.count.to_string(),
                num(w.bright.mean),
                num(w.bright.se),
                w.bright.count.to_string(),
            ]);
        }
        let (fd, fb) = (stats.fit_dark, stats.fit_bright);
        fit_rows.push(vec![
            num(d),
            opt(fd.map(|f| f.a)),
            opt(fd.map(|f| f.b)),
            opt(fb.map(|f| f.a)),
            opt(fb.map(|f| f.b)),
            opt(fd.map(|f| f.r2)),
            opt(fb.map(|f| f.r2)),
        ]);
        let taus = tau_scaling(&stats);
        for (n, t) in &taus.taus {
            tau_rows.push(vec![num(d), n.to_string(), num(*t)]);
        }
        store.switching.push(stats);
        store.taus.push((d, taus));
    }
    out.csv("switches.csv", &["N", "delta", "direction", "waiting_time"], switch_rows)?;
    out.csv("waiting_times.csv", &["delta", "N", "T_d", "se_d", "count_d", "T_b", "se_b", "count_b"], wait_rows)?;
    out.csv("waiting_fits.csv", &["delta", "v_d", "b_d", "v_b", "b_b", "r2_d", "r2_b"], fit_rows)?;
    out.csv("tau.csv", &["delta", "N", "tau"], tau_rows)?;
    out.json("trajectories.json", &sidecar)?;
    Ok(json!({ "cells": sidecar.len(), "skipped": skipped }))
}

fn path_rows(path: &InstantonPath) -> Vec<Vec<String>> {
    let s = path.arclength();
    path.points
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let ds = if i == 0 { 0.0 } else { path.increments[i - 1] };
            vec![num(s[i]), num(x.m[0]), num(x.m[1]), num(x.m[2]), num(x.q[0]), num(x.q[1]), num(x.q[2]), num(ds)]
        })
        .collect()
}

fn task_instanton(cfg: &RunConfig, out: &mut ArtifactWriter, store: &mut MethodInputs) -> Result<Value> {
    let deltas = cfg.instanton_deltas();
    let results: Vec<(f64, Result<_>)> =
        deltas.par_iter().map(|&d| (d, barriers(&cfg.model.params(1, d), &cfg.instanton.gmam))).collect();
    let header = ["arclength", "mx", "my", "mz", "qx", "qy", "qz", "dS"];
    let mut rows = Vec::new();
    let mut absent = Vec::new();
    let mut failure = None;
    for (d, r) in results {
        match r {
            Ok((row, dark, bright)) => {
                out.csv(&format!("instanton_path_{}_dark.csv", delta_tag(d)), &header, path_rows(&dark))?;
                out.csv(&format!("instanton_path_{}_bright.csv", delta_tag(d)), &header, path_rows(&bright))?;
                rows.push(row);
            }
            Err(Error::NotBistable(_)) => absent.push(d),
            Err(e) => failure = failure.or(Some(format!("delta = {d}: {e}"))),
        }
    }
    out.csv(
        "quasipotential.csv",
        &["delta", "phi_d", "phi_b", "phi_db"],
        rows.iter().map(|r| vec![num(r.delta), num(r.phi_d), num(r.phi_b), num(r.phi_db)]),
    )?;
    let summary = json!({
        "absent": absent,
        "converged": rows.iter().map(|r| json!([r.delta, r.converged, r.energy_residual])).collect::<Vec<_>>(),
    });
    store.barriers = rows;
    match failure {
        Some(e) => Err(Error::Integration(e)),
        None => Ok(summary),
    }
}

fn task_compare(out: &mut ArtifactWriter, store: &MethodInputs) -> Result<Value> {
    let table = compare_methods(store);
    out.csv(
        "comparison.csv",
        &["delta", "phi_db_spectral", "phi_db_qjmc", "phi_db_instanton", "tau_exponent_spectral", "tau_exponent_qjmc"],
        table.rows.iter().map(|r| {
            vec![
                num(r.delta),
                opt(r.phi_db_spectral),
                opt(r.phi_db_qjmc),
                opt(r.phi_db_instanton),
                opt(r.tau_exponent_spectral),
                opt(r.tau_exponent_qjmc),
            ]
        }),
    )?;
    out.json("comparison.json", &table)?;
    if table.rows.is_empty() {
        return Err(Error::Insufficient("no method produced results to compare".into()));
    }
    Ok(json!({
        "signs_agree": table.signs_agree(),
        "crossing_spread": table.crossing_spread(),
        "tau_peak_qjmc": table.tau_peak_qjmc,
    }))
}
