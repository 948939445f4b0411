//! Quantum-jump trajectories, switch detection and waiting-time statistics.

use std::collections::VecDeque;

use faer::{c64, Mat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cr, cz, exp_fit, expm, ExpFit};
use crate::meanfield::bistable_triple;
use crate::model::{Generator, ModelParams};
use crate::spectral::{ne_diag, BinnedPdf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpScheme {
    /// One uniform draw per step; jump with probability dt <L^dag L>.
    Bernoulli,
    /// Jump when the decaying norm of the no-jump state crosses a uniform threshold; the jump
    /// instant is located inside the step, so dt only sets the sampling grid.
    WaitingTime,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub theta_dark: f64,
    pub theta_bright: f64,
    pub min_dwell: f64,
    pub smoothing_window: f64,
}

impl DetectorConfig {
    /// Thresholds 40% of the way from the unstable density to each stable density.
    pub fn from_mean_field(params: &ModelParams) -> Result<Self> {
        let (dark, saddle, bright) = bistable_triple(params)?;
        let nu = saddle.ne();
        Ok(Self {
            theta_dark: nu - 0.4 * (nu - dark.ne()),
            theta_bright: nu + 0.4 * (bright.ne() - nu),
            min_dwell: 5.0 / params.decay,
            smoothing_window: 1.0 / params.decay,
        })
    }

    pub fn validate_against(&self, params: &ModelParams) -> Result<()> {
        let (_, saddle, _) = bistable_triple(params)?;
        self.validate_around(saddle.ne())
    }

    pub fn validate_around(&self, unstable: f64) -> Result<()> {
        if !(self.theta_dark < unstable && unstable < self.theta_bright) {
            return Err(Error::Thresholds { dark: self.theta_dark, bright: self.theta_bright, unstable });
        }
        if !(self.min_dwell >= 0.0 && self.smoothing_window >= 0.0) {
            return Err(Error::InvalidParams("detector times must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub dt: f64,
    pub t_final: f64,
    pub seed: u64,
    /// Trajectory index; selects an independent stream of the seeded generator.
    #[serde(default)]
    pub stream: u64,
    pub record_stride: usize,
    pub scheme: JumpScheme,
    pub detector: Option<DetectorConfig>,
    /// Initial Dicke-basis amplitudes; all atoms in the ground state when absent.
    #[serde(skip)]
    pub initial: Option<Vec<c64>>,
    /// Keep the normalized state at every recorded time.
    #[serde(skip)]
    pub record_states: bool,
}

impl TrajectoryConfig {
    pub fn new(params: &ModelParams, t_final: f64, seed: u64) -> Self {
        Self {
            dt: default_dt(params),
            t_final,
            seed,
            stream: 0,
            record_stride: 1,
            scheme: JumpScheme::Bernoulli,
            detector: None,
            initial: None,
            record_states: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.t_final >= 0.0) || self.record_stride == 0 {
            return Err(Error::InvalidParams("dt > 0, t_final >= 0 and record_stride >= 1 required".into()));
        }
        if let Some(d) = &self.detector {
            if !(d.theta_dark < d.theta_bright) {
                return Err(Error::InvalidParams("theta_dark must be below theta_bright".into()));
            }
        }
        Ok(())
    }
}

pub fn default_dt(params: &ModelParams) -> f64 {
    0.02 / (params.decay * params.n_atoms as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Direction {
    Upward,
    Downward,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Upward => "up",
            Direction::Downward => "down",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Switch {
    pub time: f64,
    pub direction: Direction,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub ne: Vec<f64>,
    pub jump_times: Vec<f64>,
    pub switches: Vec<Switch>,
    #[serde(skip)]
    pub states: Vec<Vec<c64>>,
}

/// Precomputed no-jump propagator and the banded generator.
pub struct Propagator {
    gen: Generator,
    u: Mat<c64>,
    dt: f64,
    scheme: JumpScheme,
    ne: Vec<f64>,
}

const MAX_TERMS: usize = 120;
/// Largest ||H|| dt for which the in-step Taylor series stays accurate.
const MAX_SERIES_RADIUS: f64 = 6.0;

struct Series {
    terms: Vec<Vec<c64>>,
}

impl Series {
    fn eval(&self, tau: f64) -> Vec<c64> {
        let mut out = self.terms.last().unwrap().clone();
        for t in self.terms.iter().rev().skip(1) {
            for (o, x) in out.iter_mut().zip(t) {
                *o = *o * tau + *x;
            }
        }
        out
    }
}

/// Mutable per-trajectory state.
pub struct Walker {
    pub psi: Vec<c64>,
    pub t: f64,
    rng: ChaCha8Rng,
    threshold: f64,
    pub jumps: u64,
}

fn norm_sqr(v: &[c64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

impl Propagator {
    pub fn new(params: &ModelParams, dt: f64, scheme: JumpScheme) -> Result<Self> {
        params.validate()?;
        if !(dt > 0.0) {
            return Err(Error::InvalidParams(format!("dt must be positive, got {dt}")));
        }
        let gen = Generator::new(params);
        let h = gen.h_dense();
        let u = expm(&crate::linalg::scale(&h, c64::new(0.0, -dt)));
        let d = gen.d;
        let h_norm = (0..d)
            .map(|j| (0..d).map(|i| h[(i, j)].norm()).sum::<f64>())
            .fold(0.0, f64::max);
        if scheme == JumpScheme::WaitingTime && h_norm * dt > MAX_SERIES_RADIUS {
            return Err(Error::InvalidParams(format!(
                "dt = {dt} too large for the waiting-time scheme (||H|| dt = {:.2} > {MAX_SERIES_RADIUS})",
                h_norm * dt
            )));
        }
        Ok(Self { ne: ne_diag(d), gen, u, dt, scheme })
    }

    pub fn dim(&self) -> usize {
        self.gen.d
    }

    pub fn walker(&self, initial: Option<&[c64]>, seed: u64, stream: u64) -> Result<Walker> {
        let d = self.dim();
        let mut psi = match initial {
            Some(v) => {
                if v.len() != d {
                    return Err(Error::Dimension { expected: d, got: v.len() });
                }
                v.to_vec()
            }
            None => {
                let mut v = vec![cz(); d];
                v[0] = cr(1.0);
                v
            }
        };
        let n = norm_sqr(&psi).sqrt();
        for z in &mut psi {
            *z /= n;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let threshold = 1.0 - rng.random::<f64>();
        Ok(Walker { psi, t: 0.0, rng, threshold, jumps: 0 })
    }

    /// <L^dag L> gamma-weighted, unnormalized.
    fn decay_rate(&self, psi: &[c64]) -> f64 {
        psi.iter().enumerate().map(|(i, z)| z.norm_sqr() * self.gen.jump_rate_diag(i)).sum()
    }

    fn apply_jump(&self, psi: &mut [c64]) {
        let d = self.dim();
        for i in 0..d - 1 {
            psi[i] = psi[i + 1] * self.gen.l_up[i];
        }
        psi[d - 1] = cz();
        let n = norm_sqr(psi).sqrt();
        for z in psi.iter_mut() {
            *z /= n;
        }
    }

    fn apply_u(&self, psi: &[c64]) -> Vec<c64> {
        let d = self.dim();
        let mut out = vec![cz(); d];
        for j in 0..d {
            let x = psi[j];
            if x == cz() {
                continue;
            }
            for (i, o) in out.iter_mut().enumerate() {
                *o += self.u[(i, j)] * x;
            }
        }
        out
    }

    fn h_times_into(&self, v: &[c64], out: &mut [c64], f: c64) {
        let d = self.dim();
        let g = &self.gen;
        for i in 0..d {
            let mut s = g.h_diag[i] * v[i];
            if i > 0 {
                s += g.h_lo[i - 1] * v[i - 1];
            }
            if i + 1 < d {
                s += g.h_up[i] * v[i + 1];
            }
            out[i] = s * f;
        }
    }

    /// Taylor coefficients (-iH)^k psi / k! up to the order needed on [0, span].
    fn series(&self, psi: &[c64], span: f64) -> Series {
        let tol = 1e-36 * norm_sqr(psi);
        let mut terms = vec![psi.to_vec()];
        let mut scale = 1.0;
        for k in 1..MAX_TERMS {
            let mut next = vec![cz(); psi.len()];
            self.h_times_into(&terms[k - 1], &mut next, c64::new(0.0, -1.0 / k as f64));
            scale *= span;
            let small = norm_sqr(&next) * scale * scale <= tol;
            terms.push(next);
            if small {
                break;
            }
        }
        Series { terms }
    }

    pub fn ne_of(&self, psi: &[c64]) -> f64 {
        let n = norm_sqr(psi);
        psi.iter().zip(&self.ne).map(|(z, x)| z.norm_sqr() * x).sum::<f64>() / n
    }

    /// Normalized copy of the walker state.
    pub fn normalized(&self, w: &Walker) -> Vec<c64> {
        let n = norm_sqr(&w.psi).sqrt();
        w.psi.iter().map(|z| z / n).collect()
    }

    /// Advance one step of length dt, reporting jump instants.
    pub fn step(&self, w: &mut Walker, on_jump: &mut impl FnMut(f64)) -> Result<()> {
        match self.scheme {
            JumpScheme::Bernoulli => {
                let p = self.dt * self.decay_rate(&w.psi);
                if p > 0.1 {
                    return Err(Error::StepTooLarge { p, t: w.t });
                }
                let u: f64 = w.rng.random();
                if u < p {
                    self.apply_jump(&mut w.psi);
                    w.jumps += 1;
                    on_jump(w.t + self.dt);
                } else {
                    let mut next = self.apply_u(&w.psi);
                    let n = norm_sqr(&next).sqrt();
                    for z in &mut next {
                        *z /= n;
                    }
                    w.psi = next;
                }
                w.t += self.dt;
            }
            JumpScheme::WaitingTime => {
                let next = self.apply_u(&w.psi);
                if norm_sqr(&next) > w.threshold {
                    w.psi = next;
                    w.t += self.dt;
                    return Ok(());
                }
                let mut series = self.series(&w.psi, self.dt);
                let mut end = next;
                let mut left = self.dt;
                let mut t = w.t;
                loop {
                    let tau = self.locate_crossing(&series, norm_sqr(&end), left, w.threshold);
                    let mut at = series.eval(tau);
                    self.apply_jump(&mut at);
                    t += tau;
                    left -= tau;
                    w.jumps += 1;
                    on_jump(t);
                    w.threshold = 1.0 - w.rng.random::<f64>();
                    series = self.series(&at, left);
                    end = series.eval(left);
                    if norm_sqr(&end) > w.threshold {
                        break;
                    }
                }
                w.psi = end;
                w.t += self.dt;
            }
        }
        Ok(())
    }

    /// Time tau in (0, span] at which ||exp(-iH tau) psi||^2 = threshold (safeguarded Newton on
    /// the log-norm); `n1` is the squared norm at the end of the span.
    fn locate_crossing(&self, series: &Series, n1: f64, span: f64, threshold: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, span);
        let n0 = norm_sqr(&series.terms[0]);
        let mut tau = if n0 > n1 { span * (n0 / threshold).ln() / (n0 / n1).ln() } else { span };
        tau = tau.clamp(0.0, span);
        for _ in 0..60 {
            let v = series.eval(tau);
            let nv = norm_sqr(&v);
            let fv = (nv / threshold).ln();
            if fv.abs() < 1e-12 {
                return tau;
            }
            if fv > 0.0 {
                lo = tau;
            } else {
                hi = tau;
            }
            // d ln n / dt = -<L^dag L> / n
            let slope = -self.decay_rate(&v) / nv;
            let mut next = if slope < 0.0 { tau - fv / slope } else { 0.5 * (lo + hi) };
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - tau).abs() < 1e-14 * span.max(1.0) || hi - lo < 1e-14 * span.max(1.0) {
                return next.clamp(lo, hi);
            }
            tau = next;
        }
        tau
    }
}

/// One quantum-jump trajectory.
pub fn evolve_trajectory(params: &ModelParams, config: &TrajectoryConfig) -> Result<TrajectoryRecord> {
    config.validate()?;
    let prop = Propagator::new(params, config.dt, config.scheme)?;
    let mut w = prop.walker(config.initial.as_deref(), config.seed, config.stream)?;
    let steps = (config.t_final / config.dt).round() as usize;
    let mut rec = TrajectoryRecord::default();
    let record = |w: &Walker, rec: &mut TrajectoryRecord| {
        rec.times.push(w.t);
        rec.ne.push(prop.ne_of(&w.psi));
        if config.record_states {
            rec.states.push(prop.normalized(w));
        }
    };
    record(&w, &mut rec);
    let mut jumps = Vec::new();
    for k in 1..=steps {
        prop.step(&mut w, &mut |t| jumps.push(t))?;
        if k % config.record_stride == 0 {
            record(&w, &mut rec);
        }
    }
    rec.jump_times = jumps;
    if let Some(det) = &config.detector {
        rec.switches = detect_in_series(&rec.times, &rec.ne, det);
    }
    Ok(rec)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Dark,
    Bright,
}

/// Hysteresis switch detector on a trailing moving average, fed one sample at a time.
#[derive(Clone, Debug)]
pub struct SwitchDetector {
    cfg: DetectorConfig,
    window: VecDeque<(f64, f64)>,
    sum: f64,
    phase: Option<Phase>,
    pending: Option<(f64, Phase)>,
    switches: Vec<Switch>,
}

impl SwitchDetector {
    pub fn new(cfg: DetectorConfig) -> Self {
        Self { cfg, window: VecDeque::new(), sum: 0.0, phase: None, pending: None, switches: Vec::new() }
    }

    pub fn push(&mut self, t: f64, ne: f64) {
        self.window.push_back((t, ne));
        self.sum += ne;
        while let Some(&(t0, v0)) = self.window.front() {
            if t - t0 >= self.cfg.smoothing_window && self.window.len() > 1 {
                self.window.pop_front();
                self.sum -= v0;
            } else {
                break;
            }
        }
        let m = self.sum / self.window.len() as f64;
        let zone = if m > self.cfg.theta_bright {
            Some(Phase::Bright)
        } else if m < self.cfg.theta_dark {
            Some(Phase::Dark)
        } else {
            None
        };
        let Some(phase) = self.phase else {
            self.phase = zone;
            return;
        };
        if let Some((ts, target)) = self.pending {
            if zone == Some(phase) {
                self.pending = None;
            } else if t - ts >= self.cfg.min_dwell {
                let direction = if target == Phase::Bright { Direction::Upward } else { Direction::Downward };
                self.switches.push(Switch { time: ts, direction });
                self.phase = Some(target);
                self.pending = None;
            }
            return;
        }
        if let Some(z) = zone {
            if z != phase {
                self.pending = Some((t, z));
            }
        }
    }

    /// Confirmed switches; an unconfirmed pending crossing is not included.
    pub fn switches(&self) -> &[Switch] {
        &self.switches
    }

    pub fn in_bright(&self) -> Option<bool> {
        self.phase.map(|p| p == Phase::Bright)
    }
}

fn detect_in_series(times: &[f64], ne: &[f64], cfg: &DetectorConfig) -> Vec<Switch> {
    let mut det = SwitchDetector::new(*cfg);
    for (t, v) in times.iter().zip(ne) {
        det.push(*t, *v);
    }
    det.switches().to_vec()
}

/// Run the hysteresis detector over a recorded trajectory.
pub fn detect_switches(record: &mut TrajectoryRecord, params: &ModelParams, cfg: &DetectorConfig) -> Result<()> {
    cfg.validate_against(params)?;
    record.switches = detect_in_series(&record.times, &record.ne, cfg);
    Ok(())
}

/// Waiting times: the dwell preceding each switch after the first, labeled by the state left.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Waits {
    pub dark: Vec<f64>,
    pub bright: Vec<f64>,
}

pub fn waits_from_switches(sw: &[Switch]) -> Waits {
    let mut w = Waits::default();
    for pair in sw.windows(2) {
        let dt = pair[1].time - pair[0].time;
        match pair[1].direction {
            Direction::Upward => w.dark.push(dt),
            Direction::Downward => w.bright.push(dt),
        }
    }
    w
}

pub const BURN_IN: f64 = 50.0;

/// Time-weighted histogram of n_e after the burn-in of each record.
pub fn trajectory_pdf(records: &[TrajectoryRecord], half_width: f64) -> Result<BinnedPdf> {
    let mut pdf = BinnedPdf::new(half_width)?;
    for r in records {
        let first = r.switches.first().map(|s| s.time).unwrap_or(f64::INFINITY);
        let start = first.min(BURN_IN);
        for (i, (&t, &v)) in r.times.iter().zip(&r.ne).enumerate() {
            if t < start || i + 1 >= r.times.len() {
                continue;
            }
            pdf.add_mass(v, r.times[i + 1] - t);
        }
    }
    pdf.normalize();
    Ok(pdf)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwitchingConfig {
    pub dt: f64,
    pub record_stride: usize,
    pub scheme: JumpScheme,
    pub detector: Option<DetectorConfig>,
    /// Total simulated time budget summed over walkers.
    pub max_time: f64,
    /// Stop once every direction has this many waiting times.
    pub target_waits: usize,
    pub walkers: usize,
    /// Simulated time per walker between stopping checks.
    pub chunk: f64,
    pub half_width: f64,
}

impl Default for SwitchingConfig {
    fn default() -> Self {
        Self {
            dt: 0.02,
            record_stride: 5,
            scheme: JumpScheme::WaitingTime,
            detector: None,
            max_time: 2.0e6,
            target_waits: 40,
            walkers: 4,
            chunk: 2000.0,
            half_width: 0.01,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SwitchingRun {
    pub n_atoms: usize,
    pub delta: f64,
    pub waits: Waits,
    pub switches: Vec<(usize, Switch)>,
    pub total_time: f64,
    pub jumps: u64,
    pub pdf: BinnedPdf,
    pub detector: DetectorConfig,
    pub seed: u64,
}

struct SwitchWalker {
    w: Walker,
    det: SwitchDetector,
    pdf: BinnedPdf,
    burn_end: Option<f64>,
}

/// Long trajectories with online switch detection, stopped when enough waiting times are in.
pub fn run_switching(params: &ModelParams, cfg: &SwitchingConfig, seed: u64) -> Result<SwitchingRun> {
    let det_cfg = match cfg.detector {
        Some(d) => d,
        None => DetectorConfig::from_mean_field(params)?,
    };
    det_cfg.validate_against(params)?;
    let prop = Propagator::new(params, cfg.dt, cfg.scheme)?;
    let mut walkers: Vec<SwitchWalker> = (0..cfg.walkers.max(1))
        .map(|i| {
            Ok(SwitchWalker {
                w: prop.walker(None, seed, i as u64)?,
                det: SwitchDetector::new(det_cfg),
                pdf: BinnedPdf::new(cfg.half_width)?,
                burn_end: None,
            })
        })
        .collect::<Result<_>>()?;
    let steps_per_chunk = (cfg.chunk / cfg.dt).round().max(1.0) as usize;
    let sample_dt = cfg.dt * cfg.record_stride as f64;
    let mut total = 0.0;
    loop {
        walkers.par_iter_mut().try_for_each(|sw| -> Result<()> {
            for k in 1..=steps_per_chunk {
                prop.step(&mut sw.w, &mut |_| {})?;
                if k % cfg.record_stride == 0 {
                    let ne = prop.ne_of(&sw.w.psi);
                    sw.det.push(sw.w.t, ne);
                    if sw.burn_end.is_none() {
                        let first = sw.det.switches().first().map(|s| s.time);
                        if sw.w.t >= BURN_IN || first.is_some() {
                            sw.burn_end = Some(first.unwrap_or(BURN_IN).min(BURN_IN));
                        }
                    }
                    if sw.burn_end.is_some() {
                        sw.pdf.add_mass(ne, sample_dt);
                    }
                }
                // keep the unnormalized waiting-time state in floating-point range
                if sw.w.psi.iter().map(|z| z.norm_sqr()).sum::<f64>() < 1e-200 {
                    return Err(Error::Integration("state norm underflow".into()));
                }
            }
            Ok(())
        })?;
        total += cfg.chunk * walkers.len() as f64;
        let waits: Vec<Waits> = walkers.iter().map(|sw| waits_from_switches(sw.det.switches())).collect();
        let nd: usize = waits.iter().map(|w| w.dark.len()).sum();
        let nb: usize = waits.iter().map(|w| w.bright.len()).sum();
        if (nd >= cfg.target_waits && nb >= cfg.target_waits) || total >= cfg.max_time {
            break;
        }
    }
    let mut waits = Waits::default();
    let mut switches = Vec::new();
    let mut pdf = BinnedPdf::new(cfg.half_width)?;
    let mut jumps = 0;
    for (i, sw) in walkers.iter().enumerate() {
        let w = waits_from_switches(sw.det.switches());
        waits.dark.extend(w.dark);
        waits.bright.extend(w.bright);
        switches.extend(sw.det.switches().iter().map(|s| (i, *s)));
        for (a, b) in pdf.densities.iter_mut().zip(&sw.pdf.densities) {
            *a += b;
        }
        jumps += sw.w.jumps;
    }
    pdf.normalize();
    Ok(SwitchingRun {
        n_atoms: params.n_atoms,
        delta: params.detuning,
        waits,
        switches,
        total_time: total,
        jumps,
        pdf,
        detector: det_cfg,
        seed,
    })
}

/// Seed for one (N, delta) cell derived from the master seed.
pub fn cell_seed(seed: u64, n_atoms: usize, delta: f64) -> u64 {
    let mut z = seed ^ (n_atoms as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ delta.to_bits().rotate_left(17);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Switching runs over ascending sizes at one detuning. Sizes past the first one that misses
/// the waiting-time target are skipped, since dwell times only grow with N.
pub fn switching_sweep(template: &ModelParams, n_list: &[usize], cfg: &SwitchingConfig, seed: u64) -> Result<Vec<SwitchingRun>> {
    let mut sizes = n_list.to_vec();
    sizes.sort_unstable();
    let mut runs = Vec::new();
    for n in sizes {
        let p = template.with_n(n);
        let run = run_switching(&p, cfg, cell_seed(seed, n, p.detuning))?;
        let short = run.waits.dark.len() < cfg.target_waits || run.waits.bright.len() < cfg.target_waits;
        log::info!(
            "switching N={n} delta={}: {} dark / {} bright waits in t={}",
            p.detuning,
            run.waits.dark.len(),
            run.waits.bright.len(),
            run.total_time
        );
        runs.push(run);
        if short {
            break;
        }
    }
    Ok(runs)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub count: usize,
}

pub fn mean_se(x: &[f64]) -> MeanSe {
    let n = x.len();
    if n == 0 {
        return MeanSe { mean: f64::NAN, se: f64::NAN, count: 0 };
    }
    let m = x.iter().sum::<f64>() / n as f64;
    let var = if n > 1 { x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64 } else { f64::NAN };
    MeanSe { mean: m, se: (var / n as f64).sqrt(), count: n }
}

#[derive(Clone, Debug, Serialize)]
pub struct WaitRow {
    pub n_atoms: usize,
    pub dark: MeanSe,
    pub bright: MeanSe,
    pub dark_ok: bool,
    pub bright_ok: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SwitchStats {
    pub delta: f64,
    pub rows: Vec<WaitRow>,
    /// T_d = b_d e^{v_d N}
    pub fit_dark: Option<ExpFit>,
    pub fit_bright: Option<ExpFit>,
}

pub const MIN_WAITS: usize = 20;

/// Per-size means and the exponential fits across sizes; cells with fewer than
/// `MIN_WAITS` samples are flagged and left out of the fit.
pub fn waiting_time_stats(runs: &[SwitchingRun]) -> SwitchStats {
    let mut rows: Vec<WaitRow> = runs
        .iter()
        .map(|r| {
            let dark = mean_se(&r.waits.dark);
            let bright = mean_se(&r.waits.bright);
            WaitRow { n_atoms: r.n_atoms, dark, bright, dark_ok: dark.count >= MIN_WAITS, bright_ok: bright.count >= MIN_WAITS }
        })
        .collect();
    rows.sort_by_key(|r| r.n_atoms);
    let fit = |sel: &dyn Fn(&WaitRow) -> Option<f64>| -> Option<ExpFit> {
        let pts: Vec<(f64, f64)> = rows.iter().filter_map(|r| sel(r).map(|v| (r.n_atoms as f64, v))).collect();
        if pts.len() < 4 {
            return None;
        }
        let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        exp_fit(&x, &y).ok()
    };
    let fit_dark = fit(&|r: &WaitRow| r.dark_ok.then_some(r.dark.mean));
    let fit_bright = fit(&|r: &WaitRow| r.bright_ok.then_some(r.bright.mean));
    SwitchStats { delta: runs.first().map(|r| r.delta).unwrap_or(f64::NAN), rows, fit_dark, fit_bright }
}

/// tau = (1/T_b + 1/T_d)^{-1}
pub fn relaxation_time(t_dark: f64, t_bright: f64) -> f64 {
    1.0 / (1.0 / t_bright + 1.0 / t_dark)
}

#[derive(Clone, Debug, Serialize)]
pub struct TauScaling {
    pub taus: Vec<(usize, f64)>,
    pub fit: Option<ExpFit>,
}

pub fn tau_scaling(stats: &SwitchStats) -> TauScaling {
    let taus: Vec<(usize, f64)> = stats
        .rows
        .iter()
        .filter(|r| r.dark_ok && r.bright_ok)
        .map(|r| (r.n_atoms, relaxation_time(r.dark.mean, r.bright.mean)))
        .collect();
    let fit = if taus.len() >= 4 {
        let x: Vec<f64> = taus.iter().map(|t| t.0 as f64).collect();
        let y: Vec<f64> = taus.iter().map(|t| t.1).collect();
        exp_fit(&x, &y).ok()
    } else {
        None
    };
    TauScaling { taus, fit }
}

/// Photon rate from the jump record with a batch-means standard error.
pub fn photon_rate(jump_times: &[f64], t0: f64, t1: f64, batches: usize) -> MeanSe {
    let len = (t1 - t0) / batches as f64;
    let mut counts = vec![0.0; batches];
    for &t in jump_times {
        if t >= t0 && t < t1 {
            let b = (((t - t0) / len) as usize).min(batches - 1);
            counts[b] += 1.0;
        }
    }
    let rates: Vec<f64> = counts.iter().map(|c| c / len).collect();
    mean_se(&rates)
}

/// Independent trajectories sampled at common checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub n_traj: usize,
    pub checkpoints: Vec<f64>,
    pub dt: f64,
    pub scheme: JumpScheme,
    pub seed: u64,
    /// Jumps after this time enter the photon-rate estimate.
    pub rate_from: f64,
    pub keep_density: bool,
}

#[derive(Clone, Debug)]
pub struct Ensemble {
    pub times: Vec<f64>,
    pub mean_ne: Vec<f64>,
    pub se_ne: Vec<f64>,
    /// Average of |psi><psi| at each checkpoint, with the Frobenius norm of its standard error.
    pub density: Vec<Mat<c64>>,
    pub density_se: Vec<f64>,
    pub photon_rate: MeanSe,
}

struct Sampled {
    ne: Vec<f64>,
    states: Vec<Vec<c64>>,
    late_jumps: u64,
}

pub fn run_ensemble(params: &ModelParams, cfg: &EnsembleConfig) -> Result<Ensemble> {
    if cfg.n_traj < 2 {
        return Err(Error::InvalidParams("an ensemble needs at least two trajectories".into()));
    }
    let prop = Propagator::new(params, cfg.dt, cfg.scheme)?;
    let steps: Vec<usize> = cfg.checkpoints.iter().map(|t| (t / cfg.dt).round() as usize).collect();
    if steps.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidParams("checkpoints must be ascending".into()));
    }
    let t_end = *cfg.checkpoints.last().unwrap_or(&0.0);
    let samples: Vec<Sampled> = (0..cfg.n_traj)
        .into_par_iter()
        .map(|i| -> Result<Sampled> {
            let mut w = prop.walker(None, cfg.seed, i as u64)?;
            let mut out = Sampled { ne: Vec::new(), states: Vec::new(), late_jumps: 0 };
            let mut k = 0;
            for &target in &steps {
                while k < target {
                    let mut late = 0;
                    prop.step(&mut w, &mut |t| {
                        if t >= cfg.rate_from {
                            late += 1;
                        }
                    })?;
                    out.late_jumps += late;
                    k += 1;
                }
                out.ne.push(prop.ne_of(&w.psi));
                if cfg.keep_density {
                    out.states.push(prop.normalized(&w));
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let m = cfg.n_traj as f64;
    let d = prop.dim();
    let mut mean_ne = Vec::new();
    let mut se_ne = Vec::new();
    let mut density = Vec::new();
    let mut density_se = Vec::new();
    for c in 0..steps.len() {
        let col: Vec<f64> = samples.iter().map(|s| s.ne[c]).collect();
        let st = mean_se(&col);
        mean_ne.push(st.mean);
        se_ne.push(st.se);
        if cfg.keep_density {
            let mut sum = Mat::<c64>::zeros(d, d);
            let mut sq = Mat::<f64>::zeros(d, d);
            for s in &samples {
                let psi = &s.states[c];
                for j in 0..d {
                    for i in 0..d {
                        let z = psi[i] * psi[j].conj();
                        sum[(i, j)] += z;
                        sq[(i, j)] += z.norm_sqr();
                    }
                }
            }
            let mean = Mat::from_fn(d, d, |i, j| sum[(i, j)] / m);
            let var: f64 = (0..d)
                .flat_map(|i| (0..d).map(move |j| (i, j)))
                .map(|(i, j)| (sq[(i, j)] / m - mean[(i, j)].norm_sqr()).max(0.0) * m / (m - 1.0))
                .sum();
            density.push(mean);
            density_se.push((var / m).sqrt());
        }
    }
    let span = t_end - cfg.rate_from;
    let rates: Vec<f64> = samples.iter().map(|s| s.late_jumps as f64 / span).collect();
    let photon_rate = if span > 0.0 { mean_se(&rates) } else { mean_se(&[]) };
    Ok(Ensemble { times: cfg.checkpoints.clone(), mean_ne, se_ne, density, density_se, photon_rate })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det() -> DetectorConfig {
        DetectorConfig { theta_dark: 0.2, theta_bright: 0.3, min_dwell: 5.0, smoothing_window: 1.0 }
    }

    #[test]
    fn undriven_ground_state_never_jumps() {
        let p = ModelParams { rabi: 0.0, ..ModelParams::standard(6, 3.4) };
        for scheme in [JumpScheme::Bernoulli, JumpScheme::WaitingTime] {
            let cfg = TrajectoryConfig { scheme, ..TrajectoryConfig::new(&p, 20.0, 7) };
            let r = evolve_trajectory(&p, &cfg).unwrap();
            assert!(r.jump_times.is_empty());
            assert!(r.ne.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn reproducible_and_stream_dependent() {
        let p = ModelParams::standard(6, 3.4);
        for scheme in [JumpScheme::Bernoulli, JumpScheme::WaitingTime] {
            let cfg = TrajectoryConfig { scheme, ..TrajectoryConfig::new(&p, 30.0, 11) };
            let a = evolve_trajectory(&p, &cfg).unwrap();
            let b = evolve_trajectory(&p, &cfg).unwrap();
            assert!(!a.jump_times.is_empty());
            assert_eq!(a.jump_times, b.jump_times);
            let c = evolve_trajectory(&p, &TrajectoryConfig { stream: 1, ..cfg.clone() }).unwrap();
            assert_ne!(a.jump_times, c.jump_times);
        }
    }

    #[test]
    fn bernoulli_keeps_unit_norm_and_bounded_density() {
        let p = ModelParams::standard(5, 3.4);
        let cfg = TrajectoryConfig { record_states: true, ..TrajectoryConfig::new(&p, 20.0, 3) };
        let r = evolve_trajectory(&p, &cfg).unwrap();
        for s in &r.states {
            assert!((norm_sqr(s) - 1.0).abs() < 1e-9);
        }
        assert!(r.ne.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn oversized_step_is_refused() {
        let p = ModelParams::standard(10, 3.4);
        let cfg = TrajectoryConfig { dt: 0.5, initial: Some(vec![cr(1.0); 11]), ..TrajectoryConfig::new(&p, 5.0, 1) };
        assert!(matches!(evolve_trajectory(&p, &cfg), Err(Error::StepTooLarge { .. })));
    }

    #[test]
    fn partial_propagation_matches_exponential() {
        let p = ModelParams::standard(8, 3.4);
        let prop = Propagator::new(&p, 0.05, JumpScheme::WaitingTime).unwrap();
        let psi: Vec<c64> = (0..9).map(|i| c64::new(1.0 / (1.0 + i as f64), 0.1 * i as f64)).collect();
        let a = prop.apply_u(&psi);
        let b = prop.series(&psi, 0.05).eval(0.05);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).norm() < 1e-12);
        }
    }

    #[test]
    fn waiting_time_jumps_do_not_depend_on_step() {
        let p = ModelParams::standard(6, 3.4);
        let base = TrajectoryConfig { scheme: JumpScheme::WaitingTime, ..TrajectoryConfig::new(&p, 40.0, 5) };
        let a = evolve_trajectory(&p, &TrajectoryConfig { dt: 0.02, ..base.clone() }).unwrap();
        let b = evolve_trajectory(&p, &TrajectoryConfig { dt: 0.01, ..base.clone() }).unwrap();
        assert_eq!(a.jump_times.len(), b.jump_times.len());
        for (x, y) in a.jump_times.iter().zip(&b.jump_times) {
            assert!((x - y).abs() < 1e-8, "{x} vs {y}");
        }
    }

    fn square_wave(period_lo: f64, period_hi: f64, cycles: usize, dt: f64) -> (Vec<f64>, Vec<f64>, Vec<Switch>) {
        let mut times = Vec::new();
        let mut ne = Vec::new();
        let mut truth = Vec::new();
        let mut t = 0.0;
        for c in 0..cycles {
            for (len, val, dir) in [(period_lo, 0.05, Direction::Downward), (period_hi, 0.4, Direction::Upward)] {
                if c > 0 || dir == Direction::Upward {
                    truth.push(Switch { time: t, direction: dir });
                }
                let end = t + len;
                while t < end - 1e-12 {
                    times.push(t);
                    ne.push(val);
                    t += dt;
                }
            }
        }
        (times, ne, truth)
    }

    #[test]
    fn square_wave_switch_times() {
        let (times, ne, truth) = square_wave(20.0, 30.0, 5, 0.1);
        let sw = detect_in_series(&times, &ne, &det());
        assert_eq!(sw.len(), truth.len());
        for (s, t) in sw.iter().zip(&truth) {
            assert_eq!(s.direction, t.direction);
            assert!((s.time - t.time).abs() <= 1.0 + 1e-9, "{} vs {}", s.time, t.time);
        }
        for w in sw.windows(2) {
            assert_ne!(w[0].direction, w[1].direction);
        }
        // up and down crossings of the smoothed signal lag by different fractions of the window
        let w = waits_from_switches(&sw);
        assert!(w.dark.iter().all(|x| (x - 20.0).abs() < 0.5));
        assert!(w.bright.iter().all(|x| (x - 30.0).abs() < 0.5));
    }

    #[test]
    fn short_excursions_are_suppressed() {
        let mut times = Vec::new();
        let mut ne = Vec::new();
        for k in 0..1000 {
            let t = k as f64 * 0.1;
            times.push(t);
            // dark background with a 2-unit bright blip at t = 40
            ne.push(if (40.0..42.0).contains(&t) { 0.45 } else { 0.05 });
        }
        assert!(detect_in_series(&times, &ne, &det()).is_empty());
    }

    #[test]
    fn thresholds_must_bracket_unstable_point() {
        let p = ModelParams::standard(10, 3.4);
        let good = DetectorConfig::from_mean_field(&p).unwrap();
        assert!(good.validate_against(&p).is_ok());
        let bad = DetectorConfig { theta_dark: 0.3, theta_bright: 0.35, ..good };
        assert!(matches!(bad.validate_against(&p), Err(Error::Thresholds { .. })));
    }

    #[test]
    fn single_state_record_is_unimodal() {
        let r = TrajectoryRecord { times: (0..200).map(|i| i as f64).collect(), ne: vec![0.3; 200], ..Default::default() };
        let pdf = trajectory_pdf(&[r], 0.01).unwrap();
        assert!((pdf.total_mass() - 1.0).abs() < 1e-12);
        assert_eq!(pdf.densities.iter().filter(|v| **v > 0.0).count(), 1);
        assert_eq!(pdf.peaks(0, 0.0).len(), 1);
    }

    #[test]
    fn exponential_waiting_fit_recovers_parameters() {
        let runs: Vec<SwitchingRun> = [10usize, 14, 18, 22]
            .iter()
            .map(|&n| SwitchingRun {
                n_atoms: n,
                delta: 3.4,
                waits: Waits { dark: vec![2.0 * (0.1 * n as f64).exp(); 25], bright: vec![0.5 * (0.3 * n as f64).exp(); 25] },
                switches: vec![],
                total_time: 0.0,
                jumps: 0,
                pdf: BinnedPdf::new(0.01).unwrap(),
                detector: det(),
                seed: 0,
            })
            .collect();
        let st = waiting_time_stats(&runs);
        let fd = st.fit_dark.unwrap();
        let fb = st.fit_bright.unwrap();
        assert!((fd.a - 0.1).abs() < 1e-10 && (fd.b - 2.0).abs() < 1e-9);
        assert!((fb.a - 0.3).abs() < 1e-10 && (fb.b - 0.5).abs() < 1e-9);
        let mut few = runs.clone();
        few[0].waits.dark.truncate(5);
        let st = waiting_time_stats(&few);
        assert!(!st.rows[0].dark_ok);
        assert!(st.fit_dark.is_none());
    }

    #[test]
    fn tau_of_equal_times() {
        assert_eq!(relaxation_time(8.0, 8.0), 4.0);
    }

    #[test]
    fn monostable_trajectory_has_no_switches() {
        let p = ModelParams::standard(30, 2.4);
        let det = DetectorConfig::from_mean_field(&ModelParams::standard(30, 3.4)).unwrap();
        let cfg = TrajectoryConfig {
            dt: 0.02,
            scheme: JumpScheme::WaitingTime,
            record_stride: 5,
            detector: Some(det),
            ..TrajectoryConfig::new(&p, 500.0, 2)
        };
        let r = evolve_trajectory(&p, &cfg).unwrap();
        // only the initial climb out of the ground state
        assert!(r.switches.len() <= 1, "{:?}", r.switches);
        assert!(r.switches.iter().all(|s| s.direction == Direction::Upward && s.time < 10.0));
    }
}
