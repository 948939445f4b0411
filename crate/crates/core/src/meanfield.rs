//! Mean-field Bloch equations, fixed points, stability and the regime diagram.

use faer::Mat;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::bisect;
use crate::model::ModelParams;

pub const STABILITY_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BlochState {
    pub mx: f64,
    pub my: f64,
    pub mz: f64,
}

impl BlochState {
    pub fn new(mx: f64, my: f64, mz: f64) -> Self {
        Self { mx, my, mz }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self { mx: a[0], my: a[1], mz: a[2] }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.mx, self.my, self.mz]
    }

    pub fn ground() -> Self {
        Self::new(0.0, 0.0, -1.0)
    }

    pub fn ne(self) -> f64 {
        (self.mz + 1.0) / 2.0
    }

    pub fn radius(self) -> f64 {
        (self.mx * self.mx + self.my * self.my + self.mz * self.mz).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.mx.is_finite() && self.my.is_finite() && self.mz.is_finite()
    }
}

/// Time derivative of (mx, my, mz).
pub fn mf_rhs(m: BlochState, p: &ModelParams) -> BlochState {
    let g = p.decay;
    let a = p.interaction / 2.0 * (m.mz + 1.0) - p.detuning;
    BlochState {
        mx: -a * m.my - g / 2.0 * m.mx,
        my: -p.rabi * m.mz + a * m.mx - g / 2.0 * m.my,
        mz: p.rabi * m.my - g * (m.mz + 1.0),
    }
}

pub fn mf_jacobian(m: BlochState, p: &ModelParams) -> [[f64; 3]; 3] {
    let g = p.decay;
    let hv = p.interaction / 2.0;
    let a = hv * (m.mz + 1.0) - p.detuning;
    [
        [-g / 2.0, -a, -hv * m.my],
        [a, -g / 2.0, -p.rabi + hv * m.mx],
        [0.0, p.rabi, -g],
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Stability {
    Stable,
    Unstable,
    Saddle,
}

#[derive(Clone, Debug, Serialize)]
pub struct FixedPoint {
    pub state: BlochState,
    /// (re, im) pairs
    pub jacobian_eigs: [(f64, f64); 3],
    pub stability: Stability,
    /// An eigenvalue lies within the stability tolerance of the imaginary axis.
    pub marginal: bool,
}

impl FixedPoint {
    pub fn ne(&self) -> f64 {
        self.state.ne()
    }

    pub fn is_stable(&self) -> bool {
        self.stability == Stability::Stable
    }
}

pub fn eig3(j: &[[f64; 3]; 3]) -> Result<[(f64, f64); 3]> {
    let m = Mat::<f64>::from_fn(3, 3, |r, c| j[r][c]);
    let e = m.eigenvalues().map_err(|e| Error::Eigensolver(format!("{e:?}")))?;
    let mut out = [(0.0, 0.0); 3];
    for (o, z) in out.iter_mut().zip(e) {
        *o = (z.re, z.im);
    }
    out.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.partial_cmp(&b.1).unwrap()));
    Ok(out)
}

pub fn classify(state: BlochState, p: &ModelParams) -> Result<FixedPoint> {
    let eigs = eig3(&mf_jacobian(state, p))?;
    let marginal = eigs.iter().any(|e| e.0.abs() <= STABILITY_TOL);
    let n_pos = eigs.iter().filter(|e| e.0 > STABILITY_TOL).count();
    let n_neg = eigs.iter().filter(|e| e.0 < -STABILITY_TOL).count();
    let stability = if n_neg == 3 {
        Stability::Stable
    } else if n_pos > 0 && n_neg > 0 {
        Stability::Saddle
    } else {
        Stability::Unstable
    };
    if n_pos >= 2 && eigs.iter().any(|e| e.0 > STABILITY_TOL && e.1.abs() > 0.0) {
        log::warn!("oscillatory instability at delta = {}", p.detuning);
    }
    Ok(FixedPoint { state, jacobian_eigs: eigs, stability, marginal })
}

/// Coefficients (c3, c2, c1, c0) of the cubic in u = mz + 1 whose roots are the fixed points.
pub fn fixed_point_cubic(p: &ModelParams) -> [f64; 4] {
    let (v, d, o, g) = (p.interaction, p.detuning, p.rabi, p.decay);
    [v * v / 2.0, -2.0 * v * d, 2.0 * d * d + o * o + g * g / 2.0, -o * o]
}

fn poly(c: &[f64; 4], u: f64) -> f64 {
    ((c[0] * u + c[1]) * u + c[2]) * u + c[3]
}

fn dpoly(c: &[f64; 4], u: f64) -> f64 {
    (3.0 * c[0] * u + 2.0 * c[1]) * u + c[2]
}

/// All roots of the cubic (real and complex), as (re, im).
pub fn cubic_roots(c: &[f64; 4]) -> Result<Vec<(f64, f64)>> {
    let scale = c.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if c[0].abs() <= 1e-14 * scale {
        // Degenerates to a quadratic or linear equation.
        let (a, b, cc) = (c[1], c[2], c[3]);
        if a.abs() <= 1e-14 * scale {
            if b == 0.0 {
                return Ok(vec![]);
            }
            return Ok(vec![(-cc / b, 0.0)]);
        }
        let disc = b * b - 4.0 * a * cc;
        if disc >= 0.0 {
            let q = -0.5 * (b + b.signum() * disc.sqrt());
            let mut r = vec![(q / a, 0.0)];
            if q != 0.0 {
                r.push((cc / q, 0.0));
            }
            return Ok(r);
        }
        let re = -b / (2.0 * a);
        let im = (-disc).sqrt() / (2.0 * a);
        return Ok(vec![(re, im), (re, -im)]);
    }
    let comp = Mat::<f64>::from_fn(3, 3, |r, col| match (r, col) {
        (0, _) => -c[col + 1] / c[0],
        (1, 0) | (2, 1) => 1.0,
        _ => 0.0,
    });
    let e = comp.eigenvalues().map_err(|e| Error::Eigensolver(format!("{e:?}")))?;
    Ok(e.into_iter().map(|z| (z.re, z.im)).collect())
}

fn polish(c: &[f64; 4], mut u: f64) -> f64 {
    for _ in 0..50 {
        let d = dpoly(c, u);
        if d == 0.0 {
            break;
        }
        let step = poly(c, u) / d;
        u -= step;
        if step.abs() < 1e-16 * (1.0 + u.abs()) {
            break;
        }
    }
    u
}

fn state_from_u(u: f64, p: &ModelParams) -> BlochState {
    let a = p.interaction / 2.0 * u - p.detuning;
    BlochState::new(-2.0 * a * u / p.rabi, p.decay * u / p.rabi, u - 1.0)
}

const IMAG_TOL: f64 = 1e-7;

/// Real roots u = mz + 1 in [0, 1] of the fixed-point cubic, ascending, and the complex ones.
fn split_roots(p: &ModelParams) -> Result<(Vec<f64>, Vec<(f64, f64)>)> {
    let c = fixed_point_cubic(p);
    let mut real = Vec::new();
    let mut complex = Vec::new();
    for (re, im) in cubic_roots(&c)? {
        if im.abs() <= IMAG_TOL * (1.0 + re.abs()) {
            let u = polish(&c, re);
            if (-1e-12..=1.0 + 1e-12).contains(&u) {
                real.push(u.clamp(0.0, 1.0));
            }
        } else {
            complex.push((re, im));
        }
    }
    real.sort_by(|a, b| a.partial_cmp(b).unwrap());
    real.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    Ok((real, complex))
}

/// Every fixed point of the mean-field equations, ordered by increasing n_e.
pub fn find_fixed_points(p: &ModelParams) -> Result<Vec<FixedPoint>> {
    p.validate()?;
    if p.rabi == 0.0 {
        return Ok(vec![classify(BlochState::ground(), p)?]);
    }
    let (real, _) = split_roots(p)?;
    real.into_iter().map(|u| classify(state_from_u(u, p), p)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Regime {
    MonostableI,
    Bistable,
    MonostableII,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::MonostableI => "monostable_I",
            Regime::Bistable => "bistable",
            Regime::MonostableII => "monostable_II",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RegimeLabel {
    pub regime: Regime,
    pub n_stable: usize,
    pub stable_ne: Vec<f64>,
    pub unstable_ne: Vec<f64>,
}

/// Monostable I when the stable branch is the upper (bright) one, II when it is the lower (dark) one.
/// The side is read off from where the remaining roots of the cubic (real or complex) sit.
pub fn regime_label(p: &ModelParams) -> Result<RegimeLabel> {
    let fps = find_fixed_points(p)?;
    let stable_ne: Vec<f64> = fps.iter().filter(|f| f.is_stable()).map(|f| f.ne()).collect();
    let unstable_ne: Vec<f64> = fps.iter().filter(|f| !f.is_stable()).map(|f| f.ne()).collect();
    let n_stable = stable_ne.len();
    let regime = if n_stable == 2 && unstable_ne.len() == 1 {
        Regime::Bistable
    } else if p.interaction == 0.0 || p.rabi == 0.0 {
        Regime::MonostableI
    } else {
        let u_stable = fps
            .iter()
            .find(|f| f.is_stable())
            .map(|f| f.state.mz + 1.0)
            .unwrap_or(0.0);
        let c = fixed_point_cubic(p);
        let others: Vec<f64> = cubic_roots(&c)?
            .into_iter()
            .map(|(re, _)| re)
            .filter(|re| (re - u_stable).abs() > 1e-9)
            .collect();
        let mean_other = if others.is_empty() {
            u_stable
        } else {
            others.iter().sum::<f64>() / others.len() as f64
        };
        if mean_other > u_stable {
            Regime::MonostableII
        } else {
            Regime::MonostableI
        }
    };
    Ok(RegimeLabel { regime, n_stable, stable_ne, unstable_ne })
}

#[derive(Clone, Debug, Serialize)]
pub struct PhaseRow {
    pub delta: f64,
    pub label: RegimeLabel,
}

#[derive(Clone, Debug, Serialize)]
pub struct PhaseDiagram {
    pub rows: Vec<PhaseRow>,
    /// Bisection estimates of the points where the regime changes.
    pub boundaries: Vec<f64>,
}

pub fn phase_diagram(delta_grid: &[f64], p: &ModelParams) -> Result<PhaseDiagram> {
    if delta_grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidParams("delta grid must be sorted".into()));
    }
    let rows = delta_grid
        .iter()
        .map(|&d| Ok(PhaseRow { delta: d, label: regime_label(&p.with_detuning(d))? }))
        .collect::<Result<Vec<_>>>()?;
    let mut boundaries = Vec::new();
    for w in rows.windows(2) {
        if w[0].label.regime != w[1].label.regime {
            let r0 = w[0].label.regime;
            let b = bisect(w[0].delta, w[1].delta, 1e-4, |d| {
                let same = regime_label(&p.with_detuning(d)).map(|l| l.regime == r0).unwrap_or(false);
                if same { -1.0 } else { 1.0 }
            });
            boundaries.push(b.unwrap_or(0.5 * (w[0].delta + w[1].delta)));
        }
    }
    Ok(PhaseDiagram { rows, boundaries })
}

/// The (dark, saddle, bright) triple in the bistable regime.
pub fn bistable_triple(p: &ModelParams) -> Result<(FixedPoint, FixedPoint, FixedPoint)> {
    let fps = find_fixed_points(p)?;
    let stable: Vec<&FixedPoint> = fps.iter().filter(|f| f.is_stable()).collect();
    let unstable: Vec<&FixedPoint> = fps.iter().filter(|f| !f.is_stable()).collect();
    if stable.len() != 2 || unstable.len() != 1 {
        return Err(Error::NotBistable(p.detuning));
    }
    Ok((stable[0].clone(), unstable[0].clone(), stable[1].clone()))
}

fn add(a: BlochState, b: BlochState, h: f64) -> BlochState {
    BlochState::new(a.mx + h * b.mx, a.my + h * b.my, a.mz + h * b.mz)
}

pub fn rk4_step(m: BlochState, p: &ModelParams, dt: f64) -> BlochState {
    let k1 = mf_rhs(m, p);
    let k2 = mf_rhs(add(m, k1, dt / 2.0), p);
    let k3 = mf_rhs(add(m, k2, dt / 2.0), p);
    let k4 = mf_rhs(add(m, k3, dt), p);
    BlochState::new(
        m.mx + dt / 6.0 * (k1.mx + 2.0 * k2.mx + 2.0 * k3.mx + k4.mx),
        m.my + dt / 6.0 * (k1.my + 2.0 * k2.my + 2.0 * k3.my + k4.my),
        m.mz + dt / 6.0 * (k1.mz + 2.0 * k2.mz + 2.0 * k3.mz + k4.mz),
    )
}

#[derive(Clone, Debug, Serialize)]
pub struct MfTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<BlochState>,
}

impl MfTrajectory {
    pub fn last(&self) -> BlochState {
        *self.states.last().expect("trajectory has the initial state")
    }
}

/// Fixed-step RK4 integration; the final step is shortened to land on t_final.
pub fn integrate_mf(initial: BlochState, p: &ModelParams, t_final: f64, dt: f64) -> Result<MfTrajectory> {
    if !(dt > 0.0) || !dt.is_finite() || dt < 1e-14 * t_final.max(1.0) {
        return Err(Error::Integration(format!("step size underflow or invalid dt = {dt}")));
    }
    if !(t_final >= 0.0) {
        return Err(Error::Integration(format!("invalid t_final = {t_final}")));
    }
    let steps = (t_final / dt).ceil() as usize;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut m = initial;
    let mut t = 0.0;
    times.push(t);
    states.push(m);
    for k in 0..steps {
        let h = if k + 1 == steps { t_final - t } else { dt };
        m = rk4_step(m, p, h);
        t = if k + 1 == steps { t_final } else { t + h };
        if !m.is_finite() {
            return Err(Error::Integration(format!("non-finite state at t = {t}")));
        }
        times.push(t);
        states.push(m);
    }
    Ok(MfTrajectory { times, states })
}
