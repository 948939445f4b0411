//! Minimum-action switching paths of the semiclassical dynamics and the resulting
//! per-atom barriers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meanfield::{bistable_triple, mf_jacobian, mf_rhs, rk4_step, BlochState, FixedPoint};
use crate::model::ModelParams;

type V3 = [f64; 3];
type M3 = [[f64; 3]; 3];

/// Regularization added to the covariance before inversion.
pub const TIKHONOV: f64 = 1e-10;

fn dot(a: &V3, b: &V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn mv(m: &M3, v: &V3) -> V3 {
    [dot(&m[0], v), dot(&m[1], v), dot(&m[2], v)]
}

fn mtv(m: &M3, v: &V3) -> V3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

fn sub(a: &V3, b: &V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn axpy(a: &V3, s: f64, b: &V3) -> V3 {
    [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]]
}

fn norm(a: &V3) -> f64 {
    dot(a, a).sqrt()
}

fn arr(m: BlochState) -> V3 {
    m.to_array()
}

fn rhs(m: &V3, p: &ModelParams) -> V3 {
    arr(mf_rhs(BlochState::from_array(*m), p))
}

fn jac(m: &V3, p: &ModelParams) -> M3 {
    mf_jacobian(BlochState::from_array(*m), p)
}

/// Rescaled noise covariance of the Bloch variables.
pub fn noise_covariance(m: &V3) -> M3 {
    [[1.0, 0.0, m[0]], [0.0, 1.0, m[1]], [m[0], m[1], 2.0 * (m[2] + 1.0)]]
}

/// Inverse of a symmetric 3x3 matrix, or None unless it is positive definite.
fn spd_inverse(m: &M3) -> Option<M3> {
    let d1 = m[0][0];
    let d2 = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let c00 = m[1][1] * m[2][2] - m[1][2] * m[2][1];
    let c01 = m[1][2] * m[2][0] - m[1][0] * m[2][2];
    let c02 = m[1][0] * m[2][1] - m[1][1] * m[2][0];
    let det = m[0][0] * c00 + m[0][1] * c01 + m[0][2] * c02;
    if !(d1 > 0.0 && d2 > 0.0 && det > 0.0) {
        return None;
    }
    let c11 = m[0][0] * m[2][2] - m[0][2] * m[2][0];
    let c12 = m[0][1] * m[2][0] - m[0][0] * m[2][1];
    let c22 = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inv = 1.0 / det;
    Some([
        [c00 * inv, c01 * inv, c02 * inv],
        [c01 * inv, c11 * inv, c12 * inv],
        [c02 * inv, c12 * inv, c22 * inv],
    ])
}

fn metric(m: &V3) -> Option<M3> {
    let mut c = noise_covariance(m);
    for (i, row) in c.iter_mut().enumerate() {
        row[i] += TIKHONOV;
    }
    spd_inverse(&c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PhasePoint {
    pub m: V3,
    pub q: V3,
}

impl PhasePoint {
    pub fn new(m: V3, q: V3) -> Self {
        Self { m, q }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.m[0], self.m[1], self.m[2], self.q[0], self.q[1], self.q[2]]
    }

    pub fn from_array(x: &[f64; 6]) -> Self {
        Self { m: [x[0], x[1], x[2]], q: [x[3], x[4], x[5]] }
    }
}

/// H = F.q + q.M q / 2
pub fn hamiltonian(x: &PhasePoint, p: &ModelParams) -> f64 {
    let f = rhs(&x.m, p);
    let c = noise_covariance(&x.m);
    dot(&f, &x.q) + 0.5 * dot(&x.q, &mv(&c, &x.q))
}

/// (dH/dq, -dH/dm)
pub fn hj_flow(x: &PhasePoint, p: &ModelParams) -> [f64; 6] {
    let f = rhs(&x.m, p);
    let c = noise_covariance(&x.m);
    let mdot = axpy(&f, 1.0, &mv(&c, &x.q));
    let jt = mtv(&jac(&x.m, p), &x.q);
    let q = x.q;
    [mdot[0], mdot[1], mdot[2], -jt[0] - q[0] * q[2], -jt[1] - q[1] * q[2], -jt[2] - q[2] * q[2]]
}

/// Adaptive Dormand-Prince integration; `observe` sees every accepted step and may stop the run
/// by returning false.
fn dopri<const N: usize>(
    x0: [f64; N],
    f: impl Fn(&[f64; N]) -> [f64; N],
    t_final: f64,
    tol: f64,
    mut observe: impl FnMut(f64, &[f64; N]) -> bool,
) -> Result<()> {
    const A: [[f64; 6]; 7] = [
        [0.0; 6],
        [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    const B4: [f64; 7] = [5179.0 / 57600.0, 0.0, 7571.0 / 16695.0, 393.0 / 640.0, -92097.0 / 339200.0, 187.0 / 2100.0, 1.0 / 40.0];
    let mut x = x0;
    let mut t = 0.0;
    let mut h = 1e-3_f64.min(t_final.max(1e-12));
    if !observe(0.0, &x) {
        return Ok(());
    }
    while t < t_final {
        if h < 1e-14 * t.max(1.0) {
            return Err(Error::Integration(format!("step size underflow at t = {t}")));
        }
        h = h.min(t_final - t);
        let mut k = [[0.0; N]; 7];
        k[0] = f(&x);
        for s in 1..7 {
            let mut y = x;
            for (j, kj) in k.iter().enumerate().take(s) {
                for i in 0..N {
                    y[i] += h * A[s][j] * kj[i];
                }
            }
            k[s] = f(&y);
        }
        let mut y5 = x;
        let mut err = 0.0_f64;
        for i in 0..N {
            let s5: f64 = (0..6).map(|s| A[6][s] * k[s][i]).sum();
            let s4: f64 = (0..7).map(|s| B4[s] * k[s][i]).sum();
            y5[i] = x[i] + h * s5;
            let sc = tol * (1.0 + x[i].abs().max(y5[i].abs()));
            err = err.max((h * (s5 - s4) / sc).abs());
        }
        if !y5.iter().all(|v| v.is_finite()) {
            return Err(Error::Integration(format!("integration diverged at t = {t}")));
        }
        if err <= 1.0 {
            t += h;
            x = y5;
            if !observe(t, &x) {
                return Ok(());
            }
        }
        h *= if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
    }
    Ok(())
}

/// Adaptive integration of the Hamilton-Jacobi flow.
pub fn integrate_hj(x0: &PhasePoint, p: &ModelParams, t_final: f64, tol: f64) -> Result<Vec<(f64, PhasePoint)>> {
    let mut out = Vec::new();
    dopri(x0.to_array(), |y| hj_flow(&PhasePoint::from_array(y), p), t_final, tol, |t, y| {
        out.push((t, PhasePoint::from_array(y)));
        true
    })?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmamSettings {
    pub k_points: usize,
    pub epsilon: f64,
    /// Stop once the objective drops by less than this for several iterations in a row.
    pub tol: f64,
    pub max_iters: usize,
    /// Weight of the penalty on unequal neighbouring segment lengths. The geometric action is
    /// nearly flat along the path, and this pins the point spacing without bending the path.
    pub spacing_weight: f64,
    /// Directions in the shooting scan that seeds the path; zero starts from a straight line.
    pub shooting_dirs: usize,
}

/// Closest approach to the saddle accepted for a shooting seed.
const SHOT_MISS: f64 = 1e-3;
/// Head size used for the shooting scan; smaller heads are reached by the linearized flow.
const SEED_EPS: f64 = 1e-2;

impl Default for GmamSettings {
    fn default() -> Self {
        Self { k_points: 200, epsilon: 1e-3, tol: 1e-10, max_iters: 100_000, spacing_weight: 1.0, shooting_dirs: 400 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct InstantonPath {
    pub points: Vec<PhasePoint>,
    /// Action increment of each segment; one fewer than the points.
    pub increments: Vec<f64>,
    pub phi: f64,
    pub energy_residual: f64,
    pub converged: bool,
    /// Number of leading points on the fluctuational segment; the rest relax with q = 0.
    pub uphill_len: usize,
}

impl InstantonPath {
    pub fn arclength(&self) -> Vec<f64> {
        let mut s = vec![0.0];
        for w in self.points.windows(2) {
            let l = s.last().unwrap() + norm(&sub(&w[1].m, &w[0].m));
            s.push(l);
        }
        s
    }

    /// Largest |q| on the relaxation segment.
    pub fn downhill_q_norm(&self) -> f64 {
        self.points[self.uphill_len..].iter().map(|x| norm(&x.q)).fold(0.0, f64::max)
    }

    pub fn downhill_action(&self) -> f64 {
        self.increments[self.uphill_len.saturating_sub(1).min(self.increments.len())..].iter().sum()
    }
}

struct Segment {
    s: f64,
    q: V3,
    h: f64,
}

fn segment(a: &V3, b: &V3, p: &ModelParams) -> Option<Segment> {
    let d = sub(b, a);
    let c = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0, (a[2] + b[2]) / 2.0];
    let f = rhs(&c, p);
    let am = metric(&c)?;
    let ad = mv(&am, &d);
    let af = mv(&am, &f);
    let aa = dot(&d, &ad);
    let bb = dot(&f, &af);
    let cc = dot(&d, &af);
    let s = (aa * bb).sqrt() - cc;
    let lam = if aa > 0.0 { (bb / aa).sqrt() } else { 0.0 };
    let q = [lam * ad[0] - af[0], lam * ad[1] - af[1], lam * ad[2] - af[2]];
    let h = hamiltonian(&PhasePoint::new(c, q), p);
    Some(Segment { s, q, h })
}

#[cfg(test)]
/// Discrete geometric action; infinite when the path leaves the region where the covariance is
/// positive definite.
fn action(path: &[V3], p: &ModelParams) -> f64 {
    let mut total = 0.0;
    for w in path.windows(2) {
        match segment(&w[0], &w[1], p) {
            Some(s) => total += s.s,
            None => return f64::INFINITY,
        }
    }
    total
}

/// dM/dm_c
fn cov_derivative(c: usize) -> M3 {
    let mut e = [[0.0; 3]; 3];
    match c {
        0 => {
            e[0][2] = 1.0;
            e[2][0] = 1.0;
        }
        1 => {
            e[1][2] = 1.0;
            e[2][1] = 1.0;
        }
        _ => e[2][2] = 2.0,
    }
    e
}

/// Action and its gradient with respect to every path point.
fn action_grad(path: &[V3], p: &ModelParams) -> Option<(f64, Vec<V3>)> {
    let mut grad = vec![[0.0; 3]; path.len()];
    let mut total = 0.0;
    for k in 0..path.len() - 1 {
        let (a, b) = (&path[k], &path[k + 1]);
        let d = sub(b, a);
        let c = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0, (a[2] + b[2]) / 2.0];
        let f = rhs(&c, p);
        let jf = jac(&c, p);
        let am = metric(&c)?;
        let ad = mv(&am, &d);
        let af = mv(&am, &f);
        let aa = dot(&d, &ad);
        let bb = dot(&f, &af);
        let cc = dot(&d, &af);
        let r = (aa * bb).sqrt();
        total += r - cc;
        let (wa, wb) = if r > 1e-300 { (bb / (2.0 * r), aa / (2.0 * r)) } else { (0.0, 0.0) };
        // derivative with respect to the chord
        let mut gd = [0.0; 3];
        for i in 0..3 {
            gd[i] = wa * 2.0 * ad[i] - af[i];
        }
        // derivative with respect to the midpoint
        let jt_af = mtv(&jf, &af);
        let jt_ad = mtv(&jf, &ad);
        let mut gc = [0.0; 3];
        for (j, g) in gc.iter_mut().enumerate() {
            let e = cov_derivative(j);
            // dA = -A E A
            let ea_d = mv(&e, &ad);
            let ea_f = mv(&e, &af);
            let da = -dot(&ad, &ea_d);
            let db = 2.0 * jt_af[j] - dot(&af, &ea_f);
            let dc = jt_ad[j] - dot(&ad, &ea_f);
            *g = wa * da + wb * db - dc;
        }
        for i in 0..3 {
            grad[k][i] += -gd[i] + 0.5 * gc[i];
            grad[k + 1][i] += gd[i] + 0.5 * gc[i];
        }
    }
    Some((total, grad))
}

/// Action plus the spacing penalty, with gradient.
fn objective(path: &[V3], p: &ModelParams, mu: f64) -> Option<(f64, Vec<V3>)> {
    let (mut total, mut grad) = action_grad(path, p)?;
    if mu > 0.0 {
        let lens: Vec<f64> = path.windows(2).map(|w| norm(&sub(&w[1], &w[0]))).collect();
        for k in 0..lens.len().saturating_sub(1) {
            let r = lens[k] - lens[k + 1];
            total += mu * r * r;
            for (seg, sign) in [(k, 2.0 * mu * r), (k + 1, -2.0 * mu * r)] {
                if lens[seg] == 0.0 {
                    continue;
                }
                let u = sub(&path[seg + 1], &path[seg]);
                for c in 0..3 {
                    let d = sign * u[c] / lens[seg];
                    grad[seg + 1][c] += d;
                    grad[seg][c] -= d;
                }
            }
        }
    }
    Some((total, grad))
}

/// L-BFGS with Armijo backtracking; returns whether the stopping rule was met.
fn lbfgs(x: &mut Vec<f64>, eval: impl Fn(&[f64]) -> Option<(f64, Vec<f64>)>, max_iters: usize, tol: f64) -> Result<bool> {
    const MEM: usize = 10;
    const QUIET: usize = 5;
    let mut quiet = 0;
    let (mut fx, mut g) = eval(x).ok_or_else(|| Error::Integration("initial path leaves the physical region".into()))?;
    let mut hist: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    for _ in 0..max_iters {
        // two-loop recursion
        let mut dir: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * s.iter().zip(&dir).map(|(u, v)| u * v).sum::<f64>();
            for (d, yv) in dir.iter_mut().zip(y) {
                *d -= a * yv;
            }
            alphas.push(a);
        }
        let gamma = match hist.last() {
            Some((s, y, _)) => s.iter().zip(y).map(|(u, v)| u * v).sum::<f64>() / y.iter().map(|v| v * v).sum::<f64>(),
            None => 1e-3 / g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300),
        };
        for d in dir.iter_mut() {
            *d *= gamma;
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * y.iter().zip(&dir).map(|(u, v)| u * v).sum::<f64>();
            for (d, sv) in dir.iter_mut().zip(s) {
                *d += (a - b) * sv;
            }
        }
        let mut slope: f64 = g.iter().zip(&dir).map(|(u, v)| u * v).sum();
        if !(slope < 0.0) {
            hist.clear();
            dir = g.iter().map(|v| -v * gamma.min(1.0)).collect();
            slope = g.iter().zip(&dir).map(|(u, v)| u * v).sum();
            if !(slope < 0.0) {
                return Ok(true);
            }
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            if let Some((ft, gt)) = eval(&trial) {
                if ft <= fx + 1e-4 * step * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((trial, ft, gt)) = accepted else {
            return Ok(quiet > 0);
        };
        let s: Vec<f64> = dir.iter().map(|d| d * step).collect();
        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(u, v)| u * v).sum();
        if sy > 1e-300 {
            hist.push((s, y, 1.0 / sy));
            if hist.len() > MEM {
                hist.remove(0);
            }
        }
        *x = trial;
        quiet = if fx - ft < tol { quiet + 1 } else { 0 };
        fx = ft;
        g = gt;
        if quiet >= QUIET {
            return Ok(true);
        }
    }
    Ok(false)
}

/// `k` points at equal Euclidean spacing along a polyline, keeping its endpoints.
fn resample(path: &[V3], k: usize) -> Vec<V3> {
    let mut s = vec![0.0];
    for w in path.windows(2) {
        s.push(s.last().unwrap() + norm(&sub(&w[1], &w[0])));
    }
    let total = *s.last().unwrap();
    let mut out = Vec::with_capacity(k);
    let mut j = 0;
    for i in 0..k {
        let target = total * i as f64 / (k - 1) as f64;
        while j + 2 < path.len() && s[j + 1] < target {
            j += 1;
        }
        let span = s[j + 1] - s[j];
        let u = if span > 0.0 { ((target - s[j]) / span).clamp(0.0, 1.0) } else { 0.0 };
        out.push(axpy(&path[j], u, &sub(&path[j + 1], &path[j])));
    }
    out[k - 1] = *path.last().unwrap();
    out
}

/// Stationary covariance C of the linearized dynamics, J C + C J^T + M = 0.
pub fn lyapunov_covariance(m: &V3, p: &ModelParams) -> Result<M3> {
    let j = jac(m, p);
    let cov = noise_covariance(m);
    let idx = |r: usize, c: usize| r + 3 * c;
    let mut a = faer::Mat::<f64>::zeros(9, 9);
    let mut rhs = faer::Mat::<f64>::zeros(9, 1);
    for r in 0..3 {
        for c in 0..3 {
            for k in 0..3 {
                a[(idx(r, c), idx(k, c))] += j[r][k];
                a[(idx(r, c), idx(r, k))] += j[c][k];
            }
            rhs[(idx(r, c), 0)] = -cov[r][c];
        }
    }
    use faer::linalg::solvers::Solve;
    let sol = a.partial_piv_lu().solve(&rhs);
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = 0.5 * (sol[(idx(r, c), 0)] + sol[(idx(c, r), 0)]);
        }
    }
    if !out.iter().flatten().all(|v| v.is_finite()) {
        return Err(Error::Integration("singular Lyapunov equation".into()));
    }
    Ok(out)
}

/// Lower Cholesky factor of a symmetric positive definite 3x3 matrix.
fn cholesky(a: &M3) -> Option<M3> {
    let mut l = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let s: f64 = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Some(l)
}

/// Solve L^T x = b for lower-triangular L.
fn solve_lt(l: &M3, b: &V3) -> V3 {
    let mut x = [0.0; 3];
    for i in (0..3).rev() {
        let s: f64 = b[i] - (i + 1..3).map(|k| l[k][i] * x[k]).sum::<f64>();
        x[i] = s / l[i][i];
    }
    x
}

/// Points where the local quadratic quasipotential of a stable point equals eps^2 / 2.
struct Head {
    center: V3,
    l: M3,
    eps: f64,
}

impl Head {
    fn new(fp: &FixedPoint, p: &ModelParams, eps: f64) -> Result<Self> {
        let center = arr(fp.state);
        let c = lyapunov_covariance(&center, p)?;
        let q = spd_inverse(&c).ok_or_else(|| Error::Integration("stationary covariance not positive definite".into()))?;
        let l = cholesky(&q).ok_or_else(|| Error::Integration("stationary covariance not positive definite".into()))?;
        Ok(Self { center, l, eps })
    }

    fn point(&self, u: &V3) -> V3 {
        let n = norm(u);
        let v = solve_lt(&self.l, &[u[0] / n, u[1] / n, u[2] / n]);
        axpy(&self.center, self.eps, &v)
    }

    /// Chain rule from a gradient at the point to a gradient in u.
    fn pullback(&self, u: &V3, g: &V3) -> V3 {
        let n = norm(u);
        let uh = [u[0] / n, u[1] / n, u[2] / n];
        // d point / d uh = eps L^{-T}; its transpose applied to g
        let mut lg = [0.0; 3];
        // solve L y = g, then y is L^{-1} g
        for i in 0..3 {
            let s: f64 = g[i] - (0..i).map(|k| self.l[i][k] * lg[k]).sum::<f64>();
            lg[i] = s / self.l[i][i];
        }
        let w = [self.eps * lg[0], self.eps * lg[1], self.eps * lg[2]];
        let r = dot(&w, &uh);
        [(w[0] - r * uh[0]) / n, (w[1] - r * uh[1]) / n, (w[2] - r * uh[2]) / n]
    }

    /// u whose point lies along `toward` from the center.
    fn aim(&self, toward: &V3) -> V3 {
        let d = sub(toward, &self.center);
        // u proportional to L^T d
        [
            self.l[0][0] * d[0] + self.l[1][0] * d[1] + self.l[2][0] * d[2],
            self.l[1][1] * d[1] + self.l[2][1] * d[2],
            self.l[2][2] * d[2],
        ]
    }
}

/// Real eigenvector of a 3x3 matrix for a real eigenvalue.
fn null_vector(j: &M3, lam: f64) -> V3 {
    let r: Vec<V3> = (0..3)
        .map(|i| {
            let mut row = j[i];
            row[i] -= lam;
            row
        })
        .collect();
    let cross = |a: &V3, b: &V3| [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    let cands = [cross(&r[0], &r[1]), cross(&r[0], &r[2]), cross(&r[1], &r[2])];
    let best = cands.iter().max_by(|a, b| norm(a).partial_cmp(&norm(b)).unwrap()).unwrap();
    let n = norm(best);
    [best[0] / n, best[1] / n, best[2] / n]
}

fn oriented(v: V3, toward: &V3) -> V3 {
    if dot(&v, toward) < 0.0 {
        [-v[0], -v[1], -v[2]]
    } else {
        v
    }
}

/// Unstable direction of the saddle, oriented toward `toward`.
fn saddle_direction(saddle: &FixedPoint, toward: &V3, p: &ModelParams) -> Result<V3> {
    let m = arr(saddle.state);
    let (re, im) = saddle.jacobian_eigs[0];
    if !(re > 0.0 && im == 0.0) {
        return Err(Error::NotBistable(p.detuning));
    }
    Ok(oriented(null_vector(&jac(&m, p), re), &sub(toward, &m)))
}

fn momenta_and_increments(path: &[V3], p: &ModelParams) -> Result<(Vec<V3>, Vec<f64>, f64)> {
    let segs: Vec<Segment> = path
        .windows(2)
        .map(|w| segment(&w[0], &w[1], p).ok_or_else(|| Error::Integration("path leaves the physical region".into())))
        .collect::<Result<_>>()?;
    let k = path.len();
    let q: Vec<V3> = (0..k)
        .map(|i| {
            let l = if i > 0 { Some(segs[i - 1].q) } else { None };
            let r = if i + 1 < k { Some(segs[i].q) } else { None };
            match (l, r) {
                (Some(a), Some(b)) => [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0, (a[2] + b[2]) / 2.0],
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => [0.0; 3],
            }
        })
        .collect();
    let h = segs.iter().map(|s| s.h.abs()).fold(0.0, f64::max);
    Ok((q, segs.iter().map(|s| s.s).collect(), h))
}

#[derive(Clone, Debug)]
pub struct Shot {
    pub u: V3,
    pub miss: f64,
    pub phi: f64,
    pub path: Vec<PhasePoint>,
}

/// Zero-energy trajectory leaving the head ellipsoid of a stable point along the linearized
/// Lagrangian manifold, followed to its closest approach to `target`.
fn shoot(head: &Head, q_mat: &M3, u: &V3, target: &V3, p: &ModelParams, keep: bool) -> Result<Shot> {
    let m0 = head.point(u);
    let q0 = mv(q_mat, &sub(&m0, &head.center));
    let x0 = [m0[0], m0[1], m0[2], q0[0], q0[1], q0[2], 0.5 * head.eps * head.eps];
    let f = |y: &[f64; 7]| {
        let x = PhasePoint::new([y[0], y[1], y[2]], [y[3], y[4], y[5]]);
        let d = hj_flow(&x, p);
        let sdot = x.q[0] * d[0] + x.q[1] * d[1] + x.q[2] * d[2];
        [d[0], d[1], d[2], d[3], d[4], d[5], sdot]
    };
    let mut best = (f64::INFINITY, 0.0);
    let mut path = Vec::new();
    let mut best_len = 0;
    let r = dopri(x0, f, 200.0, 1e-10, |_, y| {
        let m = [y[0], y[1], y[2]];
        let d = norm(&sub(&m, target));
        if keep {
            path.push(PhasePoint::new(m, [y[3], y[4], y[5]]));
        }
        if d < best.0 {
            best = (d, y[6]);
            best_len = path.len();
        }
        let wild = norm(&m) > 1.5 || norm(&[y[3], y[4], y[5]]) > 1e3;
        !(wild || (best.0 < 0.01 && d > 3.0 * best.0 + 1e-3))
    });
    if let Err(e) = r {
        if best.0.is_infinite() {
            return Err(e);
        }
    }
    path.truncate(best_len);
    Ok(Shot { u: *u, miss: best.0, phi: best.1, path })
}

fn nelder_mead(f: impl Fn(&[f64; 2]) -> f64, x0: [f64; 2], scale: f64, iters: usize, ftol: f64) -> ([f64; 2], f64) {
    let mut pts = [x0, [x0[0] + scale, x0[1]], [x0[0], x0[1] + scale]];
    let mut vals = pts.map(|x| f(&x));
    for _ in 0..iters {
        let mut idx = [0, 1, 2];
        idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap_or(std::cmp::Ordering::Equal));
        let (b, m, w) = (idx[0], idx[1], idx[2]);
        if vals[b] < ftol {
            break;
        }
        let c = [(pts[b][0] + pts[m][0]) / 2.0, (pts[b][1] + pts[m][1]) / 2.0];
        let at = |t: f64| [c[0] + t * (pts[w][0] - c[0]), c[1] + t * (pts[w][1] - c[1])];
        let xr = at(-1.0);
        let fr = f(&xr);
        if fr < vals[b] {
            let xe = at(-2.0);
            let fe = f(&xe);
            if fe < fr {
                pts[w] = xe;
                vals[w] = fe;
            } else {
                pts[w] = xr;
                vals[w] = fr;
            }
        } else if fr < vals[m] {
            pts[w] = xr;
            vals[w] = fr;
        } else {
            let xc = at(0.5);
            let fc = f(&xc);
            if fc < vals[w] {
                pts[w] = xc;
                vals[w] = fc;
            } else {
                for i in [m, w] {
                    pts[i] = [(pts[i][0] + pts[b][0]) / 2.0, (pts[i][1] + pts[b][1]) / 2.0];
                    vals[i] = f(&pts[i]);
                }
            }
        }
    }
    let b = (0..3).min_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap()).unwrap();
    (pts[b], vals[b])
}

fn sphere_dir(a: &[f64; 2]) -> V3 {
    [a[0].sin() * a[1].cos(), a[0].sin() * a[1].sin(), a[0].cos()]
}

/// Refined zero-energy shots from the head ellipsoid of `source` toward `saddle`, sorted by
/// closest approach.
fn shots(source: &FixedPoint, saddle: &FixedPoint, p: &ModelParams, eps: f64, n_dirs: usize, miss_tol: f64) -> Result<Vec<Shot>> {
    let head = Head::new(source, p, eps)?;
    let l = head.l;
    let q_mat: M3 = std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| l[i][k] * l[j][k]).sum()));
    let target = arr(saddle.state);
    // Fibonacci lattice of directions
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let angles: Vec<[f64; 2]> = (0..n_dirs)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n_dirs as f64;
            [z.acos(), golden * i as f64]
        })
        .collect();
    let mut order: Vec<(usize, f64)> = angles
        .par_iter()
        .enumerate()
        .filter_map(|(i, a)| shoot(&head, &q_mat, &sphere_dir(a), &target, p, false).ok().map(|s| (i, s.miss)))
        .collect();
    order.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    order.truncate(8);
    let step = (4.0 * std::f64::consts::PI / n_dirs as f64).sqrt();
    let mut refined: Vec<Shot> = order
        .par_iter()
        .filter_map(|(i, _)| {
            let miss = |a: &[f64; 2]| shoot(&head, &q_mat, &sphere_dir(a), &target, p, false).map(|s| s.miss).unwrap_or(f64::INFINITY);
            let (a, _) = nelder_mead(miss, angles[*i], 0.5 * step, 400, 0.1 * miss_tol);
            shoot(&head, &q_mat, &sphere_dir(&a), &target, p, true).ok()
        })
        .collect();
    refined.sort_by(|a, b| a.miss.partial_cmp(&b.miss).unwrap());
    Ok(refined)
}

/// Barrier from a stable point to the saddle by shooting zero-energy trajectories; the
/// lowest-action trajectory that reaches the saddle within `miss_tol` wins.
pub fn shooting_barrier(source: &FixedPoint, saddle: &FixedPoint, p: &ModelParams, eps: f64, n_dirs: usize, miss_tol: f64) -> Result<Shot> {
    shots(source, saddle, p, eps, n_dirs, miss_tol)?
        .into_iter()
        .filter(|s| s.miss < miss_tol)
        .min_by(|a, b| a.phi.partial_cmp(&b.phi).unwrap())
        .ok_or_else(|| Error::Integration("no zero-energy trajectory reached the saddle".into()))
}

/// Linearized fluctuational flow d' = (J + M Q) d, run backward from `from` until the head
/// ellipsoid is reached; returns points from `from` inward.
fn linear_uphill_back(head: &Head, from: V3, p: &ModelParams) -> Vec<V3> {
    let l = head.l;
    let q_mat: M3 = std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| l[i][k] * l[j][k]).sum()));
    let j = jac(&head.center, p);
    let c = noise_covariance(&head.center);
    let a: M3 = std::array::from_fn(|r| std::array::from_fn(|s| j[r][s] + (0..3).map(|k| c[r][k] * q_mat[k][s]).sum::<f64>()));
    let qnorm = |d: &V3| dot(d, &mv(&q_mat, d)).sqrt();
    let mut d = sub(&from, &head.center);
    let mut out = vec![from];
    let dt = 0.01;
    for _ in 0..1_000_000 {
        if qnorm(&d) <= head.eps {
            break;
        }
        // RK4 with a negative step
        let k1 = mv(&a, &d);
        let k2 = mv(&a, &axpy(&d, -dt / 2.0, &k1));
        let k3 = mv(&a, &axpy(&d, -dt / 2.0, &k2));
        let k4 = mv(&a, &axpy(&d, -dt, &k3));
        for i in 0..3 {
            d[i] -= dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        out.push(axpy(&head.center, 1.0, &d));
    }
    out
}

/// Geometric minimum-action path from the head ellipsoid of a stable point to `to`. The start
/// point slides freely on the ellipsoid; the part inside it is charged eps^2 / 2.
fn gmam(head: &Head, to: V3, seed: Option<Vec<V3>>, p: &ModelParams, st: &GmamSettings) -> Result<(Vec<V3>, bool)> {
    let k = st.k_points.max(3);
    let (u0, init) = match seed {
        Some(mut pts) => {
            pts.push(to);
            (head.aim(&pts[0]), resample(&pts, k))
        }
        None => {
            let u0 = head.aim(&to);
            let from = head.point(&u0);
            (u0, (0..k).map(|i| axpy(&from, i as f64 / (k - 1) as f64, &sub(&to, &from))).collect())
        }
    };
    let mut x: Vec<f64> = u0.to_vec();
    for pt in &init[1..k - 1] {
        x.extend(pt);
    }
    let assemble = |x: &[f64]| -> Vec<V3> {
        let u = [x[0], x[1], x[2]];
        let mut path = vec![head.point(&u)];
        path.extend(x[3..].chunks(3).map(|c| [c[0], c[1], c[2]]));
        path.push(to);
        path
    };
    let eval = |x: &[f64]| {
        let u = [x[0], x[1], x[2]];
        let path = assemble(x);
        let (mut f, g) = objective(&path, p, st.spacing_weight)?;
        let dn = norm(&u) - 1.0;
        f += dn * dn;
        let gu = head.pullback(&u, &g[0]);
        let n = norm(&u);
        let mut out: Vec<f64> = (0..3).map(|c| gu[c] + 2.0 * dn * u[c] / n).collect();
        out.extend(g[1..k - 1].iter().flat_map(|v| v.iter().copied()));
        Some((f, out))
    };
    let converged = lbfgs(&mut x, eval, st.max_iters, st.tol)?;
    let mut path = vec![head.center];
    path.extend(assemble(&x));
    Ok((path, converged))
}

/// RK4 relaxation from `start` until within `tol` of `target`.
fn relax(start: V3, target: &V3, p: &ModelParams, dt: f64, tol: f64) -> Result<Vec<V3>> {
    let mut m = BlochState::from_array(start);
    let mut out = vec![start];
    for _ in 0..2_000_000 {
        m = rk4_step(m, p, dt);
        let a = arr(m);
        out.push(a);
        if norm(&sub(&a, target)) < tol {
            return Ok(out);
        }
    }
    Err(Error::Integration("relaxation did not reach the stable point".into()))
}

pub fn same_point(a: &FixedPoint, b: &FixedPoint) -> bool {
    norm(&sub(&arr(a.state), &arr(b.state))) < 1e-12
}

/// Initial paths for gMAM. A shot that reaches the saddle is used alone; otherwise the straight
/// chord and the closest misses are all tried, since paths out of a focus can wind differently.
fn path_seeds(head: &Head, source: &FixedPoint, saddle: &FixedPoint, p: &ModelParams, st: &GmamSettings) -> Result<Vec<Option<Vec<V3>>>> {
    if st.shooting_dirs == 0 {
        return Ok(vec![None]);
    }
    let seed_eps = st.epsilon.max(SEED_EPS);
    let extend = |shot: &Shot| {
        let mut pts: Vec<V3> = shot.path.iter().map(|x| x.m).collect();
        if st.epsilon < seed_eps {
            let mut inner = linear_uphill_back(head, pts[0], p);
            inner.reverse();
            inner.pop();
            inner.extend(pts);
            pts = inner;
        }
        pts
    };
    let found = shots(source, saddle, p, seed_eps, st.shooting_dirs, SHOT_MISS)?;
    if let Some(s) = found.iter().filter(|s| s.miss < SHOT_MISS).min_by(|a, b| a.phi.partial_cmp(&b.phi).unwrap()) {
        return Ok(vec![Some(extend(s))]);
    }
    log::warn!("no shot reached the saddle at delta = {}; trying several seeds", p.detuning);
    let mut out = vec![None];
    let mut seen: Vec<f64> = Vec::new();
    for s in found.iter().filter(|s| !s.path.is_empty()) {
        if seen.iter().all(|v| (v - s.phi).abs() > 1e-3) {
            seen.push(s.phi);
            out.push(Some(extend(s)));
        }
        if out.len() > 3 {
            break;
        }
    }
    Ok(out)
}

/// Optimal path from a stable point to the saddle, or through the saddle to the other stable
/// point (zero-action relaxation appended).
pub fn minimize_action(source: &FixedPoint, target: &FixedPoint, p: &ModelParams, st: &GmamSettings) -> Result<InstantonPath> {
    if same_point(source, target) {
        let x = PhasePoint::new(arr(source.state), [0.0; 3]);
        return Ok(InstantonPath { points: vec![x], increments: vec![], phi: 0.0, energy_residual: 0.0, converged: true, uphill_len: 1 });
    }
    if !source.is_stable() {
        return Err(Error::InvalidParams("the source must be a stable fixed point".into()));
    }
    let (dark, saddle, bright) = bistable_triple(p)?;
    let (via_saddle, other) = if target.is_stable() {
        let other = if same_point(source, &dark) { bright } else { dark };
        (true, Some(other))
    } else {
        (false, None)
    };
    let ms = arr(saddle.state);
    let head = Head::new(source, p, st.epsilon)?;
    let seeds = path_seeds(&head, source, &saddle, p, st)?;
    let mut best: Option<(f64, Vec<V3>, bool)> = None;
    for seed in seeds {
        let (path, ok) = gmam(&head, ms, seed, p, st)?;
        let Ok((_, inc, _)) = momenta_and_increments(&path[1..], p) else { continue };
        let phi: f64 = inc.iter().sum();
        if best.as_ref().is_none_or(|b| phi < b.0) {
            best = Some((phi, path, ok));
        }
    }
    let (_, uphill, converged) = best.ok_or_else(|| Error::Integration("no admissible path".into()))?;
    let (mut q, mut inc, h) = momenta_and_increments(&uphill[1..], p)?;
    // quadratic quasipotential inside the head ellipsoid
    q.insert(0, [0.0; 3]);
    inc.insert(0, 0.5 * st.epsilon * st.epsilon);
    let mut pts = uphill.clone();
    let uphill_len = pts.len();
    if via_saddle {
        let other = other.unwrap();
        let mo = arr(other.state);
        let s0 = axpy(&ms, st.epsilon, &saddle_direction(&saddle, &mo, p)?);
        let down = relax(s0, &mo, p, 0.01, st.epsilon)?;
        let (_, dinc, _) = momenta_and_increments(&down, p)?;
        // joining chord through the saddle, then the relaxation
        if let Some(js) = segment(pts.last().unwrap(), &down[0], p) {
            inc.push(js.s);
        }
        inc.extend(dinc);
        q.extend(std::iter::repeat_n([0.0; 3], down.len()));
        pts.extend(down);
    }
    let points: Vec<PhasePoint> = pts.iter().zip(&q).map(|(m, q)| PhasePoint::new(*m, *q)).collect();
    let phi = inc[..uphill_len - 1].iter().sum();
    Ok(InstantonPath { points, increments: inc, phi, energy_residual: h, converged, uphill_len })
}

/// Zero-action relaxation from just off the saddle toward `target`.
pub fn relaxation_path(saddle: &FixedPoint, target: &FixedPoint, p: &ModelParams, eps: f64) -> Result<InstantonPath> {
    let ms = arr(saddle.state);
    let mt = arr(target.state);
    let start = axpy(&ms, eps, &saddle_direction(saddle, &mt, p)?);
    let down = relax(start, &mt, p, 0.01, eps)?;
    let (_, inc, _) = momenta_and_increments(&down, p)?;
    let phi = inc.iter().sum();
    let points = down.iter().map(|m| PhasePoint::new(*m, [0.0; 3])).collect();
    Ok(InstantonPath { points, increments: inc, phi, energy_residual: 0.0, converged: true, uphill_len: 0 })
}

#[derive(Clone, Debug, Serialize)]
pub struct BarrierRow {
    pub delta: f64,
    pub phi_d: f64,
    pub phi_b: f64,
    pub phi_db: f64,
    pub converged: bool,
    pub energy_residual: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Quasipotential {
    pub rows: Vec<BarrierRow>,
    /// Grid values outside the bistable window.
    pub absent: Vec<f64>,
}

pub fn barriers(p: &ModelParams, st: &GmamSettings) -> Result<(BarrierRow, InstantonPath, InstantonPath)> {
    let (dark, saddle, bright) = bistable_triple(p)?;
    let d = minimize_action(&dark, &saddle, p, st)?;
    let b = minimize_action(&bright, &saddle, p, st)?;
    let row = BarrierRow {
        delta: p.detuning,
        phi_d: d.phi,
        phi_b: b.phi,
        phi_db: d.phi - b.phi,
        converged: d.converged && b.converged,
        energy_residual: d.energy_residual.max(b.energy_residual),
    };
    Ok((row, d, b))
}

pub fn quasipotential_sweep(delta_grid: &[f64], template: &ModelParams, st: &GmamSettings) -> Result<Quasipotential> {
    let results: Vec<(f64, Result<BarrierRow>)> = delta_grid
        .par_iter()
        .map(|&d| (d, barriers(&template.with_detuning(d), st).map(|r| r.0)))
        .collect();
    let mut rows = Vec::new();
    let mut absent = Vec::new();
    for (d, r) in results {
        match r {
            Ok(row) => rows.push(row),
            Err(Error::NotBistable(_)) => absent.push(d),
            Err(e) => return Err(e),
        }
    }
    Ok(Quasipotential { rows, absent })
}

/// Arrhenius estimate of the escape rate, e^{-N phi}.
pub fn arrhenius_rate(phi: f64, n_atoms: usize) -> f64 {
    (-(n_atoms as f64) * phi).exp()
}
