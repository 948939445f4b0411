//! Photon-counting statistics: SCGF from the tilted generator and its Legendre dual.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::spectral::sorted_eigenvalues;

#[derive(Clone, Debug, Serialize)]
pub struct ScgfCurve {
    pub s_grid: Vec<f64>,
    pub theta: Vec<f64>,
    /// Grid indices whose eigensolve failed (theta is NaN there).
    pub failed: Vec<usize>,
    #[serde(skip)]
    pub params: ModelParams,
}

pub fn theta_at(params: &ModelParams, s: f64, cap: usize) -> Result<f64> {
    let e = sorted_eigenvalues(params, s, cap)?;
    Ok(e[0].re)
}

/// theta(s) on the given grid, one dense eigensolve per point.
pub fn scgf(params: &ModelParams, s_grid: &[f64], cap: usize) -> Result<ScgfCurve> {
    params.check_cap(cap)?;
    let vals: Vec<Option<f64>> = s_grid.par_iter().map(|&s| theta_at(params, s, cap).ok()).collect();
    let failed: Vec<usize> = vals.iter().enumerate().filter(|(_, v)| v.is_none()).map(|(i, _)| i).collect();
    for &i in &failed {
        log::warn!("eigensolve failed at s = {}", s_grid[i]);
    }
    Ok(ScgfCurve {
        s_grid: s_grid.to_vec(),
        theta: vals.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect(),
        failed,
        params: *params,
    })
}

pub fn uniform_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect()
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct KinkSettings {
    /// An interval is steep when |dk/ds| exceeds this multiple of the median.
    pub kink_factor: f64,
    /// Minimum plateau width in per-atom rate units for a second maximum.
    pub min_width: f64,
    /// The kink must sit within this distance of s = 0; a kink elsewhere is a flat piece of phi
    /// away from its minimum and leaves P(K) single-peaked.
    pub max_kink_s: f64,
}

impl Default for KinkSettings {
    fn default() -> Self {
        Self { kink_factor: 10.0, min_width: 0.05, max_kink_s: 0.02 }
    }
}

/// Intervals [i, i+1] where |dk/ds| spikes, from finite differences of theta on the grid.
fn steep_intervals(s: &[f64], theta: &[f64], factor: f64) -> Vec<usize> {
    if s.len() < 4 {
        return vec![];
    }
    let k = centered_slopes(s, theta);
    let slopes: Vec<f64> = (1..s.len() - 2).map(|i| ((k[i + 1] - k[i]) / (s[i + 1] - s[i])).abs()).collect();
    let mut sorted: Vec<f64> = slopes.iter().cloned().filter(|v| v.is_finite()).collect();
    if sorted.is_empty() {
        return vec![];
    }
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    slopes
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > factor * median)
        .map(|(j, _)| j + 1)
        .collect()
}

/// SCGF on `points` uniform points of [lo, hi], with every interval next to a curvature spike
/// subdivided `refine` times.
pub fn scgf_adaptive(params: &ModelParams, lo: f64, hi: f64, points: usize, refine: usize, cap: usize) -> Result<ScgfCurve> {
    let base = uniform_grid(lo, hi, points);
    let curve = scgf(params, &base, cap)?;
    if refine <= 1 {
        return Ok(curve);
    }
    let steep = steep_intervals(&curve.s_grid, &curve.theta, KinkSettings::default().kink_factor);
    if steep.is_empty() {
        return Ok(curve);
    }
    let mut targets: Vec<usize> = Vec::new();
    for &i in &steep {
        for j in i.saturating_sub(1)..=(i + 1).min(base.len() - 2) {
            targets.push(j);
        }
    }
    targets.sort_unstable();
    targets.dedup();
    let mut extra = Vec::new();
    for &j in &targets {
        for r in 1..refine {
            extra.push(base[j] + (base[j + 1] - base[j]) * r as f64 / refine as f64);
        }
    }
    let more = scgf(params, &extra, cap)?;
    let mut pairs: Vec<(f64, f64)> = curve.s_grid.iter().cloned().zip(curve.theta.iter().cloned()).collect();
    pairs.extend(more.s_grid.iter().cloned().zip(more.theta.iter().cloned()));
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let failed = pairs.iter().enumerate().filter(|(_, p)| p.1.is_nan()).map(|(i, _)| i).collect();
    Ok(ScgfCurve {
        s_grid: pairs.iter().map(|p| p.0).collect(),
        theta: pairs.iter().map(|p| p.1).collect(),
        failed,
        params: *params,
    })
}

/// Central-difference -theta'(0), shrinking the step until two successive estimates agree.
pub fn mean_rate(params: &ModelParams, h0: f64, cap: usize) -> Result<(f64, f64)> {
    let est = |h: f64| -> Result<f64> { Ok(-(theta_at(params, h, cap)? - theta_at(params, -h, cap)?) / (2.0 * h)) };
    let mut h = h0;
    let mut prev = est(h)?;
    while h > 1e-8 {
        let next = est(h / 4.0)?;
        if (next - prev).abs() <= 1e-7 * next.abs().max(1e-12) {
            return Ok((next, h / 4.0));
        }
        prev = next;
        h /= 4.0;
    }
    Ok((prev, h))
}

/// theta'(s_i) by the three-point formula for non-uniform grids; one-sided at the ends.
fn centered_slopes(s: &[f64], theta: &[f64]) -> Vec<f64> {
    let n = s.len();
    let mut d = vec![0.0; n];
    for i in 1..n - 1 {
        let hm = s[i] - s[i - 1];
        let hp = s[i + 1] - s[i];
        d[i] = (hm * hm * theta[i + 1] - hp * hp * theta[i - 1] + (hp * hp - hm * hm) * theta[i]) / (hm * hp * (hm + hp));
    }
    d[0] = (theta[1] - theta[0]) / (s[1] - s[0]);
    d[n - 1] = (theta[n - 1] - theta[n - 2]) / (s[n - 1] - s[n - 2]);
    d
}

#[derive(Clone, Debug, Serialize)]
pub struct RateFunction {
    /// Total photon rate K/t, ascending.
    pub k: Vec<f64>,
    pub phi: Vec<f64>,
    /// Tilt at which each (k, phi) pair was obtained.
    pub s: Vec<f64>,
    pub n_atoms: usize,
    /// Number of entries dropped because k was not strictly monotone in s.
    pub repaired: usize,
}

impl RateFunction {
    pub fn k_per_atom(&self) -> Vec<f64> {
        self.k.iter().map(|k| k / self.n_atoms as f64).collect()
    }
}

/// Parametric Legendre transform k = -theta'(s), phi = -theta - s k at interior grid points.
pub fn legendre(curve: &ScgfCurve) -> Result<RateFunction> {
    let (s, theta): (Vec<f64>, Vec<f64>) = curve
        .s_grid
        .iter()
        .zip(&curve.theta)
        .filter(|(_, t)| t.is_finite())
        .map(|(a, b)| (*a, *b))
        .unzip();
    if s.len() < 3 {
        return Err(Error::Insufficient("Legendre transform needs >= 3 valid points".into()));
    }
    for i in 1..s.len() - 1 {
        let hm = s[i] - s[i - 1];
        let hp = s[i + 1] - s[i];
        // second difference scaled to the local mean spacing
        let d2 = (theta[i + 1] - theta[i]) * (hm / hp) - (theta[i] - theta[i - 1]);
        if d2 < -1e-7 {
            return Err(Error::NonConvex(d2));
        }
    }
    let slopes = centered_slopes(&s, &theta);
    let mut k = Vec::new();
    let mut phi = Vec::new();
    let mut ss = Vec::new();
    let mut repaired = 0;
    // k decreases with s; walk s downward so k ascends.
    for i in (1..s.len() - 1).rev() {
        let ki = -slopes[i];
        if let Some(&last) = k.last() {
            if ki <= last {
                repaired += 1;
                continue;
            }
        }
        k.push(ki);
        phi.push(-theta[i] - s[i] * ki);
        ss.push(s[i]);
    }
    if repaired > 0 {
        log::warn!("Legendre transform: {repaired} folded entries removed");
    }
    Ok(RateFunction { k, phi, s: ss, n_atoms: curve.params.n_atoms, repaired })
}

/// theta(s) = -min_k [phi(k) + k s] over the tabulated pairs.
pub fn inverse_legendre(rf: &RateFunction, s: f64) -> f64 {
    -rf.k.iter().zip(&rf.phi).map(|(k, p)| p + k * s).fold(f64::INFINITY, f64::min)
}

#[derive(Clone, Debug, Serialize)]
pub struct BimodalityReport {
    pub n_maxima: usize,
    /// Locations of the maxima of -phi in total-rate units.
    pub maxima: Vec<f64>,
    pub plateau_width: f64,
    /// The plateau (k_lo, k_hi) between the two maxima, if present.
    pub plateau: Option<(f64, f64)>,
    /// Largest phi among tabulated points strictly inside the plateau.
    pub plateau_height: f64,
}

/// Maxima of -phi(k). A convex rate function has at most one strict maximum, so two maxima are
/// reported when the tabulated curve contains a flat segment: a steep run of k(s) (the kink of
/// theta) spanning at least `min_width` per atom. The maxima are the plateau endpoints.
pub fn bimodality_report(rf: &RateFunction, settings: KinkSettings) -> BimodalityReport {
    let n = rf.k.len();
    let mut best = 0;
    for i in 1..n {
        if rf.phi[i] < rf.phi[best] {
            best = i;
        }
    }
    let single = |k: f64| BimodalityReport { n_maxima: 1, maxima: vec![k], plateau_width: 0.0, plateau: None, plateau_height: 0.0 };
    if n < 4 {
        return single(rf.k.get(best).cloned().unwrap_or(f64::NAN));
    }
    // |dk/ds| per interval (entries are ordered by descending s).
    let rates: Vec<f64> = (0..n - 1).map(|i| ((rf.k[i + 1] - rf.k[i]) / (rf.s[i] - rf.s[i + 1])).abs()).collect();
    let mut sorted = rates.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    let steep: Vec<bool> = rates.iter().map(|r| *r > settings.kink_factor * median).collect();
    // Longest merged run of steep intervals, measured in k.
    let mut best_run: Option<(usize, usize)> = None;
    let mut i = 0;
    while i < steep.len() {
        if steep[i] {
            let mut j = i;
            while j + 1 < steep.len() && steep[j + 1] {
                j += 1;
            }
            let width = rf.k[j + 1] - rf.k[i];
            let near_zero = rf.s[j + 1] <= settings.max_kink_s && rf.s[i] >= -settings.max_kink_s;
            if near_zero && best_run.map_or(true, |(a, b)| width > rf.k[b + 1] - rf.k[a]) {
                best_run = Some((i, j));
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    if let Some((a, b)) = best_run {
        let (lo, hi) = (rf.k[a], rf.k[b + 1]);
        let width = hi - lo;
        if width / rf.n_atoms as f64 >= settings.min_width {
            let height = (a + 1..=b).map(|i| rf.phi[i]).fold(0.0, f64::max);
            return BimodalityReport { n_maxima: 2, maxima: vec![lo, hi], plateau_width: width, plateau: Some((lo, hi)), plateau_height: height };
        }
    }
    single(rf.k[best])
}

/// Width in per-atom units of the region where phi(k) <= level.
pub fn width_at_level(rf: &RateFunction, level: f64) -> f64 {
    let kpa = rf.k_per_atom();
    let inside: Vec<f64> = kpa.iter().zip(&rf.phi).filter(|(_, p)| **p <= level).map(|(k, _)| *k).collect();
    if inside.is_empty() {
        return 0.0;
    }
    inside.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - inside.iter().cloned().fold(f64::INFINITY, f64::min)
}
