//! Liouvillian eigenanalysis: steady state, gap, metastable manifold, PDFs.

use faer::linalg::solvers::Solve;
use faer::{c64, Mat};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{cr, cz, exp_fit, hermitian_eigen, line_fit, max_abs, trace, trace_prod, ExpFit, LineFit};
use crate::model::{real_superoperator, DickeBasis, Generator, HermitianBasis, ModelParams, DEFAULT_N_CAP};

pub const ZERO_TOL: f64 = 1e-9;
pub const RESIDUAL_TOL: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct SpectrumResult {
    /// Sorted by descending real part; complex-conjugate pairs list the positive imaginary part first.
    pub eigenvalues: Vec<c64>,
    /// Right eigenmatrices for the leading eigenvalues (all of them after `full_spectrum`).
    /// `eigenmatrices[0]` is the unit-trace stationary state; the others have unit Frobenius norm.
    pub eigenmatrices: Vec<Mat<c64>>,
    pub params: ModelParams,
}

impl SpectrumResult {
    pub fn lambda1(&self) -> c64 {
        self.eigenvalues[1]
    }

    pub fn gap(&self) -> f64 {
        -self.eigenvalues[1].re
    }

    pub fn rho_ss(&self) -> &Mat<c64> {
        &self.eigenmatrices[0]
    }

    pub fn rho1(&self) -> Option<&Mat<c64>> {
        self.eigenmatrices.get(1)
    }
}

fn sort_spectrum(vals: &mut [(c64, usize)]) {
    vals.sort_by(|a, b| b.0.re.partial_cmp(&a.0.re).unwrap_or(std::cmp::Ordering::Equal));
    let mut i = 0;
    while i + 1 < vals.len() {
        let (a, b) = (vals[i].0, vals[i + 1].0);
        let scale = 1e-10 * (1.0 + a.norm());
        if (a.re - b.re).abs() < scale && (a.im + b.im).abs() < scale && a.im < b.im {
            vals.swap(i, i + 1);
            i += 2;
        } else {
            i += 1;
        }
    }
}

fn eigen_error(e: impl std::fmt::Debug) -> Error {
    Error::Eigensolver(format!("{e:?}"))
}

/// Sorted eigenvalues of the tilted generator.
pub fn sorted_eigenvalues(params: &ModelParams, s: f64, cap: usize) -> Result<Vec<c64>> {
    let real = real_superoperator(params, s, cap)?;
    let mut vals: Vec<(c64, usize)> = real.eigenvalues().map_err(eigen_error)?.into_iter().map(|z| (z, 0)).collect();
    sort_spectrum(&mut vals);
    Ok(vals.into_iter().map(|v| v.0).collect())
}

fn check_steady(eigs: &[c64]) -> Result<()> {
    let zeros = eigs.iter().filter(|z| z.norm() < ZERO_TOL).count();
    if zeros > 1 {
        return Err(Error::DegenerateSteadyState { count: zeros, tol: ZERO_TOL });
    }
    if eigs[0].norm() >= ZERO_TOL {
        return Err(Error::Eigensolver(format!("leading eigenvalue {} is not zero", eigs[0])));
    }
    Ok(())
}

fn normalize_stationary(rho: Mat<c64>) -> Result<Mat<c64>> {
    let t = trace(&rho);
    if t.norm() < 1e-300 {
        return Err(Error::Eigensolver("stationary eigenmatrix has zero trace".into()));
    }
    let r = crate::linalg::scale(&rho, t.inv());
    Ok(crate::linalg::hermitian_part(&r))
}

fn normalize_frobenius(rho: Mat<c64>) -> Mat<c64> {
    let n = trace_prod(&crate::linalg::adjoint(&rho), &rho).re.sqrt();
    crate::linalg::scale(&rho, cr(1.0 / n))
}

fn residual(g: &Generator, rho: &Mat<c64>, lambda: c64) -> f64 {
    let out = g.apply(rho, 0.0);
    let d = rho.nrows();
    let diff = Mat::from_fn(d, d, |i, j| out[(i, j)] - rho[(i, j)] * lambda);
    max_abs(&diff)
}

/// Full dense eigendecomposition of the Lindbladian.
pub fn full_spectrum(params: &ModelParams) -> Result<SpectrumResult> {
    full_spectrum_capped(params, DEFAULT_N_CAP)
}

pub fn full_spectrum_capped(params: &ModelParams, cap: usize) -> Result<SpectrumResult> {
    let real = real_superoperator(params, 0.0, cap)?;
    let eig = real.eigen().map_err(eigen_error)?;
    let n = real.nrows();
    let mut vals: Vec<(c64, usize)> = (0..n).map(|i| (eig.S()[i], i)).collect();
    sort_spectrum(&mut vals);
    let eigenvalues: Vec<c64> = vals.iter().map(|v| v.0).collect();
    check_steady(&eigenvalues)?;
    let d = params.dim();
    let hb = HermitianBasis::new(d);
    let g = Generator::new(params);
    let u = eig.U();
    let mut eigenmatrices = Vec::with_capacity(n);
    for (k, &(lambda, col)) in vals.iter().enumerate() {
        let coords: Vec<c64> = (0..n).map(|r| u[(r, col)]).collect();
        let rho = hb.assemble(&coords);
        let rho = if k == 0 { normalize_stationary(rho)? } else { normalize_frobenius(rho) };
        let res = residual(&g, &rho, if k == 0 { cz() } else { lambda });
        if res > RESIDUAL_TOL * (1.0 + lambda.norm()) {
            return Err(Error::Eigensolver(format!("eigenmatrix {k} residual {res:e}")));
        }
        eigenmatrices.push(rho);
    }
    Ok(SpectrumResult { eigenvalues, eigenmatrices, params: *params })
}

/// All eigenvalues, plus the stationary state and (for real lambda_1) the slowest eigenmatrix,
/// the latter two by linear solves instead of a full eigenvector computation.
pub fn slow_spectrum(params: &ModelParams, cap: usize) -> Result<SpectrumResult> {
    let real = real_superoperator(params, 0.0, cap)?;
    let mut vals: Vec<(c64, usize)> = real.eigenvalues().map_err(eigen_error)?.into_iter().map(|z| (z, 0)).collect();
    sort_spectrum(&mut vals);
    let eigenvalues: Vec<c64> = vals.iter().map(|v| v.0).collect();
    check_steady(&eigenvalues)?;
    let d = params.dim();
    let hb = HermitianBasis::new(d);
    let g = Generator::new(params);
    let rho_ss = normalize_stationary(hb.assemble(&real_to_c(&stationary_coords(&real, d)?)))?;
    let res = residual(&g, &rho_ss, cz());
    if res > RESIDUAL_TOL {
        return Err(Error::Eigensolver(format!("stationary residual {res:e}")));
    }
    let mut eigenmatrices = vec![rho_ss];
    let l1 = eigenvalues[1];
    if is_real_eigenvalue(l1) {
        let x = inverse_iteration(&real, l1.re, false)?;
        let rho1 = normalize_frobenius(hb.assemble(&real_to_c(&x)));
        let res = residual(&g, &rho1, cr(l1.re));
        if res > RESIDUAL_TOL * (1.0 + l1.norm()) {
            return Err(Error::Eigensolver(format!("slow-mode residual {res:e}")));
        }
        eigenmatrices.push(rho1);
    }
    Ok(SpectrumResult { eigenvalues, eigenmatrices, params: *params })
}

fn real_to_c(x: &[f64]) -> Vec<c64> {
    x.iter().map(|&v| cr(v)).collect()
}

/// Kernel of the real generator with unit trace: the first row is replaced by the trace functional.
fn stationary_coords(real: &Mat<f64>, d: usize) -> Result<Vec<f64>> {
    let n = real.nrows();
    let mut a = real.clone();
    for c in 0..n {
        a[(0, c)] = if c < d { 1.0 } else { 0.0 };
    }
    let mut rhs = Mat::<f64>::zeros(n, 1);
    rhs[(0, 0)] = 1.0;
    let x = a.partial_piv_lu().solve(&rhs);
    let v: Vec<f64> = (0..n).map(|i| x[(i, 0)]).collect();
    if v.iter().any(|z| !z.is_finite()) {
        return Err(Error::Eigensolver("stationary solve produced non-finite values".into()));
    }
    Ok(v)
}

/// Eigenvector of `real` (or its transpose) for the real eigenvalue `lambda`.
pub(crate) fn inverse_iteration(real: &Mat<f64>, lambda: f64, transpose: bool) -> Result<Vec<f64>> {
    let n = real.nrows();
    let shift = lambda + 1e-9 * lambda.abs().max(1e-6);
    let a = Mat::<f64>::from_fn(n, n, |i, j| {
        let v = if transpose { real[(j, i)] } else { real[(i, j)] };
        if i == j { v - shift } else { v }
    });
    let lu = a.partial_piv_lu();
    let mut x = Mat::<f64>::from_fn(n, 1, |i, _| 1.0 + 0.01 * ((i * 7919) % 101) as f64);
    for _ in 0..3 {
        x = lu.solve(&x);
        let nrm = (0..n).map(|i| x[(i, 0)] * x[(i, 0)]).sum::<f64>().sqrt();
        if !nrm.is_finite() || nrm == 0.0 {
            return Err(Error::Eigensolver("inverse iteration broke down".into()));
        }
        for i in 0..n {
            x[(i, 0)] /= nrm;
        }
    }
    Ok((0..n).map(|i| x[(i, 0)]).collect())
}

pub fn is_real_eigenvalue(l: c64) -> bool {
    l.im.abs() <= 1e-7 * l.re.abs() + 1e-10
}

#[derive(Clone, Debug, Serialize)]
pub struct GapScaling {
    pub a: f64,
    pub b: f64,
    pub r2: f64,
    /// (N, gap) for every size used in the fit.
    pub gaps: Vec<(usize, f64)>,
    pub excluded: Vec<usize>,
}

/// Fit -Re lambda_1 = b e^{a N} over the given sizes.
pub fn gap_scaling(template: &ModelParams, n_list: &[usize], cap: usize) -> Result<GapScaling> {
    let gaps: Vec<(usize, f64)> = n_list
        .iter()
        .map(|&n| Ok((n, -sorted_eigenvalues(&template.with_n(n), 0.0, cap)?[1].re)))
        .collect::<Result<_>>()?;
    fit_gaps(gaps)
}

pub fn fit_gaps(all: Vec<(usize, f64)>) -> Result<GapScaling> {
    let (gaps, bad): (Vec<_>, Vec<_>) = all.into_iter().partition(|(_, g)| *g > 0.0 && g.is_finite());
    let excluded: Vec<usize> = bad.iter().map(|(n, _)| *n).collect();
    for n in &excluded {
        log::warn!("nonpositive gap at N = {n}, excluded from fit");
    }
    if gaps.len() < 4 {
        return Err(Error::Insufficient(format!("gap scaling needs >= 4 sizes, got {}", gaps.len())));
    }
    let x: Vec<f64> = gaps.iter().map(|(n, _)| *n as f64).collect();
    let y: Vec<f64> = gaps.iter().map(|(_, g)| *g).collect();
    let ExpFit { a, b, r2, .. } = exp_fit(&x, &y)?;
    Ok(GapScaling { a, b, r2, gaps, excluded })
}

/// n_e = Tr[(Sz/N + 1/2) rho].
pub fn excitation_density(rho: &Mat<c64>) -> f64 {
    let d = rho.nrows();
    let n = (d - 1) as f64;
    (0..d).map(|i| rho[(i, i)].re * (i as f64 / n)).sum()
}

/// Diagonal of the n_e operator: (M + S)/N.
pub fn ne_diag(d: usize) -> Vec<f64> {
    let n = (d - 1) as f64;
    (0..d).map(|i| i as f64 / n).collect()
}

#[derive(Clone, Debug)]
pub struct MetastableManifold {
    pub rho_plus: Mat<c64>,
    pub rho_minus: Mat<c64>,
    pub ne_plus: f64,
    pub ne_minus: f64,
    pub d_plus: f64,
    pub d_minus: f64,
    pub mm_error: f64,
    /// Hermitized, phase-fixed slow mode: rho1 = weight (rho_plus - rho_minus).
    pub rho1: Mat<c64>,
    pub weight: f64,
    pub rho_ss: Mat<c64>,
    pub ne_ss: f64,
    pub lambda1: f64,
}

/// D[A, B] = Tr(A^dagger B) / Tr(A^dagger A).
pub fn overlap(a: &Mat<c64>, b: &Mat<c64>) -> f64 {
    let ad = crate::linalg::adjoint(a);
    (trace_prod(&ad, b) / trace_prod(&ad, a)).re
}

/// Hermitian part after removing the global phase of a Hermitian-up-to-phase matrix.
pub fn phase_fixed_hermitian(rho1: &Mat<c64>) -> Mat<c64> {
    let t = trace_prod(rho1, rho1);
    let phase = c64::from_polar(1.0, -t.arg() / 2.0);
    crate::linalg::hermitian_part(&crate::linalg::scale(rho1, phase))
}

pub fn extract_mm(spec: &SpectrumResult) -> Result<MetastableManifold> {
    let l1 = spec.lambda1();
    if !is_real_eigenvalue(l1) {
        return Err(Error::ComplexGap { im: l1.im });
    }
    let rho1_raw = spec
        .rho1()
        .ok_or_else(|| Error::DegenerateManifold("slow eigenmatrix not available".into()))?;
    let h = phase_fixed_hermitian(rho1_raw);
    let (vals, vecs) = hermitian_eigen(&h)?;
    let d = h.nrows();
    let part = |positive: bool| {
        let mut m = Mat::<c64>::zeros(d, d);
        let mut w = 0.0;
        for (k, &p) in vals.iter().enumerate() {
            if (positive && p > 0.0) || (!positive && p < 0.0) {
                w += p.abs();
                for i in 0..d {
                    for j in 0..d {
                        m[(i, j)] += vecs[(i, k)] * vecs[(j, k)].conj() * p.abs();
                    }
                }
            }
        }
        (m, w)
    };
    let (pos, wp) = part(true);
    let (neg, wn) = part(false);
    let tiny = 1e-12 * vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if wp <= tiny || wn <= tiny {
        return Err(Error::DegenerateManifold("slow mode is single-signed".into()));
    }
    let pos = crate::linalg::hermitian_part(&crate::linalg::scale(&pos, cr(1.0 / wp)));
    let neg = crate::linalg::hermitian_part(&crate::linalg::scale(&neg, cr(1.0 / wn)));
    let (ne_p, ne_n) = (excitation_density(&pos), excitation_density(&neg));
    // rho1 = w (pos - neg); relabel so the plus state is the darker one.
    let weight = 0.5 * (wp + wn);
    let (rho_plus, rho_minus, rho1) = if ne_p <= ne_n {
        (pos, neg, h)
    } else {
        (neg, pos, crate::linalg::scale(&h, cr(-1.0)))
    };
    let rho_ss = spec.rho_ss().clone();
    let d_plus = overlap(&rho_plus, &rho_ss);
    let d_minus = overlap(&rho_minus, &rho_ss);
    let recon = Mat::from_fn(d, d, |i, j| rho_ss[(i, j)] - rho_plus[(i, j)] * d_plus - rho_minus[(i, j)] * d_minus);
    let mm_error = trace_prod(&crate::linalg::adjoint(&recon), &recon).re;
    Ok(MetastableManifold {
        ne_plus: excitation_density(&rho_plus),
        ne_minus: excitation_density(&rho_minus),
        rho_plus,
        rho_minus,
        d_plus,
        d_minus,
        mm_error,
        rho1,
        weight,
        ne_ss: excitation_density(&rho_ss),
        rho_ss,
        lambda1: l1.re,
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct OccupationStats {
    pub r: f64,
    pub p_dark: f64,
    pub p_bright: f64,
    /// The raw P_d fell outside [0, 1] and was clipped.
    pub clipped: bool,
}

pub fn occupation_stats(mm: &MetastableManifold) -> Result<OccupationStats> {
    let span = mm.ne_plus - mm.ne_minus;
    if span.abs() < 1e-14 {
        return Err(Error::DegenerateManifold("ne_plus == ne_minus".into()));
    }
    let raw = (mm.ne_ss - mm.ne_minus) / span;
    let p_dark = raw.clamp(0.0, 1.0);
    Ok(OccupationStats { r: mm.d_plus / mm.d_minus, p_dark, p_bright: 1.0 - p_dark, clipped: raw != p_dark })
}

/// Metastable-manifold summary for one (N, delta).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct MmRow {
    pub n_atoms: usize,
    pub delta: f64,
    pub ne_ss: f64,
    pub ne_plus: f64,
    pub ne_minus: f64,
    pub d_plus: f64,
    pub d_minus: f64,
    pub r: f64,
    pub mm_error: f64,
    pub gap: f64,
}

pub fn mm_row(params: &ModelParams, cap: usize) -> Result<(MmRow, MetastableManifold)> {
    let spec = slow_spectrum(params, cap)?;
    let mm = extract_mm(&spec)?;
    let occ = occupation_stats(&mm)?;
    let row = MmRow {
        n_atoms: params.n_atoms,
        delta: params.detuning,
        ne_ss: mm.ne_ss,
        ne_plus: mm.ne_plus,
        ne_minus: mm.ne_minus,
        d_plus: mm.d_plus,
        d_minus: mm.d_minus,
        r: occ.r,
        mm_error: mm.mm_error,
        gap: spec.gap(),
    };
    Ok((row, mm))
}

#[derive(Clone, Debug, Serialize)]
pub struct RatioScaling {
    pub delta: f64,
    pub rows: Vec<MmRow>,
    /// ln r = slope N + intercept over the sizes in `rows`.
    pub fit: Option<LineFit>,
    pub excluded: Vec<usize>,
}

/// ln r against N at fixed detuning. Sizes without a real slow mode are skipped.
pub fn ratio_scaling(template: &ModelParams, n_list: &[usize], cap: usize) -> Result<RatioScaling> {
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    for &n in n_list {
        match mm_row(&template.with_n(n), cap) {
            Ok((row, _)) if row.r > 0.0 && row.r.is_finite() => rows.push(row),
            Ok(_) | Err(Error::ComplexGap { .. }) | Err(Error::DegenerateManifold(_)) => {
                log::warn!("no usable occupation ratio at N = {n}, delta = {}", template.detuning);
                excluded.push(n);
            }
            Err(e) => return Err(e),
        }
    }
    let fit = if rows.len() >= 3 {
        let x: Vec<f64> = rows.iter().map(|r| r.n_atoms as f64).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.r.ln()).collect();
        Some(line_fit(&x, &y)?)
    } else {
        None
    };
    Ok(RatioScaling { delta: template.detuning, rows, fit, excluded })
}

#[derive(Clone, Debug, Serialize)]
pub struct BinnedPdf {
    pub centers: Vec<f64>,
    pub densities: Vec<f64>,
    pub half_width: f64,
}

impl BinnedPdf {
    pub fn new(half_width: f64) -> Result<Self> {
        if !(half_width > 0.0) {
            return Err(Error::InvalidParams(format!("bin half-width must be > 0, got {half_width}")));
        }
        let nb = (1.0 / (2.0 * half_width)).round() as usize + 1;
        let centers = (0..nb).map(|k| (2.0 * half_width * k as f64).min(1.0)).collect();
        Ok(Self { centers, densities: vec![0.0; nb], half_width })
    }

    /// Bin whose center is nearest to x; ties go to the upper bin.
    pub fn bin_of(&self, x: f64) -> usize {
        let k = (x / (2.0 * self.half_width) + 0.5).floor();
        (k.max(0.0) as usize).min(self.centers.len() - 1)
    }

    pub fn add_mass(&mut self, x: f64, mass: f64) {
        let k = self.bin_of(x);
        self.densities[k] += mass / (2.0 * self.half_width);
    }

    pub fn total_mass(&self) -> f64 {
        self.densities.iter().sum::<f64>() * 2.0 * self.half_width
    }

    pub fn normalize(&mut self) {
        let m = self.total_mass();
        if m > 0.0 {
            for v in &mut self.densities {
                *v /= m;
            }
        }
    }

    /// Centers of local maxima of the density after averaging over `smooth` neighbouring bins
    /// on each side, keeping peaks above `min_fraction` of the global maximum.
    pub fn peaks(&self, smooth: usize, min_fraction: f64) -> Vec<f64> {
        let n = self.densities.len();
        let sm: Vec<f64> = (0..n)
            .map(|i| {
                let lo = i.saturating_sub(smooth);
                let hi = (i + smooth).min(n - 1);
                self.densities[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
            })
            .collect();
        let top = sm.iter().cloned().fold(0.0, f64::max);
        let mut out = Vec::new();
        let mut i = 0;
        while i < n {
            // plateau-aware local maximum
            let mut j = i;
            while j + 1 < n && sm[j + 1] == sm[i] {
                j += 1;
            }
            let left = if i == 0 { f64::NEG_INFINITY } else { sm[i - 1] };
            let right = if j + 1 >= n { f64::NEG_INFINITY } else { sm[j + 1] };
            if sm[i] > left && sm[i] > right && sm[i] >= min_fraction * top && sm[i] > 0.0 {
                out.push(0.5 * (self.centers[i] + self.centers[j]));
            }
            i = j + 1;
        }
        out
    }
}

pub const DEFAULT_HALF_WIDTH: f64 = 0.01;

pub fn pdf_from_density_matrix(rho: &Mat<c64>, half_width: f64) -> Result<BinnedPdf> {
    let (vals, vecs) = hermitian_eigen(rho)?;
    if let Some(&neg) = vals.iter().find(|&&p| p < -1e-8) {
        return Err(Error::NotPositive(neg));
    }
    let d = rho.nrows();
    let ne = ne_diag(d);
    let mut pdf = BinnedPdf::new(half_width)?;
    for (k, &p) in vals.iter().enumerate() {
        let x: f64 = (0..d).map(|i| vecs[(i, k)].norm_sqr() * ne[i]).sum();
        pdf.add_mass(x, p);
    }
    Ok(pdf)
}

#[derive(Clone, Debug)]
pub struct SlowRelaxation {
    pub a: f64,
    pub lambda1: f64,
    pub rho_ss: Mat<c64>,
    pub rho_plus: Mat<c64>,
    pub rho_minus: Mat<c64>,
    pub ne_ss: f64,
    pub ne_plus: f64,
    pub ne_minus: f64,
}

impl SlowRelaxation {
    /// rho(t) = rho_ss + A (rho_plus - rho_minus) e^{lambda_1 t}
    pub fn rho_at(&self, t: f64) -> Mat<c64> {
        let f = self.a * (self.lambda1 * t).exp();
        let d = self.rho_ss.nrows();
        Mat::from_fn(d, d, |i, j| self.rho_ss[(i, j)] + (self.rho_plus[(i, j)] - self.rho_minus[(i, j)]) * f)
    }

    pub fn ne_at(&self, t: f64) -> f64 {
        self.ne_ss + self.a * (self.ne_plus - self.ne_minus) * (self.lambda1 * t).exp()
    }
}

/// Closed-form slow relaxation; A is the coefficient of rho_0 along the slow mode, read off with
/// the dual eigenvector of lambda_1.
pub fn slow_relaxation(rho0: &Mat<c64>, spec: &SpectrumResult, mm: &MetastableManifold) -> Result<SlowRelaxation> {
    if !(mm.lambda1 < 0.0) {
        return Err(Error::DegenerateManifold(format!("lambda_1 = {} is not negative", mm.lambda1)));
    }
    let d = spec.params.dim();
    if rho0.nrows() != d {
        return Err(Error::Dimension { expected: d, got: rho0.nrows() });
    }
    let real = real_superoperator(&spec.params, 0.0, usize::MAX)?;
    let dual = inverse_iteration(&real, mm.lambda1, true)?;
    let hb = HermitianBasis::new(d);
    let proj = |m: &Mat<c64>| -> f64 {
        let c = hb.coords(&crate::linalg::hermitian_part(m));
        c.iter().zip(&dual).map(|(z, w)| z.re * w).sum()
    };
    let rho1 = Mat::from_fn(d, d, |i, j| mm.rho_plus[(i, j)] - mm.rho_minus[(i, j)]);
    let norm = proj(&rho1);
    if norm.abs() < 1e-300 {
        return Err(Error::DegenerateManifold("slow mode orthogonal to its dual".into()));
    }
    Ok(SlowRelaxation {
        a: proj(rho0) / norm,
        lambda1: mm.lambda1,
        rho_ss: mm.rho_ss.clone(),
        rho_plus: mm.rho_plus.clone(),
        rho_minus: mm.rho_minus.clone(),
        ne_ss: mm.ne_ss,
        ne_plus: mm.ne_plus,
        ne_minus: mm.ne_minus,
    })
}

/// Pure Dicke-basis state as a density matrix.
pub fn pure_state(basis: DickeBasis, psi: &[c64]) -> Mat<c64> {
    let d = basis.dim();
    Mat::from_fn(d, d, |i, j| psi[i] * psi[j].conj())
}

/// Dense master-equation propagation of rho0 to each of the ascending `times`.
pub fn propagate_master(params: &ModelParams, rho0: &Mat<c64>, times: &[f64]) -> Result<Vec<Mat<c64>>> {
    let d = params.dim();
    if rho0.nrows() != d || rho0.ncols() != d {
        return Err(Error::Dimension { expected: d, got: rho0.nrows() });
    }
    let sup = crate::model::build_superoperator(params, 0.0)?;
    let mut v = crate::model::vectorize(rho0);
    let mut t = 0.0;
    let mut out = Vec::with_capacity(times.len());
    for &tk in times {
        if tk < t {
            return Err(Error::InvalidParams("times must be ascending and nonnegative".into()));
        }
        if tk > t {
            let p = crate::linalg::expm(&crate::linalg::scale(&sup.matrix, cr(tk - t)));
            v = (0..v.len()).map(|i| (0..v.len()).map(|j| p[(i, j)] * v[j]).sum()).collect();
            t = tk;
        }
        out.push(crate::model::unvectorize(&v, d));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{adjoint, expm, max_abs_diff};
    use crate::model::{build_superoperator, unvectorize, vectorize};

    fn p(n: usize, delta: f64) -> ModelParams {
        ModelParams::standard(n, delta)
    }

    #[test]
    fn single_atom_spectrum_matches_bloch() {
        let params = ModelParams { n_atoms: 1, rabi: 1.5, detuning: 0.0, interaction: 0.0, decay: 1.0 };
        let s = full_spectrum(&params).unwrap();
        // Resonant Bloch equations: 0, -1/2, and -3/4 +- sqrt(1/16 - rabi^2).
        let disc = c64::new(1.0 / 16.0 - 1.5 * 1.5, 0.0).sqrt();
        let mut want = [cz(), cr(-0.5), cr(-0.75) + disc, cr(-0.75) - disc];
        want.sort_by(|a, b| b.re.partial_cmp(&a.re).unwrap().then(b.im.partial_cmp(&a.im).unwrap()));
        for (x, y) in s.eigenvalues.iter().zip(&want) {
            assert!((x - y).norm() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn spectrum_invariants() {
        for &(n, delta) in &[(4usize, 3.4), (6, 2.4), (7, 4.4)] {
            let params = p(n, delta);
            let s = full_spectrum(&params).unwrap();
            assert!(s.eigenvalues[0].norm() < 1e-9);
            for w in s.eigenvalues.windows(2) {
                assert!(w[1].re <= w[0].re + 1e-12);
            }
            for (l, rho) in s.eigenmatrices.iter().enumerate().skip(1) {
                assert!(trace(rho).norm() < 1e-9, "trace of rho_{l}");
            }
            let rss = s.rho_ss();
            assert!(max_abs_diff(rss, &adjoint(rss)) < 1e-12);
            assert!((trace(rss) - cr(1.0)).norm() < 1e-12);
            let min = crate::linalg::hermitian_eigenvalues(rss).unwrap()[0];
            assert!(min >= -1e-10);
            let g = Generator::new(&params);
            assert!(max_abs(&g.apply(rss, 0.0)) < 1e-9);
        }
    }

    #[test]
    fn conjugate_pair_symmetry() {
        let params = p(5, 2.4);
        let s = full_spectrum(&params).unwrap();
        let g = Generator::new(&params);
        for (l, rho) in s.eigenmatrices.iter().enumerate() {
            let lam = s.eigenvalues[l];
            assert!(s.eigenvalues.iter().any(|z| (z - lam.conj()).norm() < 1e-8));
            assert!(residual(&g, &adjoint(rho), lam.conj()) < 1e-8);
        }
    }

    #[test]
    fn gapped_across_detuning() {
        for k in 0..=12 {
            let delta = 1.0 + 0.35 * k as f64;
            let e = sorted_eigenvalues(&p(8, delta), 0.0, DEFAULT_N_CAP).unwrap();
            assert!(-e[1].re > 1e-3, "delta {delta}");
        }
    }

    #[test]
    fn slow_spectrum_agrees_with_full() {
        let params = p(8, 3.4);
        let full = full_spectrum(&params).unwrap();
        let slow = slow_spectrum(&params, DEFAULT_N_CAP).unwrap();
        assert!(max_abs_diff(full.rho_ss(), slow.rho_ss()) < 1e-10);
        let a = phase_fixed_hermitian(full.rho1().unwrap());
        let b = phase_fixed_hermitian(slow.rho1().unwrap());
        let same = max_abs_diff(&a, &b).min(max_abs_diff(&a, &crate::linalg::scale(&b, cr(-1.0))));
        assert!(same < 1e-8);
    }

    #[test]
    fn synthetic_gap_fit() {
        let gaps: Vec<(usize, f64)> = [8usize, 12, 16, 20, 24].iter().map(|&n| (n, 0.37 * (-0.21 * n as f64).exp())).collect();
        let f = fit_gaps(gaps).unwrap();
        assert!((f.a + 0.21).abs() < 1e-10 && (f.b - 0.37).abs() < 1e-10);
        assert!(fit_gaps(vec![(8, 1.0), (12, 0.5), (16, -1.0), (20, 0.1)]).is_err());
    }

    #[test]
    fn density_of_extreme_dicke_states() {
        let b = DickeBasis::new(6);
        let lo = crate::model::Operator::dicke_projector(b, 0).matrix;
        let hi = crate::model::Operator::dicke_projector(b, 6).matrix;
        assert_eq!(excitation_density(&lo), 0.0);
        assert_eq!(excitation_density(&hi), 1.0);
    }

    #[test]
    fn manifold_structure_at_3_4() {
        let s = full_spectrum(&p(10, 3.4)).unwrap();
        let mm = extract_mm(&s).unwrap();
        assert!(trace_prod(&mm.rho_plus, &mm.rho_minus).norm() < 1e-10);
        assert!((trace(&mm.rho_plus) - cr(1.0)).norm() < 1e-12);
        assert!((trace(&mm.rho_minus) - cr(1.0)).norm() < 1e-12);
        for r in [&mm.rho_plus, &mm.rho_minus] {
            assert!(crate::linalg::hermitian_eigenvalues(r).unwrap()[0] >= -1e-10);
        }
        assert!(mm.ne_plus < mm.ne_minus);
        // reconstruction of the Hermitized slow mode
        let d = 11;
        let rec = Mat::from_fn(d, d, |i, j| (mm.rho_plus[(i, j)] - mm.rho_minus[(i, j)]) * mm.weight);
        assert!(max_abs_diff(&rec, &mm.rho1) < 1e-8);
        let st = occupation_stats(&mm).unwrap();
        assert_eq!(st.p_dark + st.p_bright, 1.0);
        assert!(st.r > 1.0);
        let mix = mm.ne_plus * st.p_dark + mm.ne_minus * st.p_bright;
        assert!((mix - mm.ne_ss).abs() < 1e-12);
        // D-weighted mixture reproduces n_e within the manifold error
        let dmix = mm.ne_plus * mm.d_plus + mm.ne_minus * mm.d_minus;
        assert!((dmix - mm.ne_ss).abs() < 10.0 * mm.mm_error.sqrt() + 1e-12);
    }

    #[test]
    fn complex_gap_is_refused() {
        let s = slow_spectrum(&p(20, 2.4), DEFAULT_N_CAP).unwrap();
        if !is_real_eigenvalue(s.lambda1()) {
            assert!(matches!(extract_mm(&s), Err(Error::ComplexGap { .. })));
        }
        let params = ModelParams { n_atoms: 1, rabi: 1.5, detuning: 0.0, interaction: 0.0, decay: 1.0 };
        let s = full_spectrum(&params).unwrap();
        assert!(is_real_eigenvalue(s.lambda1()));
    }

    #[test]
    fn monostable_ii_overlaps() {
        for n in [8usize, 12, 16] {
            let s = slow_spectrum(&p(n, 4.4), DEFAULT_N_CAP).unwrap();
            let mm = extract_mm(&s).unwrap();
            assert!((mm.d_plus - 1.0).abs() < 0.05, "N {n}: {}", mm.d_plus);
            assert!(mm.d_minus.abs() < 0.05, "N {n}: {}", mm.d_minus);
        }
    }

    #[test]
    fn pdf_of_pure_state() {
        let b = DickeBasis::new(4);
        let rho = crate::model::Operator::dicke_projector(b, 1).matrix;
        let pdf = pdf_from_density_matrix(&rho, 0.01).unwrap();
        assert!((pdf.total_mass() - 1.0).abs() < 1e-12);
        let k = pdf.bin_of(0.25);
        assert!((pdf.densities[k] - 50.0).abs() < 1e-9);
        assert_eq!(pdf.densities.iter().filter(|v| **v > 0.0).count(), 1);
    }

    #[test]
    fn pdfs_at_3_4() {
        let params = p(24, 3.4);
        let s = slow_spectrum(&params, DEFAULT_N_CAP).unwrap();
        let mm = extract_mm(&s).unwrap();
        let (dark, _, bright) = crate::meanfield::bistable_triple(&params).unwrap();
        let ss = pdf_from_density_matrix(s.rho_ss(), DEFAULT_HALF_WIDTH).unwrap();
        assert!((ss.total_mass() - 1.0).abs() < 1e-6);
        let peaks = ss.peaks(2, 0.05);
        assert!(peaks.iter().any(|x| (x - dark.ne()).abs() < 0.05), "{peaks:?}");
        assert!(peaks.iter().any(|x| (x - bright.ne()).abs() < 0.05), "{peaks:?}");
        let plus = pdf_from_density_matrix(&mm.rho_plus, DEFAULT_HALF_WIDTH).unwrap().peaks(2, 0.05);
        let minus = pdf_from_density_matrix(&mm.rho_minus, DEFAULT_HALF_WIDTH).unwrap().peaks(2, 0.05);
        assert_eq!(plus.len(), 1, "{plus:?}");
        assert_eq!(minus.len(), 1, "{minus:?}");
        assert!((plus[0] - dark.ne()).abs() < 0.05 && (minus[0] - bright.ne()).abs() < 0.05);
    }

    #[test]
    fn initial_state_controls_relaxation_in_monostable_ii() {
        // rho_ss is almost entirely rho_plus here, so the dominant eigenstate of rho_plus barely
        // touches the slow mode while eigenstates of rho_minus load it fully.
        let params = p(12, 4.4);
        let s = full_spectrum(&params).unwrap();
        let mm = extract_mm(&s).unwrap();
        let top = |r: &Mat<c64>| {
            let (_, vecs) = hermitian_eigen(r).unwrap();
            let psi: Vec<c64> = (0..13).map(|i| vecs[(i, 12)]).collect();
            pure_state(DickeBasis::new(12), &psi)
        };
        let fast = slow_relaxation(&top(&mm.rho_plus), &s, &mm).unwrap();
        let slow = slow_relaxation(&top(&mm.rho_minus), &s, &mm).unwrap();
        assert!(fast.a.abs() < 1e-3, "{}", fast.a);
        assert!(slow.a.abs() > 0.5, "{}", slow.a);
        // time for the slow-mode amplitude to fall below 1e-3
        let t_fast = (fast.a.abs() / 1e-3).ln().max(0.0) / -mm.lambda1;
        let t_slow = (slow.a.abs() / 1e-3).ln() / -mm.lambda1;
        assert!(t_fast < 0.1 * t_slow);
    }

    fn propagate(params: &ModelParams, rho0: &Mat<c64>, t: f64) -> Mat<c64> {
        let sup = build_superoperator(params, 0.0).unwrap();
        let prop = expm(&crate::linalg::scale(&sup.matrix, cr(t)));
        let v = vectorize(rho0);
        let n = v.len();
        let out: Vec<c64> = (0..n).map(|r| (0..n).map(|c| prop[(r, c)] * v[c]).sum()).collect();
        unvectorize(&out, params.dim())
    }

    #[test]
    fn slow_relaxation_matches_propagation() {
        let params = p(8, 3.4);
        let s = full_spectrum(&params).unwrap();
        let mm = extract_mm(&s).unwrap();
        let t_min = 5.0 / -s.eigenvalues[2].re;
        let ss = slow_relaxation(s.rho_ss(), &s, &mm).unwrap();
        assert!(ss.a.abs() < 1e-8);
        // rho_plus lies in the slow manifold; the ground state also excites fast modes, which need
        // a few more of their lifetimes to die out.
        let ground = crate::model::Operator::dicke_projector(DickeBasis::new(8), 0).matrix;
        for (rho0, first) in [(mm.rho_plus.clone(), 0), (ground, 1)] {
            let sr = slow_relaxation(&rho0, &s, &mm).unwrap();
            for k in first..5 {
                let t = t_min * (1.0 + k as f64);
                let exact = excitation_density(&propagate(&params, &rho0, t));
                assert!((exact - sr.ne_at(t)).abs() < 1e-4, "t {t}: {exact} vs {}", sr.ne_at(t));
            }
        }
    }
}
