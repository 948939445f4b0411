//! Operators of the permutation-symmetric driven-dissipative model in the Dicke basis.
//!
//! Density matrices are vectorized by column stacking: `vec(rho)[i + j*d] = rho[(i, j)]`,
//! so `vec(A X B) = (B^T kron A) vec(X)`.

use faer::{c64, Mat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cr, cz};

pub const DEFAULT_N_CAP: usize = 60;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub n_atoms: usize,
    pub rabi: f64,
    pub detuning: f64,
    pub interaction: f64,
    #[serde(default = "one")]
    pub decay: f64,
}

fn one() -> f64 {
    1.0
}

impl ModelParams {
    /// Omega = 1.5, V = 10, gamma = 1.
    pub fn standard(n_atoms: usize, detuning: f64) -> Self {
        Self { n_atoms, rabi: 1.5, detuning, interaction: 10.0, decay: 1.0 }
    }

    pub fn with_n(self, n_atoms: usize) -> Self {
        Self { n_atoms, ..self }
    }

    pub fn with_detuning(self, detuning: f64) -> Self {
        Self { detuning, ..self }
    }

    pub fn spin(&self) -> f64 {
        self.n_atoms as f64 / 2.0
    }

    pub fn dim(&self) -> usize {
        self.n_atoms + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_atoms < 1 {
            return Err(Error::InvalidParams("n_atoms must be >= 1".into()));
        }
        if !(self.decay > 0.0) {
            return Err(Error::InvalidParams(format!("decay must be > 0, got {}", self.decay)));
        }
        for (name, v) in [("rabi", self.rabi), ("detuning", self.detuning), ("interaction", self.interaction)] {
            if !v.is_finite() {
                return Err(Error::InvalidParams(format!("{name} is not finite")));
            }
        }
        Ok(())
    }

    pub fn check_cap(&self, cap: usize) -> Result<()> {
        self.validate()?;
        if self.n_atoms > cap {
            return Err(Error::SizeCap { n: self.n_atoms, cap });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DickeBasis {
    n_atoms: usize,
}

impl DickeBasis {
    pub fn new(n_atoms: usize) -> Self {
        Self { n_atoms }
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    pub fn spin(&self) -> f64 {
        self.n_atoms as f64 / 2.0
    }

    pub fn dim(&self) -> usize {
        self.n_atoms + 1
    }

    /// Magnetization M of array index i.
    pub fn magnetization(&self, i: usize) -> f64 {
        i as f64 - self.spin()
    }

    /// Array index of magnetization M, if M is a valid eigenvalue.
    pub fn index(&self, m: f64) -> Option<usize> {
        let i = m + self.spin();
        if i < -1e-9 || i > self.n_atoms as f64 + 1e-9 || (i - i.round()).abs() > 1e-9 {
            return None;
        }
        Some(i.round() as usize)
    }
}

#[derive(Clone, Debug)]
pub struct Operator {
    pub basis: DickeBasis,
    pub matrix: Mat<c64>,
}

#[derive(Serialize)]
struct OperatorJson {
    dim: usize,
    entries: Vec<[f64; 2]>,
}

impl Operator {
    pub fn new(basis: DickeBasis, matrix: Mat<c64>) -> Result<Self> {
        let d = basis.dim();
        if matrix.nrows() != d || matrix.ncols() != d {
            return Err(Error::Dimension { expected: d, got: matrix.nrows().max(matrix.ncols()) });
        }
        Ok(Self { basis, matrix })
    }

    pub fn zeros(basis: DickeBasis) -> Self {
        let d = basis.dim();
        Self { basis, matrix: Mat::zeros(d, d) }
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn adjoint(&self) -> Self {
        Self { basis: self.basis, matrix: crate::linalg::adjoint(&self.matrix) }
    }

    pub fn hermiticity_defect(&self) -> f64 {
        crate::linalg::max_abs_diff(&self.matrix, &crate::linalg::adjoint(&self.matrix))
    }

    pub fn trace(&self) -> c64 {
        crate::linalg::trace(&self.matrix)
    }

    /// Projector onto the Dicke state of magnetization index i.
    pub fn dicke_projector(basis: DickeBasis, i: usize) -> Self {
        let mut op = Self::zeros(basis);
        op.matrix[(i, i)] = cr(1.0);
        op
    }

    pub fn to_json(&self) -> String {
        let d = self.dim();
        let mut entries = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                let z = self.matrix[(i, j)];
                entries.push([z.re, z.im]);
            }
        }
        serde_json::to_string(&OperatorJson { dim: d, entries }).expect("operator serializes")
    }
}

#[derive(Clone, Debug)]
pub struct CollectiveOps {
    pub sx: Operator,
    pub sy: Operator,
    pub sz: Operator,
    pub splus: Operator,
    pub sminus: Operator,
}

pub fn build_collective_ops(basis: DickeBasis) -> CollectiveOps {
    let d = basis.dim();
    let s = basis.spin();
    let mut sp = Mat::<c64>::zeros(d, d);
    let mut sm = Mat::<c64>::zeros(d, d);
    let mut sz = Mat::<c64>::zeros(d, d);
    for i in 0..d {
        let m = basis.magnetization(i);
        sz[(i, i)] = cr(m);
        if i + 1 < d {
            sp[(i + 1, i)] = cr(((s - m) * (s + m + 1.0)).sqrt());
        }
        if i > 0 {
            sm[(i - 1, i)] = cr(((s + m) * (s - m + 1.0)).sqrt());
        }
    }
    let sx = Mat::from_fn(d, d, |i, j| (sp[(i, j)] + sm[(i, j)]) * 0.5);
    let sy = Mat::from_fn(d, d, |i, j| (sp[(i, j)] - sm[(i, j)]) * c64::new(0.0, -0.5));
    let op = |m| Operator { basis, matrix: m };
    CollectiveOps { sx: op(sx), sy: op(sy), sz: op(sz), splus: op(sp), sminus: op(sm) }
}

/// H_eff = Omega Sx - (V/2N) S+S- + ((V - i gamma)/2 - Delta) Sz - i gamma S/2.
pub fn build_h_eff(params: &ModelParams) -> Operator {
    let g = Generator::new(params);
    Operator { basis: DickeBasis::new(params.n_atoms), matrix: g.h_dense() }
}

/// L = sum_M sqrt(M+S) |M-1><M| (without the sqrt(gamma) rate factor).
pub fn build_jump_op(params: &ModelParams) -> Operator {
    let basis = DickeBasis::new(params.n_atoms);
    let d = basis.dim();
    let mut l = Mat::<c64>::zeros(d, d);
    for j in 1..d {
        l[(j - 1, j)] = cr((j as f64).sqrt());
    }
    Operator { basis, matrix: l }
}

/// Banded representation of the generator: H_eff is tridiagonal, L is superdiagonal.
#[derive(Clone, Debug)]
pub(crate) struct Generator {
    pub d: usize,
    pub h_diag: Vec<c64>,
    /// H[(i, i+1)]
    pub h_up: Vec<c64>,
    /// H[(i+1, i)]
    pub h_lo: Vec<c64>,
    /// sqrt(gamma) L[(i, i+1)]
    pub l_up: Vec<f64>,
}

impl Generator {
    pub fn new(p: &ModelParams) -> Self {
        let basis = DickeBasis::new(p.n_atoms);
        let d = basis.dim();
        let s = basis.spin();
        let n = p.n_atoms as f64;
        let mut h_diag = vec![cz(); d];
        let mut h_up = vec![cz(); d.saturating_sub(1)];
        let mut h_lo = vec![cz(); d.saturating_sub(1)];
        let zc = c64::new(p.interaction / 2.0 - p.detuning, -p.decay / 2.0);
        for i in 0..d {
            let m = basis.magnetization(i);
            // S+S- |M> = (S+M)(S-M+1) |M>
            let spsm = (s + m) * (s - m + 1.0);
            h_diag[i] = cr(-p.interaction / (2.0 * n) * spsm) + zc * m + c64::new(0.0, -p.decay * s / 2.0);
        }
        for i in 0..d.saturating_sub(1) {
            let m = basis.magnetization(i);
            // <M+1| S+ |M>
            let amp = ((s - m) * (s + m + 1.0)).sqrt();
            h_lo[i] = cr(p.rabi * amp / 2.0);
            h_up[i] = cr(p.rabi * amp / 2.0);
        }
        let l_up = (1..d).map(|j| (p.decay * j as f64).sqrt()).collect();
        Self { d, h_diag, h_up, h_lo, l_up }
    }

    pub fn h_dense(&self) -> Mat<c64> {
        let d = self.d;
        let mut h = Mat::<c64>::zeros(d, d);
        for i in 0..d {
            h[(i, i)] = self.h_diag[i];
        }
        for i in 0..d.saturating_sub(1) {
            h[(i, i + 1)] = self.h_up[i];
            h[(i + 1, i)] = self.h_lo[i];
        }
        h
    }

    /// (H rho)[(i, j)]
    #[inline]
    fn h_row_times(&self, rho: &Mat<c64>, i: usize, j: usize) -> c64 {
        let mut v = self.h_diag[i] * rho[(i, j)];
        if i > 0 {
            v += self.h_lo[i - 1] * rho[(i - 1, j)];
        }
        if i + 1 < self.d {
            v += self.h_up[i] * rho[(i + 1, j)];
        }
        v
    }

    /// (rho H^dagger)[(i, j)] = sum_k rho[(i,k)] conj(H[(j,k)])
    #[inline]
    fn times_h_adj(&self, rho: &Mat<c64>, i: usize, j: usize) -> c64 {
        let mut v = rho[(i, j)] * self.h_diag[j].conj();
        if j > 0 {
            v += rho[(i, j - 1)] * self.h_lo[j - 1].conj();
        }
        if j + 1 < self.d {
            v += rho[(i, j + 1)] * self.h_up[j].conj();
        }
        v
    }

    /// L_s[rho] = -i (H rho - rho H^dagger) + e^{-s} gamma L rho L^dagger.
    pub fn apply(&self, rho: &Mat<c64>, s: f64) -> Mat<c64> {
        let d = self.d;
        let w = (-s).exp();
        let mi = c64::new(0.0, -1.0);
        Mat::from_fn(d, d, |i, j| {
            let mut v = mi * (self.h_row_times(rho, i, j) - self.times_h_adj(rho, i, j));
            if i + 1 < d && j + 1 < d {
                v += rho[(i + 1, j + 1)] * (w * self.l_up[i] * self.l_up[j]);
            }
            v
        })
    }

    /// Diagonal of L^dagger L including gamma: gamma (M + S).
    pub fn jump_rate_diag(&self, i: usize) -> f64 {
        if i == 0 {
            0.0
        } else {
            self.l_up[i - 1] * self.l_up[i - 1]
        }
    }
}

#[derive(Clone, Debug)]
pub struct Superoperator {
    pub matrix: Mat<c64>,
    pub tilt: f64,
    pub dim: usize,
}

pub fn vec_index(i: usize, j: usize, d: usize) -> usize {
    i + j * d
}

pub fn vectorize(rho: &Mat<c64>) -> Vec<c64> {
    let d = rho.nrows();
    let mut v = vec![cz(); d * d];
    for j in 0..d {
        for i in 0..d {
            v[vec_index(i, j, d)] = rho[(i, j)];
        }
    }
    v
}

pub fn unvectorize(v: &[c64], d: usize) -> Mat<c64> {
    Mat::from_fn(d, d, |i, j| v[vec_index(i, j, d)])
}

/// L_s = -i (I kron H - conj(H) kron I) + e^{-s} gamma (conj(L) kron L) in column stacking.
pub fn build_superoperator(params: &ModelParams, s: f64) -> Result<Superoperator> {
    build_superoperator_capped(params, s, DEFAULT_N_CAP)
}

pub fn build_superoperator_capped(params: &ModelParams, s: f64, cap: usize) -> Result<Superoperator> {
    params.check_cap(cap)?;
    let h = build_h_eff(params).matrix;
    let l = build_jump_op(params).matrix;
    let d = params.dim();
    let mut m = Mat::<c64>::zeros(d * d, d * d);
    let mi = c64::new(0.0, -1.0);
    // I kron H: row (i, j), col (k, j) with H[(i, k)]
    for j in 0..d {
        for i in 0..d {
            for k in 0..d {
                let hik = h[(i, k)];
                if hik != cz() {
                    m[(vec_index(i, j, d), vec_index(k, j, d))] += mi * hik;
                }
            }
        }
    }
    // conj(H) kron I: row (i, j), col (i, l) with conj(H[(j, l)])
    for j in 0..d {
        for l_ in 0..d {
            let hjl = h[(j, l_)].conj();
            if hjl != cz() {
                for i in 0..d {
                    m[(vec_index(i, j, d), vec_index(i, l_, d))] -= mi * hjl;
                }
            }
        }
    }
    // conj(L) kron L: row (i, j), col (k, l) with conj(L[(j, l)]) L[(i, k)]
    let w = params.decay * (-s).exp();
    for j in 0..d {
        for l_ in 0..d {
            let ljl = l[(j, l_)].conj();
            if ljl == cz() {
                continue;
            }
            for i in 0..d {
                for k in 0..d {
                    let lik = l[(i, k)];
                    if lik != cz() {
                        m[(vec_index(i, j, d), vec_index(k, l_, d))] += ljl * lik * w;
                    }
                }
            }
        }
    }
    Ok(Superoperator { matrix: m, tilt: s, dim: d })
}

impl Superoperator {
    pub fn apply(&self, rho: &Mat<c64>) -> Result<Mat<c64>> {
        let d = self.dim;
        if rho.nrows() != d || rho.ncols() != d {
            return Err(Error::Dimension { expected: d, got: rho.nrows() });
        }
        let v = vectorize(rho);
        let n = d * d;
        let out: Vec<c64> = (0..n).map(|r| (0..n).map(|c| self.matrix[(r, c)] * v[c]).sum()).collect();
        Ok(unvectorize(&out, d))
    }
}

/// L_0[rho] evaluated directly, without the superoperator.
pub fn apply_lindblad(rho: &Operator, params: &ModelParams) -> Result<Operator> {
    let d = params.dim();
    if rho.dim() != d || rho.matrix.nrows() != d {
        return Err(Error::Dimension { expected: d, got: rho.matrix.nrows() });
    }
    let h = build_h_eff(params).matrix;
    let l = build_jump_op(params).matrix;
    let hd = crate::linalg::adjoint(&h);
    let ld = crate::linalg::adjoint(&l);
    let comm = &(&h * &rho.matrix) - &(&rho.matrix * &hd);
    let jump = &(&l * &rho.matrix) * &ld;
    let mi = c64::new(0.0, -1.0);
    let out = Mat::from_fn(d, d, |i, j| mi * comm[(i, j)] + jump[(i, j)] * params.decay);
    Ok(Operator { basis: rho.basis, matrix: out })
}

/// Orthonormal Hermitian operator basis: E_ii, (E_ij + E_ji)/sqrt2, i(E_ij - E_ji)/sqrt2.
///
/// Hermiticity-preserving maps have real matrices in this basis.
#[derive(Clone, Debug)]
pub struct HermitianBasis {
    d: usize,
    elems: Vec<(u8, usize, usize)>,
}

impl HermitianBasis {
    pub fn new(d: usize) -> Self {
        let mut elems = Vec::with_capacity(d * d);
        for i in 0..d {
            elems.push((0, i, i));
        }
        for i in 0..d {
            for j in i + 1..d {
                elems.push((1, i, j));
                elems.push((2, i, j));
            }
        }
        Self { d, elems }
    }

    pub fn len(&self) -> usize {
        self.elems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elems.is_empty()
    }

    pub fn element(&self, a: usize) -> Mat<c64> {
        let mut m = Mat::<c64>::zeros(self.d, self.d);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        match self.elems[a] {
            (0, i, _) => m[(i, i)] = cr(1.0),
            (1, i, j) => {
                m[(i, j)] = cr(r);
                m[(j, i)] = cr(r);
            }
            (_, i, j) => {
                m[(i, j)] = c64::new(0.0, r);
                m[(j, i)] = c64::new(0.0, -r);
            }
        }
        m
    }

    /// Coordinates Tr(B_a X) of an arbitrary matrix X.
    pub fn coords(&self, x: &Mat<c64>) -> Vec<c64> {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        self.elems
            .iter()
            .map(|&(k, i, j)| match k {
                0 => x[(i, i)],
                1 => (x[(i, j)] + x[(j, i)]) * r,
                _ => (x[(j, i)] - x[(i, j)]) * c64::new(0.0, r),
            })
            .collect()
    }

    /// sum_a c_a B_a
    pub fn assemble(&self, c: &[c64]) -> Mat<c64> {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let mut m = Mat::<c64>::zeros(self.d, self.d);
        for (&(k, i, j), &z) in self.elems.iter().zip(c) {
            match k {
                0 => m[(i, i)] += z,
                1 => {
                    m[(i, j)] += z * r;
                    m[(j, i)] += z * r;
                }
                _ => {
                    m[(i, j)] += z * c64::new(0.0, r);
                    m[(j, i)] += z * c64::new(0.0, -r);
                }
            }
        }
        m
    }
}

/// Real matrix of the tilted generator in the Hermitian operator basis.
pub fn real_superoperator(params: &ModelParams, s: f64, cap: usize) -> Result<Mat<f64>> {
    params.check_cap(cap)?;
    let g = Generator::new(params);
    let d = g.d;
    let basis = HermitianBasis::new(d);
    let n = basis.len();
    let mut out = Mat::<f64>::zeros(n, n);
    for b in 0..n {
        let x = g.apply(&basis.element(b), s);
        for (a, c) in basis.coords(&x).into_iter().enumerate() {
            out[(a, b)] = c.re;
        }
    }
    Ok(out)
}
