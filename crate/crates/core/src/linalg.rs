//! Small dense linear-algebra helpers on top of faer.

use faer::{c64, Mat, Side};
use faer::linalg::solvers::Solve;

use crate::error::{Error, Result};

pub fn cz() -> c64 {
    c64::new(0.0, 0.0)
}

pub fn cr(x: f64) -> c64 {
    c64::new(x, 0.0)
}

pub fn identity(n: usize) -> Mat<c64> {
    Mat::from_fn(n, n, |i, j| if i == j { cr(1.0) } else { cz() })
}

pub fn trace(a: &Mat<c64>) -> c64 {
    (0..a.nrows()).map(|i| a[(i, i)]).sum()
}

/// `Tr(A B)`.
pub fn trace_prod(a: &Mat<c64>, b: &Mat<c64>) -> c64 {
    let n = a.nrows();
    let mut s = cz();
    for i in 0..n {
        for k in 0..n {
            s += a[(i, k)] * b[(k, i)];
        }
    }
    s
}

pub fn adjoint(a: &Mat<c64>) -> Mat<c64> {
    Mat::from_fn(a.ncols(), a.nrows(), |i, j| a[(j, i)].conj())
}

pub fn hermitian_part(a: &Mat<c64>) -> Mat<c64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| (a[(i, j)] + a[(j, i)].conj()) * 0.5)
}

pub fn max_abs(a: &Mat<c64>) -> f64 {
    let mut m = 0.0f64;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            m = m.max(a[(i, j)].norm());
        }
    }
    m
}

pub fn max_abs_diff(a: &Mat<c64>, b: &Mat<c64>) -> f64 {
    assert_eq!((a.nrows(), a.ncols()), (b.nrows(), b.ncols()));
    let mut m = 0.0f64;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            m = m.max((a[(i, j)] - b[(i, j)]).norm());
        }
    }
    m
}

pub fn scale(a: &Mat<c64>, z: c64) -> Mat<c64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] * z)
}

/// Eigen-decomposition of the Hermitian part of `a`, ascending eigenvalues.
pub fn hermitian_eigen(a: &Mat<c64>) -> Result<(Vec<f64>, Mat<c64>)> {
    let h = hermitian_part(a);
    let e = h
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Eigensolver(format!("{e:?}")))?;
    let vals = (0..h.nrows()).map(|i| e.S()[i].re).collect();
    Ok((vals, e.U().to_owned()))
}

pub fn hermitian_eigenvalues(a: &Mat<c64>) -> Result<Vec<f64>> {
    let h = hermitian_part(a);
    h.self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::Eigensolver(format!("{e:?}")))
}

/// Trace norm of a Hermitian matrix (sum of absolute eigenvalues).
pub fn trace_norm_hermitian(a: &Mat<c64>) -> Result<f64> {
    Ok(hermitian_eigenvalues(a)?.iter().map(|x| x.abs()).sum())
}

fn one_norm(a: &Mat<c64>) -> f64 {
    (0..a.ncols())
        .map(|j| (0..a.nrows()).map(|i| a[(i, j)].norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA_13: f64 = 5.371920351148152;

/// Matrix exponential by Pade-13 scaling and squaring.
pub fn expm(a: &Mat<c64>) -> Mat<c64> {
    let n = a.nrows();
    let norm = one_norm(a);
    let s = if norm > THETA_13 {
        (norm / THETA_13).log2().ceil() as i32
    } else {
        0
    };
    let a = scale(a, cr(0.5f64.powi(s)));
    let id = identity(n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let b = |k: usize| cr(PADE13[k]);
    let lin = |m: &Mat<c64>, c: c64| scale(m, c);

    let u_inner = &lin(&a6, b(13)) + &lin(&a4, b(11)) + lin(&a2, b(9));
    let u_tail = &lin(&a6, b(7)) + &lin(&a4, b(5)) + &lin(&a2, b(3)) + lin(&id, b(1));
    let u = &a * &(&(&a6 * &u_inner) + &u_tail);
    let v_inner = &lin(&a6, b(12)) + &lin(&a4, b(10)) + lin(&a2, b(8));
    let v = &(&a6 * &v_inner) + &(&lin(&a6, b(6)) + &lin(&a4, b(4)) + &lin(&a2, b(2)) + lin(&id, b(0)));

    let p = &v + &u;
    let q = &v - &u;
    let mut r = q.partial_piv_lu().solve(&p);
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

/// Least-squares line y = slope*x + intercept with coefficient of determination.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub slope_se: f64,
}

pub fn line_fit(x: &[f64], y: &[f64]) -> Result<LineFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Insufficient(format!("line fit needs >= 2 points, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Insufficient("line fit with a single distinct abscissa".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let e = b - (slope * a + intercept);
            e * e
        })
        .sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    let slope_se = if x.len() > 2 {
        (sse / (n - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    Ok(LineFit { slope, intercept, r2, slope_se })
}

/// Fit y = b e^{a x}; returns (a, b, r2) via a line fit of ln y.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct ExpFit {
    pub a: f64,
    pub b: f64,
    pub r2: f64,
    pub a_se: f64,
}

pub fn exp_fit(x: &[f64], y: &[f64]) -> Result<ExpFit> {
    if let Some(bad) = y.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Insufficient(format!("exponential fit needs positive data, got {bad}")));
    }
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let f = line_fit(x, &ly)?;
    Ok(ExpFit { a: f.slope, b: f.intercept.exp(), r2: f.r2, a_se: f.slope_se })
}

/// Real root of f on [a, b] by bisection; requires a sign change.
pub fn bisect(mut a: f64, mut b: f64, tol: f64, mut f: impl FnMut(f64) -> f64) -> Option<f64> {
    let mut fa = f(a);
    let fb = f(b);
    if fa == 0.0 {
        return Some(a);
    }
    if fb == 0.0 {
        return Some(b);
    }
    if fa.signum() == fb.signum() {
        return None;
    }
    while (b - a).abs() > tol {
        let m = 0.5 * (a + b);
        let fm = f(m);
        if fm == 0.0 {
            return Some(m);
        }
        if fm.signum() == fa.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    Some(0.5 * (a + b))
}

/// Zero crossing of piecewise-linear data, first sign change only.
pub fn zero_crossing(x: &[f64], y: &[f64]) -> Option<f64> {
    for i in 1..x.len() {
        let (y0, y1) = (y[i - 1], y[i]);
        if y0 == 0.0 {
            return Some(x[i - 1]);
        }
        if y0.signum() != y1.signum() || y1 == 0.0 {
            return Some(x[i - 1] + (x[i] - x[i - 1]) * y0 / (y0 - y1));
        }
    }
    None
}
