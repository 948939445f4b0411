use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("N = {n} exceeds the configured cap of {cap}")]
    SizeCap { n: usize, cap: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("eigensolver failed: {0}")]
    Eigensolver(String),
    #[error("stationary eigenvalue is degenerate ({count} eigenvalues within {tol:e} of zero)")]
    DegenerateSteadyState { count: usize, tol: f64 },
    #[error("slowest mode is complex (Im lambda_1 = {im:e}); no real metastable manifold")]
    ComplexGap { im: f64 },
    #[error("degenerate metastable manifold: {0}")]
    DegenerateManifold(String),
    #[error("dt too large: jump probability {p:.4} exceeds 0.1 at t = {t}")]
    StepTooLarge { p: f64, t: f64 },
    #[error("switch thresholds ({dark}, {bright}) do not bracket the unstable density {unstable}")]
    Thresholds { dark: f64, bright: f64, unstable: f64 },
    #[error("no bistable window at delta = {0}")]
    NotBistable(f64),
    #[error("non-convex SCGF: second difference {0:e}")]
    NonConvex(f64),
    #[error("insufficient data: {0}")]
    Insufficient(String),
    #[error("negative eigenvalue {0:e} in density matrix")]
    NotPositive(f64),
    #[error("integration failed: {0}")]
    Integration(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
