//! Barrier differences and relaxation exponents from the three methods, side by side.

use serde::Serialize;

use crate::instanton::BarrierRow;
use crate::linalg::zero_crossing;
use crate::qjmc::{SwitchStats, TauScaling};
use crate::spectral::{GapScaling, RatioScaling};

/// Detunings closer than this are the same grid point.
const SAME_DELTA: f64 = 1e-9;

#[derive(Clone, Debug, Default, Serialize)]
pub struct MethodInputs {
    pub ratios: Vec<RatioScaling>,
    pub gaps: Vec<(f64, GapScaling)>,
    pub switching: Vec<SwitchStats>,
    pub taus: Vec<(f64, TauScaling)>,
    pub barriers: Vec<BarrierRow>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonRow {
    pub delta: f64,
    /// Slope of ln r against N.
    pub phi_db_spectral: Option<f64>,
    /// v_d - v_b from the waiting-time fits.
    pub phi_db_qjmc: Option<f64>,
    pub phi_db_instanton: Option<f64>,
    /// Minus the slope of ln(gap) against N.
    pub tau_exponent_spectral: Option<f64>,
    /// Slope of ln tau against N.
    pub tau_exponent_qjmc: Option<f64>,
    pub complete: bool,
    pub missing: Vec<&'static str>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    pub crossing_spectral: Option<f64>,
    pub crossing_qjmc: Option<f64>,
    pub crossing_instanton: Option<f64>,
    /// Detuning of the largest QJMC tau exponent.
    pub tau_peak_qjmc: Option<f64>,
    pub tau_peak_spectral: Option<f64>,
}

impl ComparisonTable {
    /// Every row with all three estimates present has one common sign.
    pub fn signs_agree(&self) -> bool {
        self.rows.iter().filter(|r| r.complete).all(|r| {
            let s = [r.phi_db_spectral, r.phi_db_qjmc, r.phi_db_instanton].map(|v| v.unwrap().signum());
            s[0] == s[1] && s[1] == s[2]
        })
    }

    /// Largest distance between the three zero crossings, if all exist.
    pub fn crossing_spread(&self) -> Option<f64> {
        let c = [self.crossing_spectral?, self.crossing_qjmc?, self.crossing_instanton?];
        let lo = c.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Some(hi - lo)
    }
}

fn find<T>(items: &[T], delta: f64, key: impl Fn(&T) -> f64) -> Option<&T> {
    items.iter().find(|t| (key(t) - delta).abs() < SAME_DELTA)
}

fn series_crossing(rows: &[ComparisonRow], sel: impl Fn(&ComparisonRow) -> Option<f64>) -> Option<f64> {
    let (x, y): (Vec<f64>, Vec<f64>) = rows.iter().filter_map(|r| sel(r).map(|v| (r.delta, v))).unzip();
    zero_crossing(&x, &y)
}

fn series_peak(rows: &[ComparisonRow], sel: impl Fn(&ComparisonRow) -> Option<f64>) -> Option<f64> {
    rows.iter()
        .filter_map(|r| sel(r).map(|v| (r.delta, v)))
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .map(|p| p.0)
}

/// One row per detuning that appears in any input, ascending.
pub fn compare_methods(inp: &MethodInputs) -> ComparisonTable {
    let mut deltas: Vec<f64> = inp
        .ratios
        .iter()
        .map(|r| r.delta)
        .chain(inp.gaps.iter().map(|g| g.0))
        .chain(inp.switching.iter().map(|s| s.delta))
        .chain(inp.taus.iter().map(|t| t.0))
        .chain(inp.barriers.iter().map(|b| b.delta))
        .collect();
    deltas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    deltas.dedup_by(|a, b| (*a - *b).abs() < SAME_DELTA);
    let rows: Vec<ComparisonRow> = deltas
        .into_iter()
        .map(|d| {
            let phi_db_spectral = find(&inp.ratios, d, |r| r.delta).and_then(|r| r.fit).map(|f| f.slope);
            let phi_db_qjmc = find(&inp.switching, d, |s| s.delta).and_then(|s| Some(s.fit_dark?.a - s.fit_bright?.a));
            let phi_db_instanton = find(&inp.barriers, d, |b| b.delta).filter(|b| b.converged).map(|b| b.phi_db);
            let tau_exponent_spectral = find(&inp.gaps, d, |g| g.0).map(|g| -g.1.a);
            let tau_exponent_qjmc = find(&inp.taus, d, |t| t.0).and_then(|t| t.1.fit).map(|f| f.a);
            let mut missing = Vec::new();
            for (name, v) in [
                ("phi_db_spectral", phi_db_spectral),
                ("phi_db_qjmc", phi_db_qjmc),
                ("phi_db_instanton", phi_db_instanton),
                ("tau_exponent_spectral", tau_exponent_spectral),
                ("tau_exponent_qjmc", tau_exponent_qjmc),
            ] {
                if v.is_none() {
                    missing.push(name);
                }
            }
            let complete = phi_db_spectral.is_some() && phi_db_qjmc.is_some() && phi_db_instanton.is_some();
            ComparisonRow {
                delta: d,
                phi_db_spectral,
                phi_db_qjmc,
                phi_db_instanton,
                tau_exponent_spectral,
                tau_exponent_qjmc,
                complete,
                missing,
            }
        })
        .collect();
    ComparisonTable {
        crossing_spectral: series_crossing(&rows, |r| r.phi_db_spectral),
        crossing_qjmc: series_crossing(&rows, |r| r.phi_db_qjmc),
        crossing_instanton: series_crossing(&rows, |r| r.phi_db_instanton),
        tau_peak_qjmc: series_peak(&rows, |r| r.tau_exponent_qjmc),
        tau_peak_spectral: series_peak(&rows, |r| r.tau_exponent_spectral),
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn barrier(delta: f64, phi_db: f64) -> BarrierRow {
        BarrierRow { delta, phi_d: 0.1 + phi_db, phi_b: 0.1, phi_db, converged: true, energy_residual: 0.0 }
    }

    #[test]
    fn single_delta_gives_single_row() {
        let t = compare_methods(&MethodInputs { barriers: vec![barrier(3.4, -0.08)], ..Default::default() });
        assert_eq!(t.rows.len(), 1);
        assert!(!t.rows[0].complete);
        assert_eq!(t.rows[0].phi_db_instanton, Some(-0.08));
        assert_eq!(t.rows[0].missing.len(), 4);
        assert_eq!(t.crossing_instanton, None);
    }

    #[test]
    fn crossing_from_instanton_rows() {
        let rows = vec![barrier(3.5, -0.03), barrier(3.3, -0.13), barrier(3.7, 0.05)];
        let t = compare_methods(&MethodInputs { barriers: rows, ..Default::default() });
        assert_eq!(t.rows.iter().map(|r| r.delta).collect::<Vec<_>>(), vec![3.3, 3.5, 3.7]);
        let c = t.crossing_instanton.unwrap();
        assert!((c - (3.5 + 0.2 * 0.03 / 0.08)).abs() < 1e-12);
    }

    #[test]
    fn unconverged_barriers_are_dropped() {
        let mut b = barrier(3.4, -0.08);
        b.converged = false;
        let t = compare_methods(&MethodInputs { barriers: vec![b], ..Default::default() });
        assert_eq!(t.rows[0].phi_db_instanton, None);
    }
}
