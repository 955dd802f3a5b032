//! Central-difference gradient verification.

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compare `analytic` against central differences of `f` at `params`.
pub fn finite_diff_check<F>(f: F, params: &[f64], analytic: &[f64], step: f64) -> FdReport
where
    F: Fn(&[f64]) -> f64,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    assert_eq!(params.len(), analytic.len());
    let mut x = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut worst = (0.0, 0);
    for i in 0..params.len() {
        x[i] = params[i] + step;
        let up = f(&x);
        x[i] = params[i] - step;
        let dn = f(&x);
        x[i] = params[i];
        let g = (up - dn) / (2.0 * step);
        let e = relative_error(analytic[i], g);
        if e > worst.0 || numeric.is_empty() {
            worst = (e, i);
        }
        numeric.push(g);
    }
    FdReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        analytic: analytic.to_vec(),
        numeric,
    }
}
