//! Central-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Worst-case disagreement between analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_abs_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst entry.
    pub worst_coordinate: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub excluded: usize,
}

/// One perturbed coordinate, handed to the exclusion predicate.
pub struct Probe<'a> {
    pub param: usize,
    pub coord: usize,
    pub base: &'a [Tensor],
    pub plus: &'a [Tensor],
    pub minus: &'a [Tensor],
}

/// `|a − n| / max(|a| + |n|, 1e-5)`. The floor keeps central-difference
/// roundoff (about 1e-10 at ε = 1e-5) from dominating near-zero entries.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-5)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.scalar(out);
    if !v.is_finite() {
        return Err(Error::NonFiniteValue("finite_diff_check probe".into()));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of the scalar computation `f` against
/// central differences `(f(θ+ε) − f(θ−ε)) / 2ε` on every coordinate of
/// every parameter, skipping coordinates for which `exclude` returns true.
pub fn finite_diff_check<F, X>(f: F, params: &[Tensor], epsilon: f64, mut exclude: X) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    X: FnMut(&Probe<'_>) -> bool,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!(
            "finite-difference epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| g.leaf(p.clone().with_grad()))
        .collect();
    let out = f(&mut g, &vars)?;
    if !g.scalar(out).is_finite() {
        return Err(Error::NonFiniteValue("finite_diff_check base point".into()));
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();

    let mut report = GradReport {
        max_abs_rel_error: 0.0,
        worst_coordinate: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        excluded: 0,
    };
    let mut plus = params.to_vec();
    let mut minus = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for ci in 0..p.numel() {
            let x0 = p.data()[ci];
            plus[pi].data_mut()[ci] = x0 + epsilon;
            minus[pi].data_mut()[ci] = x0 - epsilon;
            let probe = Probe {
                param: pi,
                coord: ci,
                base: params,
                plus: &plus,
                minus: &minus,
            };
            if exclude(&probe) {
                report.excluded += 1;
            } else {
                let fp = evaluate(&f, &plus)?;
                let fm = evaluate(&f, &minus)?;
                let numeric = (fp - fm) / (2.0 * epsilon);
                let a = analytic[pi][ci];
                let err = relative_error(a, numeric);
                report.checked += 1;
                if err > report.max_abs_rel_error || report.checked == 1 {
                    report.max_abs_rel_error = err;
                    report.worst_coordinate = (pi, ci);
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
            plus[pi].data_mut()[ci] = x0;
            minus[pi].data_mut()[ci] = x0;
        }
    }
    Ok(report)
}

/// [`finite_diff_check`] with no exclusions.
pub fn finite_diff_check_all<F>(f: F, params: &[Tensor], epsilon: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    finite_diff_check(f, params, epsilon, |_| false)
}
