use serde::Serialize;

use super::graph::{Graph, Var};
use super::tensor::{Real, Tensor};
use crate::error::Result;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, Serialize)]
pub struct FdReport {
    pub passed: bool,
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: Option<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub non_finite: bool,
    pub tolerance: f64,
}

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Checks `∂f/∂x` at `point` coordinate by coordinate.
///
/// `build` records `f` on a fresh graph given the leaf standing for `x` and
/// returns the scalar output. The graph is built once and replayed for every
/// perturbation, so `build` must not branch on leaf values.
pub fn finite_diff_check<T, F>(build: F, point: &Tensor, step: f64, tol: f64) -> Result<FdReport>
where
    T: Real,
    F: FnOnce(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::<T>::new();
    let x = g.leaf(point, true);
    let root = build(&mut g, x)?;
    let failed = |analytic: Vec<f64>, numeric: Vec<f64>| FdReport {
        passed: false,
        max_rel_error: f64::INFINITY,
        worst_index: None,
        analytic,
        numeric,
        non_finite: true,
        tolerance: tol,
    };
    if !g.scalar(root).is_finite() {
        return Ok(failed(Vec::new(), Vec::new()));
    }
    let grads = g.backward(root)?;
    let analytic: Vec<f64> = match grads.get(x) {
        Some(gx) => gx.iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; point.numel()],
    };

    let base: Vec<T> = g.value(x).to_vec();
    let mut buf = base.clone();
    let mut numeric = Vec::with_capacity(base.len());
    let h = T::from_f64(step);
    for i in 0..base.len() {
        buf[i] = base[i] + h;
        g.set_leaf(x, &buf)?;
        let plus = g.replay().map(|_| g.scalar(root));
        buf[i] = base[i] - h;
        g.set_leaf(x, &buf)?;
        let minus = g.replay().map(|_| g.scalar(root));
        buf[i] = base[i];
        match (plus, minus) {
            (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => {
                // Divide by the realized step, which differs from `step` after rounding.
                let span = (base[i] + h).as_f64() - (base[i] - h).as_f64();
                numeric.push((p.as_f64() - m.as_f64()) / span);
            }
            _ => {
                g.set_leaf(x, &base)?;
                g.replay()?;
                return Ok(failed(analytic, numeric));
            }
        }
    }
    g.set_leaf(x, &base)?;
    g.replay()?;

    let mut max_rel_error = 0.0f64;
    let mut worst_index = None;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = relative_error(a, n);
        if worst_index.is_none() || e > max_rel_error {
            max_rel_error = e;
            worst_index = Some(i);
        }
    }
    Ok(FdReport {
        passed: max_rel_error <= tol,
        max_rel_error,
        worst_index,
        analytic,
        numeric,
        non_finite: false,
        tolerance: tol,
    })
}
