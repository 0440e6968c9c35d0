//! Central finite-difference check of [`Graph::backward`].

use serde::Serialize;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Worst disagreement between analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Flat index across all parameters, in argument order.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares the backward pass of `f` against central differences with step `h`.
///
/// `f` receives a fresh graph and one param leaf per tensor in `params` and
/// must return a scalar. Relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_where(f, params, h, |_, _| true)
}

/// [`grad_check`] restricted to the entries `(param, element)` for which
/// `include` holds; `checked` counts only those.
pub fn grad_check_where<F, I>(f: F, params: &[Tensor], h: f64, include: I) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    I: Fn(usize, usize) -> bool,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::InvalidConfig(format!("finite-difference step {h}")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return Err(Error::NonScalarLoss(g.shape(out).to_vec()));
        }
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<f64> = vars
        .iter()
        .zip(params)
        .flat_map(|(&v, p)| match g.grad(v) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; p.numel()],
        })
        .collect();

    let mut report = GradReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: 0.0,
        checked: 0,
    };
    let mut work = params.to_vec();
    let mut flat = 0;
    for p in 0..work.len() {
        for j in 0..work[p].numel() {
            if !include(p, j) {
                flat += 1;
                continue;
            }
            let orig = work[p].data()[j];
            work[p].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[p].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[p].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[flat];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_rel_error || report.checked == 0 {
                report.max_rel_error = rel;
                report.worst_index = flat;
                report.analytic = a;
                report.numeric = numeric;
            }
            report.checked += 1;
            flat += 1;
        }
    }
    Ok(report)
}
