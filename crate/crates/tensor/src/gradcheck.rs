//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Magnitude below which gradient differences are compared absolutely rather
/// than relative to the gradient size.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate whose error was largest.
    pub worst: Option<usize>,
    pub checked: usize,
    /// Coordinates whose probes straddled a non-differentiable point (a ReLU
    /// sign change, a max-pool winner change, or a recorded branch flip).
    pub skipped: Vec<usize>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

struct Probe {
    value: f64,
    kinks: Vec<u64>,
}

fn evaluate<F>(f: &F, at: &Tensor, replay: &[Tensor]) -> Result<Probe>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    g.set_track_kinks(true);
    g.set_replay(replay.to_vec());
    let x = g.input(at.clone());
    let out = f(&mut g, x)?;
    let value = g.value(out).item()?;
    if !value.is_finite() {
        return Err(TensorError::NonFinite(format!("f = {value}")));
    }
    Ok(Probe {
        value,
        kinks: g.kink_signature().to_vec(),
    })
}

/// Checks every coordinate of `at`.
pub fn grad_check<F>(f: F, at: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..at.numel()).collect();
    grad_check_coords(f, at, &coords, h, tol)
}

/// Checks the listed coordinates of `at` against central differences.
pub fn grad_check_coords<F>(
    f: F,
    at: &Tensor,
    coords: &[usize],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.input(at.clone());
    let out = f(&mut g, x)?;
    if !g.value(out).is_finite() {
        return Err(TensorError::NonFinite("f at probe point".into()));
    }
    let replay = g.detached_values().to_vec();
    let grads = g.backward(out)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(at.shape()));

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: Vec::new(),
        tol,
    };
    for &c in coords {
        let mut plus = at.clone();
        plus.data_mut()[c] += h;
        let mut minus = at.clone();
        minus.data_mut()[c] -= h;
        let p = evaluate(&f, &plus, &replay)?;
        let m = evaluate(&f, &minus, &replay)?;
        if p.kinks != m.kinks {
            report.skipped.push(c);
            continue;
        }
        let numeric = (p.value - m.value) / (2.0 * h);
        let err = relative_error(analytic.data()[c], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some(c);
        }
    }
    Ok(report)
}

/// Gradient check with respect to stored parameters. `f` builds the loss from
/// the store; `coords` lists `(parameter, flat index)` probes. The report's
/// coordinate indices refer to positions in `coords`.
pub fn grad_check_params<F>(
    f: F,
    store: &ParamStore,
    coords: &[(ParamId, usize)],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    if !g.value(out).is_finite() {
        return Err(TensorError::NonFinite("f at probe point".into()));
    }
    let replay = g.detached_values().to_vec();
    let grads = g.backward(out)?.param_grads(&g, store);

    let eval = |s: &ParamStore| -> Result<Probe> {
        let mut g = Graph::new();
        g.set_track_kinks(true);
        g.set_replay(replay.clone());
        let out = f(&mut g, s)?;
        let value = g.value(out).item()?;
        if !value.is_finite() {
            return Err(TensorError::NonFinite(format!("f = {value}")));
        }
        Ok(Probe {
            value,
            kinks: g.kink_signature().to_vec(),
        })
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: Vec::new(),
        tol,
    };
    let mut work = store.clone();
    for (n, &(id, c)) in coords.iter().enumerate() {
        let base = store.value(id).data()[c];
        work.value_mut(id).data_mut()[c] = base + h;
        let p = eval(&work)?;
        work.value_mut(id).data_mut()[c] = base - h;
        let m = eval(&work)?;
        work.value_mut(id).data_mut()[c] = base;
        if p.kinks != m.kinks {
            report.skipped.push(n);
            continue;
        }
        let numeric = (p.value - m.value) / (2.0 * h);
        let a = grads[id.index()].as_ref().map_or(0.0, |t| t.data()[c]);
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some(n);
        }
    }
    Ok(report)
}
