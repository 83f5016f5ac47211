//! Central finite-difference verification of analytic gradients.
//!
//! A coordinate that disagrees at step `eps` is probed again at
//! `eps / 10` and passes if either difference agrees. This separates a kink
//! of a piecewise-linear activation lying inside `[x - eps, x + eps]` from a
//! wrong gradient, which disagrees at both steps.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ModelParams, ParamId};
use crate::tensor::Tensor;

/// Gradient magnitudes below this are compared on an absolute scale.
pub const DEFAULT_ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    /// Coordinate label: flat index, or `param[index]` for parameter checks.
    pub coordinate: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Coordinates that only agreed at the refined step.
    pub refined: usize,
    /// Coordinates whose relative error exceeded `tolerance` at both steps.
    pub flagged: Vec<Mismatch>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }

    fn new(tolerance: f64) -> Self {
        GradcheckReport {
            checked: 0,
            max_rel_error: 0.0,
            tolerance,
            refined: 0,
            flagged: Vec::new(),
        }
    }

    /// `numeric(eps)` is the central difference at step `eps`.
    fn record(
        &mut self,
        coordinate: impl FnOnce() -> String,
        analytic: f64,
        eps: f64,
        mut numeric: impl FnMut(f64) -> Result<f64>,
    ) -> Result<()> {
        let coarse = numeric(eps)?;
        let mut rel = relative_error(analytic, coarse, DEFAULT_ABS_FLOOR);
        let mut best = coarse;
        if rel > self.tolerance || rel.is_nan() {
            let fine = numeric(eps / 10.0)?;
            let fine_rel = relative_error(analytic, fine, DEFAULT_ABS_FLOOR);
            if fine_rel < rel || rel.is_nan() {
                (rel, best) = (fine_rel, fine);
            }
            if rel <= self.tolerance {
                self.refined += 1;
            }
        }
        self.checked += 1;
        self.max_rel_error = self.max_rel_error.max(rel);
        if rel > self.tolerance || !rel.is_finite() {
            self.flagged.push(Mismatch {
                coordinate: coordinate(),
                analytic,
                numeric: best,
                rel_error: rel,
            });
        }
        Ok(())
    }

    /// Merges another report into this one.
    pub fn absorb(&mut self, other: GradcheckReport) {
        self.checked += other.checked;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.refined += other.refined;
        self.flagged.extend(other.flagged);
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-5..=1e-3).contains(&eps) {
        return Err(TensorError::config("gradcheck", format!("eps {eps} outside [1e-5, 1e-3]")));
    }
    Ok(())
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(TensorError::Contract(format!(
            "gradcheck function must be scalar-valued, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

/// Compares the gradient of scalar `f` at `point` with central differences
/// on every coordinate.
pub fn gradcheck<F>(f: F, point: &Tensor, eps: f64, tolerance: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..point.numel()).collect();
    gradcheck_at(f, point, &all, eps, tolerance)
}

/// As [`gradcheck`], restricted to the listed flat coordinates.
pub fn gradcheck_at<F>(
    f: F,
    point: &Tensor,
    coords: &[usize],
    eps: f64,
    tolerance: f64,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&mut g, x)?;
    scalar_of(&g, y)?;
    g.backward(y)?;
    let analytic = g
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let eval = |p: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p.clone());
        let y = f(&mut g, x)?;
        scalar_of(&g, y)
    };
    let mut report = GradcheckReport::new(tolerance);
    let mut probe = point.clone();
    for &i in coords {
        let orig = point.data()[i];
        let central = |h: f64| -> Result<f64> {
            probe.data_mut()[i] = orig + h;
            let fp = eval(&probe);
            probe.data_mut()[i] = orig - h;
            let fm = eval(&probe);
            probe.data_mut()[i] = orig;
            Ok((fp? - fm?) / (2.0 * h))
        };
        report.record(|| i.to_string(), analytic[i], eps, central)?;
    }
    Ok(report)
}

/// Finite-difference check of parameter gradients.
///
/// `f` builds a scalar loss from bound parameters; `coords` lists the
/// `(parameter, flat index)` pairs to probe. Values in `params` are restored
/// before returning.
pub fn gradcheck_params<F>(
    params: &mut ModelParams,
    f: F,
    coords: &[(ParamId, usize)],
    eps: f64,
    tolerance: f64,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    check_eps(eps)?;
    let mut g = Graph::new();
    let bound = g.bind(params);
    let y = f(&mut g, &bound)?;
    scalar_of(&g, y)?;
    g.backward(y)?;
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(id, i)| g.grad(bound[id]).map_or(0.0, |gr| gr[i]))
        .collect();
    drop(g);

    let eval = |params: &ModelParams| -> Result<f64> {
        let mut g = Graph::new();
        let bound = g.bind_frozen(params);
        let y = f(&mut g, &bound)?;
        scalar_of(&g, y)
    };
    let mut report = GradcheckReport::new(tolerance);
    for (&(id, i), &a) in coords.iter().zip(&analytic) {
        let orig = params.get(id).value.data()[i];
        let name = params.get(id).name.clone();
        let central = |h: f64| -> Result<f64> {
            params.get_mut(id).value.data_mut()[i] = orig + h;
            let fp = eval(params);
            params.get_mut(id).value.data_mut()[i] = orig - h;
            let fm = eval(params);
            params.get_mut(id).value.data_mut()[i] = orig;
            Ok((fp? - fm?) / (2.0 * h))
        };
        report.record(|| format!("{name}[{i}]"), a, eps, central)?;
    }
    Ok(report)
}
