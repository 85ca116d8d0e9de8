//! Central finite-difference verification of tape gradients.

use crate::error::{CoraError, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::rng::Rng;
use crate::numerics::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Below this magnitude the error is measured absolutely.
    pub floor: f64,
    /// Check at most this many randomly chosen entries per tensor.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (tensor index, flat entry) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Error between an analytic and a numeric derivative: relative when either is
/// at least `floor` in magnitude, absolute otherwise.
pub fn entry_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale >= floor {
        diff / scale
    } else {
        diff
    }
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.constant(t)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(CoraError::dim("grad_check needs a scalar-valued function"));
    }
    let v = g.scalar(out);
    if !v.is_finite() {
        return Err(CoraError::NonFinite("grad_check objective".into()));
    }
    Ok(v)
}

/// Compares the tape gradient of scalar `f` with respect to every tensor in
/// `params` against five-point central differences and returns the largest error.
pub fn grad_check<F>(f: F, params: &mut [Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = true;
            g.leaf(&t)
        })
        .collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(CoraError::dim("grad_check needs a scalar-valued function"));
    }
    let grads = g.backward(out);
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params.iter())
        .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    if analytic.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CoraError::NonFinite("grad_check analytic gradient".into()));
    }

    let mut rng = Rng::new(opts.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for ti in 0..params.len() {
        let mut entries: Vec<usize> = (0..params[ti].numel()).collect();
        if let Some(cap) = opts.max_entries {
            if entries.len() > cap {
                rng.shuffle(&mut entries);
                entries.truncate(cap);
                entries.sort_unstable();
            }
        }
        for j in entries {
            let orig = params[ti].data()[j];
            let mut at = |offset: f64| {
                params[ti].data_mut()[j] = orig + offset;
                let v = eval(&f, params);
                params[ti].data_mut()[j] = orig;
                v
            };
            let h = opts.step;
            // five-point central stencil, O(h^4)
            let numeric = (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h);
            let err = entry_error(analytic[ti][j], numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((ti, j));
                }
            }
        }
    }
    Ok(report)
}
