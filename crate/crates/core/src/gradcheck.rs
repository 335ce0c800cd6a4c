//! Central finite-difference gradient checking with the fourth-order
//! five-point stencil `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`.
//!
//! An element whose stencil crosses a max-pool selection or ELU sign change (see
//! [`Graph::branch_pattern`]) has no meaningful difference quotient; it is
//! skipped and counted instead of compared.
//!
//! Errors are reported as `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`
//! maximised over every element of every input.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Where the worst disagreement was found.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Elements compared.
    pub checked: usize,
    /// Elements compared, per input.
    pub checked_per_input: Vec<usize>,
    /// Elements whose stencil crossed a branch change.
    pub skipped: usize,
}

/// Checks the gradient of the scalar returned by `loss` with respect to each
/// of `inputs`.
pub fn check_scalar<F>(inputs: &[Tensor], step: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = loss(&mut g, &vars)?;
    let pattern = g.branch_pattern();
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |xs: &[Tensor]| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = loss(&mut g, &vars)?;
        Ok((g.value(out).data()[0], g.branch_pattern()))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        input: 0,
        element: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        checked_per_input: vec![0; inputs.len()],
        skipped: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ii, grad) in analytic.iter().enumerate() {
        for e in 0..inputs[ii].len() {
            let x0 = inputs[ii].data()[e];
            let mut f = [0.0; 4];
            let mut smooth = true;
            for (slot, d) in f.iter_mut().zip([2.0, 1.0, -1.0, -2.0]) {
                work[ii].data_mut()[e] = x0 + d * step;
                let (v, p) = eval(&work)?;
                *slot = v;
                smooth &= p == pattern;
            }
            work[ii].data_mut()[e] = x0;
            if !smooth {
                report.skipped += 1;
                continue;
            }
            report.checked += 1;
            report.checked_per_input[ii] += 1;
            let numeric = (-f[0] + 8.0 * f[1] - 8.0 * f[2] + f[3]) / (12.0 * step);
            let a = grad.data()[e];
            let err = relative_error(a, numeric);
            if err > report.max_rel_error {
                report = GradCheckReport {
                    max_rel_error: err,
                    input: ii,
                    element: e,
                    analytic: a,
                    numeric,
                    ..report
                };
            }
        }
    }
    Ok(report)
}

/// Checks an arbitrary-output operation on explicit inputs by projecting its
/// output onto fixed random weights drawn from `seed`.
pub fn check_op<F>(inputs: &[Tensor], seed: u64, step: f64, op: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = op(&mut g, &vars)?;
        g.value(out).shape().to_vec()
    };
    let weights = Tensor::uniform(&probe, -1.0, 1.0, seed ^ 0x9e37_79b9_7f4a_7c15);
    check_scalar(inputs, step, |g, vars| {
        let out = op(g, vars)?;
        let w = g.input(weights.clone());
        let p = g.mul(out, w)?;
        Ok(g.sum(p))
    })
}

/// Seeded uniform inputs in `[-1, 1)` of the given shapes, then [`check_op`].
pub fn grad_check<F>(shapes: &[&[usize]], seed: u64, op: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let inputs: Vec<Tensor> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| Tensor::uniform(s, -1.0, 1.0, seed.wrapping_mul(31).wrapping_add(i as u64)))
        .collect();
    check_op(&inputs, seed, DEFAULT_STEP, op)
}
