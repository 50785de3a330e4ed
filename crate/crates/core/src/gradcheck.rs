//! Central finite-difference gradient checking in f64.
//!
//! The function under test may return any shape. It is reduced to a scalar
//! by a fixed random projection `L = Σ r ⊙ f(x)`; the analytic gradient of
//! `L` comes from the tape and the numeric one from
//! `Σ r ⊙ (f(x+h) − f(x−h)) / 2h`, taking the output difference per element
//! before projecting so that large outputs do not swamp the difference.
//!
//! An element is skipped, and counted, when `x−h`, `x` and `x+h` do not
//! take the same branch through every ReLU and max-pool: the function is
//! not differentiable across the stencil there.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{SeededRng, Stream};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub seed: u64,
    pub step: f64,
    /// Inputs whose gradients are checked; `None` checks all of them.
    pub inputs: Option<Vec<usize>>,
    /// Check only this many randomly drawn elements across the checked
    /// inputs; skipped elements are replaced by further draws.
    pub sample: Option<usize>,
    /// Skip elements whose numeric derivative f64 cannot resolve to this
    /// relative error: `|numeric| < ε·Σ|r ⊙ f(x)| / (h·tol)`.
    pub resolve_to: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            step: DEFAULT_STEP,
            inputs: None,
            sample: None,
            resolve_to: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Worst {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic − numeric| / max(|numeric|, 1e-8)
    pub max_rel_error: f64,
    pub worst: Option<Worst>,
    pub checked: usize,
    /// Elements whose stencil crosses a ReLU or max-pool switch.
    pub skipped_kinks: usize,
    /// Elements below the resolution bound of [`GradCheckOptions::resolve_to`].
    pub skipped_unresolved: usize,
}

pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], seed: u64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    grad_check_with(
        f,
        inputs,
        &GradCheckOptions {
            seed,
            ..Default::default()
        },
    )
}

/// Output values and the branch fingerprint of one evaluation.
fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(Tensor<f64>, Vec<u64>)>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::inference_with_branches();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&vars)?;
    let v = out.value();
    Ok(((*v).clone(), tape.branches()))
}

pub fn grad_check_with<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("grad_check needs at least one input".into()));
    }
    let mut rng = SeededRng::new(opts.seed, Stream::GradCheck);
    let checked: Vec<usize> = opts
        .inputs
        .clone()
        .unwrap_or_else(|| (0..inputs.len()).collect());

    // Analytic gradients.
    let (projection, analytic) = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if checked.contains(&i) {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let out = f(&vars)?;
        let shape = out.shape();
        let r: Vec<f64> = (0..out.value().numel())
            .map(|_| {
                let mag = rng.uniform(0.5, 1.5);
                if rng.bernoulli(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        let r = Tensor::new(&shape, r)?;
        let loss = out.mul(tape.constant(r.clone()))?.sum();
        let grads = tape.backward(loss)?;
        let analytic: Vec<Tensor<f64>> = checked.iter().map(|&i| grads.get_or_zeros(vars[i])).collect();
        (r, analytic)
    };

    let (f0, base_branches) = eval(&f, inputs)?;
    let min_numeric = opts.resolve_to.map(|tol| {
        let magnitude: f64 = f0.data().iter().zip(projection.data()).map(|(v, r)| (v * r).abs()).sum();
        magnitude * f64::EPSILON / (opts.step * tol)
    });

    let mut elements: Vec<(usize, usize)> = checked
        .iter()
        .enumerate()
        .flat_map(|(slot, &i)| (0..inputs[i].numel()).map(move |e| (slot, e)))
        .collect();
    if opts.sample.is_some() {
        rng.shuffle(&mut elements);
    }
    let wanted = opts.sample.unwrap_or(usize::MAX);

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
        skipped_unresolved: 0,
    };
    for (slot, e) in elements {
        if report.checked == wanted {
            break;
        }
        let i = checked[slot];
        let x0 = inputs[i].data()[e];
        let (xp, xm) = (x0 + opts.step, x0 - opts.step);
        work[i].data_mut()[e] = xp;
        let (fp, bp) = eval(&f, &work)?;
        work[i].data_mut()[e] = xm;
        let (fm, bm) = eval(&f, &work)?;
        work[i].data_mut()[e] = x0;
        if bp != base_branches || bm != base_branches {
            report.skipped_kinks += 1;
            continue;
        }

        let diff: f64 = fp
            .data()
            .iter()
            .zip(fm.data())
            .zip(projection.data())
            .map(|((p, m), r)| r * (p - m))
            .sum();
        let numeric = diff / (xp - xm);
        if min_numeric.is_some_and(|m| numeric.abs() < m) {
            report.skipped_unresolved += 1;
            continue;
        }
        let a = analytic[slot].data()[e];
        let rel = (a - numeric).abs() / numeric.abs().max(REL_FLOOR);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some(Worst {
                input: i,
                element: e,
                analytic: a,
                numeric,
            });
        }
    }
    Ok(report)
}
