//! Central-difference verification of tape gradients.

use crate::error::{bail, Result};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Max over all input elements of `|a - n| / max(|a|, |n|, 1e-8)`.
    pub max_rel_error: f64,
    /// The same maximum restricted to each input.
    pub per_input: Vec<f64>,
    /// `(input, element)` where the maximum occurred.
    pub worst: (usize, usize),
}

/// Relative discrepancy between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Smallest step, as a fraction of the requested one, tried when a relu
/// changes branch inside the stencil.
const MIN_STEP_FRACTION: f64 = 1e-3;

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(f64, Option<u64>)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::no_grad().track_pieces();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        bail!(Contract, "grad_check needs a scalar-valued function, got shape {:?}", v.shape());
    }
    let y = v.item();
    if !y.is_finite() {
        bail!(Numeric, "function value {} is not finite", y);
    }
    Ok((y, tape.piece_signature()))
}

/// Compares reverse-mode gradients of the scalar function `f` against
/// central differences with step `eps`, perturbing every element of every
/// input.
///
/// When either side of the stencil lands on a different relu branch than the
/// unperturbed point, the step is divided by ten until both sides stay on the
/// same piece, so the difference never straddles a kink.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if inputs.iter().any(|t| !t.all_finite()) {
        bail!(Numeric, "grad_check inputs must be finite");
    }
    let mut tape = Tape::new().track_pieces();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        bail!(Contract, "grad_check needs a scalar-valued function");
    }
    let center = tape.piece_signature();
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(tape);

    let mut work = inputs.to_vec();
    let mut report = GradCheck { max_rel_error: 0.0, per_input: vec![0.0; inputs.len()], worst: (0, 0) };
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            let mut h = eps;
            let numeric = loop {
                work[i].data_mut()[j] = x0 + h;
                let (fp, sp) = eval(&f, &work)?;
                work[i].data_mut()[j] = x0 - h;
                let (fm, sm) = eval(&f, &work)?;
                let same_piece = sp == center && sm == center;
                if same_piece || h <= eps * MIN_STEP_FRACTION {
                    break (fp - fm) / (2.0 * h);
                }
                h /= 10.0;
            };
            work[i].data_mut()[j] = x0;
            let err = relative_error(analytic[i].data()[j], numeric);
            if err > report.per_input[i] {
                report.per_input[i] = err;
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}
