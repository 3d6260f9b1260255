//! Central finite-difference gradient checks in 64-bit.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Max relative error between the tape gradient of scalar `f` at `x` and
/// central differences with step `eps` (rounded to a power of two).
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// [`grad_check`] over several inputs at once; every input is perturbed
/// coordinate by coordinate.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_with(f, inputs, eps, false)
}

pub(crate) fn check_with<F>(f: F, inputs: &[Tensor<f64>], eps: f64, negate: bool) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward_scalar(out)?;

    // a power-of-two step keeps x ± eps exact for dyadic x
    let eps = 2f64.powi(eps.log2().round() as i32);
    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(&tape, *var);
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            // divide by the step actually taken, not the nominal one
            let (hi, lo) = (orig + eps, orig - eps);
            probe[k].data_mut()[i] = hi;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = lo;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (hi - lo);
            let mut a = analytic.data()[i];
            if negate {
                a = -a;
            }
            worst = worst.max(rel_err(a, numeric));
        }
    }
    Ok(worst)
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::NonScalarOutput(t.shape().to_vec()));
    }
    Ok(t.item())
}
