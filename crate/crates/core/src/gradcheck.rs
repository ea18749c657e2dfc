//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Compares the analytic gradient of scalar `f` at `x` against central
/// differences with step `eps`, returning
/// `max_i |analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, 1e-8)`.
///
/// `f` receives a fresh tape and the leaf holding `x` and must return a
/// one-element node.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::Contract(alloc::format!(
            "finite-difference step {eps} outside [1e-5, 1e-2]"
        )));
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(&x.clone().with_grad());
    let out = f(&mut tape, leaf)?;
    tape.backward(out)?;
    let analytic: alloc::vec::Vec<T> = match tape.grad(leaf) {
        Some(g) => g.to_vec(),
        None => alloc::vec![T::ZERO; x.numel()],
    };

    let eval = |probe: &Tensor<T>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe);
        let o = f(&mut t, v)?;
        Ok(t.value(o)[0].to_f64())
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    probe.requires_grad = false;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        // Divide by the step actually representable in T.
        let hi = T::from_f64(orig.to_f64() + eps);
        let lo = T::from_f64(orig.to_f64() - eps);
        probe.data_mut()[i] = hi;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = lo;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (hi.to_f64() - lo.to_f64());
        let a = analytic[i].to_f64();
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
