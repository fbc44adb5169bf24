//! Central-difference verification of tape gradients.

use crate::error::{invalid, Error, Result};
use crate::scalar::{lit, Scalar};

use super::{ParamStore, Tape, Var};

/// Compare tape gradients of `f` against central differences.
///
/// `f` builds a scalar from the bound parameters and must be deterministic.
/// Returns `max_i |analytic_i − numeric_i| / max(1e-8, |numeric_i|)`.
/// Meant for 64-bit runs; 32-bit round-off swamps the differences.
pub fn grad_check<T, F>(f: F, params: &ParamStore<T>, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(invalid(format!(
            "finite-difference step {eps} outside [1e-6, 1e-3]"
        )));
    }
    let eval = |store: &ParamStore<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let root = f(&mut tape, &bound)?;
        Ok(tape.value(root).item().to_f64c())
    };

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let root = f(&mut tape, &bound)?;
    if !tape.value(root).item().is_finite() {
        return Err(Error::NonFinite("objective".into()));
    }
    let grads = tape.backward(root)?;

    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (slot, &var) in bound.iter().enumerate() {
        let p = params.get(slot);
        if !p.value.all_finite() {
            return Err(Error::NonFinite(p.name.clone()));
        }
        let analytic = grads.get_or_zeros(&tape, var);
        if !analytic.all_finite() {
            return Err(Error::NonFinite(p.name.clone()));
        }
        for i in 0..p.value.len() {
            let orig = p.value.data()[i];
            let step = lit::<T>(eps);
            probe.get_mut(slot).value.data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(slot).value.data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(slot).value.data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(p.name.clone()));
            }
            // Use the realised step so rounding of orig ± eps does not bias the quotient.
            let h = (orig + step).to_f64c() - (orig - step).to_f64c();
            let numeric = (up - down) / h;
            let a = analytic.data()[i].to_f64c();
            let rel = (a - numeric).abs() / numeric.abs().max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
