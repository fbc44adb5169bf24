use crate::error::{invalid, Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{ParamStore, Tensor};

pub const RMSPROP_DECAY: f64 = 0.99;
pub const RMSPROP_EPS: f64 = 1e-8;

/// RMSprop with one squared-gradient accumulator per parameter:
/// `acc ← ρ·acc + (1 − ρ)·g²`, `θ ← θ − lr·g / (√acc + ε)`.
#[derive(Clone, Debug)]
pub struct RmsProp<T> {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    /// Accumulators in parameter order, named after their parameters.
    pub acc: ParamStore<T>,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(params: &ParamStore<T>, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(invalid(format!("learning rate {lr} must be positive")));
        }
        let mut acc = ParamStore::new();
        for p in params.iter() {
            acc.add(p.name.clone(), Tensor::zeros(p.value.shape()))?;
        }
        Ok(Self {
            lr,
            decay: RMSPROP_DECAY,
            eps: RMSPROP_EPS,
            acc,
        })
    }

    /// Apply accumulated gradients, then clear them. Parameters without a
    /// gradient are treated as having a zero gradient. Nothing is modified
    /// if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if params.len() != self.acc.len() {
            return Err(invalid("optimizer state does not match the parameter set"));
        }
        for p in params.iter() {
            if let Some(g) = &p.grad {
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of {}", p.name)));
                }
            }
        }
        let (rho, lr, eps) = (lit::<T>(self.decay), lit::<T>(self.lr), lit::<T>(self.eps));
        let one_minus = T::one() - rho;
        for slot in 0..params.len() {
            let p = params.get_mut(slot);
            let acc = self.acc.get_mut(slot);
            match p.grad.take() {
                Some(g) => {
                    let a = acc.value.data_mut();
                    let th = p.value.data_mut();
                    for ((a, t), &g) in a.iter_mut().zip(th.iter_mut()).zip(g.data()) {
                        *a = rho * *a + one_minus * g * g;
                        *t -= lr * g / (a.sqrt() + eps);
                    }
                }
                None => {
                    for a in acc.value.data_mut() {
                        *a = rho * *a;
                    }
                }
            }
        }
        Ok(())
    }
}
