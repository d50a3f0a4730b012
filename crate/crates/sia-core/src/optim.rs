//! Adam optimizer with bias correction.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::ParamStore;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moment estimates, one tensor per parameter in store
/// order, plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn for_store(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store
            .iter()
            .map(|(_, value)| Tensor::zeros(value.shape()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// Drop accumulated moments and restart the bias-correction schedule.
    pub fn reset(&mut self) {
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            t.fill(T::zero());
        }
        self.step = 0;
    }

    /// One update over every parameter using the gradients currently held in
    /// `store`. Gradients are left untouched; call `zero_grads` afterwards.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: T) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Invalid(alloc::format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let b1 = T::from_f64(BETA1);
        let b2 = T::from_f64(BETA2);
        let eps = T::from_f64(EPS);
        let corr1 = T::one() - T::from_f64(BETA1.powi(self.step as i32));
        let corr2 = T::one() - T::from_f64(BETA2.powi(self.step as i32));
        for i in 0..store.len() {
            let grad = store.grad(i).clone();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for ((g, m), v) in grad.data().iter().zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (T::one() - b1) * *g;
                *v = b2 * *v + (T::one() - b2) * *g * *g;
            }
            let value = store.value_mut(i);
            for ((p, m), v) in value.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let m_hat = *m / corr1;
                let v_hat = *v / corr2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
