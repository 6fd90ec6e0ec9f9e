//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::{ParamId, ParamStore};
use crate::real::Real;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    params: Vec<ParamId>,
    first: Vec<Matrix<T>>,
    second: Vec<Matrix<T>>,
    step: u32,
}

impl<T: Real> AdamW<T> {
    /// Moments for every tunable parameter of `store`.
    pub fn new(store: &ParamStore<T>) -> Self {
        let params = store.tunable_ids();
        let zeros = |id: &ParamId| {
            let (r, c) = store.value(*id).shape();
            Matrix::zeros(r, c)
        };
        Self {
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
            params,
            step: 0,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// One update. `grads[i]` belongs to `self.params()[i]`; frozen
    /// parameters are never touched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Matrix<T>>], lr: f64, weight_decay: f64) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Optimizer(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            let id = self.params[i];
            let Some(g) = g else {
                return Err(Error::Optimizer(format!("missing gradient for `{}`", store.entry(id).name)));
            };
            if g.shape() != store.value(id).shape() {
                return Err(Error::Optimizer(format!("gradient shape mismatch for `{}`", store.entry(id).name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
        let c1 = T::lit(1.0 - BETA1.powi(t));
        let c2 = T::lit(1.0 - BETA2.powi(t));
        let lr_t = T::lit(lr);
        let decay = T::lit(1.0 - lr * weight_decay);
        let eps = T::lit(EPSILON);
        for (i, g) in grads.iter().enumerate() {
            let g = g.as_ref().expect("checked above");
            let theta = store.value_mut(self.params[i]).as_mut_slice();
            let m = self.first[i].as_mut_slice();
            let v = self.second[i].as_mut_slice();
            for j in 0..theta.len() {
                let gj = g.as_slice()[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                theta[j] = theta[j] * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Component;

    fn scalar_store(theta: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.insert("theta", Matrix::filled(1, 1, theta), Component::Head);
        let frozen = store.insert("frozen", Matrix::filled(1, 1, 3.0), Component::Block(1));
        store.set_frozen(id, false);
        assert!(store.is_frozen(frozen));
        (store, id)
    }

    #[test]
    fn first_step_by_hand() {
        let (mut store, id) = scalar_store(1.0);
        let mut opt = AdamW::new(&store);
        opt.step(&mut store, &[Some(Matrix::filled(1, 1, 1.0))], 0.1, 0.0).unwrap();
        assert!((store.value(id).get(0, 0) - 0.9).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut store, id) = scalar_store(1.5);
        let mut opt = AdamW::new(&store);
        opt.step(&mut store, &[Some(Matrix::zeros(1, 1))], 0.1, 0.0).unwrap();
        assert_eq!(store.value(id).get(0, 0), 1.5);
        assert_eq!(store.value(store.find("frozen").unwrap()).get(0, 0), 3.0);
    }

    #[test]
    fn pure_decay() {
        let (mut store, id) = scalar_store(2.0);
        let mut opt = AdamW::new(&store);
        opt.step(&mut store, &[Some(Matrix::zeros(1, 1))], 0.1, 0.05).unwrap();
        assert!((store.value(id).get(0, 0) - 2.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let (mut store, _) = scalar_store(1.0);
        let mut opt = AdamW::new(&store);
        assert!(matches!(opt.step(&mut store, &[None], 0.1, 0.0), Err(Error::Optimizer(_))));
    }
}
