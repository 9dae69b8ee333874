//! Parameter-update rules. Updates are strictly sequential over the sorted
//! parameter paths; a parameter without a pending gradient is an error.

use std::collections::BTreeMap;

use super::{ParamStore, Real, Result, TensorError};

pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Sgd { lr }
    }

    pub fn step<T: Real>(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        let lr = T::from_f64(self.lr);
        for (path, p) in params.iter_mut() {
            let grad = p
                .grad
                .as_ref()
                .ok_or_else(|| TensorError::UninitializedGradient { path: path.clone() })?;
            for (v, &g) in p.data.iter_mut().zip(grad) {
                *v -= lr * g;
            }
        }
        params.zero_grads();
        Ok(())
    }
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step<T: Real>(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (path, p) in params.iter_mut() {
            let grad = p
                .grad
                .as_ref()
                .ok_or_else(|| TensorError::UninitializedGradient { path: path.clone() })?;
            let m = self
                .m
                .entry(path.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let v = self
                .v
                .entry(path.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            for i in 0..grad.len() {
                let g = grad[i].to_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                let delta = self.lr * mh / (vh.sqrt() + self.eps);
                p.data[i] = T::from_f64(p.data[i].to_f64() - delta);
            }
        }
        params.zero_grads();
        Ok(())
    }
}
