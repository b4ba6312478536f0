use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Learning-rate and weight-decay multipliers for parameters under a name prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub prefix: String,
    pub lr_scale: f64,
    pub wd_scale: f64,
}

impl ParamGroup {
    /// First matching group wins; unmatched parameters use scale 1.
    pub fn scales(groups: &[ParamGroup], name: &str) -> (f64, f64) {
        groups
            .iter()
            .find(|g| name.starts_with(&g.prefix))
            .map_or((1.0, 1.0), |g| (g.lr_scale, g.wd_scale))
    }
}

/// Adam with L2 weight decay added to the gradient.
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.v.get(name)
    }

    /// One update of every parameter that has a gradient.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
        weight_decay: f64,
        groups: &[ParamGroup],
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.dims() != g.dims() {
                return Err(Error::DimsMismatch {
                    name: name.clone(),
                    expected: p.dims(),
                    found: g.dims(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (
            T::from_f64_lossy(self.beta1),
            T::from_f64_lossy(self.beta2),
            T::from_f64_lossy(self.eps),
        );
        for (name, g) in grads {
            let (lr_s, wd_s) = ParamGroup::scales(groups, name);
            let lr = T::from_f64_lossy(lr * lr_s);
            let wd = T::from_f64_lossy(weight_decay * wd_s);
            let (c1, c2) = (T::from_f64_lossy(c1), T::from_f64_lossy(c2));
            let p = params.get_mut(name)?;
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.dims()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.dims()));
            let iter = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((pi, &gi), (mi, vi)) in iter {
                let gi = gi + wd * *pi;
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi = *pi - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
