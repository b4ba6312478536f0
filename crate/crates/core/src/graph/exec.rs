use std::cell::RefCell;
use std::collections::BTreeMap;

use super::layers::{BnLayer, ConvLayer, Exec, Path};
use super::ParamStore;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::ops::{self, BatchStats};
use crate::tensor::{Dims, Interp, Var};

type Named<V> = RefCell<Vec<(String, V)>>;

/// Evaluates a model on real tensors, recording a tape where needed.
pub struct TapeExec<'a, T: Scalar> {
    params: &'a ParamStore<T>,
    train_bn: bool,
    grad_params: bool,
    leaves: RefCell<BTreeMap<String, Var<T>>>,
    bn_stats: Named<BatchStats<T>>,
    observed: Option<Named<Var<T>>>,
}

impl<'a, T: Scalar> TapeExec<'a, T> {
    /// Running-statistics batch norm, parameters held constant.
    pub fn inference(params: &'a ParamStore<T>) -> Self {
        Self::new(params, false, false)
    }

    /// Batch-statistics batch norm, gradients for every learnable parameter.
    pub fn training(params: &'a ParamStore<T>) -> Self {
        Self::new(params, true, true)
    }

    /// Running-statistics batch norm with parameter gradients.
    pub fn inference_with_grads(params: &'a ParamStore<T>) -> Self {
        Self::new(params, false, true)
    }

    fn new(params: &'a ParamStore<T>, train_bn: bool, grad_params: bool) -> Self {
        TapeExec {
            params,
            train_bn,
            grad_params,
            leaves: RefCell::new(BTreeMap::new()),
            bn_stats: RefCell::new(Vec::new()),
            observed: None,
        }
    }

    /// Keeps every value passed to [`Exec::observe`].
    pub fn recording(mut self) -> Self {
        self.observed = Some(RefCell::new(Vec::new()));
        self
    }

    /// The variable bound to parameter `name`; repeated lookups share one node.
    pub fn param(&self, name: &str) -> Result<Var<T>> {
        if let Some(v) = self.leaves.borrow().get(name) {
            return Ok(v.clone());
        }
        let shared = self.params.get_shared(name)?.clone();
        let v = if self.grad_params {
            Var::shared_leaf(shared)
        } else {
            Var::shared_constant(shared)
        };
        self.leaves.borrow_mut().insert(name.to_string(), v.clone());
        Ok(v)
    }

    /// Parameter variables touched so far, by name.
    pub fn leaves(&self) -> BTreeMap<String, Var<T>> {
        self.leaves.borrow().clone()
    }

    /// Batch statistics collected by training-mode batch norms, in call order.
    pub fn take_bn_stats(&self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.bn_stats.borrow_mut())
    }

    pub fn observed(&self, name: &str) -> Option<Var<T>> {
        self.observed
            .as_ref()?
            .borrow()
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.clone())
    }
}

impl<T: Scalar> Exec for TapeExec<'_, T> {
    type V = Var<T>;

    fn dims(&self, v: &Var<T>) -> Dims {
        v.dims()
    }

    fn conv(&self, x: &Var<T>, layer: &ConvLayer) -> Result<Var<T>> {
        let w = self.param(&layer.weight_name())?;
        let b = if layer.bias {
            Some(self.param(&layer.bias_name())?)
        } else {
            None
        };
        ops::conv2d(x, &w, b.as_ref(), layer.geom)
    }

    fn bn(&self, x: &Var<T>, layer: &BnLayer) -> Result<Var<T>> {
        let gamma = self.param(&layer.param_name("gamma"))?;
        let beta = self.param(&layer.param_name("beta"))?;
        let mean = self.params.get(&layer.param_name("running_mean"))?;
        let var = self.params.get(&layer.param_name("running_var"))?;
        let (y, stats) = ops::batch_norm(x, &gamma, &beta, mean.data(), var.data(), layer.cfg, self.train_bn)?;
        if let Some(s) = stats {
            self.bn_stats.borrow_mut().push((layer.name.clone(), s));
        }
        Ok(y)
    }

    fn relu(&self, x: &Var<T>) -> Var<T> {
        ops::relu(x)
    }

    fn relu6(&self, x: &Var<T>) -> Var<T> {
        ops::relu6(x)
    }

    fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        ops::add(a, b)
    }

    fn concat(&self, parts: &[&Var<T>]) -> Result<Var<T>> {
        ops::concat_channels(parts)
    }

    fn max_pool(&self, x: &Var<T>, k: usize, stride: usize, pad: usize) -> Result<Var<T>> {
        ops::max_pool(x, k, stride, pad)
    }

    fn grid_pool(&self, x: &Var<T>, grid: usize) -> Result<Var<T>> {
        ops::grid_avg_pool(x, grid)
    }

    fn resize(&self, x: &Var<T>, h: usize, w: usize, mode: Interp) -> Result<Var<T>> {
        ops::resize(x, h, w, mode)
    }

    fn enter(&self, _stage: &str, _path: Path) {}

    fn observe(&self, name: &str, v: &Var<T>) {
        if let Some(obs) = &self.observed {
            obs.borrow_mut().push((name.to_string(), v.clone()));
        }
    }
}
