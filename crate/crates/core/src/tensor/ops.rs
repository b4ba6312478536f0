//! Differentiable operations on [`Var`]s.

use super::autograd::GradFn;
use super::conv::{self, ConvGeom};
use super::loss::{self, LabelMap};
use super::norm::{self, BnConfig, BnTrainCache};
use super::pool;
use super::resize::{self, Interp};
use super::{Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

struct Conv<T: Scalar> {
    x: Var<T>,
    w: Var<T>,
    b: Option<Var<T>>,
    geom: ConvGeom,
}

impl<T: Scalar> GradFn<T> for Conv<T> {
    fn parents(&self) -> Vec<Var<T>> {
        let mut p = vec![self.x.clone(), self.w.clone()];
        p.extend(self.b.clone());
        p
    }

    fn backward(&self, gy: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let need_b = self.b.as_ref().is_some_and(Var::requires_grad);
        let g = conv::conv2d_backward(
            self.x.value(),
            self.w.value(),
            gy,
            self.geom,
            self.x.requires_grad(),
            self.w.requires_grad(),
            need_b,
        )?;
        let mut out = vec![g.dx, g.dkernel];
        if let Some(b) = &self.b {
            out.push(g.dbias.map(|v| Tensor::vector(&v)).filter(|_| b.requires_grad()));
        }
        Ok(out)
    }
}

/// Convolution; `kernel` is `[Cout, Cin/groups, kh, kw]`, `bias` a length-`Cout` vector.
pub fn conv2d<T: Scalar>(x: &Var<T>, kernel: &Var<T>, bias: Option<&Var<T>>, geom: ConvGeom) -> Result<Var<T>> {
    let y = conv::conv2d(x.value(), kernel.value(), bias.map(|b| b.value().data()), geom)?;
    Ok(Var::from_op(
        y,
        Conv {
            x: x.clone(),
            w: kernel.clone(),
            b: bias.cloned(),
            geom,
        },
    ))
}

enum BnMode<T> {
    Running { mean: Vec<T>, var: Vec<T>, eps: f64 },
    Batch(BnTrainCache<T>),
}

struct BatchNorm<T: Scalar> {
    x: Var<T>,
    gamma: Var<T>,
    beta: Var<T>,
    mode: BnMode<T>,
}

impl<T: Scalar> GradFn<T> for BatchNorm<T> {
    fn parents(&self) -> Vec<Var<T>> {
        vec![self.x.clone(), self.gamma.clone(), self.beta.clone()]
    }

    fn backward(&self, gy: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let gamma = self.gamma.value().data();
        let (dx, dg, db) = match &self.mode {
            BnMode::Running { mean, var, eps } => {
                norm::bn_inference_backward(gy, self.x.value(), gamma, mean, var, *eps)
            }
            BnMode::Batch(cache) => norm::bn_train_backward(gy, gamma, cache),
        };
        Ok(vec![Some(dx), Some(Tensor::vector(&dg)), Some(Tensor::vector(&db))])
    }
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Population variance.
    pub var: Vec<T>,
    pub count: usize,
}

/// Batch normalization. In training mode the returned stats are what the
/// caller folds into its running buffers.
pub fn batch_norm<T: Scalar>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    running_mean: &[T],
    running_var: &[T],
    cfg: BnConfig,
    training: bool,
) -> Result<(Var<T>, Option<BatchStats<T>>)> {
    if training {
        let (y, cache) = norm::bn_train_forward(x.value(), gamma.value().data(), beta.value().data(), cfg.eps)?;
        let d = x.dims();
        let stats = BatchStats {
            mean: cache.batch_mean.clone(),
            var: cache.batch_var.clone(),
            count: d.n * d.plane(),
        };
        let v = Var::from_op(
            y,
            BatchNorm {
                x: x.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                mode: BnMode::Batch(cache),
            },
        );
        Ok((v, Some(stats)))
    } else {
        let y = norm::bn_inference(
            x.value(),
            gamma.value().data(),
            beta.value().data(),
            running_mean,
            running_var,
            cfg.eps,
        )?;
        let v = Var::from_op(
            y,
            BatchNorm {
                x: x.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                mode: BnMode::Running {
                    mean: running_mean.to_vec(),
                    var: running_var.to_vec(),
                    eps: cfg.eps,
                },
            },
        );
        Ok((v, None))
    }
}

struct Clamp<T: Scalar> {
    x: Var<T>,
    hi: Option<T>,
}

impl<T: Scalar> GradFn<T> for Clamp<T> {
    fn parents(&self) -> Vec<Var<T>> {
        vec![self.x.clone()]
    }

    fn backward(&self, gy: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let hi = self.hi.unwrap_or(T::infinity());
        let dx = gy.zip_map(self.x.value(), |g, x| if x > T::zero() && x < hi { g } else { T::zero() })?;
        Ok(vec![Some(dx)])
    }
}

pub fn relu<T: Scalar>(x: &Var<T>) -> Var<T> {
    let y = x.value().map(|v| v.max(T::zero()));
    Var::from_op(y, Clamp { x: x.clone(), hi: None })
}

/// `min(max(x, 0), 6)`, the activation of inverted-residual blocks.
pub fn relu6<T: Scalar>(x: &Var<T>) -> Var<T> {
    let six = T::from_f64_lossy(6.0);
    let y = x.value().map(|v| v.max(T::zero()).min(six));
    Var::from_op(y, Clamp { x: x.clone(), hi: Some(six) })
}

struct Add<T: Scalar> {
    a: Var<T>,
    b: Var<T>,
}

impl<T: Scalar> GradFn<T> for Add<T> {
    fn parents(&self) -> Vec<Var<T>> {
        vec![self.a.clone(), self.b.clone()]
    }

    fn backward(&self, gy: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(gy.clone()), Some(gy.clone())])
    }
}

pub fn add<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let y = a
        .value()
        .zip_map(b.value(), |x, y| x + y)
        .map_err(|_| Error::shape("add", format!("{:?} vs {:?}", a.dims(), b.dims())))?;
    Ok(Var::from_op(y, Add { a: a.clone(), b: b.clone() }))
}

struct Concat<T: Scalar> {
    parts: Vec<Var<T>>,
}

impl<T: Scalar> GradFn<T> for Concat<T> {
    fn parents(&self) -> Vec<Var<T>> {
        self.parts.clone()
    }

    fn backward(&self, gy: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let mut start = 0;
        self.parts
            .iter()
            .map(|p| {
                let c = p.dims().c;
                let g = gy.slice_channels(start, c)?;
                start += c;
                Ok(Some(g))
            })
            .collect()
    }
}

pub fn concat_channels<T: Scalar>(parts: &[&Var<T>]) -> Result<Var<T>> {
    let values: Vec<&Tensor<T>> = parts.iter().map(|p| p.value()).collect();
    let y = Tensor::concat_channels(&values)?;
    Ok(Var::from_op(
        y,
        Concat {
            parts: parts.iter().map(|&p| p.clone()).collect(),
        },
    ))
}

struct MaxPool<T: Scalar> {
    x: Var<T>,
    argmax: Vec<u32>,
}

impl<T: Scalar> GradFn<T> for MaxPool<T> {
    fn parents(&self) -> Vec<Var<T>> {
        vec![self.x.clone()]
    }

    fn backward(&self, gy: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(pool::max_pool_backward(gy, &self.argmax, self.x.dims()))])
    }
}

pub fn max_pool<T: Scalar>(x: &Var<T>, k: usize, stride: usize, pad: usize) -> Result<Var<T>> {
    let (y, argmax) = pool::max_pool(x.value(), k, stride, pad)?;
    Ok(Var::from_op(y, MaxPool { x: x.clone(), argmax }))
}

struct GridPool<T: Scalar> {
    x: Var<T>,
}

impl<T: Scalar> GradFn<T> for GridPool<T> {
    fn parents(&self) -> Vec<Var<T>> {
        vec![self.x.clone()]
    }

    fn backward(&self, gy: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(pool::grid_avg_pool_backward(gy, self.x.dims()))])
    }
}

pub fn grid_avg_pool<T: Scalar>(x: &Var<T>, grid: usize) -> Result<Var<T>> {
    let y = pool::grid_avg_pool(x.value(), grid)?;
    Ok(Var::from_op(y, GridPool { x: x.clone() }))
}

struct Resize<T: Scalar> {
    x: Var<T>,
    mode: Interp,
}

impl<T: Scalar> GradFn<T> for Resize<T> {
    fn parents(&self) -> Vec<Var<T>> {
        vec![self.x.clone()]
    }

    fn backward(&self, gy: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(resize::resize_backward(gy, self.x.dims(), self.mode))])
    }
}

pub fn resize<T: Scalar>(x: &Var<T>, out_h: usize, out_w: usize, mode: Interp) -> Result<Var<T>> {
    let y = resize::resize(x.value(), out_h, out_w, mode)?;
    Ok(Var::from_op(y, Resize { x: x.clone(), mode }))
}

struct Scaled<T: Scalar> {
    x: Var<T>,
    /// `d out / d x`, pre-scaled into the upstream shape of `x`.
    jacobian: Tensor<T>,
}

impl<T: Scalar> GradFn<T> for Scaled<T> {
    fn parents(&self) -> Vec<Var<T>> {
        vec![self.x.clone()]
    }

    fn backward(&self, gy: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let g = gy.data()[0];
        Ok(vec![Some(self.jacobian.map(|v| v * g))])
    }
}

/// `sum(x * weights)` as a single-element value.
pub fn weighted_sum<T: Scalar>(x: &Var<T>, weights: &Tensor<T>) -> Result<Var<T>> {
    if weights.dims() != x.dims() {
        return Err(Error::shape(
            "weighted_sum",
            format!("{:?} vs {:?}", weights.dims(), x.dims()),
        ));
    }
    let s: T = x.value().data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
    Ok(Var::from_op(
        Tensor::scalar(s),
        Scaled {
            x: x.clone(),
            jacobian: weights.clone(),
        },
    ))
}

pub fn sum<T: Scalar>(x: &Var<T>) -> Var<T> {
    weighted_sum(x, &Tensor::ones(x.dims())).expect("dims agree")
}

/// The single element `x[n, c, h, w]`.
pub fn pick<T: Scalar>(x: &Var<T>, n: usize, c: usize, h: usize, w: usize) -> Result<Var<T>> {
    let d = x.dims();
    if n >= d.n || c >= d.c || h >= d.h || w >= d.w {
        return Err(Error::shape("pick", format!("[{n}, {c}, {h}, {w}] outside {d:?}")));
    }
    let mut onehot = Tensor::zeros(d);
    onehot.set(n, c, h, w, T::one());
    weighted_sum(x, &onehot)
}

/// Mean pixel-wise cross-entropy as a single-element value.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Var<T>, labels: &LabelMap, ignore_index: u8) -> Result<Var<T>> {
    let (l, grad) = loss::softmax_cross_entropy(logits.value(), labels, ignore_index)?;
    Ok(Var::from_op(
        Tensor::scalar(l),
        Scaled {
            x: logits.clone(),
            jacobian: grad,
        },
    ))
}
