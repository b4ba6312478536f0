//! Batch normalization kernels.

use serde::{Deserialize, Serialize};

use super::{Dims, Tensor};
use crate::error::{Error, Result};
use crate::par;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        BnConfig {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

fn check(op: &'static str, x: Dims, params: &[&[impl Sized]]) -> Result<()> {
    for p in params {
        if p.len() != x.c {
            return Err(Error::shape(
                op,
                format!("{} channels vs parameter length {}", x.c, p.len()),
            ));
        }
    }
    Ok(())
}

/// Per-channel `(scale, shift)` so that `y = scale * x + shift`.
pub fn affine<T: Scalar>(gamma: &[T], beta: &[T], mean: &[T], var: &[T], eps: f64) -> (Vec<T>, Vec<T>) {
    let eps = T::from_f64_lossy(eps);
    gamma
        .iter()
        .zip(beta)
        .zip(mean.iter().zip(var))
        .map(|((&g, &b), (&m, &v))| {
            let s = g / (v + eps).sqrt();
            (s, b - m * s)
        })
        .unzip()
}

fn apply_affine<T: Scalar>(x: &Tensor<T>, scale: &[T], shift: &[T]) -> Tensor<T> {
    let d = x.dims();
    let mut y = x.clone();
    par::for_each_chunk_mut(y.data_mut(), d.plane(), |i, plane| {
        let c = i % d.c;
        let (s, t) = (scale[c], shift[c]);
        plane.iter_mut().for_each(|v| *v = *v * s + t);
    });
    y
}

/// Normalizes with running statistics.
pub fn bn_inference<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: f64,
) -> Result<Tensor<T>> {
    check("batch_norm", x.dims(), &[gamma, beta, mean, var])?;
    let (scale, shift) = affine(gamma, beta, mean, var, eps);
    Ok(apply_affine(x, &scale, &shift))
}

/// Per-channel `(sum over N,H,W of a(v), sum of b(v))` evaluated in a fixed order.
fn channel_sums<T: Scalar>(d: Dims, f: impl Fn(usize, usize) -> (T, T) + Sync + Send) -> Vec<(T, T)> {
    par::map_range(d.c, |c| {
        let mut acc = (T::zero(), T::zero());
        for n in 0..d.n {
            let (a, b) = f(n, c);
            acc = (acc.0 + a, acc.1 + b);
        }
        acc
    })
}

/// Saved state of a training-mode forward pass.
pub struct BnTrainCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    /// Biased (population) batch variance.
    pub batch_var: Vec<T>,
}

/// Normalizes with batch statistics.
pub fn bn_train_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Result<(Tensor<T>, BnTrainCache<T>)> {
    let d = x.dims();
    check("batch_norm", d, &[gamma, beta])?;
    let count = d.n * d.plane();
    if count < 2 {
        return Err(Error::shape(
            "batch_norm",
            format!("training mode needs more than one value per channel, got {d:?}"),
        ));
    }
    let m = T::from_usize(count).unwrap();
    let mean: Vec<T> = channel_sums(d, |n, c| (x.plane(n, c).iter().copied().sum(), T::zero()))
        .into_iter()
        .map(|(s, _)| s / m)
        .collect();
    let var: Vec<T> = channel_sums(d, |n, c| {
        let mu = mean[c];
        (x.plane(n, c).iter().map(|&v| (v - mu) * (v - mu)).sum(), T::zero())
    })
    .into_iter()
    .map(|(s, _)| s / m)
    .collect();
    let e = T::from_f64_lossy(eps);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + e).sqrt()).collect();
    let shift: Vec<T> = mean.iter().zip(&inv_std).map(|(&mu, &s)| -mu * s).collect();
    let xhat = apply_affine(x, &inv_std, &shift);
    let y = apply_affine(&xhat, gamma, beta);
    Ok((
        y,
        BnTrainCache {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    ))
}

/// Gradients of the training-mode forward pass.
pub fn bn_train_backward<T: Scalar>(
    gy: &Tensor<T>,
    gamma: &[T],
    cache: &BnTrainCache<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let d = gy.dims();
    let sums = channel_sums(d, |n, c| {
        let g = gy.plane(n, c);
        let xh = cache.xhat.plane(n, c);
        let sg: T = g.iter().copied().sum();
        let sgx: T = g.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        (sg, sgx)
    });
    let m = T::from_usize(d.n * d.plane()).unwrap();
    let mut dx = gy.clone();
    par::for_each_chunk_mut(dx.data_mut(), d.plane(), |i, plane| {
        let c = i % d.c;
        let n = i / d.c;
        let (sg, sgx) = sums[c];
        let k = gamma[c] * cache.inv_std[c] / m;
        let xh = cache.xhat.plane(n, c);
        for (v, &xv) in plane.iter_mut().zip(xh) {
            *v = k * (m * *v - sg - xv * sgx);
        }
    });
    let dbeta = sums.iter().map(|s| s.0).collect();
    let dgamma = sums.iter().map(|s| s.1).collect();
    (dx, dgamma, dbeta)
}

/// Gradients of the inference-mode (running statistics) forward pass.
pub fn bn_inference_backward<T: Scalar>(
    gy: &Tensor<T>,
    x: &Tensor<T>,
    gamma: &[T],
    mean: &[T],
    var: &[T],
    eps: f64,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let d = gy.dims();
    let e = T::from_f64_lossy(eps);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + e).sqrt()).collect();
    let sums = channel_sums(d, |n, c| {
        let g = gy.plane(n, c);
        let sg: T = g.iter().copied().sum();
        let sgx: T = g
            .iter()
            .zip(x.plane(n, c))
            .map(|(&a, &b)| a * (b - mean[c]) * inv_std[c])
            .sum();
        (sg, sgx)
    });
    let scale: Vec<T> = gamma.iter().zip(&inv_std).map(|(&g, &s)| g * s).collect();
    let zeros = vec![T::zero(); d.c];
    let dx = apply_affine(gy, &scale, &zeros);
    let dbeta = sums.iter().map(|s| s.0).collect();
    let dgamma = sums.iter().map(|s| s.1).collect();
    (dx, dgamma, dbeta)
}

/// Exponential moving average update with the unbiased batch variance.
pub fn update_running<T: Scalar>(
    running_mean: &mut [T],
    running_var: &mut [T],
    cache: &BnTrainCache<T>,
    count: usize,
    momentum: f64,
) {
    let mo = T::from_f64_lossy(momentum);
    let keep = T::one() - mo;
    let correction = T::from_f64_lossy(count as f64 / (count as f64 - 1.0));
    for c in 0..running_mean.len() {
        running_mean[c] = keep * running_mean[c] + mo * cache.batch_mean[c];
        running_var[c] = keep * running_var[c] + mo * cache.batch_var[c] * correction;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn identity_parameters() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(Dims::new(2, 3, 4, 4), 1.0, &mut rng);
        let one = [1.0; 3];
        let zero = [0.0; 3];
        let y = bn_inference(&x, &one, &zero, &zero, &one, 0.0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn scalar_closed_form() {
        let x = Tensor::<f64>::scalar(3.0);
        let y = bn_inference(&x, &[2.0], &[0.5], &[1.0], &[4.0], 0.0).unwrap();
        assert_eq!(y.data(), &[2.5]);
    }

    #[test]
    fn channel_mismatch() {
        let x = Tensor::<f32>::zeros(Dims::new(1, 3, 2, 2));
        assert!(bn_inference(&x, &[1.0; 2], &[0.0; 2], &[0.0; 2], &[1.0; 2], 1e-5).is_err());
    }

    #[test]
    fn training_output_statistics() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::randn(Dims::new(4, 2, 6, 6), 3.0, &mut rng).map(|v| v + 5.0);
        let gamma = [2.0, -0.5];
        let beta = [0.25, -1.0];
        let (y, cache) = bn_train_forward(&x, &gamma, &beta, 0.0).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..4).flat_map(|n| y.plane(n, c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!((mean - beta[c]).abs() < 1e-9);
            assert!((var.sqrt() - f64::abs(gamma[c])).abs() < 1e-9);
        }
        let mut rm = vec![0.0; 2];
        let mut rv = vec![1.0; 2];
        update_running(&mut rm, &mut rv, &cache, 144, 0.1);
        assert!((rm[0] - 0.1 * cache.batch_mean[0]).abs() < 1e-12);
        assert!((rv[1] - (0.9 + 0.1 * cache.batch_var[1] * 144.0 / 143.0)).abs() < 1e-12);
    }
}
