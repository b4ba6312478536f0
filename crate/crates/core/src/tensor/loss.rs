//! Pixel-wise softmax cross-entropy.

use super::Tensor;
use crate::error::{Error, Result};
use crate::par;
use crate::scalar::Scalar;

/// Label value of pixels excluded from the loss and from evaluation.
pub const IGNORE_INDEX: u8 = 255;

/// Per-pixel class ids, `[N, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::shape(
                "labels",
                format!("{} labels for {n}x{h}x{w}", data.len()),
            ));
        }
        Ok(LabelMap { n, h, w, data })
    }

    pub fn filled(n: usize, h: usize, w: usize, value: u8) -> Self {
        LabelMap {
            n,
            h,
            w,
            data: vec![value; n * h * w],
        }
    }

    pub fn sample(&self, n: usize) -> &[u8] {
        &self.data[n * self.h * self.w..(n + 1) * self.h * self.w]
    }

    /// Stacks single-sample maps of equal size.
    pub fn stack(maps: &[&LabelMap]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::shape("labels", "empty stack"))?;
        let mut data = Vec::new();
        let mut n = 0;
        for m in maps {
            if (m.h, m.w) != (first.h, first.w) {
                return Err(Error::shape(
                    "labels",
                    format!("{}x{} vs {}x{}", m.h, m.w, first.h, first.w),
                ));
            }
            data.extend_from_slice(&m.data);
            n += m.n;
        }
        Ok(LabelMap {
            n,
            h: first.h,
            w: first.w,
            data,
        })
    }
}

/// Mean cross-entropy over non-ignored pixels and its gradient w.r.t. the logits.
///
/// A batch with every pixel ignored has loss 0 and an all-zero gradient.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &LabelMap,
    ignore_index: u8,
) -> Result<(T, Tensor<T>)> {
    let d = logits.dims();
    if (labels.n, labels.h, labels.w) != (d.n, d.h, d.w) {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("labels {}x{}x{} vs logits {d:?}", labels.n, labels.h, labels.w),
        ));
    }
    for (i, &l) in labels.data.iter().enumerate() {
        if l != ignore_index && l as usize >= d.c {
            return Err(Error::LabelOutOfRange {
                label: l,
                index: i,
                classes: d.c,
            });
        }
    }
    let valid = labels.data.iter().filter(|&&l| l != ignore_index).count();
    let mut grad = Tensor::zeros(d);
    if valid == 0 {
        return Ok((T::zero(), grad));
    }
    let inv = T::one() / T::from_usize(valid).unwrap();
    let p = d.plane();
    // Per-sample losses, then a fixed-order total.
    let per_sample = par::map_range(d.n, |n| {
        let mut g = vec![T::zero(); d.c * p];
        let mut loss = T::zero();
        let lab = labels.sample(n);
        let mut z = vec![T::zero(); d.c];
        for i in 0..p {
            if lab[i] == ignore_index {
                continue;
            }
            for (c, zc) in z.iter_mut().enumerate() {
                *zc = logits.plane(n, c)[i];
            }
            let m = z.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = z.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + sum.ln();
            loss = loss + lse - z[lab[i] as usize];
            for c in 0..d.c {
                let prob = (z[c] - lse).exp();
                let target = if c == lab[i] as usize { T::one() } else { T::zero() };
                g[c * p + i] = (prob - target) * inv;
            }
        }
        (loss, g)
    });
    let mut total = T::zero();
    for (n, (loss, g)) in per_sample.into_iter().enumerate() {
        total = total + loss;
        grad.data_mut()[n * d.c * p..(n + 1) * d.c * p].copy_from_slice(&g);
    }
    Ok((total * inv, grad))
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::<f64>::zeros(Dims::new(2, 5, 3, 3));
        let labels = LabelMap::filled(2, 3, 3, 4);
        let (loss, _) = softmax_cross_entropy(&logits, &labels, IGNORE_INDEX).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_approach_zero() {
        let mut logits = Tensor::<f64>::zeros(Dims::new(1, 3, 1, 2));
        logits.set(0, 1, 0, 0, 60.0);
        logits.set(0, 2, 0, 1, 60.0);
        let labels = LabelMap::new(1, 1, 2, vec![1, 2]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &labels, IGNORE_INDEX).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn all_ignored_is_zero() {
        let logits = Tensor::<f32>::full(Dims::new(1, 3, 2, 2), 1.5);
        let labels = LabelMap::filled(1, 2, 2, IGNORE_INDEX);
        let (loss, g) = softmax_cross_entropy(&logits, &labels, IGNORE_INDEX).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_label() {
        let logits = Tensor::<f32>::zeros(Dims::new(1, 3, 1, 1));
        let labels = LabelMap::filled(1, 1, 1, 3);
        assert!(matches!(
            softmax_cross_entropy(&logits, &labels, IGNORE_INDEX),
            Err(Error::LabelOutOfRange { label: 3, .. })
        ));
    }
}
