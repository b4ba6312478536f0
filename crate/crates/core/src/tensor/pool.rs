//! Max pooling and aligned-grid average pooling.

use super::{Dims, Tensor};
use crate::error::{Error, Result};
use crate::par;
use crate::scalar::Scalar;

/// Output dims of a square max pool.
pub fn max_pool_dims(x: Dims, k: usize, stride: usize, pad: usize) -> Result<Dims> {
    if k == 0 || stride == 0 || pad >= k || x.h + 2 * pad < k || x.w + 2 * pad < k {
        return Err(Error::shape(
            "max_pool",
            format!("window {k}, stride {stride}, pad {pad} on {x:?}"),
        ));
    }
    Ok(x.with_hw(
        (x.h + 2 * pad - k) / stride + 1,
        (x.w + 2 * pad - k) / stride + 1,
    ))
}

/// Max pool returning the output and, per output element, the flat in-plane
/// index of the selected input.
pub fn max_pool<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize, pad: usize) -> Result<(Tensor<T>, Vec<u32>)> {
    let d = x.dims();
    let od = max_pool_dims(d, k, stride, pad)?;
    let op = od.plane();
    let mut out = Tensor::zeros(od);
    let mut argmax = vec![0u32; od.numel()];
    let planes = par::map_range(d.n * d.c, |i| {
        let src = x.plane(i / d.c, i % d.c);
        let mut vals = vec![T::zero(); op];
        let mut idx = vec![0u32; op];
        for oh in 0..od.h {
            for ow in 0..od.w {
                let mut best = T::neg_infinity();
                let mut arg = 0usize;
                for ki in 0..k {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih as usize >= d.h {
                        continue;
                    }
                    for kj in 0..k {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw as usize >= d.w {
                            continue;
                        }
                        let j = ih as usize * d.w + iw as usize;
                        if src[j] > best {
                            best = src[j];
                            arg = j;
                        }
                    }
                }
                vals[oh * od.w + ow] = best;
                idx[oh * od.w + ow] = arg as u32;
            }
        }
        (vals, idx)
    });
    for (i, (vals, idx)) in planes.into_iter().enumerate() {
        out.data_mut()[i * op..(i + 1) * op].copy_from_slice(&vals);
        argmax[i * op..(i + 1) * op].copy_from_slice(&idx);
    }
    Ok((out, argmax))
}

pub fn max_pool_backward<T: Scalar>(gy: &Tensor<T>, argmax: &[u32], input: Dims) -> Tensor<T> {
    let op = gy.dims().plane();
    let mut dx = Tensor::zeros(input);
    par::for_each_chunk_mut(dx.data_mut(), input.plane(), |i, plane| {
        let g = &gy.data()[i * op..(i + 1) * op];
        for (&gv, &a) in g.iter().zip(&argmax[i * op..(i + 1) * op]) {
            plane[a as usize] = plane[a as usize] + gv;
        }
    });
    dx
}

/// Bin `i` of `g` over a length-`len` axis covers `[floor(i*len/g), floor((i+1)*len/g))`.
pub fn grid_bin(i: usize, g: usize, len: usize) -> (usize, usize) {
    (i * len / g, (i + 1) * len / g)
}

/// Average over `g x g` aligned, non-overlapping bins.
pub fn grid_avg_pool<T: Scalar>(x: &Tensor<T>, g: usize) -> Result<Tensor<T>> {
    let d = x.dims();
    if g == 0 || g > d.h || g > d.w {
        return Err(Error::shape(
            "grid_avg_pool",
            format!("grid {g} on spatial {}x{}", d.h, d.w),
        ));
    }
    let mut out = Tensor::zeros(d.with_hw(g, g));
    par::for_each_chunk_mut(out.data_mut(), g * g, |i, cells| {
        let src = x.plane(i / d.c, i % d.c);
        for bi in 0..g {
            let (r0, r1) = grid_bin(bi, g, d.h);
            for bj in 0..g {
                let (c0, c1) = grid_bin(bj, g, d.w);
                // Shifted mean: exact for constant bins.
                let pivot = src[r0 * d.w + c0];
                let mut acc = T::zero();
                for r in r0..r1 {
                    acc = acc
                        + src[r * d.w + c0..r * d.w + c1]
                            .iter()
                            .map(|&v| v - pivot)
                            .sum::<T>();
                }
                cells[bi * g + bj] = pivot + acc / T::from_usize((r1 - r0) * (c1 - c0)).unwrap();
            }
        }
    });
    Ok(out)
}

pub fn grid_avg_pool_backward<T: Scalar>(gy: &Tensor<T>, input: Dims) -> Tensor<T> {
    let g = gy.dims().h;
    let mut dx = Tensor::zeros(input);
    par::for_each_chunk_mut(dx.data_mut(), input.plane(), |i, plane| {
        let cells = &gy.data()[i * g * g..(i + 1) * g * g];
        for bi in 0..g {
            let (r0, r1) = grid_bin(bi, g, input.h);
            for bj in 0..g {
                let (c0, c1) = grid_bin(bj, g, input.w);
                let share = cells[bi * g + bj] / T::from_usize((r1 - r0) * (c1 - c0)).unwrap();
                for r in r0..r1 {
                    plane[r * input.w + c0..r * input.w + c1]
                        .iter_mut()
                        .for_each(|v| *v = share);
                }
            }
        }
    });
    dx
}
