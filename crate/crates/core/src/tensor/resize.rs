//! Spatial resizing with half-pixel sample centers.

use serde::{Deserialize, Serialize};

use super::{Dims, Tensor};
use crate::error::{Error, Result};
use crate::par;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    #[default]
    Bilinear,
    Nearest,
}

/// Source taps for one output coordinate: `value = a + (b - a) * t`.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    t: f64,
}

fn axis_taps(input: usize, output: usize, mode: Interp) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|dst| match mode {
            Interp::Bilinear => {
                let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(input - 1);
                Tap { lo, hi, t: src - lo as f64 }
            }
            Interp::Nearest => {
                let src = (((dst as f64 + 0.5) * scale).floor() as usize).min(input - 1);
                Tap { lo: src, hi: src, t: 0.0 }
            }
        })
        .collect()
}

pub fn resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize, mode: Interp) -> Result<Tensor<T>> {
    let d = x.dims();
    if out_h == 0 || out_w == 0 || d.h == 0 || d.w == 0 {
        return Err(Error::shape("resize", format!("{d:?} to {out_h}x{out_w}")));
    }
    if (out_h, out_w) == (d.h, d.w) {
        return Ok(x.clone());
    }
    let rows = axis_taps(d.h, out_h, mode);
    let cols = axis_taps(d.w, out_w, mode);
    let mut out = Tensor::zeros(d.with_hw(out_h, out_w));
    par::for_each_chunk_mut(out.data_mut(), out_h * out_w, |i, plane| {
        let src = x.plane(i / d.c, i % d.c);
        for (oy, ry) in rows.iter().enumerate() {
            let ty = T::from_f64_lossy(ry.t);
            let top = &src[ry.lo * d.w..(ry.lo + 1) * d.w];
            let bot = &src[ry.hi * d.w..(ry.hi + 1) * d.w];
            for (ox, cx) in cols.iter().enumerate() {
                let tx = T::from_f64_lossy(cx.t);
                let a = top[cx.lo] + (top[cx.hi] - top[cx.lo]) * tx;
                let b = bot[cx.lo] + (bot[cx.hi] - bot[cx.lo]) * tx;
                plane[oy * out_w + ox] = a + (b - a) * ty;
            }
        }
    });
    Ok(out)
}

/// Adjoint of [`resize`] for an input of dims `input`.
pub fn resize_backward<T: Scalar>(gy: &Tensor<T>, input: Dims, mode: Interp) -> Tensor<T> {
    let od = gy.dims();
    if (od.h, od.w) == (input.h, input.w) {
        return gy.clone();
    }
    let rows = axis_taps(input.h, od.h, mode);
    let cols = axis_taps(input.w, od.w, mode);
    let mut dx = Tensor::zeros(input);
    par::for_each_chunk_mut(dx.data_mut(), input.plane(), |i, plane| {
        let g = &gy.data()[i * od.plane()..(i + 1) * od.plane()];
        for (oy, ry) in rows.iter().enumerate() {
            let ty = T::from_f64_lossy(ry.t);
            for (ox, cx) in cols.iter().enumerate() {
                let tx = T::from_f64_lossy(cx.t);
                let v = g[oy * od.w + ox];
                let (top, bot) = (v * (T::one() - ty), v * ty);
                for (row, wv) in [(ry.lo, top), (ry.hi, bot)] {
                    let base = row * input.w;
                    plane[base + cx.lo] = plane[base + cx.lo] + wv * (T::one() - tx);
                    plane[base + cx.hi] = plane[base + cx.hi] + wv * tx;
                }
            }
        }
    });
    dx
}
