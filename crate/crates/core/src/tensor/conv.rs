//! 2-D convolution via tiled im2col + GEMM, with a direct kernel for depthwise
//! convolutions.

use serde::{Deserialize, Serialize};

use super::gemm::{gemm, MatRef};
use super::{Dims, Tensor};
use crate::error::{Error, Result};
use crate::par;
use crate::scalar::Scalar;

/// Upper bound on the im2col buffer of a single tile, in elements.
const TILE_ELEMS: usize = 1 << 18;

/// Stride, padding, dilation and grouping of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Default for ConvGeom {
    fn default() -> Self {
        ConvGeom {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
        }
    }
}

impl ConvGeom {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvGeom {
            stride: (stride, stride),
            padding: (padding, padding),
            ..Default::default()
        }
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = (dilation, dilation);
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// Output dims for input `x` and kernel `[Cout, Cin/groups, kh, kw]`.
    pub fn output_dims(&self, x: Dims, kernel: Dims) -> Result<Dims> {
        let g = self.groups;
        if g == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::Invalid(format!("degenerate conv geometry {self:?}")));
        }
        if !x.c.is_multiple_of(g) || !kernel.n.is_multiple_of(g) {
            return Err(Error::shape(
                "conv2d",
                format!("channels in {} / out {} not divisible by groups {g}", x.c, kernel.n),
            ));
        }
        if kernel.c * g != x.c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, kernel {kernel:?} with {g} groups expects {}", x.c, kernel.c * g),
            ));
        }
        let axis = |len: usize, k: usize, s: usize, p: usize, d: usize| -> Option<usize> {
            let span = d * (k.checked_sub(1)?) + 1;
            let padded = len + 2 * p;
            (padded >= span).then(|| (padded - span) / s + 1)
        };
        let ho = axis(x.h, kernel.h, self.stride.0, self.padding.0, self.dilation.0);
        let wo = axis(x.w, kernel.w, self.stride.1, self.padding.1, self.dilation.1);
        match (ho, wo) {
            (Some(h), Some(w)) if h > 0 && w > 0 => Ok(Dims::new(x.n, kernel.n, h, w)),
            _ => Err(Error::shape(
                "conv2d",
                format!("non-positive output for input {x:?}, kernel {kernel:?}, {self:?}"),
            )),
        }
    }

    /// Multiply-accumulates of one forward pass.
    pub fn macs(&self, out: Dims, kernel: Dims) -> u64 {
        (out.numel() as u64) * (kernel.c * kernel.h * kernel.w) as u64
    }

    fn is_pointwise(&self, kernel: Dims) -> bool {
        kernel.h == 1
            && kernel.w == 1
            && self.stride == (1, 1)
            && self.padding == (0, 0)
    }

    fn is_depthwise(&self, x: Dims, kernel: Dims) -> bool {
        self.groups > 1 && self.groups == x.c && kernel.n == x.c
    }
}

/// Geometry of one (sample, group) slice, shared by forward and backward.
struct Plan {
    x: Dims,
    out: Dims,
    kh: usize,
    kw: usize,
    cin_g: usize,
    cout_g: usize,
    k: usize,
    hw: usize,
    tile: usize,
    tiles: usize,
    geom: ConvGeom,
}

impl Plan {
    fn new(x: Dims, kernel: Dims, geom: ConvGeom) -> Result<Self> {
        let out = geom.output_dims(x, kernel)?;
        let cin_g = x.c / geom.groups;
        let k = cin_g * kernel.h * kernel.w;
        let hw = out.plane();
        let tile = (TILE_ELEMS / k.max(1)).max(64).min(hw.max(1));
        Ok(Plan {
            x,
            out,
            kh: kernel.h,
            kw: kernel.w,
            cin_g,
            cout_g: kernel.n / geom.groups,
            k,
            hw,
            tile,
            tiles: hw.div_ceil(tile),
            geom,
        })
    }

    fn jobs(&self) -> usize {
        self.x.n * self.geom.groups * self.tiles
    }

    /// `(sample, group, first column, column count)` of a job.
    fn job(&self, j: usize) -> (usize, usize, usize, usize) {
        let t = j % self.tiles;
        let ng = j / self.tiles;
        let start = t * self.tile;
        (ng / self.geom.groups, ng % self.geom.groups, start, self.tile.min(self.hw - start))
    }

    fn x_offset(&self, n: usize, g: usize) -> usize {
        (n * self.x.c + g * self.cin_g) * self.x.plane()
    }

    fn out_offset(&self, n: usize, g: usize) -> usize {
        (n * self.out.c + g * self.cout_g) * self.hw
    }

    /// Fills `cols` (`k x len`, row-major) for output columns `start..start+len`.
    fn im2col<T: Scalar>(&self, x: &[T], n: usize, g: usize, start: usize, len: usize, cols: &mut [T]) {
        let (sh, sw) = self.geom.stride;
        let (ph, pw) = self.geom.padding;
        let (dh, dw) = self.geom.dilation;
        let (h, w) = (self.x.h, self.x.w);
        let wo = self.out.w;
        let base = self.x_offset(n, g);
        for r in 0..self.k {
            let ci = r / (self.kh * self.kw);
            let ki = (r / self.kw) % self.kh;
            let kj = r % self.kw;
            let plane = &x[base + ci * h * w..base + (ci + 1) * h * w];
            let row = &mut cols[r * len..(r + 1) * len];
            for (i, v) in row.iter_mut().enumerate() {
                let p = start + i;
                let ih = ((p / wo) * sh + ki * dh) as isize - ph as isize;
                let iw = ((p % wo) * sw + kj * dw) as isize - pw as isize;
                *v = if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                    plane[ih as usize * w + iw as usize]
                } else {
                    T::zero()
                };
            }
        }
    }

    /// Scatter-adds `cols` back onto the input gradient.
    fn col2im<T: Scalar>(&self, cols: &[T], n: usize, g: usize, start: usize, len: usize, dx: &mut [T]) {
        let (sh, sw) = self.geom.stride;
        let (ph, pw) = self.geom.padding;
        let (dh, dw) = self.geom.dilation;
        let (h, w) = (self.x.h, self.x.w);
        let wo = self.out.w;
        let base = self.x_offset(n, g);
        for r in 0..self.k {
            let ci = r / (self.kh * self.kw);
            let ki = (r / self.kw) % self.kh;
            let kj = r % self.kw;
            let plane = &mut dx[base + ci * h * w..base + (ci + 1) * h * w];
            for (i, &v) in cols[r * len..(r + 1) * len].iter().enumerate() {
                let p = start + i;
                let ih = ((p / wo) * sh + ki * dh) as isize - ph as isize;
                let iw = ((p % wo) * sw + kj * dw) as isize - pw as isize;
                if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                    let idx = ih as usize * w + iw as usize;
                    plane[idx] = plane[idx] + v;
                }
            }
        }
    }
}

/// Forward convolution. `kernel` is `[Cout, Cin/groups, kh, kw]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&[T]>,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let plan = Plan::new(x.dims(), kernel.dims(), geom)?;
    if let Some(b) = bias {
        if b.len() != plan.out.c {
            return Err(Error::shape(
                "conv2d",
                format!("bias has {} entries for {} output channels", b.len(), plan.out.c),
            ));
        }
    }
    let mut out = if geom.is_depthwise(x.dims(), kernel.dims()) {
        depthwise_forward(x, kernel, &plan)
    } else {
        general_forward(x, kernel, &plan)
    };
    if let Some(b) = bias {
        let hw = plan.hw;
        let c = plan.out.c;
        par::for_each_chunk_mut(out.data_mut(), hw, |i, plane| {
            let bv = b[i % c];
            plane.iter_mut().for_each(|v| *v = *v + bv);
        });
    }
    Ok(out)
}

fn general_forward<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, plan: &Plan) -> Tensor<T> {
    let pointwise = plan.geom.is_pointwise(kernel.dims());
    let xd = x.data();
    let kd = kernel.data();
    let tiles = par::map_range(plan.jobs(), |j| {
        let (n, g, start, len) = plan.job(j);
        let w_g = MatRef::row_major(&kd[g * plan.cout_g * plan.k..], plan.cout_g, plan.k, plan.k);
        let mut res = vec![T::zero(); plan.cout_g * len];
        if pointwise {
            let b = MatRef::row_major(&xd[plan.x_offset(n, g) + start..], plan.k, len, plan.hw);
            gemm(w_g, b, T::zero(), &mut res, len);
        } else {
            let mut cols = vec![T::zero(); plan.k * len];
            plan.im2col(xd, n, g, start, len, &mut cols);
            gemm(w_g, MatRef::row_major(&cols, plan.k, len, len), T::zero(), &mut res, len);
        }
        res
    });
    let mut out = Tensor::zeros(plan.out);
    let od = out.data_mut();
    for (j, res) in tiles.into_iter().enumerate() {
        let (n, g, start, len) = plan.job(j);
        let base = plan.out_offset(n, g);
        for co in 0..plan.cout_g {
            let dst = base + co * plan.hw + start;
            od[dst..dst + len].copy_from_slice(&res[co * len..(co + 1) * len]);
        }
    }
    out
}

fn depthwise_forward<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, plan: &Plan) -> Tensor<T> {
    let (sh, sw) = plan.geom.stride;
    let (ph, pw) = plan.geom.padding;
    let (dh, dw) = plan.geom.dilation;
    let xd = x.dims();
    let (ho, wo) = (plan.out.h, plan.out.w);
    let (kh, kw) = (plan.kh, plan.kw);
    let mut out = Tensor::zeros(plan.out);
    par::for_each_chunk_mut(out.data_mut(), plan.hw, |i, plane| {
        let c = i % xd.c;
        let n = i / xd.c;
        let src = x.plane(n, c);
        let wk = &kernel.data()[c * kh * kw..(c + 1) * kh * kw];
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = T::zero();
                for ki in 0..kh {
                    let ih = (oh * sh + ki * dh) as isize - ph as isize;
                    if ih < 0 || ih as usize >= xd.h {
                        continue;
                    }
                    let row = &src[ih as usize * xd.w..(ih as usize + 1) * xd.w];
                    for kj in 0..kw {
                        let iw = (ow * sw + kj * dw) as isize - pw as isize;
                        if iw >= 0 && (iw as usize) < xd.w {
                            acc = acc + wk[ki * kw + kj] * row[iw as usize];
                        }
                    }
                }
                plane[oh * wo + ow] = acc;
            }
        }
    });
    out
}

/// Gradients of a convolution with respect to its input, kernel and bias.
pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dkernel: Option<Tensor<T>>,
    pub dbias: Option<Vec<T>>,
}

/// Backward convolution for upstream gradient `gy`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    gy: &Tensor<T>,
    geom: ConvGeom,
    need_dx: bool,
    need_dkernel: bool,
    need_dbias: bool,
) -> Result<ConvGrads<T>> {
    let plan = Plan::new(x.dims(), kernel.dims(), geom)?;
    if gy.dims() != plan.out {
        return Err(Error::shape(
            "conv2d_backward",
            format!("upstream {:?} vs output {:?}", gy.dims(), plan.out),
        ));
    }
    let dbias = need_dbias.then(|| {
        let mut db = vec![T::zero(); plan.out.c];
        for n in 0..plan.out.n {
            for (c, slot) in db.iter_mut().enumerate() {
                *slot = *slot + gy.plane(n, c).iter().copied().sum::<T>();
            }
        }
        db
    });
    let (dx, dkernel) = if geom.is_depthwise(x.dims(), kernel.dims()) {
        depthwise_backward(x, kernel, gy, &plan, need_dx, need_dkernel)
    } else {
        general_backward(x, kernel, gy, &plan, need_dx, need_dkernel)
    };
    Ok(ConvGrads { dx, dkernel, dbias })
}

fn general_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    gy: &Tensor<T>,
    plan: &Plan,
    need_dx: bool,
    need_dk: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let mut dx = need_dx.then(|| Tensor::zeros(plan.x));
    let mut dk = need_dk.then(|| Tensor::zeros(kernel.dims()));
    if !need_dx && !need_dk {
        return (None, None);
    }
    let xd = x.data();
    let kd = kernel.data();
    let gd = gy.data();
    // Bounded batches keep the number of live dcols buffers in check; the
    // accumulation order is the job order either way.
    const BATCH: usize = 32;
    let jobs = plan.jobs();
    let mut first = 0;
    while first < jobs {
        let count = BATCH.min(jobs - first);
        let results = par::map_range(count, |b| {
            let (n, g, start, len) = plan.job(first + b);
            let gy_t = MatRef::row_major(&gd[plan.out_offset(n, g) + start..], plan.cout_g, len, plan.hw);
            let dk_part = need_dk.then(|| {
                let mut part = vec![T::zero(); plan.cout_g * plan.k];
                let mut cols = vec![T::zero(); plan.k * len];
                plan.im2col(xd, n, g, start, len, &mut cols);
                let cols_t = MatRef::row_major(&cols, plan.k, len, len).t();
                gemm(gy_t, cols_t, T::zero(), &mut part, plan.k);
                part
            });
            let dcols = need_dx.then(|| {
                let w_g = MatRef::row_major(&kd[g * plan.cout_g * plan.k..], plan.cout_g, plan.k, plan.k);
                let mut dcols = vec![T::zero(); plan.k * len];
                gemm(w_g.t(), gy_t, T::zero(), &mut dcols, len);
                dcols
            });
            (dk_part, dcols)
        });
        for (b, (dk_part, dcols)) in results.into_iter().enumerate() {
            let (n, g, start, len) = plan.job(first + b);
            if let (Some(dk), Some(part)) = (dk.as_mut(), dk_part) {
                let off = g * plan.cout_g * plan.k;
                for (a, p) in dk.data_mut()[off..off + part.len()].iter_mut().zip(part) {
                    *a = *a + p;
                }
            }
            if let (Some(dx), Some(dcols)) = (dx.as_mut(), dcols) {
                plan.col2im(&dcols, n, g, start, len, dx.data_mut());
            }
        }
        first += count;
    }
    (dx, dk)
}

fn depthwise_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    gy: &Tensor<T>,
    plan: &Plan,
    need_dx: bool,
    need_dk: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (sh, sw) = plan.geom.stride;
    let (ph, pw) = plan.geom.padding;
    let (dh, dw) = plan.geom.dilation;
    let xd = x.dims();
    let (ho, wo) = (plan.out.h, plan.out.w);
    let (kh, kw) = (plan.kh, plan.kw);
    let per_channel = par::map_range(xd.c, |c| {
        let wk = &kernel.data()[c * kh * kw..(c + 1) * kh * kw];
        let mut dkc = vec![T::zero(); kh * kw];
        let mut dxc = vec![T::zero(); if need_dx { xd.n * xd.plane() } else { 0 }];
        for n in 0..xd.n {
            let src = x.plane(n, c);
            let g = gy.plane(n, c);
            for oh in 0..ho {
                for ow in 0..wo {
                    let gv = g[oh * wo + ow];
                    for ki in 0..kh {
                        let ih = (oh * sh + ki * dh) as isize - ph as isize;
                        if ih < 0 || ih as usize >= xd.h {
                            continue;
                        }
                        for kj in 0..kw {
                            let iw = (ow * sw + kj * dw) as isize - pw as isize;
                            if iw < 0 || iw as usize >= xd.w {
                                continue;
                            }
                            let idx = ih as usize * xd.w + iw as usize;
                            if need_dk {
                                dkc[ki * kw + kj] = dkc[ki * kw + kj] + gv * src[idx];
                            }
                            if need_dx {
                                let o = n * xd.plane() + idx;
                                dxc[o] = dxc[o] + gv * wk[ki * kw + kj];
                            }
                        }
                    }
                }
            }
        }
        (dkc, dxc)
    });
    let mut dx = need_dx.then(|| Tensor::zeros(xd));
    let mut dk = need_dk.then(|| Tensor::zeros(kernel.dims()));
    let p = xd.plane();
    for (c, (dkc, dxc)) in per_channel.into_iter().enumerate() {
        if let Some(dk) = dk.as_mut() {
            dk.data_mut()[c * kh * kw..(c + 1) * kh * kw].copy_from_slice(&dkc);
        }
        if let Some(dx) = dx.as_mut() {
            for n in 0..xd.n {
                let dst = (n * xd.c + c) * p;
                dx.data_mut()[dst..dst + p].copy_from_slice(&dxc[n * p..(n + 1) * p]);
            }
        }
    }
    (dx, dk)
}
