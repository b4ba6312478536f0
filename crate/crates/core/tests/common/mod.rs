#![allow(dead_code)]

pub mod grad_suite;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use swiftseg::tensor::{backward, ConvGeom};
use swiftseg::{Backbone, Dims, ModelSpec, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(dims: Dims, seed: u64) -> Tensor<f64> {
    Tensor::randn(dims, 1.0, &mut rng(seed))
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Tape gradient of scalar `f` at `x` against central differences.
pub fn grad_check(f: &dyn Fn(&Var<f64>) -> Var<f64>, x: &Tensor<f64>, eps: f64) -> f64 {
    let leaf = Var::leaf(x.clone());
    let y = f(&leaf);
    assert_eq!(y.value().len(), 1, "scalar output");
    backward(&y).unwrap();
    let analytic = leaf.take_grad().unwrap_or_else(|| Tensor::zeros(x.dims()));
    let numeric: Vec<f64> = (0..x.len())
        .map(|i| {
            let eval = |delta: f64| {
                let mut t = x.clone();
                t.data_mut()[i] += delta;
                f(&Var::constant(t)).value().data()[0]
            };
            (eval(eps) - eval(-eps)) / (2.0 * eps)
        })
        .collect();
    rel_err(analytic.data(), &numeric)
}

/// Six-nested-loop convolution reference.
pub fn conv_reference(x: &Tensor<f64>, k: &Tensor<f64>, bias: Option<&[f64]>, g: ConvGeom) -> Tensor<f64> {
    let (xd, kd) = (x.dims(), k.dims());
    let oh = (xd.h + 2 * g.padding.0 - g.dilation.0 * (kd.h - 1) - 1) / g.stride.0 + 1;
    let ow = (xd.w + 2 * g.padding.1 - g.dilation.1 * (kd.w - 1) - 1) / g.stride.1 + 1;
    let cout_per = kd.n / g.groups;
    let mut out = Tensor::zeros(Dims::new(xd.n, kd.n, oh, ow));
    for n in 0..xd.n {
        for co in 0..kd.n {
            let grp = co / cout_per;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[co]);
                    for ci in 0..kd.c {
                        for ky in 0..kd.h {
                            for kx in 0..kd.w {
                                let iy = (oy * g.stride.0 + ky * g.dilation.0) as isize - g.padding.0 as isize;
                                let ix = (ox * g.stride.1 + kx * g.dilation.1) as isize - g.padding.1 as isize;
                                if iy < 0 || ix < 0 || iy >= xd.h as isize || ix >= xd.w as isize {
                                    continue;
                                }
                                acc += x.at(n, grp * kd.c + ci, iy as usize, ix as usize) * k.at(co, ci, ky, kx);
                            }
                        }
                    }
                    out.set(n, co, oy, ox, acc);
                }
            }
        }
    }
    out
}

pub fn small_spec(backbone: Backbone, pyramid_levels: usize, spp: bool) -> ModelSpec {
    ModelSpec {
        backbone,
        width_mult: 0.25,
        pyramid_levels,
        spp_grids: if spp { vec![1, 2, 4, 8] } else { Vec::new() },
        ..ModelSpec::default()
    }
}

/// Normalized synthetic shapes as training samples (classes 0..3).
pub fn shape_samples<T: swiftseg::Scalar>(count: usize, side: usize, seed: u64) -> Vec<swiftseg::train::TrainSample<T>> {
    let norm = swiftseg::data::Normalization::default();
    swiftseg::data::synthetic_shapes(count, side, side, seed)
        .iter()
        .map(|s| swiftseg::train::TrainSample {
            image: norm.apply(&s.image),
            labels: s.label_map(),
        })
        .collect()
}

/// Overfitting configuration: three classes, a quarter-width encoder.
pub fn tiny_spec(backbone: Backbone) -> ModelSpec {
    ModelSpec {
        backbone,
        width_mult: 0.25,
        num_classes: 3,
        ..ModelSpec::default()
    }
}
