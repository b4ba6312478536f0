//! Central finite differences against the tape, 64-bit. Shared by the
//! gradient tests and the acceptance report.

use super::{grad_check, randn, rel_err, rng};
use swiftseg::graph::TapeExec;
use swiftseg::tensor::{backward, ops, BnConfig, ConvGeom, Interp, LabelMap, IGNORE_INDEX};
use swiftseg::{Backbone, Dims, Model, ModelSpec, Tensor, Var};

pub const EPS: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

/// Scalarizes `y` with fixed random weights so every output element matters.
fn project(y: Var<f64>, seed: u64) -> Var<f64> {
    let w = randn(y.dims(), seed);
    ops::weighted_sum(&y, &w).unwrap()
}

/// Relative error of each labelled check.
pub type Checks = Vec<(String, f64)>;

fn check(out: &mut Checks, label: &str, f: &dyn Fn(&Var<f64>) -> Var<f64>, x: &Tensor<f64>) {
    out.push((label.to_string(), grad_check(f, x, EPS)));
}

pub fn conv2d_all_inputs(out: &mut Checks) {
    let geoms = [
        (Dims::new(2, 4, 7, 6), Dims::new(3, 4, 3, 3), ConvGeom::new(1, 1)),
        (Dims::new(1, 4, 9, 8), Dims::new(5, 4, 3, 3), ConvGeom::new(2, 1)),
        (Dims::new(1, 3, 9, 9), Dims::new(2, 3, 3, 3), ConvGeom::new(1, 2).with_dilation(2)),
        (Dims::new(1, 4, 6, 6), Dims::new(6, 2, 3, 3), ConvGeom::new(1, 1).with_groups(2)),
        (Dims::new(2, 5, 6, 7), Dims::new(5, 1, 3, 3), ConvGeom::new(2, 1).with_groups(5)),
        (Dims::new(1, 6, 5, 5), Dims::new(4, 6, 1, 1), ConvGeom::new(1, 0)),
        (Dims::new(1, 2, 8, 8), Dims::new(2, 2, 7, 7), ConvGeom::new(2, 3)),
    ];
    for (i, (xd, kd, g)) in geoms.into_iter().enumerate() {
        let x = randn(xd, 10 + i as u64);
        let k = randn(kd, 20 + i as u64);
        let b = randn(Dims::vector(kd.n), 30 + i as u64);
        let (kc, bc) = (Var::constant(k.clone()), Var::constant(b.clone()));
        let xc = Var::constant(x.clone());
        check(out, &format!("conv {i} dx"), &|v| project(ops::conv2d(v, &kc, Some(&bc), g).unwrap(), 1), &x);
        check(out, &format!("conv {i} dk"), &|v| project(ops::conv2d(&xc, v, Some(&bc), g).unwrap(), 1), &k);
        check(out, &format!("conv {i} db"), &|v| project(ops::conv2d(&xc, &kc, Some(v), g).unwrap(), 1), &b);
    }
}

pub fn batch_norm_both_modes(out: &mut Checks) {
    let x = randn(Dims::new(3, 4, 3, 2), 1);
    let gamma = randn(Dims::vector(4), 2);
    let beta = randn(Dims::vector(4), 3);
    let mean = [0.1, -0.2, 0.3, 0.0];
    let var = [1.5, 0.5, 2.0, 1.0];
    let cfg = BnConfig::default();
    for training in [false, true] {
        let (gc, bc) = (Var::constant(gamma.clone()), Var::constant(beta.clone()));
        let xc = Var::constant(x.clone());
        let bn = |x: &Var<f64>, g: &Var<f64>, b: &Var<f64>| {
            project(ops::batch_norm(x, g, b, &mean, &var, cfg, training).unwrap().0, 4)
        };
        check(out, &format!("bn train={training} dx"), &|v| bn(v, &gc, &bc), &x);
        check(out, &format!("bn train={training} dgamma"), &|v| bn(&xc, v, &bc), &gamma);
        check(out, &format!("bn train={training} dbeta"), &|v| bn(&xc, &gc, v), &beta);
    }
}

pub fn pointwise_ops(out: &mut Checks) {
    let x = randn(Dims::new(2, 3, 4, 5), 5).map(|v| 4.0 * v);
    check(out, "relu", &|v| project(ops::relu(v), 1), &x);
    check(out, "relu6", &|v| project(ops::relu6(v), 1), &x);
    check(out, "sum", &|v| ops::sum(v), &x);
    check(out, "pick", &|v| ops::pick(v, 1, 2, 3, 4).unwrap(), &x);
    let other = Var::constant(randn(x.dims(), 6));
    check(out, "add lhs", &|v| project(ops::add(v, &other).unwrap(), 2), &x);
    check(out, "add rhs", &|v| project(ops::add(&other, v).unwrap(), 2), &x);
    let a = Var::constant(randn(Dims::new(2, 2, 4, 5), 7));
    check(out, "concat first", &|v| project(ops::concat_channels(&[v, &a]).unwrap(), 3), &x);
    check(out, "concat second", &|v| project(ops::concat_channels(&[&a, v, &a]).unwrap(), 3), &x);
}

pub fn pooling_and_resizing(out: &mut Checks) {
    let x = randn(Dims::new(2, 2, 7, 9), 8);
    check(out, "max_pool", &|v| project(ops::max_pool(v, 3, 2, 1).unwrap(), 1), &x);
    for g in [1, 2, 3, 7] {
        check(out, &format!("grid pool {g}"), &|v| project(ops::grid_avg_pool(v, g).unwrap(), 1), &x);
    }
    for (h, w) in [(14, 18), (3, 4), (10, 5), (7, 9)] {
        for mode in [Interp::Bilinear, Interp::Nearest] {
            check(out, 
                &format!("resize {mode:?} to {h}x{w}"),
                &|v| project(ops::resize(v, h, w, mode).unwrap(), 1),
                &x,
            );
        }
    }
}

pub fn cross_entropy_with_ignored_pixels(out: &mut Checks) {
    let logits = randn(Dims::new(2, 4, 3, 3), 9);
    let mut labels: Vec<u8> = (0..18).map(|i| (i * 7 % 4) as u8).collect();
    labels[3] = IGNORE_INDEX;
    labels[11] = IGNORE_INDEX;
    let labels = LabelMap::new(2, 3, 3, labels).unwrap();
    check(out, "cross entropy", &|v| ops::softmax_cross_entropy(v, &labels, IGNORE_INDEX).unwrap(), &logits);
}

/// Central difference at a point, or `None` when the two one-sided slopes
/// disagree, i.e. the step crossed a ReLU kink or a max-pool switch.
fn smooth_difference(f: &dyn Fn(f64) -> f64) -> Option<f64> {
    let (up, mid, down) = (f(EPS), f(0.0), f(-EPS));
    let (fwd, bwd) = ((up - mid) / EPS, (mid - down) / EPS);
    let scale = fwd.abs().max(bwd.abs()).max(1.0);
    ((fwd - bwd).abs() <= 1e-3 * scale).then_some((up - down) / (2.0 * EPS))
}

pub struct ModelCheck {
    pub rel_err: f64,
    pub skipped: usize,
    pub probes: usize,
}

impl ModelCheck {
    pub fn ok(&self) -> bool {
        self.rel_err < TOL && self.skipped * 10 <= self.probes
    }
}

pub fn model_check(model: &Model<f64>, x: &Tensor<f64>, training: bool, input_samples: usize, seed: u64) -> ModelCheck {
    use rand::Rng;
    let w = randn(Dims::new(x.dims().n, model.spec().num_classes, x.dims().h, x.dims().w), seed);
    let eval = |params: &swiftseg::graph::ParamStore<f64>, x: &Tensor<f64>| {
        let exec = if training { TapeExec::training(params) } else { TapeExec::inference(params) };
        let m = Model::from_parts(model.spec().clone(), model.arch().clone(), params.clone());
        let y = m.forward_with(&exec, &Var::constant(x.clone())).unwrap();
        ops::weighted_sum(&y, &w).unwrap().value().data()[0]
    };

    let exec = if training {
        TapeExec::training(model.params())
    } else {
        TapeExec::inference_with_grads(model.params())
    };
    let xv = Var::leaf(x.clone());
    let y = model.forward_with(&exec, &xv).unwrap();
    backward(&ops::weighted_sum(&y, &w).unwrap()).unwrap();
    let dx = xv.take_grad().unwrap();

    let mut r = rng(seed);
    let (mut a, mut n, mut skipped, mut total) = (Vec::new(), Vec::new(), 0, 0);
    for _ in 0..input_samples {
        let i = r.random_range(0..x.len());
        let shifted = |d: f64| {
            let mut p = x.clone();
            p.data_mut()[i] += d;
            eval(model.params(), &p)
        };
        total += 1;
        match smooth_difference(&shifted) {
            Some(num) => {
                a.push(dx.data()[i]);
                n.push(num);
            }
            None => skipped += 1,
        }
    }

    let leaves = exec.leaves();
    assert!(leaves.len() > 10);
    for (name, leaf) in &leaves {
        let g = leaf.take_grad().unwrap();
        let i = r.random_range(0..g.len());
        let shifted = |d: f64| {
            let mut params = model.params().clone();
            params.get_mut(name).unwrap().data_mut()[i] += d;
            eval(&params, x)
        };
        total += 1;
        match smooth_difference(&shifted) {
            Some(num) => {
                a.push(g.data()[i]);
                n.push(num);
            }
            None => skipped += 1,
        }
    }
    ModelCheck {
        rel_err: rel_err(&a, &n),
        skipped,
        probes: total,
    }
}

/// Moves batch norms off identity statistics. With beta = 0 a dead channel
/// lands exactly on the ReLU kink, where central differences and the tape's
/// subgradient legitimately disagree.
pub fn perturb_bn(model: &mut Model<f64>, seed: u64) {
    use rand::Rng;
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    let mut r = rng(seed);
    for name in &names {
        let range = if name.ends_with("running_var") || name.ends_with("gamma") {
            0.5..2.0
        } else if name.ends_with("beta") || name.ends_with("running_mean") {
            -0.2..0.2
        } else {
            continue;
        };
        for v in model.params_mut().get_mut(name).unwrap().data_mut() {
            *v = r.random_range(range.clone());
        }
    }
}

pub fn full_model_inference_mode() -> ModelCheck {
    let spec = ModelSpec {
        width_mult: 0.25,
        ..ModelSpec::default()
    };
    let mut model = Model::<f64>::build(&spec, 3).unwrap();
    perturb_bn(&mut model, 4);
    let x = randn(Dims::new(1, 3, 32, 32), 5);
    model_check(&model, &x, false, 150, 6)
}

pub fn full_model_training_mode() -> ModelCheck {
    let spec = ModelSpec {
        width_mult: 0.25,
        ..ModelSpec::default()
    };
    let mut model = Model::<f64>::build(&spec, 7).unwrap();
    perturb_bn(&mut model, 8);
    let x = randn(Dims::new(2, 3, 32, 32), 8);
    model_check(&model, &x, true, 60, 9)
}

pub fn pyramid_and_mobilenet_models() -> Vec<ModelCheck> {
    let mut out = Vec::new();
    for (backbone, levels) in [(Backbone::Mobilenetv2, 1), (Backbone::Resnet18, 2)] {
        let spec = ModelSpec {
            backbone,
            width_mult: 0.25,
            pyramid_levels: levels,
            ..ModelSpec::default()
        };
        let mut model = Model::<f64>::build(&spec, 11).unwrap();
        perturb_bn(&mut model, 12);
        let x = randn(Dims::new(1, 3, 64, 64), 12);
        out.push(model_check(&model, &x, false, 40, 13));
    }
    out
}
