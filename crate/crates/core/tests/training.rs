mod common;

use std::collections::BTreeMap;

use common::{shape_samples, tiny_spec};
use swiftseg::graph::ParamStore;
use swiftseg::tensor::LabelMap;
use swiftseg::train::{self, AdamState, cosine_lr, miou, Confusion, TrainConfig};
use swiftseg::{Backbone, Dims, Model, Tensor};

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch: 2,
        crop: 32,
        scale_range: [0.75, 1.5],
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_bit_reproducible() {
    let data = shape_samples::<f32>(4, 64, 1);
    let run = || {
        let mut m = Model::<f32>::build(&tiny_spec(Backbone::Resnet18), 3).unwrap();
        let out = train::fit(&mut m, &data, &data[..1], &quick_cfg(), &mut |_| Ok(())).unwrap();
        (out.step_losses, m.params().clone())
    };
    let (la, pa) = run();
    let (lb, pb) = run();
    assert_eq!(la, lb);
    assert!(pa.iter().zip(pb.iter()).all(|((n, a), (m, b))| n == m && a == b));
}

fn deltas(before: &ParamStore<f64>, after: &ParamStore<f64>, name: &str) -> Vec<f64> {
    let (a, b) = (before.get(name).unwrap(), after.get(name).unwrap());
    a.data().iter().zip(b.data()).map(|(x, y)| y - x).collect()
}

#[test]
fn pretrained_group_moves_four_times_less() {
    let data = shape_samples::<f64>(2, 32, 2);
    let x = Tensor::concat_batch(&[&data[0].image, &data[1].image]).unwrap();
    let l = LabelMap::stack(&[&data[0].labels, &data[1].labels]).unwrap();
    let base = Model::<f64>::build(&tiny_spec(Backbone::Resnet18), 4).unwrap();
    let step = |prefix: Option<&str>| {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            pretrained_prefix: prefix.map(str::to_string),
            ..TrainConfig::default()
        };
        let mut m = base.clone();
        train::train_step(&mut m, &mut AdamState::default(), &x, &l, 1e-3, &cfg).unwrap();
        m.params().clone()
    };
    let plain = step(None);
    let grouped = step(Some("backbone."));
    let mut checked = 0;
    for name in base.params().names().filter(|n| !swiftseg::graph::is_buffer(n)) {
        let (d0, d1) = (deltas(base.params(), &plain, name), deltas(base.params(), &grouped, name));
        let expect = if name.starts_with("backbone.") { 0.25 } else { 1.0 };
        for (a, b) in d0.iter().zip(&d1) {
            if a.abs() > 1e-6 {
                assert!((b / a - expect).abs() < 1e-6, "{name}: {b} / {a}");
                checked += 1;
            }
        }
    }
    assert!(checked > 1000);
}

#[test]
fn adam_matches_closed_form_over_several_steps() {
    let (lr, wd) = (0.01, 0.1);
    let grads = [0.3, -1.2, 0.05, 2.0];
    let mut params = ParamStore::<f64>::new();
    params.insert("w", Tensor::full(Dims::vector(1), 0.8));
    let mut adam = AdamState::<f64>::default();
    let (mut p, mut m, mut v) = (0.8f64, 0.0f64, 0.0f64);
    for (t, &g) in grads.iter().enumerate() {
        let mut gm = BTreeMap::new();
        gm.insert("w".to_string(), Tensor::full(Dims::vector(1), g));
        adam.step(&mut params, &gm, lr, wd, &[]).unwrap();
        let g = g + wd * p;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let k = (t + 1) as i32;
        let (mh, vh) = (m / (1.0 - 0.9f64.powi(k)), v / (1.0 - 0.999f64.powi(k)));
        p -= lr * mh / (vh.sqrt() + 1e-8);
        assert!((params.get("w").unwrap().data()[0] - p).abs() < 1e-12);
    }
}

#[test]
fn miou_is_permutation_equivariant() {
    let rows: Vec<Vec<u64>> = vec![vec![50, 3, 7, 0], vec![2, 40, 1, 9], vec![0, 4, 33, 5], vec![6, 0, 2, 70]];
    let perm = [2usize, 0, 3, 1];
    let mut permuted = vec![vec![0u64; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            permuted[perm[i]][perm[j]] = rows[i][j];
        }
    }
    let a = miou(&Confusion::from_rows(&rows).unwrap()).unwrap();
    let b = miou(&Confusion::from_rows(&permuted).unwrap()).unwrap();
    assert!((a.miou - b.miou).abs() < 1e-15);
    for i in 0..4 {
        assert_eq!(a.per_class[i], b.per_class[perm[i]]);
    }
}

#[test]
fn overfits_four_images() {
    let data = shape_samples::<f32>(4, 64, 7);
    let mut model = Model::<f32>::build(&tiny_spec(Backbone::Resnet18), 0).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        batch: 4,
        augment: false,
        eval_every: 200,
        ..TrainConfig::default()
    };
    let out = train::fit(&mut model, &data, &data, &cfg, &mut |_| Ok(())).unwrap();

    let smooth: Vec<f64> = out.step_losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    assert!(smooth.last().unwrap() < &(0.2 * smooth[0]));

    for rec in &out.log {
        assert_eq!(rec.lr, cosine_lr(rec.epoch as f64, 200.0, &cfg).unwrap());
    }
    let acc = train::evaluate(&model, &data).unwrap().pixel_accuracy();
    assert!(acc > 0.95, "pixel accuracy {acc}");
}

#[test]
fn step_zero_loss_with_uniform_logits_is_ln_k() {
    let data = shape_samples::<f64>(2, 64, 3);
    let x = Tensor::concat_batch(&[&data[0].image, &data[1].image]).unwrap();
    let l = LabelMap::stack(&[&data[0].labels, &data[1].labels]).unwrap();
    let mut m = Model::<f64>::build(&tiny_spec(Backbone::Resnet18), 0).unwrap();
    let w = m.arch().classifier.conv.weight_name();
    m.params_mut().get_mut(&w).unwrap().data_mut().fill(0.0);
    let loss = train::train_step(&mut m, &mut AdamState::default(), &x, &l, 1e-3, &TrainConfig::default()).unwrap();
    assert!((loss - 3f64.ln()).abs() < 1e-12, "{loss}");
}
