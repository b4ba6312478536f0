mod common;

use common::{randn, rel_err};
use swiftseg::erf::{estimate, gradient_map, spread};
use swiftseg::tensor::{ops, ConvGeom};
use swiftseg::{Dims, Result, Tensor, Var};

fn stack(kernels: Vec<Tensor<f64>>, scale: f64) -> impl Fn(&Var<f64>) -> Result<Var<f64>> {
    move |x: &Var<f64>| {
        let mut y = x.clone();
        for (i, k) in kernels.iter().enumerate() {
            // Scaling the last kernel scales the output.
            let k = if i + 1 == kernels.len() { k.map(|v| v * scale) } else { k.clone() };
            let pad = k.dims().h / 2;
            y = ops::conv2d(&y, &Var::constant(k), None, ConvGeom::new(1, pad))?;
            if i + 1 < kernels.len() {
                y = ops::relu(&y);
            }
        }
        Ok(y)
    }
}

#[test]
fn spread_ignores_output_scale() {
    let ks = vec![randn(Dims::new(4, 3, 3, 3), 1), randn(Dims::new(5, 4, 5, 5), 2)];
    let imgs = vec![randn(Dims::new(1, 3, 24, 24), 3), randn(Dims::new(1, 3, 24, 24), 4)];
    let a = estimate(stack(ks.clone(), 1.0), &imgs, 0.05).unwrap();
    let b = estimate(stack(ks, 7.5), &imgs, 0.05).unwrap();
    assert_eq!(a.per_image, b.per_image);
}

#[test]
fn spread_is_bounded_by_the_theoretical_field() {
    for (layers, m, seed) in [(1usize, 3usize, 0u64), (2, 3, 1), (3, 3, 2), (2, 5, 3), (4, 3, 4)] {
        let mut ks = vec![randn(Dims::new(4, 3, m, m), seed)];
        for l in 1..layers {
            ks.push(randn(Dims::new(4, 4, m, m), seed * 10 + l as u64));
        }
        let s = layers * (m - 1) + 1;
        let img = randn(Dims::new(1, 3, 32, 32), 100 + seed);
        let map = gradient_map(&stack(ks, 1.0), &img).unwrap();
        // Nonzero gradient only inside the s×s window around the centre.
        let nz: Vec<usize> = (0..map.len()).filter(|&i| map[i] > 0.0).collect();
        assert!(nz.iter().all(|&i| (i % 32).abs_diff(16) <= s / 2 && (i / 32).abs_diff(16) <= s / 2));
        let bound = (s as f64 - 1.0) / 2.0;
        for fraction in [0.05, 0.5, 1.0] {
            let (h, v) = spread(&map, 32, 32, fraction);
            assert!(h <= bound + 1e-12 && v <= bound + 1e-12, "{layers}x{m}: ({h}, {v}) > {bound}");
        }
    }
}

#[test]
fn tape_input_gradients_match_finite_differences() {
    let ks = vec![
        randn(Dims::new(4, 2, 3, 3), 5),
        randn(Dims::new(4, 4, 3, 3), 6),
        randn(Dims::new(3, 4, 3, 3), 7),
    ];
    let f = stack(ks, 1.0);
    let img = randn(Dims::new(1, 2, 10, 10), 8);
    let map = gradient_map(&f, &img).unwrap();

    let y = f(&Var::constant(img.clone())).unwrap();
    let class = (0..3).max_by(|&a, &b| y.value().at(0, a, 5, 5).total_cmp(&y.value().at(0, b, 5, 5))).unwrap();
    let logit = |t: &Tensor<f64>| f(&Var::constant(t.clone())).unwrap().value().at(0, class, 5, 5);
    let eps = 1e-6;
    let mut numeric = vec![0.0; 100];
    for c in 0..2 {
        for p in 0..100 {
            let (mut hi, mut lo) = (img.clone(), img.clone());
            hi.data_mut()[c * 100 + p] += eps;
            lo.data_mut()[c * 100 + p] -= eps;
            numeric[p] += ((logit(&hi) - logit(&lo)) / (2.0 * eps)).abs();
        }
    }
    let err = rel_err(&map, &numeric);
    assert!(err < 1e-3, "relative error {err}");
}
