mod common;

use std::cell::RefCell;
use std::time::Duration;

use common::small_spec;
use swiftseg::profile::{benchmark, BenchConfig, BenchStage, Clock, FakeClock, MonotonicClock};
use swiftseg::seghead::fuse_bn;
use swiftseg::{Backbone, Dims, Model};

#[test]
fn fake_clock_gives_exact_fps() {
    let model = Model::<f32>::build(&small_spec(Backbone::Resnet18, 1, true), 0).unwrap();
    let clock = FakeClock::default();
    let cfg = BenchConfig {
        passes: 10,
        warmup: 3,
        seed: 0,
    };
    // Every stage, warmup included, costs a quarter of 25 ms.
    let report = benchmark(&model, Dims::new(1, 3, 64, 64), &cfg, &clock, &mut |_, _| {
        clock.advance(Duration::from_micros(6250))
    })
    .unwrap();
    assert_eq!(report.mean_fps, 40.0);
    assert_eq!(report.per_pass_ms, vec![25.0; 10]);
    assert_eq!(clock.now(), Duration::from_micros(13 * 25_000));
}

#[test]
fn every_stage_runs_inside_its_timed_pass() {
    let model = Model::<f32>::build(&small_spec(Backbone::Mobilenetv2, 1, true), 0).unwrap();
    let clock = FakeClock::default();
    let events = RefCell::new(Vec::new());
    let cfg = BenchConfig {
        passes: 4,
        warmup: 2,
        seed: 1,
    };
    let report = benchmark(&model, Dims::new(1, 3, 64, 64), &cfg, &clock, &mut |stage, pass| {
        // Only work charged to a stage inside a timed pass may show up in the result.
        if pass.is_some() {
            clock.advance(Duration::from_millis(match stage {
                BenchStage::Prepare => 1,
                BenchStage::Forward => 2,
                BenchStage::Argmax => 3,
                BenchStage::Readout => 4,
            }));
        }
        events.borrow_mut().push((stage, pass));
    })
    .unwrap();
    assert_eq!(report.per_pass_ms, vec![10.0; 4]);
    assert_eq!(report.mean_fps, 100.0);
    let events = events.into_inner();
    assert_eq!(events.len(), 4 * 6);
    let order = [BenchStage::Prepare, BenchStage::Forward, BenchStage::Argmax, BenchStage::Readout];
    for (i, chunk) in events.chunks(4).enumerate() {
        let pass = i.checked_sub(2);
        assert_eq!(chunk.iter().map(|e| e.0).collect::<Vec<_>>(), order);
        assert!(chunk.iter().all(|e| e.1 == pass));
    }
}

#[test]
fn rejects_bad_inputs() {
    let model = Model::<f32>::build(&small_spec(Backbone::Resnet18, 1, true), 0).unwrap();
    let clock = FakeClock::default();
    let mut hook = |_: BenchStage, _: Option<usize>| {};
    let cfg = BenchConfig::default();
    assert!(benchmark(&model, Dims::new(2, 3, 64, 64), &cfg, &clock, &mut hook).is_err());
    assert!(benchmark(&model, Dims::new(1, 3, 60, 64), &cfg, &clock, &mut hook).is_err());
    let none = BenchConfig { passes: 0, ..cfg };
    assert!(benchmark(&model, Dims::new(1, 3, 64, 64), &none, &clock, &mut hook).is_err());
}

#[test]
fn fused_model_is_not_slower() {
    let model = Model::<f32>::build(&small_spec(Backbone::Resnet18, 1, true), 0).unwrap();
    let fused = fuse_bn(&model).unwrap();
    let cfg = BenchConfig {
        passes: 8,
        warmup: 2,
        seed: 0,
    };
    let input = Dims::new(1, 3, 128, 128);
    let run = |m: &Model<f32>| benchmark(m, input, &cfg, &MonotonicClock::new(), &mut |_, _| {}).unwrap().median_ms();
    // Interleaved runs; the fastest median of each is least disturbed by other load.
    let (mut plain, mut folded) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..5 {
        plain = plain.min(run(&model));
        folded = folded.min(run(&fused));
    }
    // Generous slack: timing on a shared machine is noisy.
    assert!(folded <= plain * 1.25, "fused {folded:.3} ms vs {plain:.3} ms");
}
