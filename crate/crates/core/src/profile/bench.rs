use std::cell::Cell;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Normalization, RgbImage};
use crate::error::{Error, Result};
use crate::graph::Model;
use crate::scalar::Scalar;
use crate::tensor::Dims;

/// Monotonic time source.
pub trait Clock {
    fn now(&self) -> Duration;
}

pub struct MonotonicClock(Instant);

impl MonotonicClock {
    pub fn new() -> Self {
        MonotonicClock(Instant::now())
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> Duration {
        self.0.elapsed()
    }
}

/// Manually advanced clock for tests.
#[derive(Default)]
pub struct FakeClock(Cell<Duration>);

impl FakeClock {
    pub fn advance(&self, d: Duration) {
        self.0.set(self.0.get() + d);
    }
}

impl Clock for FakeClock {
    fn now(&self) -> Duration {
        self.0.get()
    }
}

/// Work inside one timed pass, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchStage {
    /// Conversion of the raw image into a normalized input tensor.
    Prepare,
    Forward,
    /// Per-pixel argmax over class logits.
    Argmax,
    /// Copying the label map out as bytes.
    Readout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub passes: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            passes: 1000,
            warmup: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub passes: usize,
    pub mean_fps: f64,
    pub per_pass_ms: Vec<f64>,
    pub input: Dims,
    pub fused: bool,
}

impl BenchReport {
    pub fn median_ms(&self) -> f64 {
        let mut v = self.per_pass_ms.clone();
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        if v.len() % 2 == 1 {
            v[m]
        } else {
            (v[m - 1] + v[m]) / 2.0
        }
    }
}

/// Times `cfg.passes` batch-1 passes after `cfg.warmup` untimed ones.
///
/// Each timed pass covers input preparation, the forward pass, the argmax
/// and the readout; `hook` runs right after each of those steps (also during
/// warmup, where `pass` is `None`).
pub fn benchmark<T: Scalar>(
    model: &Model<T>,
    input: Dims,
    cfg: &BenchConfig,
    clock: &dyn Clock,
    hook: &mut dyn FnMut(BenchStage, Option<usize>),
) -> Result<BenchReport> {
    if cfg.passes == 0 {
        return Err(Error::Invalid("benchmark needs at least one pass".into()));
    }
    if input.n != 1 || input.c != 3 {
        return Err(Error::Invalid(format!("benchmark input must be [1, 3, H, W], got {input:?}")));
    }
    model.spec().check_input(input.h, input.w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let image = RgbImage {
        width: input.w,
        height: input.h,
        data: (0..3 * input.h * input.w).map(|_| rng.random()).collect(),
    };
    let norm = Normalization::default();
    let mut sink = 0u64;
    let mut pass = |i: Option<usize>, hook: &mut dyn FnMut(BenchStage, Option<usize>)| -> Result<()> {
        let x = norm.apply::<T>(&image);
        hook(BenchStage::Prepare, i);
        let logits = model.infer(&x)?;
        hook(BenchStage::Forward, i);
        let classes = logits.argmax_channels();
        hook(BenchStage::Argmax, i);
        let bytes: Vec<u8> = classes.iter().map(|&c| c as u8).collect();
        sink = sink.wrapping_add(bytes.iter().map(|&b| b as u64).sum::<u64>());
        hook(BenchStage::Readout, i);
        Ok(())
    };
    for _ in 0..cfg.warmup {
        pass(None, hook)?;
    }
    let mut per_pass_ms = Vec::with_capacity(cfg.passes);
    let start = clock.now();
    for i in 0..cfg.passes {
        let t0 = clock.now();
        pass(Some(i), hook)?;
        per_pass_ms.push((clock.now() - t0).as_secs_f64() * 1e3);
    }
    let total = (clock.now() - start).as_secs_f64();
    std::hint::black_box(sink);
    Ok(BenchReport {
        passes: cfg.passes,
        mean_fps: if total > 0.0 { cfg.passes as f64 / total } else { f64::INFINITY },
        per_pass_ms,
        input,
        fused: model.is_fused(),
    })
}
