//! Multiply-accumulate and parameter accounting, and the latency harness.
//!
//! Counting runs the model topology through [`ShapeExec`], which propagates
//! only dims; nothing is allocated, so full-resolution reports are instant.

mod bench;

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BnLayer, ConvLayer, Exec, ModelSpec, Path};
use crate::seghead::Arch;
use crate::tensor::pool::max_pool_dims;
use crate::tensor::{Dims, Interp};

pub use bench::{benchmark, BenchConfig, BenchReport, BenchStage, Clock, FakeClock, MonotonicClock};

/// Counting convention stamped on every report.
pub const CONVENTION: &str =
    "1 MAC = 1 FLOP (fused multiply-add); convolutions only; batch norm, activations, additions, pooling and resizing count as 0";

/// Pixels in one "megapixel" for the normalized figure.
pub const MEGAPIXEL: f64 = (1u64 << 20) as f64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub path: Path,
    pub macs: u64,
    /// Learnable parameters first used in this stage.
    pub params: u64,
    /// Dims of the last value produced in this stage.
    pub output: Option<Dims>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub input: Dims,
    pub convention: String,
    pub stages: Vec<StageReport>,
    pub down_macs: u64,
    pub up_macs: u64,
    pub total_macs: u64,
    pub params: u64,
    pub gflops_at_1mpx: f64,
    /// Number of MAC-bearing operations seen.
    pub leaf_ops: usize,
    /// Sum over individual operations, accumulated independently of the stages.
    pub leaf_macs: u64,
}

impl FlopReport {
    pub fn stage(&self, name: &str) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Stage totals agree with the per-operation walk.
    pub fn checksum_ok(&self) -> bool {
        let staged: u64 = self.stages.iter().map(|s| s.macs).sum();
        staged == self.leaf_macs && staged == self.total_macs && self.down_macs + self.up_macs == self.total_macs
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let width = self.stages.iter().map(|s| s.name.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let _ = writeln!(out, "input {:?}", self.input);
        let _ = writeln!(
            out,
            "{:<width$}  {:<4}  {:<22}  {:>12}  {:>9}",
            "stage", "path", "output", "params", "GMAC"
        );
        for s in &self.stages {
            let dims = s.output.map_or_else(|| "-".to_string(), |d| format!("{d:?}"));
            let path = match s.path {
                Path::Down => "down",
                Path::Up => "up",
            };
            let _ = writeln!(
                out,
                "{:<width$}  {:<4}  {:<22}  {:>12}  {:>9.3}",
                s.name,
                path,
                dims,
                s.params,
                s.macs as f64 / 1e9
            );
        }
        let _ = writeln!(out, "down {:.3} GMAC, up {:.3} GMAC", self.down_macs as f64 / 1e9, self.up_macs as f64 / 1e9);
        let _ = writeln!(
            out,
            "total {:.3} GMAC, {:.2}M params, @1Mpx {:.3}",
            self.total_macs as f64 / 1e9,
            self.params as f64 / 1e6,
            self.gflops_at_1mpx
        );
        let _ = writeln!(out, "convention: {}", self.convention);
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,path,n,c,h,w,params,macs\n");
        for s in &self.stages {
            let d = s.output.unwrap_or(Dims::new(0, 0, 0, 0));
            let path = if s.path == Path::Down { "down" } else { "up" };
            let _ = writeln!(out, "{},{path},{},{},{},{},{},{}", s.name, d.n, d.c, d.h, d.w, s.params, s.macs);
        }
        out
    }
}

#[derive(Default)]
struct State {
    stages: Vec<StageReport>,
    seen: BTreeSet<String>,
    leaf_ops: usize,
    leaf_macs: u64,
}

/// Dims-only backend that tallies MACs and parameters per stage.
#[derive(Default)]
pub struct ShapeExec {
    state: RefCell<State>,
}

impl ShapeExec {
    pub fn new() -> Self {
        Self::default()
    }

    fn stage_mut<R>(&self, f: impl FnOnce(&mut StageReport) -> R) -> R {
        let mut st = self.state.borrow_mut();
        if st.stages.is_empty() {
            st.stages.push(StageReport {
                name: "input".into(),
                path: Path::Down,
                macs: 0,
                params: 0,
                output: None,
            });
        }
        f(st.stages.last_mut().expect("non-empty"))
    }

    fn produced(&self, d: Dims) -> Dims {
        self.stage_mut(|s| s.output = Some(d));
        d
    }

    fn use_params(&self, name: &str, count: usize) {
        let fresh = self.state.borrow_mut().seen.insert(name.to_string());
        if fresh {
            self.stage_mut(|s| s.params += count as u64);
        }
    }

    pub fn finish(self, input: Dims) -> FlopReport {
        let st = self.state.into_inner();
        let stages = st.stages;
        let down_macs = stages.iter().filter(|s| s.path == Path::Down).map(|s| s.macs).sum();
        let up_macs = stages.iter().filter(|s| s.path == Path::Up).map(|s| s.macs).sum();
        let total_macs = stages.iter().map(|s| s.macs).sum::<u64>();
        let params = stages.iter().map(|s| s.params).sum();
        FlopReport {
            input,
            convention: CONVENTION.to_string(),
            stages,
            down_macs,
            up_macs,
            total_macs,
            params,
            gflops_at_1mpx: total_macs as f64 * MEGAPIXEL / (input.h * input.w) as f64 / 1e9,
            leaf_ops: st.leaf_ops,
            leaf_macs: st.leaf_macs,
        }
    }
}

fn same_spatial(op: &'static str, a: Dims, b: Dims) -> Result<()> {
    if (a.n, a.h, a.w) != (b.n, b.h, b.w) {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

impl Exec for ShapeExec {
    type V = Dims;

    fn dims(&self, v: &Dims) -> Dims {
        *v
    }

    fn conv(&self, x: &Dims, layer: &ConvLayer) -> Result<Dims> {
        let k = layer.weight_dims();
        let out = layer.geom.output_dims(*x, k)?;
        let macs = layer.geom.macs(out, k);
        {
            let mut st = self.state.borrow_mut();
            st.leaf_ops += 1;
            st.leaf_macs += macs;
        }
        self.stage_mut(|s| s.macs += macs);
        self.use_params(&layer.name, layer.param_count());
        Ok(self.produced(out))
    }

    fn bn(&self, x: &Dims, layer: &BnLayer) -> Result<Dims> {
        if x.c != layer.channels {
            return Err(Error::shape("batch_norm", format!("{x:?} vs {} channels", layer.channels)));
        }
        self.use_params(&layer.name, layer.param_count());
        Ok(self.produced(*x))
    }

    fn relu(&self, x: &Dims) -> Dims {
        self.produced(*x)
    }

    fn relu6(&self, x: &Dims) -> Dims {
        self.produced(*x)
    }

    fn add(&self, a: &Dims, b: &Dims) -> Result<Dims> {
        if a != b {
            return Err(Error::shape("add", format!("{a:?} vs {b:?}")));
        }
        Ok(self.produced(*a))
    }

    fn concat(&self, parts: &[&Dims]) -> Result<Dims> {
        let first = **parts.first().ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        let mut c = 0;
        for p in parts {
            same_spatial("concat_channels", first, **p)?;
            c += p.c;
        }
        Ok(self.produced(first.with_c(c)))
    }

    fn max_pool(&self, x: &Dims, k: usize, stride: usize, pad: usize) -> Result<Dims> {
        Ok(self.produced(max_pool_dims(*x, k, stride, pad)?))
    }

    fn grid_pool(&self, x: &Dims, grid: usize) -> Result<Dims> {
        if grid == 0 || grid > x.h || grid > x.w {
            return Err(Error::shape("grid_avg_pool", format!("grid {grid} on spatial {}x{}", x.h, x.w)));
        }
        Ok(self.produced(x.with_hw(grid, grid)))
    }

    fn resize(&self, x: &Dims, h: usize, w: usize, _mode: Interp) -> Result<Dims> {
        if h == 0 || w == 0 {
            return Err(Error::shape("resize", format!("{x:?} to {h}x{w}")));
        }
        Ok(self.produced(x.with_hw(h, w)))
    }

    fn enter(&self, stage: &str, path: Path) {
        let mut st = self.state.borrow_mut();
        if st.stages.len() == 1 && st.stages[0].name == "input" && st.stages[0].output.is_none() {
            st.stages.clear();
        }
        st.stages.push(StageReport {
            name: stage.to_string(),
            path,
            macs: 0,
            params: 0,
            output: None,
        });
    }
}

/// MAC and parameter report for `arch` on an input of `input` dims.
pub fn count(arch: &Arch, input: Dims) -> Result<FlopReport> {
    if input.c != 3 {
        return Err(Error::shape("count", format!("expected 3 input channels, got {input:?}")));
    }
    let exec = ShapeExec::new();
    exec.produced(input);
    let out = arch.forward(&exec, &input)?;
    debug_assert_eq!(out.with_c(input.c), input);
    Ok(exec.finish(input))
}

/// Convenience wrapper: report for `spec` at batch 1, `h x w`.
pub fn count_spec(spec: &ModelSpec, h: usize, w: usize) -> Result<FlopReport> {
    count(&Arch::new(spec)?, Dims::new(1, 3, h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Backbone, ConvLayer};

    #[test]
    fn single_conv_count() {
        let exec = ShapeExec::new();
        let layer = ConvLayer::new("c", 64, 64, 3, 1, 1);
        let out = exec.conv(&Dims::new(1, 64, 128, 128), &layer).unwrap();
        assert_eq!(out, Dims::new(1, 64, 128, 128));
        let r = exec.finish(Dims::new(1, 3, 128, 128));
        assert_eq!(r.total_macs, 603_979_776);
        assert_eq!(r.params, 64 * 64 * 9);
    }

    #[test]
    fn params_match_arch() {
        for backbone in [Backbone::Resnet18, Backbone::Mobilenetv2] {
            for levels in [1, 2] {
                let spec = ModelSpec {
                    backbone,
                    pyramid_levels: levels,
                    ..ModelSpec::default()
                };
                let arch = Arch::new(&spec).unwrap();
                let r = count(&arch, Dims::new(1, 3, 256, 256)).unwrap();
                assert_eq!(r.params as usize, arch.param_count());
                assert!(r.checksum_ok());
            }
        }
    }

    #[test]
    fn rejects_indivisible() {
        let err = count_spec(&ModelSpec::default(), 100, 64).unwrap_err();
        assert!(matches!(err, Error::Indivisible { divisor: 32, .. }));
    }

    #[test]
    fn exports_have_one_row_per_stage() {
        let r = count_spec(&ModelSpec::default(), 64, 64).unwrap();
        assert_eq!(r.to_csv().lines().count(), r.stages.len() + 1);
        let back: FlopReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_table().contains("group4"));
    }
}
