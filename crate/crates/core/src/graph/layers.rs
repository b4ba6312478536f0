//! Layer descriptors and the execution interface the model code is written
//! against.
//!
//! Model topology is expressed once, generically over [`Exec`]. The tape
//! backend evaluates it on real tensors; the profiler backend propagates only
//! dims and counts multiply-accumulates, so both always see the same graph.

use crate::error::Result;
use crate::tensor::{BnConfig, ConvGeom, Dims, Interp};

/// Which half of the network a stage belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Path {
    /// Encoder and receptive-field module.
    Down,
    /// Decoder, classifier and final resize.
    Up,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// Parameter prefix; tensors are `{name}.weight` and `{name}.bias`.
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
    pub geom: ConvGeom,
    pub bias: bool,
}

impl ConvLayer {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        ConvLayer {
            name: name.into(),
            cin,
            cout,
            kernel: (k, k),
            geom: ConvGeom::new(stride, pad),
            bias: false,
        }
    }

    pub fn depthwise(name: impl Into<String>, channels: usize, k: usize, stride: usize) -> Self {
        let mut c = Self::new(name, channels, channels, k, stride, k / 2);
        c.geom = c.geom.with_groups(channels);
        c
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_dims(&self) -> Dims {
        Dims::new(self.cout, self.cin / self.geom.groups, self.kernel.0, self.kernel.1)
    }

    pub fn fan_in(&self) -> usize {
        let d = self.weight_dims();
        d.c * d.h * d.w
    }

    pub fn param_count(&self) -> usize {
        self.weight_dims().numel() + if self.bias { self.cout } else { 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnLayer {
    /// Parameter prefix for `gamma`, `beta`, `running_mean`, `running_var`.
    pub name: String,
    pub channels: usize,
    pub cfg: BnConfig,
}

impl BnLayer {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BnLayer {
            name: name.into(),
            channels,
            cfg: BnConfig::default(),
        }
    }

    pub fn param_name(&self, field: &str) -> String {
        format!("{}.{field}", self.name)
    }

    /// Learnable entries only; running statistics are buffers.
    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

/// A convolution optionally followed by batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn {
    pub conv: ConvLayer,
    pub bn: Option<BnLayer>,
}

impl ConvBn {
    /// `{prefix}.conv` followed by `{prefix}.bn`.
    pub fn new(prefix: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        ConvBn {
            conv: ConvLayer::new(format!("{prefix}.conv"), cin, cout, k, stride, k / 2),
            bn: Some(BnLayer::new(format!("{prefix}.bn"), cout)),
        }
    }

    pub fn depthwise(prefix: &str, channels: usize, k: usize, stride: usize) -> Self {
        ConvBn {
            conv: ConvLayer::depthwise(format!("{prefix}.conv"), channels, k, stride),
            bn: Some(BnLayer::new(format!("{prefix}.bn"), channels)),
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.bn.as_ref().map_or(0, BnLayer::param_count)
    }

    pub fn forward<E: Exec>(&self, e: &E, x: &E::V) -> Result<E::V> {
        let y = e.conv(x, &self.conv)?;
        match &self.bn {
            Some(bn) => e.bn(&y, bn),
            None => Ok(y),
        }
    }

    pub fn forward_relu<E: Exec>(&self, e: &E, x: &E::V) -> Result<E::V> {
        Ok(e.relu(&self.forward(e, x)?))
    }
}

/// Backend that evaluates model topology.
pub trait Exec {
    type V: Clone;

    fn dims(&self, v: &Self::V) -> Dims;
    fn conv(&self, x: &Self::V, layer: &ConvLayer) -> Result<Self::V>;
    fn bn(&self, x: &Self::V, layer: &BnLayer) -> Result<Self::V>;
    fn relu(&self, x: &Self::V) -> Self::V;
    fn relu6(&self, x: &Self::V) -> Self::V;
    fn add(&self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn concat(&self, parts: &[&Self::V]) -> Result<Self::V>;
    fn max_pool(&self, x: &Self::V, k: usize, stride: usize, pad: usize) -> Result<Self::V>;
    fn grid_pool(&self, x: &Self::V, grid: usize) -> Result<Self::V>;
    fn resize(&self, x: &Self::V, h: usize, w: usize, mode: Interp) -> Result<Self::V>;

    /// Marks the start of a named stage; subsequent work is attributed to it.
    fn enter(&self, _stage: &str, _path: Path) {}

    /// Instrumentation hook for named intermediate values.
    fn observe(&self, _name: &str, _v: &Self::V) {}
}
