//! Model description, parameter storage, assembly and checkpoints.

pub mod checkpoint;
mod exec;
pub mod layers;

use std::collections::BTreeMap;
use std::path::Path as FsPath;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seghead::Arch;
use crate::tensor::{Dims, Interp, Tensor, Var};

pub use exec::TapeExec;
pub use layers::{BnLayer, ConvBn, ConvLayer, Exec, Path};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    #[default]
    Resnet18,
    Mobilenetv2,
}

impl std::str::FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "resnet18" => Ok(Backbone::Resnet18),
            "mobilenetv2" => Ok(Backbone::Mobilenetv2),
            other => Err(Error::Invalid(format!("unsupported backbone `{other}`"))),
        }
    }
}

/// Declarative description of a segmentation model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub backbone: Backbone,
    /// Scales every channel count (rounded to a multiple of 8, at least 8).
    pub width_mult: f64,
    pub decoder_width: usize,
    /// Empty disables spatial pyramid pooling (projection only).
    pub spp_grids: Vec<usize>,
    /// Defaults to the decoder width.
    pub spp_out: Option<usize>,
    /// 1 = single scale, 2 = interleaved two-level pyramid.
    pub pyramid_levels: usize,
    pub num_classes: usize,
    pub lateral: bool,
    pub interp: Interp,
    pub classifier_kernel: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            backbone: Backbone::Resnet18,
            width_mult: 1.0,
            decoder_width: 128,
            spp_grids: vec![1, 2, 4, 8],
            spp_out: None,
            pyramid_levels: 1,
            num_classes: 19,
            lateral: true,
            interp: Interp::Bilinear,
            classifier_kernel: 3,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Invalid(m));
        if !(self.width_mult > 0.0 && self.width_mult.is_finite()) {
            return fail(format!("width_mult must be positive, got {}", self.width_mult));
        }
        if self.decoder_width == 0 {
            return fail("decoder_width must be positive".into());
        }
        if !matches!(self.pyramid_levels, 1 | 2) {
            return fail(format!("pyramid_levels must be 1 or 2, got {}", self.pyramid_levels));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return fail(format!("num_classes must be in [2, 255], got {}", self.num_classes));
        }
        if self.spp_grids.contains(&0) {
            return fail("spp grids must be positive".into());
        }
        if self.spp_out == Some(0) {
            return fail("spp_out must be positive".into());
        }
        if self.classifier_kernel.is_multiple_of(2) {
            return fail(format!("classifier_kernel must be odd, got {}", self.classifier_kernel));
        }
        Ok(())
    }

    /// Channel count after width scaling.
    pub fn channels(&self, base: usize) -> usize {
        let scaled = (base as f64 * self.width_mult / 8.0).round() as usize * 8;
        scaled.max(8)
    }

    pub fn decoder_channels(&self) -> usize {
        self.channels(self.decoder_width)
    }

    pub fn spp_channels(&self) -> usize {
        self.spp_out.map_or_else(|| self.decoder_channels(), |c| self.channels(c))
    }

    /// Input height and width must be multiples of this.
    pub fn input_divisor(&self) -> usize {
        32 << (self.pyramid_levels - 1)
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let d = self.input_divisor();
        if h == 0 || w == 0 || !h.is_multiple_of(d) || !w.is_multiple_of(d) {
            return Err(Error::Indivisible { h, w, divisor: d });
        }
        Ok(())
    }
}

/// Named tensors, sorted by name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar = f32> {
    tensors: BTreeMap<String, Arc<Tensor<T>>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), Arc::new(t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .map(|t| &**t)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_shared(&self, name: &str) -> Result<&Arc<Tensor<T>>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors
            .remove(name)
            .map(|t| Arc::try_unwrap(t).unwrap_or_else(|shared| (*shared).clone()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), &**v))
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.cast())))
                .collect(),
        }
    }
}

/// Whether a parameter is a running statistic rather than a learnable weight.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

/// A built segmentation model: topology plus parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    spec: ModelSpec,
    arch: Arch,
    params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Assembles the model and initializes parameters deterministically from `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let arch = Arch::new(spec)?;
        let params = init_params(&arch, seed);
        Ok(Model {
            spec: spec.clone(),
            arch,
            params,
        })
    }

    /// Assembles the topology around existing parameters.
    pub fn from_parts(spec: ModelSpec, arch: Arch, params: ParamStore<T>) -> Self {
        Model { spec, arch, params }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Arch, &mut ParamStore<T>) {
        (&mut self.arch, &mut self.params)
    }

    /// Learnable parameter count.
    pub fn param_count(&self) -> usize {
        self.arch.param_count()
    }

    pub fn is_fused(&self) -> bool {
        self.arch.is_fused()
    }

    /// Logits for `x` evaluated by `exec`.
    pub fn forward_with(&self, exec: &TapeExec<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        self.arch.forward(exec, x)
    }

    /// Inference-mode forward; gradients flow only if `x` requires them.
    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let exec = TapeExec::inference(&self.params);
        self.forward_with(&exec, x)
    }

    /// Inference on a plain tensor.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.forward(&Var::constant(x.clone()))?;
        Ok(y.value().clone())
    }

    /// Replaces every batch norm's running statistics with the batch
    /// statistics of `x`, so inference mode normalizes the way training mode
    /// would on that batch. Gives untrained weights a realistic operating point.
    pub fn calibrate_bn(&mut self, x: &Tensor<T>) -> Result<()> {
        let stats = {
            let exec = TapeExec::training(&self.params);
            self.forward_with(&exec, &Var::constant(x.clone()))?;
            exec.take_bn_stats()
        };
        for (name, s) in stats {
            self.params
                .get_mut(&format!("{name}.running_mean"))?
                .data_mut()
                .copy_from_slice(&s.mean);
            self.params.get_mut(&format!("{name}.running_var"))?.data_mut().copy_from_slice(&s.var);
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    pub fn save(&self, path: impl AsRef<FsPath>) -> Result<()> {
        checkpoint::save(&self.params, path)
    }

    /// Loads every tensor by name; names and dims must match exactly.
    pub fn load(&mut self, path: impl AsRef<FsPath>) -> Result<()> {
        let entries = checkpoint::load::<T>(path)?;
        let mut seen = std::collections::BTreeSet::new();
        for (name, t) in &entries {
            let current = self.params.get(name)?;
            if current.dims() != t.dims() {
                return Err(Error::DimsMismatch {
                    name: name.clone(),
                    expected: current.dims(),
                    found: t.dims(),
                });
            }
            seen.insert(name.as_str());
        }
        if let Some(missing) = self.params.names().find(|n| !seen.contains(n)) {
            return Err(Error::Checkpoint(format!("tensor `{missing}` missing from file")));
        }
        for (name, t) in entries {
            *self.params.get_mut(&name)? = t;
        }
        Ok(())
    }
}

/// Fan-in scaled normal kernels, zero biases, identity batch norms.
fn init_params<T: Scalar>(arch: &Arch, seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    arch.visit(&mut |cb: &ConvBn| {
        let c = &cb.conv;
        let std = (2.0 / c.fan_in() as f64).sqrt();
        store.insert(c.weight_name(), Tensor::<f64>::randn(c.weight_dims(), std, &mut rng).cast());
        if c.bias {
            store.insert(c.bias_name(), Tensor::zeros(Dims::vector(c.cout)));
        }
        if let Some(bn) = &cb.bn {
            let v = Dims::vector(bn.channels);
            store.insert(bn.param_name("gamma"), Tensor::ones(v));
            store.insert(bn.param_name("beta"), Tensor::zeros(v));
            store.insert(bn.param_name("running_mean"), Tensor::zeros(v));
            store.insert(bn.param_name("running_var"), Tensor::ones(v));
        }
    });
    store
}
