//! Spatial pyramid pooling, the ladder decoder and whole-model assembly for
//! the single-scale and interleaved-pyramid variants.

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::graph::{ConvBn, Exec, Model, ModelSpec, Path};
use crate::scalar::Scalar;
use crate::tensor::{norm, Interp, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SppLevel {
    pub grid: usize,
    pub proj: ConvBn,
}

/// Pools the coarsest features over aligned grids, projects each level,
/// upsamples back and fuses the levels with a projected copy of the input.
#[derive(Clone, Debug, PartialEq)]
pub struct Spp {
    pub bottleneck: ConvBn,
    pub levels: Vec<SppLevel>,
    pub fuse: Option<ConvBn>,
}

impl Spp {
    pub fn new(cin: usize, grids: &[usize], per_level: usize, out: usize) -> Self {
        let levels: Vec<SppLevel> = grids
            .iter()
            .enumerate()
            .map(|(i, &grid)| SppLevel {
                grid,
                proj: ConvBn::new(&format!("spp.level{i}"), cin, per_level, 1, 1),
            })
            .collect();
        let fuse = (!levels.is_empty())
            .then(|| ConvBn::new("spp.fuse", out + per_level * levels.len(), out, 1, 1));
        Spp {
            bottleneck: ConvBn::new("spp.bottleneck", cin, out, 1, 1),
            levels,
            fuse,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.fuse.as_ref().unwrap_or(&self.bottleneck).conv.cout
    }

    /// Strict form: fails if any grid exceeds the input's spatial dims.
    pub fn forward<E: Exec>(&self, e: &E, x: &E::V, interp: Interp) -> Result<E::V> {
        let grids: Vec<usize> = self.levels.iter().map(|l| l.grid).collect();
        self.forward_grids(e, x, &grids, interp)
    }

    /// Grids larger than the feature map are reduced to its smaller side.
    pub fn forward_clamped<E: Exec>(&self, e: &E, x: &E::V, interp: Interp) -> Result<E::V> {
        let d = e.dims(x);
        let grids: Vec<usize> = self.levels.iter().map(|l| l.grid.min(d.h).min(d.w)).collect();
        self.forward_grids(e, x, &grids, interp)
    }

    fn forward_grids<E: Exec>(&self, e: &E, x: &E::V, grids: &[usize], interp: Interp) -> Result<E::V> {
        let d = e.dims(x);
        let bottleneck = self.bottleneck.forward_relu(e, x)?;
        let Some(fuse) = &self.fuse else {
            return Ok(bottleneck);
        };
        let mut parts = vec![bottleneck];
        for (level, &g) in self.levels.iter().zip(grids) {
            // Projecting before pooling equals pooling before projecting
            // (both are linear and the bins average); BN and ReLU follow the pool.
            let y = e.conv(x, &level.proj.conv)?;
            let mut y = e.grid_pool(&y, g)?;
            if let Some(bn) = &level.proj.bn {
                y = e.bn(&y, bn)?;
            }
            let y = e.relu(&y);
            parts.push(e.resize(&y, d.h, d.w, interp)?);
        }
        let refs: Vec<&E::V> = parts.iter().collect();
        let cat = e.concat(&refs)?;
        fuse.forward_relu(e, &cat)
    }

    fn visit(&self, f: &mut dyn FnMut(&ConvBn)) {
        f(&self.bottleneck);
        for l in &self.levels {
            f(&l.proj);
        }
        if let Some(x) = &self.fuse {
            f(x);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut ConvBn)) {
        f(&mut self.bottleneck);
        for l in &mut self.levels {
            f(&mut l.proj);
        }
        if let Some(x) = &mut self.fuse {
            f(x);
        }
    }
}

/// Ladder decoder step: upsample, add the projected lateral, blend with a 3x3 conv.
#[derive(Clone, Debug, PartialEq)]
pub struct UpsampleModule {
    pub lateral: Option<ConvBn>,
    pub blend: ConvBn,
}

impl UpsampleModule {
    pub fn new(index: usize, lateral_channels: usize, width: usize, lateral: bool) -> Self {
        UpsampleModule {
            lateral: lateral.then(|| ConvBn::new(&format!("decoder.up{index}.lateral"), lateral_channels, width, 1, 1)),
            blend: ConvBn::new(&format!("decoder.up{index}.blend"), width, width, 3, 1),
        }
    }

    /// `skip` fixes the output resolution, which must be exactly twice `low`'s.
    pub fn forward<E: Exec>(&self, e: &E, low: &E::V, skip: &E::V, interp: Interp) -> Result<E::V> {
        let (ld, sd) = (e.dims(low), e.dims(skip));
        if sd.h != 2 * ld.h || sd.w != 2 * ld.w {
            return Err(Error::shape(
                "upsample_step",
                format!("lateral {sd:?} is not twice low-resolution input {ld:?}"),
            ));
        }
        let up = e.resize(low, sd.h, sd.w, interp)?;
        let mixed = match &self.lateral {
            Some(proj) => {
                let p = proj.forward_relu(e, skip)?;
                e.add(&up, &p)?
            }
            None => up,
        };
        self.blend.forward_relu(e, &mixed)
    }
}

/// Complete model topology.
#[derive(Clone, Debug, PartialEq)]
pub struct Arch {
    pub encoder: Encoder,
    pub spp: Spp,
    /// Coarsest first.
    pub ups: Vec<UpsampleModule>,
    pub classifier: ConvBn,
    pub pyramid: bool,
    pub interp: Interp,
    pub divisor: usize,
}

impl Arch {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let encoder = Encoder::new(spec);
        let [c4, c8, c16, c32] = encoder.tap_channels();
        let width = spec.decoder_channels();
        let spp_out = spec.spp_channels();
        let per_level = width.div_ceil(4);
        let spp = Spp::new(c32, &spec.spp_grids, per_level, spp_out);
        let pyramid = spec.pyramid_levels == 2;
        let laterals: Vec<usize> = if pyramid {
            vec![c32 + c16, c16 + c8, c8 + c4, c4]
        } else {
            vec![c16, c8, c4]
        };
        if spp.out_channels() != width {
            return Err(Error::Invalid(format!(
                "spp_out ({spp_out}) must equal the decoder width ({width})"
            )));
        }
        let ups = laterals
            .iter()
            .enumerate()
            .map(|(i, &c)| UpsampleModule::new(i, c, width, spec.lateral))
            .collect();
        let k = spec.classifier_kernel;
        let mut classifier = ConvBn::new("classifier", width, spec.num_classes, k, 1);
        classifier.conv.bias = true;
        classifier.bn = None;
        Ok(Arch {
            encoder,
            spp,
            ups,
            classifier,
            pyramid,
            interp: spec.interp,
            divisor: spec.input_divisor(),
        })
    }

    /// Full forward pass; logits have the input's spatial dims.
    pub fn forward<E: Exec>(&self, e: &E, x: &E::V) -> Result<E::V> {
        let d = e.dims(x);
        if d.h % self.divisor != 0 || d.w % self.divisor != 0 || d.h == 0 || d.w == 0 {
            return Err(Error::Indivisible {
                h: d.h,
                w: d.w,
                divisor: self.divisor,
            });
        }
        let (mut low, laterals) = if self.pyramid {
            e.enter("pyramid.downsample", Path::Down);
            let half = e.resize(x, d.h / 2, d.w / 2, Interp::Bilinear)?;
            let full = self.encoder.forward(e, x, "level0.")?;
            let coarse = self.encoder.forward(e, &half, "level1.")?;
            e.enter("spp", Path::Down);
            let low = self.spp.forward_clamped(e, &coarse.taps[3], self.interp)?;
            let [f4, f8, f16, f32] = &full.taps;
            let [h4, h8, h16, _] = &coarse.taps;
            let laterals = vec![
                Lateral::Pair(f32.clone(), h16.clone()),
                Lateral::Pair(f16.clone(), h8.clone()),
                Lateral::Pair(f8.clone(), h4.clone()),
                Lateral::Single(f4.clone()),
            ];
            (low, laterals)
        } else {
            let taps = self.encoder.forward(e, x, "")?;
            e.enter("spp", Path::Down);
            let low = self.spp.forward_clamped(e, &taps.taps[3], self.interp)?;
            let [t4, t8, t16, _] = taps.taps;
            (low, vec![Lateral::Single(t16), Lateral::Single(t8), Lateral::Single(t4)])
        };
        for (i, (up, lateral)) in self.ups.iter().zip(laterals).enumerate() {
            e.enter(&format!("decoder.up{i}"), Path::Up);
            let skip = match lateral {
                Lateral::Single(v) => v,
                Lateral::Pair(a, b) => e.concat(&[&a, &b])?,
            };
            low = up.forward(e, &low, &skip, self.interp)?;
        }
        e.enter("classifier", Path::Up);
        let logits = self.classifier.forward(e, &low)?;
        e.enter("resize", Path::Up);
        e.resize(&logits, d.h, d.w, self.interp)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&ConvBn)) {
        self.encoder.visit(f);
        self.spp.visit(f);
        for up in &self.ups {
            if let Some(l) = &up.lateral {
                f(l);
            }
            f(&up.blend);
        }
        f(&self.classifier);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut ConvBn)) {
        self.encoder.visit_mut(f);
        self.spp.visit_mut(f);
        for up in &mut self.ups {
            if let Some(l) = &mut up.lateral {
                f(l);
            }
            f(&mut up.blend);
        }
        f(&mut self.classifier);
    }

    /// Learnable parameter count (weights, biases, BN scale and shift).
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |cb| total += cb.param_count());
        total
    }

    pub fn is_fused(&self) -> bool {
        let mut any = false;
        self.visit(&mut |cb| any |= cb.bn.is_some());
        !any
    }
}

enum Lateral<V> {
    Single(V),
    Pair(V, V),
}

/// Folds a batch norm into the preceding convolution's kernel and bias.
///
/// `w' = w * gamma / sqrt(var + eps)` per output channel and
/// `b' = (b - mean) * gamma / sqrt(var + eps) + beta`.
pub fn fold_bn<T: Scalar>(
    kernel: &Tensor<T>,
    bias: Option<&[T]>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: f64,
) -> Result<(Tensor<T>, Vec<T>)> {
    let cout = kernel.dims().n;
    if [gamma.len(), beta.len(), mean.len(), var.len()].iter().any(|&l| l != cout)
        || bias.is_some_and(|b| b.len() != cout)
    {
        return Err(Error::shape("fuse_bn", format!("kernel {:?} vs batch norm parameters", kernel.dims())));
    }
    let zeros = vec![T::zero(); cout];
    let (scale, _) = norm::affine(gamma, beta, &zeros, var, eps);
    let per_out = kernel.len() / cout.max(1);
    let mut w = kernel.clone();
    for (co, chunk) in w.data_mut().chunks_mut(per_out).enumerate() {
        chunk.iter_mut().for_each(|v| *v = *v * scale[co]);
    }
    let b = (0..cout)
        .map(|co| {
            let b0 = bias.map_or(T::zero(), |b| b[co]);
            (b0 - mean[co]) * scale[co] + beta[co]
        })
        .collect();
    Ok((w, b))
}

/// Returns a copy of `model` with every batch norm folded into its convolution.
pub fn fuse_bn<T: Scalar>(model: &Model<T>) -> Result<Model<T>> {
    let mut fused = model.clone();
    let (arch, params) = fused.parts_mut();
    let mut err = None;
    arch.visit_mut(&mut |cb: &mut ConvBn| {
        if err.is_some() {
            return;
        }
        let Some(bn) = cb.bn.clone() else { return };
        let res = (|| -> Result<()> {
            let conv = &cb.conv;
            let kernel = params
                .get(&conv.weight_name())
                .map_err(|_| Error::BnWithoutConv(bn.name.clone()))?
                .clone();
            let bias = if conv.bias {
                Some(params.get(&conv.bias_name())?.data().to_vec())
            } else {
                None
            };
            let field = |f: &str| params.get(&bn.param_name(f)).map(|t| t.data().to_vec());
            let (w, b) = fold_bn(
                &kernel,
                bias.as_deref(),
                &field("gamma")?,
                &field("beta")?,
                &field("running_mean")?,
                &field("running_var")?,
                bn.cfg.eps,
            )?;
            *params.get_mut(&conv.weight_name())? = w;
            params.insert(conv.bias_name(), Tensor::vector(&b));
            for f in ["gamma", "beta", "running_mean", "running_var"] {
                params.remove(&bn.param_name(f));
            }
            Ok(())
        })();
        match res {
            Ok(()) => {
                cb.conv.bias = true;
                cb.bn = None;
            }
            Err(e) => err = Some(e),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(fused),
    }
}
