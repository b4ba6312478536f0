//! Desk-scale optimization: Adam with cosine annealing, jitter augmentation
//! and mIoU evaluation.

mod adam;
mod augment;
mod metrics;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Model, ParamStore, TapeExec};
use crate::scalar::Scalar;
use crate::tensor::{backward, ops, LabelMap, Tensor, Var, IGNORE_INDEX};

pub use adam::{AdamState, ParamGroup};
pub use augment::{augment, AugmentConfig};
pub use metrics::{miou, Confusion, IouReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    pub crop: usize,
    pub scale_range: [f64; 2],
    pub flip: bool,
    /// Off trains on whole images, which then must share one size.
    pub augment: bool,
    /// Parameters under this prefix get divided lr and weight decay.
    pub pretrained_prefix: Option<String>,
    pub pretrained_lr_divisor: f64,
    pub pretrained_wd_divisor: f64,
    /// Validation frequency in epochs; the last epoch is always evaluated.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 4e-4,
            lr_min: 1e-6,
            weight_decay: 1e-4,
            epochs: 200,
            batch: 12,
            crop: 768,
            scale_range: [0.5, 2.0],
            flip: true,
            augment: true,
            pretrained_prefix: None,
            pretrained_lr_divisor: 4.0,
            pretrained_wd_divisor: 4.0,
            eval_every: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Invalid(m));
        if !(self.lr_min >= 0.0 && self.lr_min < self.lr_max) {
            return fail(format!("need 0 <= lr_min < lr_max, got {} and {}", self.lr_min, self.lr_max));
        }
        if !(self.scale_range[0] > 0.0 && self.scale_range[0] < self.scale_range[1]) {
            return fail(format!("scale_range must be increasing and positive, got {:?}", self.scale_range));
        }
        if self.epochs == 0 || self.batch == 0 || self.crop == 0 || self.eval_every == 0 {
            return fail("epochs, batch, crop and eval_every must be positive".into());
        }
        if self.weight_decay < 0.0 || self.pretrained_lr_divisor <= 0.0 || self.pretrained_wd_divisor <= 0.0 {
            return fail("weight decay and divisors must be non-negative / positive".into());
        }
        Ok(())
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        self.pretrained_prefix
            .iter()
            .map(|p| ParamGroup {
                prefix: p.clone(),
                lr_scale: 1.0 / self.pretrained_lr_divisor,
                wd_scale: 1.0 / self.pretrained_wd_divisor,
            })
            .collect()
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            crop: self.crop,
            scale_range: self.scale_range,
            flip: self.flip,
        }
    }
}

/// Cosine annealing from `lr_max` at `t = 0` to `lr_min` at `t = total`, no restarts.
pub fn cosine_lr(t: f64, total: f64, cfg: &TrainConfig) -> Result<f64> {
    if total.is_nan() || total <= 0.0 || !(0.0..=total).contains(&t) {
        return Err(Error::Invalid(format!("schedule position {t} outside [0, {total}]")));
    }
    let c = (std::f64::consts::PI * t / total).cos();
    // Weighted form keeps both endpoints exact.
    Ok(cfg.lr_max * (1.0 + c) / 2.0 + cfg.lr_min * (1.0 - c) / 2.0)
}

/// One normalized image with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample<T: Scalar = f32> {
    /// `[1, 3, H, W]`.
    pub image: Tensor<T>,
    /// Single-sample label map of the same size.
    pub labels: LabelMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Rate at the epoch's first step.
    pub lr: f64,
    /// Mean training loss over the epoch.
    pub loss: f64,
    pub miou: Option<f64>,
    pub pixel_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FitOutcome<T: Scalar = f32> {
    pub log: Vec<EpochLog>,
    pub step_losses: Vec<f64>,
    pub step_lrs: Vec<f64>,
    /// Parameters at the epoch with the best validation mIoU.
    pub best: Option<(usize, f64, ParamStore<T>)>,
}

/// Confusion matrix of inference-mode predictions.
pub fn evaluate<T: Scalar>(model: &Model<T>, samples: &[TrainSample<T>]) -> Result<Confusion> {
    let mut conf = Confusion::new(model.spec().num_classes);
    for s in samples {
        let logits = model.infer(&s.image)?;
        conf.add(&logits.argmax_channels(), &s.labels.data)?;
    }
    Ok(conf)
}

/// One optimizer step on a batch; returns the loss.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    adam: &mut AdamState<T>,
    x: &Tensor<T>,
    labels: &LabelMap,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let (grads, stats, loss) = {
        let exec = TapeExec::training(model.params());
        let logits = model.forward_with(&exec, &Var::constant(x.clone()))?;
        let loss = ops::softmax_cross_entropy(&logits, labels, IGNORE_INDEX)?;
        backward(&loss)?;
        let grads: BTreeMap<String, Tensor<T>> = exec
            .leaves()
            .into_iter()
            .filter_map(|(name, v)| v.take_grad().map(|g| (name, g)))
            .collect();
        (grads, exec.take_bn_stats(), loss.value().data()[0].to_f64_lossy())
    };
    let params = model.params_mut();
    for (name, s) in stats {
        let momentum = T::from_f64_lossy(crate::tensor::BnConfig::default().momentum);
        let keep = T::one() - momentum;
        let correction = T::from_f64_lossy(s.count as f64 / (s.count as f64 - 1.0).max(1.0));
        let mean = params.get_mut(&format!("{name}.running_mean"))?;
        for (r, &b) in mean.data_mut().iter_mut().zip(&s.mean) {
            *r = keep * *r + momentum * b;
        }
        let var = params.get_mut(&format!("{name}.running_var"))?;
        for (r, &b) in var.data_mut().iter_mut().zip(&s.var) {
            *r = keep * *r + momentum * b * correction;
        }
    }
    adam.step(params, &grads, lr, cfg.weight_decay, &cfg.groups())?;
    Ok(loss)
}

/// Trains `model` in place; `on_epoch` sees each log record as it is produced.
pub fn fit<T: Scalar>(
    model: &mut Model<T>,
    train: &[TrainSample<T>],
    val: &[TrainSample<T>],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog) -> Result<()>,
) -> Result<FitOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let aug = cfg.augment_config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::default();
    let steps_per_epoch = train.len().div_ceil(cfg.batch);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut out = FitOutcome {
        log: Vec::new(),
        step_losses: Vec::new(),
        step_lrs: Vec::new(),
        best: None,
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let mut images = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &train[i];
                if cfg.augment {
                    let (x, l) = augment(&s.image, &s.labels, &aug, &mut rng)?;
                    images.push(x);
                    labels.push(l);
                } else {
                    images.push(s.image.clone());
                    labels.push(s.labels.clone());
                }
            }
            let x = Tensor::concat_batch(&images.iter().collect::<Vec<_>>())?;
            let l = LabelMap::stack(&labels.iter().collect::<Vec<_>>())?;
            let t = epoch as f64 + step as f64 / steps_per_epoch as f64;
            let lr = cosine_lr(t, cfg.epochs as f64, cfg)?;
            let loss = train_step(model, &mut adam, &x, &l, lr, cfg)?;
            epoch_loss += loss;
            out.step_losses.push(loss);
            out.step_lrs.push(lr);
        }
        let last = epoch + 1 == cfg.epochs;
        let (miou_v, acc) = if !val.is_empty() && (last || (epoch + 1) % cfg.eval_every == 0) {
            let conf = evaluate(model, val)?;
            let r = miou(&conf).ok().map(|r| r.miou);
            (r, Some(conf.pixel_accuracy()))
        } else {
            (None, None)
        };
        if let Some(m) = miou_v {
            if out.best.as_ref().is_none_or(|(_, b, _)| m > *b) {
                out.best = Some((epoch, m, model.params().clone()));
            }
        }
        let rec = EpochLog {
            epoch,
            lr: cosine_lr(epoch as f64, cfg.epochs as f64, cfg)?,
            loss: epoch_loss / steps_per_epoch as f64,
            miou: miou_v,
            pixel_accuracy: acc,
        };
        on_epoch(&rec)?;
        out.log.push(rec);
    }
    Ok(out)
}
