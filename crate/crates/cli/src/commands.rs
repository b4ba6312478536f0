use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use rand::rngs::StdRng;
use rand::SeedableRng;
use swiftseg::data::{self, GrayImage, Sample};
use swiftseg::profile::{self, BenchConfig, MonotonicClock};
use swiftseg::seghead::{fuse_bn as fold_model, Arch};
use swiftseg::train::{self, miou, Confusion, TrainSample};
use swiftseg::{erf as erf_mod, Dims, Error, Model, Tensor};

use crate::config::RunConfig;

pub enum Failure {
    /// Bad configuration or inputs; nothing was computed.
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

fn invalid(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Validation(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

type Outcome = Result<(), Failure>;

pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Ctx {
    fn input_dims(&self) -> Result<Dims, Failure> {
        let (h, w) = (self.cfg.input.height, self.cfg.input.width);
        self.cfg.model.check_input(h, w).map_err(|e| invalid(anyhow!("input {}: {e}", self.cfg.input)))?;
        Ok(Dims::new(1, 3, h, w))
    }

    fn arch(&self) -> Result<Arch, Failure> {
        Arch::new(&self.cfg.model).map_err(invalid)
    }

    /// Freshly initialized, or loaded from the configured checkpoint.
    fn model(&self) -> Result<Model<f32>, Failure> {
        let mut model = Model::build(&self.cfg.model, self.cfg.seed).map_err(invalid)?;
        if let Some(path) = &self.cfg.checkpoint {
            model.load(path).map_err(|e| invalid(anyhow!("checkpoint {}: {e}", path.display())))?;
        }
        Ok(model)
    }

    fn dataset(&self, dir: &Path) -> Result<Vec<Sample>, Failure> {
        data::load_dataset(dir, self.cfg.model.num_classes).map_err(invalid)
    }

    fn to_train(&self, samples: &[Sample]) -> Result<Vec<TrainSample<f32>>, Failure> {
        samples
            .iter()
            .map(|s| {
                self.cfg
                    .model
                    .check_input(s.image.height, s.image.width)
                    .map_err(|e| invalid(anyhow!("sample `{}`: {e}", s.name)))?;
                Ok(TrainSample {
                    image: self.cfg.normalization.apply(&s.image),
                    labels: s.label_map(),
                })
            })
            .collect()
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

pub fn write(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text).map_err(|e| runtime(anyhow!("writing {}: {e}", path.display())))
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}

pub fn build(ctx: &Ctx) -> Outcome {
    let dims = ctx.input_dims()?;
    let model = ctx.model()?;
    let report = profile::count(model.arch(), dims).map_err(runtime)?;
    let table = report.to_table();
    print!("{table}");
    println!("parameters {}", model.param_count());
    write(&ctx.path("build.txt"), &table)?;
    let path = ctx.path("model.swft");
    model.save(&path).map_err(runtime)?;
    println!("weights written to {}", path.display());
    Ok(())
}

pub fn params(ctx: &Ctx) -> Outcome {
    let arch = ctx.arch()?;
    let total = arch.param_count();
    println!("parameters {total} ({:.2}M)", total as f64 / 1e6);
    let value = serde_json::json!({ "params": total, "model": ctx.cfg.model });
    write(&ctx.path("params.json"), &json(&value))
}

pub fn flops(ctx: &Ctx) -> Outcome {
    let dims = ctx.input_dims()?;
    let report = profile::count(&ctx.arch()?, dims).map_err(runtime)?;
    print!("{}", report.to_table());
    write(&ctx.path("flops.json"), &report.to_json())?;
    write(&ctx.path("flops.csv"), &report.to_csv())?;
    write(&ctx.path("flops.txt"), &report.to_table())
}

pub fn bench(ctx: &Ctx) -> Outcome {
    let dims = ctx.input_dims()?;
    let mut model = ctx.model()?;
    if ctx.cfg.bench.fuse {
        model = fold_model(&model).map_err(runtime)?;
    }
    let cfg = BenchConfig {
        passes: ctx.cfg.bench.passes,
        warmup: ctx.cfg.bench.warmup,
        seed: ctx.cfg.seed,
    };
    let clock = MonotonicClock::new();
    let report = profile::benchmark(&model, dims, &cfg, &clock, &mut |_, _| {}).map_err(runtime)?;
    println!(
        "{} passes at {}: mean {:.2} FPS, median {:.2} ms{}",
        report.passes,
        ctx.cfg.input,
        report.mean_fps,
        report.median_ms(),
        if report.fused { " (batch norms fused)" } else { "" }
    );
    write(&ctx.path("bench.json"), &json(&report))
}

pub fn train(ctx: &Ctx) -> Outcome {
    let dir = ctx.cfg.data.train.as_ref().ok_or_else(|| invalid(anyhow!("data.train is not set")))?;
    let train_set = ctx.to_train(&ctx.dataset(dir)?)?;
    let val_set = match &ctx.cfg.data.val {
        Some(d) => ctx.to_train(&ctx.dataset(d)?)?,
        None => Vec::new(),
    };
    if !ctx.cfg.train.augment {
        let first = train_set[0].image.dims();
        if train_set.iter().any(|s| s.image.dims() != first) {
            return Err(invalid(anyhow!("with train.augment off every training image must share one size")));
        }
    } else {
        ctx.cfg.model.check_input(ctx.cfg.train.crop, ctx.cfg.train.crop).map_err(|e| invalid(anyhow!("train.crop: {e}")))?;
    }
    let mut model = ctx.model()?;
    let log_path = ctx.path("train.jsonl");
    let mut log = File::create(&log_path).map_err(|e| runtime(anyhow!("creating {}: {e}", log_path.display())))?;
    let outcome = train::fit(&mut model, &train_set, &val_set, &ctx.cfg.train, &mut |rec| {
        println!(
            "epoch {:>4}  lr {:.3e}  loss {:.4}{}",
            rec.epoch,
            rec.lr,
            rec.loss,
            rec.miou.map_or(String::new(), |m| format!("  mIoU {m:.4}"))
        );
        writeln!(log, "{}", serde_json::to_string(rec).expect("serializable"))
            .map_err(|source| Error::Io { path: log_path.clone(), source })
    })
    .map_err(runtime)?;
    model.save(ctx.path("final.swft")).map_err(runtime)?;
    if let Some((epoch, m, params)) = outcome.best {
        let best = Model::from_parts(model.spec().clone(), model.arch().clone(), params);
        best.save(ctx.path("best.swft")).map_err(runtime)?;
        println!("best mIoU {m:.4} at epoch {epoch}");
    }
    Ok(())
}

pub fn eval(ctx: &Ctx) -> Outcome {
    let dir = ctx
        .cfg
        .data
        .val
        .as_ref()
        .ok_or_else(|| invalid(anyhow!("data.val is not set")))?;
    let samples = ctx.dataset(dir)?;
    let k = ctx.cfg.model.num_classes;
    let mut conf = Confusion::new(k);
    if let Some(pred_dir) = &ctx.cfg.predictions {
        for s in &samples {
            let path = pred_dir.join(format!("{}.pgm", s.name));
            let p = data::read_pgm(&path).map_err(invalid)?;
            if (p.width, p.height) != (s.labels.width, s.labels.height) {
                return Err(invalid(anyhow!("{}: prediction size differs from labels", path.display())));
            }
            if let Some(bad) = p.data.iter().find(|&&v| v as usize >= k) {
                return Err(invalid(anyhow!("{}: predicted class {bad} >= {k}", path.display())));
            }
            let pred: Vec<usize> = p.data.iter().map(|&v| v as usize).collect();
            conf.add(&pred, &s.labels.data).map_err(runtime)?;
        }
    } else {
        let model = ctx.model()?;
        conf = train::evaluate(&model, &ctx.to_train(&samples)?).map_err(runtime)?;
    }
    let report = miou(&conf).map_err(runtime)?;
    for (i, iou) in report.per_class.iter().enumerate() {
        match iou {
            Some(v) => println!("class {i:>3}  IoU {v:.4}"),
            None => println!("class {i:>3}  IoU   n/a"),
        }
    }
    println!("mIoU {:.4}  pixel accuracy {:.4}", report.miou, conf.pixel_accuracy());
    let value = serde_json::json!({ "report": report, "pixel_accuracy": conf.pixel_accuracy(), "confusion": conf });
    write(&ctx.path("eval.json"), &json(&value))
}

pub fn infer(ctx: &Ctx) -> Outcome {
    let path = ctx.cfg.image.as_ref().ok_or_else(|| invalid(anyhow!("image is not set")))?;
    let img = data::read_ppm(path).map_err(invalid)?;
    ctx.cfg
        .model
        .check_input(img.height, img.width)
        .map_err(|e| invalid(anyhow!("{}: {e}", path.display())))?;
    let model = ctx.model()?;
    let logits = model.infer(&ctx.cfg.normalization.apply(&img)).map_err(runtime)?;
    let labels = GrayImage {
        width: img.width,
        height: img.height,
        data: logits.argmax_channels().into_iter().map(|c| c as u8).collect(),
    };
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("prediction");
    let dest = ctx.path(&format!("{stem}.pgm"));
    data::write_pgm(&dest, &labels).map_err(runtime)?;
    println!("labels written to {}", dest.display());
    Ok(())
}

pub fn erf(ctx: &Ctx) -> Outcome {
    let model = ctx.model()?;
    let images: Vec<Tensor<f32>> = match &ctx.cfg.data.val {
        Some(dir) => ctx.to_train(&ctx.dataset(dir)?)?.into_iter().map(|s| s.image).collect(),
        None => {
            let dims = ctx.input_dims()?;
            let mut rng = StdRng::seed_from_u64(ctx.cfg.seed);
            (0..ctx.cfg.erf.images).map(|_| Tensor::randn(dims, 1.0, &mut rng)).collect()
        }
    };
    let f = |x: &swiftseg::Var<f32>| model.forward(x);
    let report = erf_mod::estimate(f, &images, ctx.cfg.erf.fraction).map_err(runtime)?;
    println!(
        "ERF horizontal {:.2} px, vertical {:.2} px over {} images (top {:.1}% gradient)",
        report.erf_h,
        report.erf_v,
        report.images_used,
        100.0 * report.threshold_fraction
    );
    write(&ctx.path("erf.json"), &report.to_json())?;
    let d = images[0].dims();
    let map = erf_mod::gradient_map(&f, &images[0]).map_err(runtime)?;
    data::write_pgm(ctx.path("erf_map.pgm"), &erf_mod::map_to_pgm(&map, d.h, d.w)).map_err(runtime)
}

pub fn fuse_bn(ctx: &Ctx) -> Outcome {
    let model = ctx.model()?;
    let fused = fold_model(&model).map_err(runtime)?;
    // Check equivalence on a small input rather than the configured resolution.
    let side = 2 * ctx.cfg.model.input_divisor();
    let mut rng = StdRng::seed_from_u64(ctx.cfg.seed);
    let x = Tensor::<f32>::randn(Dims::new(1, 3, side, side), 1.0, &mut rng);
    let a = model.infer(&x).map_err(runtime)?;
    let b = fused.infer(&x).map_err(runtime)?;
    let diff = a.max_abs_diff(&b);
    println!(
        "parameters {} -> {}; max |logit difference| {diff:.3e} on a {side}x{side} input",
        model.param_count(),
        fused.param_count()
    );
    let path = ctx.path("fused.swft");
    fused.save(&path).map_err(runtime)?;
    println!("fused weights written to {}", path.display());
    let value = serde_json::json!({ "params_before": model.param_count(), "params_after": fused.param_count(), "max_abs_diff": diff });
    write(&ctx.path("fuse_bn.json"), &json(&value))
}
