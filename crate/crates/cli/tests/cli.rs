use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use swiftseg::data::{self, synthetic_shapes, GrayImage};

fn swiftseg(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swiftseg"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stdout:\n{}\nstderr:\n{}", stdout(o), String::from_utf8_lossy(&o.stderr));
}

/// Three-class shapes dataset under `dir`.
fn dataset(dir: &Path, count: usize, seed: u64) -> PathBuf {
    for s in synthetic_shapes(count, 64, 64, seed) {
        data::write_sample(dir, &s).unwrap();
    }
    dir.to_path_buf()
}

const SMALL: [&str; 3] = ["width_mult=0.25", "num_classes=3", "decoder_width=64"];

#[test]
fn flops_at_full_resolution() {
    let out = tempfile::tempdir().unwrap();
    let o = swiftseg(out.path(), &["flops", "--set", "input=2048x1024", "backbone=resnet18"]);
    ok(&o);
    let report: swiftseg::profile::FlopReport =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("flops.json")).unwrap()).unwrap();
    let total = report.total_macs as f64 / 1e9;
    assert!((total - 104.0).abs() / 104.0 < 0.10, "total {total}");
    assert_eq!(report.gflops_at_1mpx, total / 2.0);
    assert!(stdout(&o).contains("@1Mpx"));
    let csv = std::fs::read_to_string(out.path().join("flops.csv")).unwrap();
    assert_eq!(csv.lines().count(), report.stages.len() + 1);
}

#[test]
fn infer_writes_valid_label_map() {
    let tmp = tempfile::tempdir().unwrap();
    let s = &synthetic_shapes(1, 64, 64, 5)[0];
    let img = tmp.path().join("frame.ppm");
    data::write_ppm(&img, &s.image).unwrap();
    let out = tmp.path().join("out");
    let image_arg = format!("image={}", serde_json::to_string(&img).unwrap());
    let o = swiftseg(&out, &["infer", "--set", SMALL[0], SMALL[1], &image_arg]);
    ok(&o);
    let pred = data::read_pgm(out.join("frame.pgm")).unwrap();
    assert_eq!((pred.width, pred.height), (64, 64));
    assert!(pred.data.iter().all(|&v| v < 3));
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let val = dataset(&tmp.path().join("val"), 3, 11);
    let preds = tmp.path().join("preds");
    std::fs::create_dir_all(&preds).unwrap();
    for s in data::load_dataset(&val, 3).unwrap() {
        data::write_pgm(preds.join(format!("{}.pgm", s.name)), &s.labels).unwrap();
    }
    let out = tmp.path().join("out");
    let o = swiftseg(
        &out,
        &[
            "eval",
            "--set",
            "num_classes=3",
            &format!("data.val={}", serde_json::to_string(&val).unwrap()),
            &format!("predictions={}", serde_json::to_string(&preds).unwrap()),
        ],
    );
    ok(&o);
    assert!(stdout(&o).contains("mIoU 1.0000"), "{}", stdout(&o));
}

#[test]
fn exit_codes() {
    let out = tempfile::tempdir().unwrap();
    assert_eq!(swiftseg(out.path(), &["params", "--set", "bogus=1"]).status.code(), Some(1));
    assert_eq!(swiftseg(out.path(), &["flops", "--set", "input=100x64"]).status.code(), Some(1));
    assert_eq!(swiftseg(out.path(), &["infer", "--set", "image=\"/nonexistent.ppm\""]).status.code(), Some(1));
    assert_eq!(swiftseg(out.path(), &["no-such-command"]).status.code(), Some(1));
    let bad = out.path().join("bad.json");
    std::fs::write(&bad, r#"{"model": {"decoder_width": 64, "colour": 1}}"#).unwrap();
    let o = swiftseg(out.path(), &["params", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
    let o = Command::new(env!("CARGO_BIN_EXE_swiftseg"))
        .env("SWIFTSEG_THREADS", "many")
        .args(["params", "--out"])
        .arg(out.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    // A checkpoint whose contents are not a checkpoint.
    let junk = out.path().join("junk.swft");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let o = swiftseg(out.path(), &["build", "--set", "input=64x64", &format!("checkpoint={}", serde_json::to_string(&junk).unwrap())]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn effective_config_reproduces_build() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("a");
    ok(&swiftseg(&first, &["build", "--set", "input=64x64", "seed=7", SMALL[0], SMALL[2]]));
    let second = tmp.path().join("b");
    let cfg = first.join("config.json");
    ok(&swiftseg(&second, &["build", "--config", cfg.to_str().unwrap()]));
    let a = std::fs::read(first.join("model.swft")).unwrap();
    let b = std::fs::read(second.join("model.swft")).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        std::fs::read_to_string(cfg).unwrap(),
        std::fs::read_to_string(second.join("config.json")).unwrap()
    );
}

#[test]
fn train_then_evaluate_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let train = dataset(&tmp.path().join("train"), 2, 3);
    let out = tmp.path().join("out");
    let train_arg = format!("data.train={}", serde_json::to_string(&train).unwrap());
    let val_arg = format!("data.val={}", serde_json::to_string(&train).unwrap());
    let o = swiftseg(
        &out,
        &["train", "--set", SMALL[0], SMALL[1], SMALL[2], "epochs=3", "batch=2", "augment=false", &train_arg, &val_arg],
    );
    ok(&o);
    let log = std::fs::read_to_string(out.join("train.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["lr"], 4e-4);
    assert!(out.join("best.swft").exists());
    let ckpt = format!("checkpoint={}", serde_json::to_string(&out.join("final.swft")).unwrap());
    let o = swiftseg(&tmp.path().join("eval"), &["eval", "--set", SMALL[0], SMALL[1], SMALL[2], &val_arg, &ckpt]);
    ok(&o);
    assert!(stdout(&o).contains("mIoU"));
}

#[test]
fn erf_bench_and_fusion() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("erf");
    ok(&swiftseg(&out, &["erf", "--set", "input=64x64", SMALL[0], SMALL[1], "erf.images=1"]));
    let report: swiftseg::erf::ErfReport =
        serde_json::from_str(&std::fs::read_to_string(out.join("erf.json")).unwrap()).unwrap();
    assert_eq!(report.images_used, 1);
    let map: GrayImage = data::read_pgm(out.join("erf_map.pgm")).unwrap();
    assert_eq!((map.width, map.height), (64, 64));

    let out = tmp.path().join("bench");
    ok(&swiftseg(&out, &["bench", "--set", "input=64x64", SMALL[0], SMALL[1], "passes=3", "warmup=1"]));
    let bench: swiftseg::profile::BenchReport =
        serde_json::from_str(&std::fs::read_to_string(out.join("bench.json")).unwrap()).unwrap();
    assert_eq!(bench.passes, 3);
    assert!(bench.fused);

    let out = tmp.path().join("fuse");
    ok(&swiftseg(&out, &["fuse-bn", "--set", SMALL[0], SMALL[1]]));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("fuse_bn.json")).unwrap()).unwrap();
    assert!(v["max_abs_diff"].as_f64().unwrap() < 1e-4);
    assert!(out.join("fused.swft").exists());
}
