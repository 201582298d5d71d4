use std::path::Path;
use std::process::{Command, Output};

fn wmnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wmnet"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn train_eval_plot_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("spec.txt"), "offset_x=5\nresolution_ratio=0.75\ndeficiency_prob=0.2\ncanvas=32\ntrain_size=4\nval_size=3\n").unwrap();
    std::fs::write(d.join("cfg.txt"), "spec=spec.txt\nepochs=2\nbatch_size=2\nout_dir=run\n").unwrap();

    let gen = ok(&wmnet(&["gen-data", "--spec", "spec.txt", "--out", "data"], d));
    assert!(gen.contains("4 train / 3 val"));
    assert!(d.join("data/train/00000_rgb.png").exists());
    assert!(d.join("data/val/annotations.jsonl").exists());

    let train = ok(&wmnet(&["train", "--config", "cfg.txt"], d));
    let report: serde_json::Value = serde_json::from_str(train.trim()).unwrap();
    assert!(report["mAP@0.5"].is_number());
    assert!(d.join("run/model.ckpt").exists());

    let eval = ok(&wmnet(&["eval", "--ckpt", "run/model.ckpt", "--split", "val"], d));
    let again: serde_json::Value = serde_json::from_str(eval.trim()).unwrap();
    assert_eq!(again, report);
    let log = std::fs::read_to_string(d.join("run/metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let forced = ok(&wmnet(&["eval", "--ckpt", "run/model.ckpt", "--split", "val", "--force-gt", "--log", "gt.jsonl"], d));
    let forced: serde_json::Value = serde_json::from_str(forced.trim()).unwrap();
    assert_eq!(forced["mAP@0.5"], 1.0);

    ok(&wmnet(&["plot", "--log", "run/train.jsonl", "--out", "loss.png"], d));
    assert!(image::open(d.join("loss.png")).is_ok());
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.txt"), "sawf=1\ncfm=0\nattention_core=0\n").unwrap();
    let out = wmnet(&["train", "--config", "bad.txt"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let out = wmnet(&["eval", "--ckpt", "missing.ckpt"], d);
    assert!(!out.status.success());

    std::fs::write(d.join("unknown.txt"), "colour=blue\n").unwrap();
    let out = wmnet(&["ablate", "--config", "unknown.txt"], d);
    assert!(!out.status.success());
}

#[test]
fn params_audit_lists_both_cores() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&wmnet(&["params"], dir.path()));
    assert!(out.contains("total"));
    for w in [8, 16, 24, 32] {
        assert!(out.contains(&format!("C={w}")), "{out}");
    }
}

#[test]
fn wavelet_and_wunet_debug_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let rgb = image::RgbImage::from_fn(20, 14, |x, y| image::Rgb([(x * 12) as u8, (y * 17) as u8, ((x + y) * 5) as u8]));
    rgb.save(d.join("rgb.png")).unwrap();
    let ir = image::GrayImage::from_fn(20, 14, |x, y| image::Luma([((x * y) % 256) as u8]));
    ir.save(d.join("ir.png")).unwrap();

    let rt = ok(&wmnet(&["wavelet", "roundtrip", "rgb.png"], d));
    let err: f64 = rt
        .lines()
        .find_map(|l| l.strip_prefix("max_abs_error "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(err <= 1e-6);

    ok(&wmnet(&["wunet", "enhance", "--rgb", "rgb.png", "--ir", "ir.png", "--out", "out.png"], d));
    let out = image::open(d.join("out.png")).unwrap();
    assert_eq!((out.width(), out.height()), (20, 14));
}
