use std::path::Path;
use std::process::{Command, Output};

use spiffnet::checkpoint::Checkpoint;
use spiffnet::data;
use spiffnet::model::{Model, ModelConfig};

fn spiffnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spiffnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_checkpoint(path: &Path, scale: usize) {
    let m = Model::<f32>::init(ModelConfig::toy(scale), 3).unwrap();
    Checkpoint::from_model(&m, None, &[]).save(path).unwrap();
}

#[test]
fn params_default_in_expected_range() {
    let o = spiffnet(&["params", "--config", "default"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let total: usize = out.lines().next().unwrap().trim().parse().unwrap();
    assert!((1_450_000..=1_950_000).contains(&total), "{total}");
    let parts: usize = out
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().last().unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(parts, total);
}

#[test]
fn params_reads_config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# ablation\nenable_cspia = false\n").unwrap();
    let a = spiffnet(&["params", "--config", cfg.to_str().unwrap()]);
    let b = spiffnet(&["params", "--config", "default", "--set", "enable_cspia=false"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(stdout(&a), stdout(&b));
}

#[test]
fn sr_upscales_by_checkpoint_scale() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("x4.ckpt");
    write_checkpoint(&ck, 4);
    let input = dir.path().join("in.png");
    let output = dir.path().join("out.png");
    data::save_image(&data::synthetic_scene(48, 48, 1, 0.0), &input).unwrap();
    let o = spiffnet(&[
        "sr",
        "--ckpt",
        ck.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(data::load_image(&output).unwrap().shape(), &[192, 192, 3]);
}

#[test]
fn eval_writes_csv_and_rejects_wrong_scale() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("x2.ckpt");
    write_checkpoint(&ck, 2);
    let hr = dir.path().join("hr");
    std::fs::create_dir(&hr).unwrap();
    for i in 0..2 {
        data::save_image(&data::synthetic_scene(24, 24, i, 0.0), &hr.join(format!("{i}.png"))).unwrap();
    }
    let csv = dir.path().join("scores.csv");
    let args = ["eval", "--ckpt", ck.to_str().unwrap(), "--hr-dir", hr.to_str().unwrap(), "--csv", csv.to_str().unwrap()];
    let o = spiffnet(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert_eq!(text.lines().next(), Some("image,psnr_db,ssim"));

    let mut bad = args.to_vec();
    bad.extend(["--scale", "3"]);
    let o = spiffnet(&bad);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(String::from_utf8_lossy(&o.stderr).lines().count(), 1);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(spiffnet(&["params", "--bogus"]).status.code(), Some(2));
    assert_eq!(spiffnet(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(spiffnet(&[]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one_with_one_line() {
    let o = spiffnet(&["params", "--config", "/no/such/file.cfg"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error:"));
}

#[test]
fn help_lists_defaults() {
    let o = spiffnet(&["train", "--help"]);
    assert_eq!(o.status.code(), Some(0));
    let h = stdout(&o);
    for needle in ["--resume", "[default: default]", "lr = 0.0004", "lr_min = 5e-7", "batch = 8", "epochs = 2000"] {
        assert!(h.contains(needle), "missing {needle}\n{h}");
    }
}

#[test]
fn train_then_resume_appends_log() {
    let dir = tempfile::tempdir().unwrap();
    let hr = dir.path().join("hr");
    std::fs::create_dir(&hr).unwrap();
    data::save_image(&data::synthetic_scene(32, 32, 9, 0.0), &hr.join("a.png")).unwrap();
    let ck = dir.path().join("run.ckpt");
    let base = [
        "train",
        "--config",
        "toy",
        "--data",
        hr.to_str().unwrap(),
        "--out",
        ck.to_str().unwrap(),
        "--set",
        "steps_per_epoch=2",
        "--set",
        "batch=1",
        "--set",
        "patch=8",
        "--epochs",
        "2",
    ];
    let mut first = base.to_vec();
    first.extend(["--stop-after", "2"]);
    assert_eq!(spiffnet(&first).status.code(), Some(0));
    let log = dir.path().join("run.ckpt.log");
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 3);
    let mut second = base.to_vec();
    second.extend(["--resume", ck.to_str().unwrap()]);
    let o = spiffnet(&second);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], "epoch,step,lr,loss");
    assert!(lines[4].starts_with("1,3,"), "{}", lines[4]);
}

#[test]
fn gradcheck_f64_passes() {
    let o = spiffnet(&["gradcheck", "--f64"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.lines().count() > 25);
    assert!(!out.contains("FAIL"));
}
