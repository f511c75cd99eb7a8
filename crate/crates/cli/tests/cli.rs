use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swin-mae"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_exit_codes() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&["mask-demo", "--d", "x", "--r", "2", "--ratio", "0.5"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_report_kind() {
    let o = run(&["pretrain"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error kind=config"), "{}", stderr(&o));
    let o = run(&["pretrain", "--set", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("kind=config"));
    let o = run(&["eval", "--set", "data_dir=/nonexistent", "--set", "checkpoint=/nonexistent/c"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["mask-demo", "--d", "1", "--r", "2", "--ratio", "0.5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("kind=invalid_argument"), "{}", stderr(&o));
}

#[test]
fn mask_demo_prints_the_plan() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("plan.ppm");
    let o = run(&["mask-demo", "--d", "4", "--r", "2", "--ratio", "0.75", "--seed", "3", "--out", p(&img)]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("visible windows: 4 of 16"), "{out}");
    assert!(out.contains("masked tokens: 48 of 64"));
    let grid: Vec<&str> = out.lines().filter(|l| l.chars().all(|c| c == '#' || c == '.') && !l.is_empty()).collect();
    assert_eq!(grid.len(), 8);
    assert_eq!(grid.iter().map(|l| l.matches('.').count()).sum::<usize>(), 16);
    assert!(img.exists());
}

#[test]
fn grad_check_passes() {
    let o = run(&["grad-check", "--per-param", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("max relative error"));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = run(&["gen-data", "--out", p(&data), "--unlabeled", "8", "--labeled", "10", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("unlabeled 8 train 8 test 2"));

    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "data_dir = {}\npretrain.epochs = 2\npretrain.batch_size = 4\nfinetune.epochs = 1\nfinetune.batch_size = 4\n",
            data.display()
        ),
    )
    .unwrap();
    let cfg = p(&cfg);

    let pre = dir.path().join("pre");
    let o = run(&["pretrain", "--config", cfg, "--set", &format!("out_dir={}", p(&pre))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(pre.join("loss.csv")).unwrap().lines().count(), 3);
    let ckpt = pre.join("checkpoint.swmae");

    let ft = dir.path().join("ft");
    let o = run(&[
        "finetune",
        "--config",
        cfg,
        "--set",
        &format!("checkpoint={}", p(&ckpt)),
        "--set",
        &format!("out_dir={}", p(&ft)),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("missing 0") && out.contains("mismatched 0"), "{out}");
    assert!(out.contains("MIoU(%)"));

    let ev = dir.path().join("eval");
    let o = run(&[
        "eval",
        "--config",
        cfg,
        "--set",
        &format!("checkpoint={}", p(&ft.join("best.swunet"))),
        "--set",
        &format!("out_dir={}", p(&ev)),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(ev.join("counts.csv").exists() && ev.join("eval.csv").exists());

    let img = std::fs::read_dir(data.join("unlabeled")).unwrap().next().unwrap().unwrap().path();
    let tri = dir.path().join("tri.ppm");
    let o = run(&[
        "reconstruct",
        "--set",
        &format!("checkpoint={}", p(&ckpt)),
        "--image",
        p(&img),
        "--out",
        p(&tri),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(tri.exists());

    let ab = dir.path().join("ablate");
    let o = run(&[
        "ablate",
        "--config",
        cfg,
        "--set",
        &format!("out_dir={}", p(&ab)),
        "--set",
        "pretrain.epochs=1",
        "--suites",
        "masking",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(ab.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.contains("masking,window,") && csv.contains("masking,random,"));
}
