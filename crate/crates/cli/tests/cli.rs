use std::path::Path;
use std::process::{Command, Output};

fn cdnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdnet"))
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

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"
[model.backbone]
stage_depths = [1, 1, 1, 1]
stage_widths = [8, 16, 32, 64]

[model.decoder]
num_queries = 8
decoder_layers = 2
embed_dim = 32
heads = 4
ffn_dim = 64

[optim]
epochs = 1
batch_size = 2
"#;

#[test]
fn synth_train_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let runs = dir.path().join("run");
    let o = cdnet(&[
        "synth",
        "--out",
        s(&data),
        "--n-train",
        "4",
        "--n-val",
        "2",
        "--n-test",
        "2",
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("train: 4 pairs"));
    for split in ["train", "val", "test"] {
        assert!(data.join(split).join("label").is_dir(), "{split}");
    }

    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let o = cdnet(&[
        "train",
        "-c",
        s(&cfg),
        "--data",
        s(&data),
        "--out-dir",
        s(&runs),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("epochs 1"), "{}", stdout(&o));
    let history = std::fs::read_to_string(runs.join("history.csv")).unwrap();
    let mut lines = history.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,L_total,L_set,L_pixel,val_F1,val_IoU,val_OA,lr"
    );
    assert_eq!(lines.count(), 1);

    let ckpt = runs.join("last.ckpt");
    let o = cdnet(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--oracle",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("(2 images)"), "{}", stdout(&o));

    let per_image = dir.path().join("per_image.csv");
    let o = cdnet(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--split",
        "val",
        "--per-image",
        s(&per_image),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = std::fs::read_to_string(&per_image).unwrap();
    assert_eq!(rows.lines().count(), 3);
    assert!(rows.starts_with("id,tp,fp,fn,tn,f1,iou,oa"));

    let o = cdnet(&[
        "curves",
        s(&runs.join("history.csv")),
        "-o",
        s(&dir.path().join("plot")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = std::fs::read_to_string(dir.path().join("plot.svg")).unwrap();
    assert!(svg.contains(r#"data-run="run""#));
    assert!(dir.path().join("plot.csv").is_file());
}

#[test]
fn print_config_shows_overrides() {
    let o = cdnet(&[
        "train",
        "--print-config",
        "--seed",
        "9",
        "--fusion-core",
        "cross",
        "--lambda-set",
        "0.5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("seed = 9"));
    assert!(text.contains(r#"fusion_core = "cross""#));
    assert!(text.contains("lambda_set = 0.5"));
}

#[test]
fn audit_flags_the_reported_pair() {
    let o = cdnet(&["audit"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let levir: Vec<&str> = text.lines().filter(|l| l.contains("LEVIR-CD")).collect();
    assert_eq!(levir.len(), 2);
    assert!(levir[0].contains("0.921") && levir[0].ends_with("inconsistent"));
    assert!(levir[1].contains("0.919") && levir[1].ends_with(" consistent"));
    assert!(levir[0].contains("[0.91863, 0.91921)"));
}

#[test]
fn audit_reads_a_user_table() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.csv");
    std::fs::write(
        &p,
        "method,dataset,f1,iou,oa,decimals\nA,X,0.9192,0.8505,,\nB,Y,0.95,0.80,,\n",
    )
    .unwrap();
    let o = cdnet(&["audit", s(&p)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.lines().nth(1).unwrap().ends_with(" consistent"));
    assert!(text.lines().nth(2).unwrap().ends_with("inconsistent"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(cdnet(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(cdnet(&[]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.toml");
    let o = cdnet(&["train", "-c", s(&missing)]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[optim]\nepochs = 0\n").unwrap();
    let o = cdnet(&["train", "-c", s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("epochs"), "{}", stderr(&o));
    assert_eq!(cdnet(&["curves", "-o", "x"]).status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = cdnet(&[
        "eval",
        "--checkpoint",
        s(&dir.path().join("none.ckpt")),
        "--data",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let h = dir.path().join("history.csv");
    std::fs::write(&h, "epoch,L_total\n1,x\n").unwrap();
    let o = cdnet(&["curves", s(&h), "-o", s(&dir.path().join("c"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn help_and_version_succeed() {
    let o = cdnet(&["--help"]);
    assert!(o.status.success());
    for sub in ["train", "eval", "synth", "audit", "curves"] {
        assert!(stdout(&o).contains(sub));
    }
    assert!(cdnet(&["--version"]).status.success());
}
