use std::fs;
use std::path::Path;
use std::process::Command;

fn sdaf(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sdaf")).args(args).env("RUST_LOG", "warn").output().expect("spawn sdaf")
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("exp.toml");
    fs::write(
        &path,
        r#"
method = "SDAF"
memory_size = 20
feature_dim = 16
save_checkpoints = false

[dataset]
kind = "synthetic"
classes = 4
train_per_class = 10
test_per_class = 4
side = 8
"#,
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_report_plot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();

    let o = sdaf(&[
        "run", "--config", &cfg, "--out", out_s, "--stages", "2", "--batch-size", "5", "--class-order-seed", "3",
        "--ncm-metric", "euclidean", "--seed-count", "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stored: serde_json::Value = serde_json::from_slice(&fs::read(out.join("seed_0/config.json")).unwrap()).unwrap();
    assert_eq!(stored["batch_size"], 5);
    assert_eq!(stored["seeds"]["class_order"], 3);
    assert_eq!(stored["ncm_metric"], "euclidean");
    let seed1: serde_json::Value = serde_json::from_slice(&fs::read(out.join("seed_1/config.json")).unwrap()).unwrap();
    assert_eq!(seed1["seeds"]["class_order"], 4);

    let o = sdaf(&["report", "--in", out_s, "--format", "csv"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("method,memory_size,runs,"));
    assert!(lines.next().unwrap().starts_with("SDAF,20,2,"));

    let latex = dir.path().join("t.tex");
    let o = sdaf(&["report", "--in", out_s, "--format", "json", "--latex", latex.to_str().unwrap()]);
    assert!(o.status.success());
    let rows: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rows[0]["runs"], 2);
    assert!(fs::read_to_string(&latex).unwrap().contains("SDAF & "));

    for kind in ["confusion", "scree", "accuracy"] {
        let o = sdaf(&["plot", "--in", out.join("seed_0").to_str().unwrap(), "--kind", kind]);
        assert!(o.status.success(), "{kind}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(out.join(format!("seed_0/{kind}.svg")).exists());
    }
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = sdaf(&["run", "--config", &cfg, "--out", "x", "--ncm-metric", "cosine"]);
    assert!(!o.status.success());
    let o = sdaf(&["run", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap(), "--stages", "0"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("stages"));
    let o = sdaf(&["report", "--in", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
}
