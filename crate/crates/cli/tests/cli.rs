use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use densecat::arch_json::deserialize_architecture;
use densecat::randnet::{RandSpec, SpaceId};
use densecat::zoo::ModelConfig;

fn densecat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_densecat"))
        .args(args)
        .env("DENSECAT_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = densecat(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

fn stage_rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .skip_while(|l| !l.starts_with("stage"))
        .skip(1)
        .take_while(|l| !l.starts_with("head"))
        .map(|l| l.split_whitespace().map(String::from).collect())
        .collect()
}

fn tiny_model(dir: &Path) -> String {
    let cfg = ModelConfig {
        stem_channels: 8,
        growth_rates: vec![8, 8],
        blocks: vec![3, 3],
        num_classes: 10,
        ..ModelConfig::rdnet_t()
    };
    let path = dir.join("tiny.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    path.display().to_string()
}

fn train_config(dir: &Path) -> String {
    let path = dir.join("train.json");
    fs::write(
        &path,
        r#"{"epochs": 2, "warmup_epochs": 1, "batch_size": 16, "base_lr": 0.002}"#,
    )
    .unwrap();
    path.display().to_string()
}

#[test]
fn describe_rdnet_t_has_four_stages() {
    let out = ok(&["describe", "rdnet_t"]);
    let rows = stage_rows(&out);
    assert_eq!(rows.len(), 4);
    let res: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(res, ["56x56", "28x28", "14x14", "7x7"]);
}

#[test]
fn describe_json_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.json");
    ok(&["describe", "--json", path.to_str().unwrap(), "rdnet_s"]);
    let g = deserialize_architecture(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(g.meta.stages.len(), 4);
    assert_eq!(g.param_count(), densecat::zoo::model_by_name("rdnet_s").unwrap().param_count());
}

#[test]
fn describe_ledger_b() {
    let rows = stage_rows(&ok(&["describe", "ledger:b"]));
    let gr: Vec<&str> = rows.iter().map(|r| r[4].as_str()).collect();
    let blocks: Vec<&str> = rows.iter().map(|r| r[5].as_str()).collect();
    assert_eq!(gr, ["120"; 4]);
    assert_eq!(blocks, ["3", "3", "12", "3"]);
}

#[test]
fn unknown_preset_lists_presets() {
    let o = densecat(&["describe", "rdnet_xl"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("rdnet_t") && err.contains("densenet201"), "{err}");
}

#[test]
fn usage_error_exits_one() {
    assert_eq!(densecat(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(densecat(&["count"]).status.code(), Some(1));
}

fn field(text: &str, key: &str) -> u64 {
    let line = text.lines().find(|l| l.starts_with(key)).unwrap();
    line.split_whitespace().nth(1).unwrap().parse().unwrap()
}

#[test]
fn count_anchors() {
    let macs = field(&ok(&["count", "ledger:b", "--input", "224"]), "macs:") as f64;
    assert!((macs / 11.1e9 - 1.0).abs() <= 0.10, "{macs}");
    let params = field(&ok(&["count", "ledger:a"]), "params:") as f64;
    assert!((params / 20.0e6 - 1.0).abs() <= 0.02, "{params}");
}

#[test]
fn count_conv_macs_scale_by_a_quarter() {
    let dir = tempfile::tempdir().unwrap();
    let big = dir.path().join("448");
    let small = dir.path().join("224");
    ok(&["count", "rdnet_t", "--input", "448", "--out", big.to_str().unwrap()]);
    ok(&["count", "rdnet_t", "--input", "224", "--out", small.to_str().unwrap()]);
    let rows = |p: &Path| -> Vec<(String, String, u64)> {
        fs::read_to_string(p.join("cost.csv"))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f[0].to_string(), f[1].to_string(), f[3].parse().unwrap())
            })
            .collect()
    };
    let (a, b) = (rows(&big), rows(&small));
    assert_eq!(a.len(), b.len());
    let mut convs = 0;
    for ((name, kind, m_big), (name2, _, m_small)) in a.iter().zip(&b) {
        assert_eq!(name, name2);
        if kind == "conv2d" {
            assert_eq!(*m_big, 4 * m_small, "{name}");
            convs += 1;
        }
    }
    assert!(convs > 50);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(big.join("cost.json")).unwrap()).unwrap();
    assert_eq!(json["schema"], "densecat.cost/v1");
    // 112 leaves a 7×7 map in front of the last 2×2 patch downsample
    let o = densecat(&["count", "rdnet_t", "--input", "112"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not divisible"));
}

#[test]
fn gradcheck_pass_and_negative_control() {
    let out = ok(&["gradcheck", "--ops", "conv2d"]);
    assert!(out.starts_with("PASS conv2d"), "{out}");
    assert_eq!(out.lines().count(), 1);
    ok(&["gradcheck", "--ops", "all"]);
    let bad = densecat(&["gradcheck", "--ops", "conv2d", "--inject-fault", "0.01"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(stdout(&bad).starts_with("FAIL conv2d"));
    assert_eq!(densecat(&["gradcheck", "--ops", "conv9d"]).status.code(), Some(1));
}

#[test]
fn train_smoke_writes_three_files_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(dir.path());
    let cfg = train_config(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "train", &model, "--n", "64", "--config", &cfg, "--seed", "7", "--out", out.to_str().unwrap(),
        ]);
        out
    };
    let a = run("a");
    let mut files: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(files, ["curves.csv", "meta.json", "summary.json"]);
    let b = run("b");
    assert_eq!(fs::read(a.join("curves.csv")).unwrap(), fs::read(b.join("curves.csv")).unwrap());
    assert_eq!(fs::read(a.join("summary.json")).unwrap(), fs::read(b.join("summary.json")).unwrap());
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["schema"], "densecat.run/v1");
    assert_eq!(summary["status"], "ok");
}

#[test]
fn train_zero_epochs_writes_summary_only() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(dir.path());
    let out = dir.path().join("z");
    ok(&["train", &model, "--n", "32", "--epochs", "0", "--out", out.to_str().unwrap()]);
    assert!(out.join("summary.json").exists());
    assert!(!out.join("curves.csv").exists());
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["epochs_completed"], 0);
    assert!(s["initial_eval_acc"].is_number());
}

fn tiny_spec(dir: &Path) -> String {
    let spec = RandSpec {
        depth: [1, 3],
        widths: vec![4, 8],
        growth_rates: vec![4, 4],
        input_size: 8,
        ..RandSpec::space(SpaceId::C)
    };
    let path = dir.join("spec.json");
    fs::write(&path, serde_json::to_string(&spec).unwrap()).unwrap();
    path.display().to_string()
}

#[test]
fn randnet_sample_is_reproducible_and_budget_failures_exit_three() {
    let hash = || -> String {
        let out = ok(&["randnet", "sample", "--spec", "C", "--seed", "1", "--shortcut", "concat", "--max-params", "100000"]);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["schema"], "densecat.randnet_sample/v1");
        v["sample"]["config_hash"].as_str().unwrap().to_string()
    };
    assert_eq!(hash(), hash());
    let o = densecat(&["randnet", "sample", "--max-macs", "10"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("max_macs"));
}

#[test]
fn randnet_run_outputs_agree() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(dir.path());
    let cfg = dir.path().join("train.json");
    fs::write(&cfg, r#"{"epochs": 2, "warmup_epochs": 1, "batch_size": 8, "base_lr": 0.01}"#).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "randnet", "run", "--spec", &spec, "--pairs", "2", "--seed", "3", "--n", "40", "--image-size", "8",
            "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(),
        ]);
        out
    };
    let a = run("a");
    let csv = fs::read_to_string(a.join("runs.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    for kind in ["add", "concat"] {
        let accs: Vec<f64> = rows.iter().filter(|r| r[1] == kind).map(|r| r[5].parse().unwrap()).collect();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((summary[kind]["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
    }
    assert!(a.join("cdf.csv").exists());
    let b = run("b");
    for f in ["runs.csv", "summary.json", "cdf.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

fn trained_checkpoint(dir: &Path) -> String {
    let model = tiny_model(dir);
    let cfg = train_config(dir);
    let out = dir.join("run");
    ok(&["train", &model, "--n", "48", "--config", &cfg, "--out", out.to_str().unwrap(), "--checkpoint"]);
    out.join("checkpoint").display().to_string()
}

#[test]
fn analyze_reports() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint(dir.path());
    let layers = "stem.norm,stages.0.blocks.0.concat,stages.0.blocks.1.concat,stages.0.blocks.2.concat";
    let cka = ok(&["analyze", "cka", "--checkpoint", &ckpt, "--layers", layers, "--n", "48"]);
    let cells: Vec<Vec<&str>> = cka.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(cells.len(), 16);
    for c in cells.iter().filter(|c| c[0] == c[1]) {
        assert!((c[2].parse::<f64>().unwrap() - 1.0).abs() < 1e-6, "{c:?}");
    }
    let rank = ok(&["analyze", "rank", "--checkpoint", &ckpt, "--layers", layers, "--n", "48", "--tol", "1e-3"]);
    let ranks: Vec<usize> = rank.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(ranks.len(), 4);
    // the concat outputs of one stage contain their predecessors' columns
    assert!(ranks[1..].windows(2).all(|w| w[1] >= w[0]), "{ranks:?}");
    let bad = densecat(&["analyze", "rank", "--checkpoint", &ckpt, "--layers", "nope", "--n", "48"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("available layers"));
}
