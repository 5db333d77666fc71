use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 5
n = 30

[apps]
count = 3

[corpus]
pairs_per_cell = 6
port_reuse = 0.2

[net]
d = 4
hidden = 4

[train]
batch_size = 16
learning_rate = 0.003
max_epochs = 2
patience = 2
"#;

fn tunfp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tunfp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = tunfp(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn setup() -> Run {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("run.toml");
    std::fs::write(&config, SMALL).unwrap();
    Run { _dir: dir, root, config }
}

#[test]
fn full_pipeline_produces_reproducible_metrics() {
    let r = setup();
    let cfg = s(&r.config);
    let corpus = r.root.join("corpus");
    let flows = r.root.join("flows");
    let paired = r.root.join("paired");
    let model = r.root.join("model");

    ok(&["--config", cfg, "simulate", "--out", s(&corpus)]);
    for f in ["mapping.csv", "pairs.jsonl", "profiles.toml", "manifest.json"] {
        assert!(corpus.join(f).is_file(), "{f} missing");
    }

    ok(&[
        "--config",
        cfg,
        "ingest",
        "--tls",
        s(&corpus.join("tls")),
        "--tun",
        s(&corpus.join("tun")),
        "--out",
        s(&flows),
    ]);
    let out = ok(&[
        "--config",
        cfg,
        "correlate",
        "--tls-flows",
        s(&flows.join("tls_flows.jsonl")),
        "--tun-flows",
        s(&flows.join("tun_flows.jsonl")),
        "--mapping",
        s(&corpus.join("mapping.csv")),
        "--out",
        s(&paired),
    ]);
    assert!(!out.is_empty());
    let n_pairs = std::fs::read_to_string(paired.join("pairs.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .count();
    // the header line plus one line per pair; 3 apps x 5 profiles x 6
    assert_eq!(n_pairs, 1 + 90);

    ok(&[
        "--config",
        cfg,
        "train",
        "--pairs",
        s(&paired.join("pairs.jsonl")),
        "--out",
        s(&model),
    ]);
    for f in ["model.ckpt", "train_log.jsonl", "metrics.csv", "metrics.txt", "manifest.json"] {
        assert!(model.join(f).is_file(), "{f} missing");
    }

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(model.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["seed"], 5);
    let inputs = manifest["inputs"].as_array().unwrap();
    assert_eq!(inputs.len(), 1);
    assert_eq!(inputs[0]["sha256"].as_str().unwrap().len(), 64);

    // the stored snapshot reproduces the run configuration
    let snap = r.root.join("snap.toml");
    std::fs::write(&snap, manifest["config_toml"].as_str().unwrap()).unwrap();

    let mut tables = Vec::new();
    for (i, c) in [cfg, s(&snap)].into_iter().enumerate() {
        let out = r.root.join(format!("eval{i}"));
        ok(&[
            "--config",
            c,
            "eval",
            "--checkpoint",
            s(&model.join("model.ckpt")),
            "--pairs",
            s(&paired.join("pairs.jsonl")),
            "--buckets",
            "1,10,30",
            "--out",
            s(&out),
        ]);
        tables.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(tables[0], tables[1]);
    let text = String::from_utf8(tables[0].clone()).unwrap();
    assert!(text.lines().count() >= 3, "{text}");

    let fp = r.root.join("fp.csv");
    ok(&[
        "--config",
        cfg,
        "fingerprint",
        "--checkpoint",
        s(&model.join("model.ckpt")),
        "--flows",
        s(&flows.join("tun_flows.jsonl")),
        "--out",
        s(&fp),
    ]);
    let csv = std::fs::read_to_string(&fp).unwrap();
    let header = csv.lines().next().unwrap();
    // 2H fingerprint columns
    assert!(header.ends_with("fp_7"), "{header}");
    assert!(r.root.join("fp.csv.manifest.json").is_file());
}

#[test]
fn unknown_config_key_exits_with_config_status() {
    let r = setup();
    let bad = r.root.join("bad.toml");
    std::fs::write(&bad, "[train]\nbatch = 3\n").unwrap();
    let o = tunfp(&["--config", s(&bad), "simulate", "--out", s(&r.root.join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error: config:"), "{err}");
    assert!(err.contains("batch"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn invalid_value_exits_with_config_status() {
    let r = setup();
    let bad = r.root.join("bad.toml");
    std::fs::write(&bad, "[correlation]\nepsilon = -1.0\n").unwrap();
    let o = tunfp(&["--config", s(&bad), "simulate", "--out", s(&r.root.join("x"))]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_input_is_a_runtime_failure() {
    let r = setup();
    let o = tunfp(&[
        "--config",
        s(&r.config),
        "train",
        "--pairs",
        s(&r.root.join("absent.jsonl")),
        "--out",
        s(&r.root.join("m")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: run:"));
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck"]);
    assert!(out.contains("worst relative error"), "{out}");
    assert!(!out.contains("FAIL"), "{out}");
}

#[test]
fn ablate_and_sweep_write_one_row_per_run() {
    let r = setup();
    let larger = r.root.join("larger.toml");
    std::fs::write(&larger, SMALL.replace("pairs_per_cell = 6", "pairs_per_cell = 10")).unwrap();
    let cfg = s(&larger);
    let corpus = r.root.join("corpus");
    ok(&["--config", cfg, "simulate", "--out", s(&corpus)]);
    let pairs = corpus.join("pairs.jsonl");

    let out = r.root.join("ablate");
    ok(&[
        "--config",
        cfg,
        "ablate",
        "--pairs",
        s(&pairs),
        "--profile",
        "v2ray",
        "--out",
        s(&out),
    ]);
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let variants: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(variants.len(), 6, "{csv}");
    assert!(variants.contains(&"full"), "{csv}");

    let out = r.root.join("sweep");
    ok(&[
        "--config",
        cfg,
        "sweep",
        "--pairs",
        s(&pairs),
        "--profile",
        "v2ray",
        "--lengths",
        "10,30",
        "--out",
        s(&out),
    ]);
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");

    let o = tunfp(&[
        "--config",
        cfg,
        "ablate",
        "--pairs",
        s(&pairs),
        "--profile",
        "no-such-tunnel",
        "--out",
        s(&r.root.join("none")),
    ]);
    assert!(!o.status.success());
}
