use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reuse-attn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn table2_csv_rows() {
    let o = run(&["table2", "--format", "csv"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "model,mha_bytes,reuse_bytes,reduction_percent");
    assert_eq!(lines.len(), 9);
    assert!(lines.contains(&"BERT-Large,905.97 MB,150.99 MB,83.33"));
    assert!(lines.contains(&"ALBERT-xxlarge,1.81 GB,226.49 MB,87.50"));
}

#[test]
fn table2_only_one_preset() {
    let o = run(&["table2", "--only", "Llama2-7B", "--format", "csv"]);
    assert_eq!(stdout(&o), "model,mha_bytes,reuse_bytes,reduction_percent\nLlama2-7B,141.73 GB,8.59 GB,93.94\n");
}

#[test]
fn table2_unknown_preset_exits_2() {
    let o = run(&["table2", "--only", "nope"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope"));
}

#[test]
fn table2_jsonl_carries_raw_bytes() {
    let o = run(&["table2", "--only", "bert-large", "--format", "jsonl"]);
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["mha_bytes"], 905_969_664u64);
    assert_eq!(v["reuse_bytes"], 150_994_944u64);
    assert_eq!(v["model"], "BERT-Large");
}

#[test]
fn table2_markdown_is_default() {
    let o = run(&["table2"]);
    let text = stdout(&o);
    assert!(text.starts_with("| model | mha_bytes | reuse_bytes | reduction_percent |\n|---|---|---|---|\n"));
}

#[test]
fn table2_reads_extra_presets() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("presets.txt");
    std::fs::write(&path, "# toy\nToy, 2, 16, 8, 2\n").unwrap();
    let o = run(&["table2", "--presets", path.to_str().unwrap(), "--only", "toy", "--format", "csv"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("Toy,"));
}

fn sweep_records(args: &[&str]) -> Vec<serde_json::Value> {
    let mut all = vec!["sweep", "--format", "jsonl"];
    all.extend_from_slice(args);
    let o = run(&all);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn sweep_powers_of_two() {
    let recs = sweep_records(&["--from", "64", "--to", "4096", "-d", "64", "--heads", "16"]);
    assert_eq!(recs.len(), 14);
    for pair in recs.chunks(2) {
        assert_eq!(pair[0]["mechanism"], "multi_head");
        assert_eq!(pair[1]["mechanism"], "reuse");
        assert!(pair[1]["total_bytes"].as_u64() < pair[0]["total_bytes"].as_u64());
    }
    for mech in ["multi_head", "reuse"] {
        let bytes: Vec<u64> = recs
            .iter()
            .filter(|r| r["mechanism"] == mech)
            .map(|r| r["total_bytes"].as_u64().unwrap())
            .collect();
        assert!(bytes.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn sweep_single_head_rows_agree() {
    let recs = sweep_records(&["--tokens", "100", "--heads", "1"]);
    assert_eq!(recs.len(), 2);
    for key in ["loads", "stores", "total_bytes", "flops", "intensity"] {
        assert_eq!(recs[0][key], recs[1][key], "{key}");
    }
}

#[test]
fn sweep_empty_range_exits_2() {
    assert_eq!(run(&["sweep", "--from", "512", "--to", "64"]).status.code(), Some(2));
    assert_eq!(run(&["sweep", "--tokens", "64,32"]).status.code(), Some(2));
}

#[test]
fn verify_default_passes_and_is_stable() {
    let a = run(&["verify"]);
    assert_eq!(a.status.code(), Some(0));
    assert!(stdout(&a).ends_with("5 suites, 0 failures\n"));
    let b = run(&["verify"]);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn verify_zero_trials_exits_2() {
    assert_eq!(run(&["verify", "--trials", "0"]).status.code(), Some(2));
}

#[test]
fn forward_tiny_with_traffic() {
    let o = run(&["forward", "--variant", "tiny", "--res", "224", "--batch", "1", "--traffic"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("stage grids: 14x14 (196 tokens), 7x7 (49 tokens), 4x4 (16 tokens)"));
    assert!(text.contains("logits: 1x1000"));
    let rows: Vec<&str> = text.lines().filter(|l| l.starts_with("| ") && l.ends_with("| yes |")).collect();
    assert_eq!(rows.len(), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("wall time"));
    // timing goes to stderr so stdout stays byte-stable
    let again = run(&["forward", "--variant", "tiny", "--res", "224", "--batch", "1", "--traffic"]);
    assert_eq!(o.stdout, again.stdout);
}

#[test]
fn forward_large_logits_shape() {
    let o = run(&["forward", "--variant", "large", "--res", "224"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("logits: 1x1000"));
}

#[test]
fn forward_rejects_bad_inputs() {
    assert_eq!(run(&["forward", "--res", "100"]).status.code(), Some(2));
    let o = run(&["forward", "--variant", "huge"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    for v in ["tiny", "small", "medium", "large"] {
        assert!(err.contains(v));
    }
}

#[test]
fn forward_saves_weights() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.unif");
    let o = run(&["forward", "--res", "32", "--classes", "4", "--save", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(&std::fs::read(&path).unwrap()[..4], b"UNIF");
}

fn roofline_records(args: &[&str]) -> Vec<serde_json::Value> {
    let mut all = vec!["roofline", "--format", "jsonl"];
    all.extend_from_slice(args);
    let o = run(&all);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn roofline_llama_on_rpi() {
    let recs = roofline_records(&["--preset", "Llama2-7B", "--device", "RPi3B", "--mechanisms", "mha"]);
    assert_eq!(recs.len(), 1);
    assert!(recs[0]["time_bound_s"].as_f64().unwrap() >= 8.337);
}

#[test]
fn roofline_reuse_never_slower_and_device_ratio() {
    let recs = roofline_records(&["--preset", "ViT-Base", "--device", "H100,RPi3B"]);
    assert_eq!(recs.len(), 4);
    let t = |dev: &str, mech: &str| {
        recs.iter()
            .find(|r| r["device"] == dev && r["mechanism"] == mech)
            .unwrap()["time_bound_s"]
            .as_f64()
            .unwrap()
    };
    for dev in ["H100", "RPi3B"] {
        assert!(t(dev, "reuse") <= t(dev, "multi_head"));
    }
    let ratio = t("RPi3B", "multi_head") / t("H100", "multi_head");
    assert!((196.0..=198.0).contains(&ratio), "{ratio}");
}

#[test]
fn roofline_unknown_device_exits_2() {
    assert_eq!(run(&["roofline", "--device", "abacus"]).status.code(), Some(2));
}

#[test]
fn roofline_reads_device_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dev.txt");
    std::fs::write(&path, "Laptop, 50\n").unwrap();
    let recs = roofline_records(&["--devices", path.to_str().unwrap(), "--device", "laptop", "--mechanisms", "reuse"]);
    assert_eq!(recs[0]["device"], "Laptop");
}
