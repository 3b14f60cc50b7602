use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn coopdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coopdet"))
        .args(args)
        .env("COOPDET_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("exp.toml");
    fs::write(
        &path,
        "[run]\nscenario = \"t_junction\"\nframes = 10\nseed = 4\n\n[attention]\nepochs = 3\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_train_compare_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let data = dir.path().join("data");
    let o = coopdet(&["generate", "--config", &cfg, "--out", s(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("train 6, val 2, test 2"));

    let o = coopdet(&["train-attention", "--config", &cfg, "--data", s(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(data.join("attention_loss.csv")).unwrap().lines().count(), 4);

    let report = dir.path().join("report");
    let o = coopdet(&["compare", "--config", &cfg, "--data", s(&data), "--out", s(&report)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let bw = fs::read_to_string(report.join("bandwidth.csv")).unwrap();
    assert!(bw.contains("Learn2com,4718656,4608.06,"), "{bw}");
    for f in ["ap.csv", "map.csv", "plot_data.csv", "ledger.csv"] {
        assert!(report.join(f).exists(), "{f}");
    }

    let o = coopdet(&["inspect", "--config", &cfg, "--data", s(&data), "--frame", "1", "--out", s(&dir.path().join("i"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("1,CombAll,FeaturePayload,9437184,9216"));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let mut runs = Vec::new();
    for run in ["a", "b"] {
        let data = dir.path().join(run);
        assert!(coopdet(&["generate", "--config", &cfg, "--out", s(&data)]).status.success());
        let out = dir.path().join(format!("{run}-report"));
        let o = coopdet(&["compare", "--config", &cfg, "--policies", "LocVehicle,RandSelect,CombAll", "--data", s(&data), "--out", s(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let mut files = vec![fs::read(data.join("manifest.txt")).unwrap()];
        for f in ["ap.csv", "map.csv", "bandwidth.csv", "ledger.csv"] {
            files.push(fs::read(out.join(f)).unwrap());
        }
        runs.push(files);
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn loc_vehicle_only_marks_aib_undefined() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let data = dir.path().join("d");
    assert!(coopdet(&["generate", "--config", &cfg, "--out", s(&data)]).status.success());
    let out = dir.path().join("r");
    let o = coopdet(&["compare", "--config", &cfg, "--policies", "LocVehicle", "--data", s(&data), "--out", s(&out)]);
    assert!(o.status.success());
    assert_eq!(
        fs::read_to_string(out.join("bandwidth.csv")).unwrap(),
        "policy,bytes_per_frame,KB_per_frame,AIB\nLocVehicle,0,0.00,undefined\n"
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let data = dir.path().join("d");
    assert_eq!(coopdet(&["frobnicate"]).status.code(), Some(1));
    let o = coopdet(&["compare", "--config", &cfg, "--policies", "Oracle"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("LocVehicle, RandSelect, CombAll, Learn2com"));
    assert_eq!(coopdet(&["generate", "--config", s(&dir.path().join("missing.toml"))]).status.code(), Some(1));
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[grid]\nomega = 0\n").unwrap();
    assert_eq!(coopdet(&["generate", "--config", s(&bad)]).status.code(), Some(1));

    // missing dataset and missing trained state are data errors
    assert_eq!(coopdet(&["train-attention", "--config", &cfg, "--data", s(&data)]).status.code(), Some(2));
    assert!(coopdet(&["generate", "--config", &cfg, "--frames", "0", "--out", s(&data)]).status.success());
    let o = coopdet(&["compare", "--config", &cfg, "--data", s(&data), "--out", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(coopdet(&["--help"]).status.success());
}

#[test]
fn thread_cap_must_be_positive() {
    let o = Command::new(env!("CARGO_BIN_EXE_coopdet"))
        .args(["generate", "--frames", "0", "--out", "/nonexistent-dir-never-created"])
        .env("COOPDET_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}
