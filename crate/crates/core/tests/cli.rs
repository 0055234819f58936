mod common;

use common::{ok, seisnet, tiny_pipeline};
use serde_json::Value;

fn json(path: &std::path::Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn pipeline_writes_manifests_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    tiny_pipeline(root);

    let m = json(&root.join("model/manifest.json"));
    assert_eq!(m["tool"], "seisnet");
    assert_eq!(m["subcommand"], "train");
    assert_eq!(m["seeds"]["seed"], 5);
    let outputs: Vec<&str> = m["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(outputs.contains(&"best.ckpt") && outputs.contains(&"history.csv"));
    assert!(root.join("model/timings.json").exists());

    let history = std::fs::read_to_string(root.join("model/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 4);

    let restored = json(&root.join("restored/dataset.json"));
    let eval_split: Vec<_> = restored["gathers"].as_array().unwrap().iter().collect();
    assert_eq!(eval_split.len(), 6);

    let metrics = std::fs::read_to_string(root.join("eval/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "report,gather,snr_db,psnr_db");
    assert_eq!(metrics.lines().count(), 7);
    assert!(root.join("eval/summary.json").exists());

    ok(root, &[
        "restore", "--checkpoint", "model/best.ckpt", "--dataset", "corrupted/dataset.json", "--split",
        "evaluation", "--out-dir", "held_out",
    ]);
    ok(root, &["eval", "--clean", "clean/dataset.json", "--restored", "held_out/dataset.json", "--out-dir", "e2"]);
    let metrics = std::fs::read_to_string(root.join("e2/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    let row = metrics.lines().nth(1).unwrap();
    let held: Vec<_> = json(&root.join("clean/dataset.json"))["gathers"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|e| e["split"] == "evaluation")
        .map(|e| e["path"].as_str().unwrap().trim_end_matches(".sgth").to_string())
        .collect();
    assert_eq!(held.len(), 1);
    assert!(row.starts_with(&format!("eval,{},", held[0])), "{row}");
}

#[test]
fn spectrum_and_report_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(root, &["synth", "--n", "2", "--nt", "32", "--nx", "16", "--seed", "1", "--out-dir", "clean"]);
    ok(root, &[
        "corrupt", "--dataset", "clean/dataset.json", "--variant", "regular", "--factor", "2", "--out-dir", "dec",
    ]);
    let out = ok(root, &["spectrum", "--gather", "dec/gather_0000.sgth", "--out-dir", "fk"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("alias energy ratio"));
    let alias = json(&root.join("fk/alias.json"));
    assert!((alias["alias_energy_ratio"].as_f64().unwrap() - 0.5).abs() < 1e-9);
    assert!(root.join("fk/spectrum.png").exists() && root.join("fk/spectrum.json").exists());

    ok(root, &[
        "report", "--clean", "clean/dataset.json", "--corrupted", "dec/dataset.json", "--out-dir", "rep",
    ]);
    assert!(root.join("rep/metrics.csv").exists());
    let pngs = std::fs::read_dir(root.join("rep"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert!(pngs >= 4);
}

#[test]
fn out_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_seisnet"))
        .current_dir(dir.path())
        .env("SEISNET_OUT_ROOT", "runs")
        .args(["synth", "--n", "1", "--nt", "16", "--nx", "16"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("runs/synth/dataset.json").exists());
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let code = |args: &[&str]| {
        let out = seisnet(root, args);
        (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
    };

    let (c, _) = code(&["frobnicate"]);
    assert_eq!(c, 2);

    let (c, err) = code(&["spectrum", "--gather", "missing.sgth", "--out-dir", "o"]);
    assert_eq!(c, 3);
    assert!(err.starts_with("error[io]: "));
    assert_eq!(err.trim_end().lines().count(), 1);

    std::fs::write(root.join("bad.sgth"), b"NOPE0000000000000000").unwrap();
    let (c, err) = code(&["spectrum", "--gather", "bad.sgth", "--out-dir", "o"]);
    assert_eq!(c, 4, "{err}");

    ok(root, &["synth", "--n", "1", "--nt", "16", "--nx", "16", "--out-dir", "s"]);
    let bytes = std::fs::read(root.join("s/gather_0000.sgth")).unwrap();
    std::fs::write(root.join("short.sgth"), &bytes[..bytes.len() - 8]).unwrap();
    let (c, _) = code(&["spectrum", "--gather", "short.sgth", "--out-dir", "o"]);
    assert_eq!(c, 6);

    let (c, err) = code(&["corrupt", "--dataset", "s/dataset.json", "--variant", "uniform", "--H", "150"]);
    assert_eq!(c, 9, "{err}");

    let (c, _) = code(&["corrupt", "--dataset", "s/dataset.json", "--variant", "burst"]);
    assert_eq!(c, 10);

    let (c, _) = code(&["--threads", "0", "synth", "--n", "1"]);
    assert_eq!(c, 10);

    std::fs::write(root.join("cfg.json"), b"{not json").unwrap();
    let (c, _) = code(&["synth", "--config", "cfg.json"]);
    assert_eq!(c, 13);
}
