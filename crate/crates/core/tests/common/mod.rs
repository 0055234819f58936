#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn seisnet(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seisnet"))
        .current_dir(cwd)
        .env_remove("SEISNET_OUT_ROOT")
        .args(args)
        .output()
        .expect("spawn seisnet")
}

pub fn ok(cwd: &Path, args: &[&str]) -> Output {
    let out = seisnet(cwd, args);
    assert!(
        out.status.success(),
        "seisnet {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// A tiny synth -> corrupt -> train -> restore -> eval run inside `root`,
/// using only relative paths so manifests are comparable across roots.
pub fn tiny_pipeline(root: &Path) {
    ok(root, &[
        "synth", "--n", "6", "--nt", "32", "--nx", "32", "--n-trainval", "5", "--ratio", "0.6",
        "--seed", "3", "--out-dir", "clean",
    ]);
    ok(root, &[
        "corrupt", "--dataset", "clean/dataset.json", "--variant", "uniform", "--H", "30", "--seed", "4",
        "--out-dir", "corrupted",
    ]);
    ok(root, &[
        "train", "--clean", "clean/dataset.json", "--corrupted", "corrupted/dataset.json", "--task",
        "interpolate", "--patch", "16", "--base-channels", "4", "--max-channels", "8", "--epochs", "3",
        "--gain", "1", "--seed", "5", "--out-dir", "model",
    ]);
    ok(root, &[
        "restore", "--checkpoint", "model/best.ckpt", "--dataset", "corrupted/dataset.json", "--clean",
        "clean/dataset.json", "--stride-t", "8", "--out-dir", "restored",
    ]);
    ok(root, &[
        "eval", "--clean", "clean/dataset.json", "--restored", "restored/dataset.json", "--s-max", "2",
        "--out-dir", "eval",
    ]);
}

/// Every file below `dir` except wall-clock timings, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "timings.json" {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}
