//! Artifacts built once per test binary by running the real `pscbm` binary.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

pub struct Fixture {
    pub dir: PathBuf,
    pub data: PathBuf,
    pub cbm: PathBuf,
    pub pscbm: PathBuf,
}

pub fn pscbm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pscbm"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// Runs the binary and panics with its stderr unless it succeeds.
pub fn ok(args: &[&str]) -> String {
    let out = pscbm(args);
    assert!(
        out.status.success(),
        "pscbm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A fresh directory under the cargo target tmpdir.
pub fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Small synthetic data (400/100/100 rows), a CBM and a global PSCBM.
pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = scratch("fixture");
        let data = dir.join("data");
        let cbm = dir.join("cbm.json");
        let pscbm = dir.join("pscbm.json");
        ok(&[
            "gen-data", "--seed", "3", "--out", s(&data),
            "--set", "n_train=400", "--set", "n_val=100", "--set", "n_test=100",
        ]);
        ok(&["train-cbm", "--data", s(&data), "--out", s(&cbm), "--seed", "3", "--set", "epochs=20"]);
        ok(&[
            "train-pscbm", "--data", s(&data), "--cbm", s(&cbm), "--out", s(&pscbm), "--seed", "3",
            "--set", "epochs=3", "--set", "optimizer.lr=0.01",
        ]);
        Fixture { dir, data, cbm, pscbm }
    })
}
