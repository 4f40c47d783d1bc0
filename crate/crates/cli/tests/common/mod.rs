#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_priorpath");

/// Runs the binary with `--data-root <root>` in `cwd`.
pub fn run(cwd: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(cwd)
        .env_remove("PRIORPATH_REPRO")
        .env_remove("PRIORPATH_DATA")
        .arg("--data-root")
        .arg(cwd.join("data"))
        .args(args)
        .output()
        .expect("spawn priorpath")
}

pub fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = run(cwd, args);
    assert!(
        out.status.success(),
        "{args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Small nets so a training command takes well under a second per step.
pub const TINY: &[&str] = &[
    "--set", "gen_base=4",
    "--set", "disc_base=4",
    "--set", "disc_layers=2",
    "--set", "res_blocks=1",
];

pub fn train_tiny(cwd: &Path, family: &str, dataset: &str, out: &str, seed: &str, steps: &str) -> String {
    let mut args = vec!["train", family, "--dataset", dataset, "--out", out, "--seed", seed, "--max-steps", steps];
    args.extend_from_slice(TINY);
    ok(cwd, &args)
}
