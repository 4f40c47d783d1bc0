mod common;

use std::fs;
use std::sync::Arc;

use axum::body::Body;
use axum::http::Request;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use common::{ok, run, train_tiny};
use http_body_util::BodyExt;
use priorpath::checkpoint::Checkpoint;
use priorpath::data::{Dataset, Split};
use priorpath::mask::coarsen;
use priorpath::BinaryMask;
use priorpath_service::{router, AppState, Registry, SessionStore};
use tower::ServiceExt;

#[test]
fn help_lists_flags_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let h = ok(dir.path(), &["ingest", "--help"]);
    for want in ["--source", "--dataset", "--stain", "--patch", "512x1024", "--air-limit", "0.85", "--threshold"] {
        assert!(h.contains(want), "ingest help lacks {want}:\n{h}");
    }
    let h = ok(dir.path(), &["synth-corpus", "--help"]);
    for want in ["--n ", "--seed", "--dims", "128x64"] {
        assert!(h.contains(want), "synth-corpus help lacks {want}:\n{h}");
    }
    let h = ok(dir.path(), &["grid-report", "--help"]);
    for want in ["--grid", "3x3", "--plots", "--model"] {
        assert!(h.contains(want), "grid-report help lacks {want}:\n{h}");
    }
    let h = ok(dir.path(), &["generate", "--help"]);
    for want in ["--model", "--rgb-model", "--in", "--out", "--seed"] {
        assert!(h.contains(want), "generate help lacks {want}:\n{h}");
    }
    let h = ok(dir.path(), &["serve", "--help"]);
    assert!(h.contains("--registry") && h.contains("--port"));
    let h = ok(dir.path(), &["train", "--print-config", "pix2pix"]);
    assert!(h.contains("lr0=0.0002"), "{h}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["make-pairs", "--dataset", "ghost"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ghost"));

    let out = run(dir.path(), &["synth-corpus"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(dir.path(), &["synth-corpus", "--n", "4", "--dims", "0x3"]);
    assert_eq!(out.status.code(), Some(1));

    let out = run(dir.path(), &["generate", "fine", "--model", "nope.ckpt", "--in", "a.png", "--out", "b.png"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.ckpt"));

    let out = std::process::Command::new(common::BIN)
        .current_dir(dir.path())
        .env("PRIORPATH_REPRO", "1")
        .args(["--data-root", "data", "synth-corpus", "--n", "4"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));

    // A dataset directory whose manifest is garbage is a validation failure.
    fs::create_dir_all(dir.path().join("data/bad")).unwrap();
    fs::write(dir.path().join("data/bad/manifest.jsonl"), "{").unwrap();
    let out = run(dir.path(), &["make-pairs", "--dataset", "bad"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn make_pairs_matches_coarsen() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth-corpus", "--n", "12", "--seed", "3", "--dims", "64x32", "--dataset", "toy"]);
    let coarse_dir = d.join("data/toy/coarse");
    fs::remove_dir_all(&coarse_dir).unwrap();
    fs::create_dir(&coarse_dir).unwrap();
    ok(d, &["make-pairs", "--dataset", "toy"]);
    let ds = Dataset::open(d.join("data/toy")).unwrap();
    assert_eq!(ds.manifest.records.len(), 12);
    for r in &ds.manifest.records {
        let fine = ds.load_fine(r).unwrap();
        let want = coarsen(&fine).unwrap();
        assert_eq!(ds.load_coarse(r).unwrap(), want, "{}", r.id);
        let bytes = fs::read(ds.path(&r.coarse_mask_path)).unwrap();
        assert_eq!(bytes, want.encode_png().unwrap());
    }
}

#[test]
fn config_file_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth-corpus", "--n", "6", "--seed", "1", "--dims", "32x16", "--dataset", "toy"]);
    fs::write(d.join("cfg.txt"), "# toy\nseed = 9\nmax_steps = 2\n").unwrap();
    let mut args = vec!["train", "pix2pix", "--dataset", "toy", "--out", "run", "--seed", "1", "--max-steps", "5", "--config", "cfg.txt"];
    args.extend_from_slice(common::TINY);
    ok(d, &args);
    let ck = Checkpoint::load(d.join("run/ckpt_final")).unwrap();
    assert_eq!(ck.config.seed, 9);
    assert_eq!(ck.step, 2);
    assert_eq!(ck.config.nets.gen_base, 4);
    assert_eq!((ck.config.patch_width, ck.config.patch_height), (32, 16));

    let out = run(d, &["train", "pix2pix", "--dataset", "toy", "--set", "bogus=1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn repeated_commands_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth-corpus", "--n", "10", "--seed", "2", "--dims", "64x32", "--dataset", "toy"]);
    let a = train_tiny(d, "pix2pix", "toy", "run_a", "4", "6");
    let b = train_tiny(d, "pix2pix", "toy", "run_b", "4", "6");
    let digest = |s: &str| s.lines().find(|l| l.starts_with("metrics digest")).unwrap().to_string();
    assert_eq!(digest(&a), digest(&b));
    assert_eq!(fs::read(d.join("run_a/metrics.log")).unwrap(), fs::read(d.join("run_b/metrics.log")).unwrap());
    assert_eq!(fs::read(d.join("run_a/ckpt_final")).unwrap(), fs::read(d.join("run_b/ckpt_final")).unwrap());

    train_tiny(d, "hd", "toy", "run_hd", "4", "2");

    let ds = Dataset::open(d.join("data/toy")).unwrap();
    let r = ds.manifest.split(Split::Test).next().unwrap();
    let input = ds.path(&r.coarse_mask_path);
    let input = input.to_str().unwrap();
    for out in ["f1.png", "f2.png"] {
        ok(d, &["generate", "fine", "--model", "run_a/ckpt_final", "--in", input, "--out", out, "--seed", "11"]);
    }
    for out in ["p1.png", "p2.png"] {
        ok(d, &["generate", "pipeline", "--model", "run_a/ckpt_final", "--rgb-model", "run_hd/ckpt_final", "--in", input, "--out", out, "--seed", "11"]);
    }
    assert_eq!(fs::read(d.join("f1.png")).unwrap(), fs::read(d.join("f2.png")).unwrap());
    assert_eq!(fs::read(d.join("p1.png")).unwrap(), fs::read(d.join("p2.png")).unwrap());
    let rgb = image::open(d.join("p1.png")).unwrap();
    assert_eq!((rgb.width(), rgb.height()), (64, 32));

    for report in ["r1.tsv", "r2.tsv"] {
        ok(d, &["evaluate", "--dataset", "toy", "--models", "run_a/ckpt_final,reference,coarse", "--report", report, "--seed", "5"]);
    }
    let r1 = fs::read_to_string(d.join("r1.tsv")).unwrap();
    assert_eq!(r1, fs::read_to_string(d.join("r2.tsv")).unwrap());
    let lines: Vec<&str> = r1.lines().collect();
    assert_eq!(lines[0], "Method\tDataset\tKS\tKL\tFID");
    assert!(lines[1].starts_with("pix2pix\ttoy\t"));
    let reference: Vec<&str> = lines[2].split('\t').collect();
    assert_eq!(reference[0], "reference");
    assert!(reference[4].parse::<f64>().unwrap().abs() <= 1e-6, "{r1}");
    assert_eq!(reference[2].parse::<f64>().unwrap(), 0.0);
}

#[tokio::test(flavor = "multi_thread")]
async fn generate_fine_matches_service() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_path_buf();
    let ck_path = {
        let d = d.clone();
        tokio::task::spawn_blocking(move || {
            ok(&d, &["synth-corpus", "--n", "6", "--seed", "8", "--dims", "32x16", "--dataset", "toy"]);
            train_tiny(&d, "pix2pix", "toy", "run", "1", "3");
            ok(&d, &["register", "--registry", "reg", "--id", "toy-fine", "--checkpoint", "../run/ckpt_final", "--dataset", "toy"]);
            let dup = run(&d, &["register", "--registry", "reg", "--id", "toy-fine", "--checkpoint", "../run/ckpt_final", "--dataset", "toy"]);
            assert_eq!(dup.status.code(), Some(1));
            d.join("run/ckpt_final")
        })
        .await
        .unwrap()
    };
    assert!(ck_path.is_file());
    let coarse = priorpath::data::synth_corpus(77, 1, 32, 16).unwrap().remove(0);
    coarse.save_png(d.join("in.png")).unwrap();
    {
        let d = d.clone();
        tokio::task::spawn_blocking(move || {
            ok(&d, &["generate", "fine", "--model", "run/ckpt_final", "--in", "in.png", "--out", "cli.png", "--seed", "42"]);
        })
        .await
        .unwrap();
    }

    let app = router(AppState {
        registry: Arc::new(Registry::open(d.join("reg")).unwrap()),
        sessions: Arc::new(SessionStore::open(d.join("reg/sessions")).unwrap()),
    });
    let body = serde_json::json!({
        "model_id": "toy-fine",
        "coarse": STANDARD.encode(coarse.encode_png().unwrap()),
        "seed": 42,
    });
    let req = Request::post("/generate/fine")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert!(resp.status().is_success());
    let v: serde_json::Value = serde_json::from_slice(&resp.into_body().collect().await.unwrap().to_bytes()).unwrap();
    let served = STANDARD.decode(v["fine"].as_str().unwrap()).unwrap();
    assert_eq!(served, fs::read(d.join("cli.png")).unwrap());
    BinaryMask::decode_png(&served).unwrap();
}

#[test]
fn grid_report_writes_analysis_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth-corpus", "--n", "40", "--seed", "6", "--dims", "32x16", "--dataset", "toy", "--n-test", "20"]);
    train_tiny(d, "pix2pix", "toy", "run", "1", "2");
    ok(d, &[
        "grid-report", "--dataset", "toy", "--model", "run/ckpt_final", "--grid", "2x2",
        "--out", "grid.json", "--plots", "plots", "--iterations", "300", "--min-count", "2", "--seed", "3",
    ]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("grid.json")).unwrap()).unwrap();
    let cells = v["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 4);
    let total: u64 = cells.iter().map(|c| c["n_real"].as_u64().unwrap() + c["n_synth"].as_u64().unwrap()).sum();
    assert_eq!(total, 40);
    assert!(v["global_fid"].as_f64().unwrap() >= 0.0);
    assert!(d.join("plots/grid.png").is_file());
    assert_eq!(fs::read_to_string(d.join("plots/coords.tsv")).unwrap().lines().count(), 41);
}
