//! The `flowstep` binary end to end: exit codes, file outputs, manifests.

use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn flowstep(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowstep"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn flowstep")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn header(path: &Path) -> serde_json::Value {
    let bytes = std::fs::read(path).unwrap();
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
    serde_json::from_slice(&bytes[..nl]).unwrap()
}

const SMALL_RUN: &str = r#"seed = 1
[data]
path = "d.bin"
[model]
hidden_dim = 16
depth = 1
[train]
iterations = 60
lr = 1e-3
lr_decay_milestones = [20, 40]
log_every = 0
"#;

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["--help"][..], &["--version"], &["sweep", "--help"]] {
        let o = flowstep(dir.path(), args);
        assert_eq!(code(&o), 0, "{args:?}");
        assert!(!o.stdout.is_empty());
    }
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 5] = [
        &["distill", "--out", "x"],
        &["no-such-command"],
        &["gen-data", "--kind", "spiral", "--n", "10", "--out", "d.bin"],
        &["gen-data", "--kind", "two_gaussians", "--n", "10"],
        &["sweep", "--out", "s.csv"],
    ];
    for args in cases {
        let o = flowstep(dir.path(), args);
        assert_eq!(code(&o), 1, "{args:?}: {}", stderr(&o));
    }
    let o = flowstep(dir.path(), &["gen-data", "--kind", "spiral", "--n", "10", "--out", "d.bin"]);
    for kind in ["two_gaussians", "gaussian_ring", "checkerboard", "cond_upsample"] {
        assert!(stderr(&o).contains(kind), "{}", stderr(&o));
    }
}

#[test]
fn gen_data_echoes_dataset_spec_and_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["gen-data", "--kind", "cond_upsample", "--n", "500", "--seed", "7", "--out", "d.bin"];
    assert_eq!(code(&flowstep(dir.path(), &args)), 0);
    let h = header(&dir.path().join("d.bin"));
    assert_eq!(h["kind"], "dataset");
    let spec = &h["hyperparameters"];
    assert_eq!(spec["kind"], "cond_upsample");
    assert_eq!(spec["n"], 500);
    assert_eq!(spec["seed"], 7);
    let first = std::fs::read(dir.path().join("d.bin")).unwrap();

    let again = flowstep(dir.path(), &args);
    assert_eq!(code(&again), 2);
    assert!(stderr(&again).contains("--force"));

    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(code(&flowstep(dir.path(), &forced)), 0);
    assert_eq!(std::fs::read(dir.path().join("d.bin")).unwrap(), first);
}

#[test]
fn train_writes_checkpoint_manifest_and_milestones() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&flowstep(d, &["gen-data", "--kind", "two_gaussians", "--n", "400", "--out", "d.bin"])), 0);
    std::fs::write(d.join("run.toml"), SMALL_RUN).unwrap();
    let o = flowstep(d, &["train", "--method", "ddpm", "--config", "run.toml", "--out", "m.ckpt"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(header(&d.join("m.ckpt"))["method"], "ddpm");
    for it in [20, 40] {
        assert!(d.join(format!("m.ckpt.iter{it}")).exists());
    }

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("m.ckpt.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["loss_curve"].as_array().unwrap().len(), 60);
    assert_eq!(manifest["status"]["state"], "completed");
    // Defaults not given in the file are echoed too.
    assert_eq!(manifest["config"]["train"]["lr_decay_rate"], 0.5);
    assert_eq!(manifest["config"]["ddpm"]["steps"], 1000);
    assert!(manifest["wall_clock_ms"].is_null());
    let lrs: Vec<(u64, f64)> = serde_json::from_value(manifest["lr_changes"].clone()).unwrap();
    assert_eq!(lrs, vec![(0, 1e-3), (20, 5e-4), (40, 2.5e-4)]);

    let o = flowstep(d, &["distill", "--teacher", "m.ckpt", "--config", "run.toml", "--out", "cd.ckpt"]);
    assert_eq!(code(&o), 2, "ddpm teacher must be rejected");
}

#[test]
fn config_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "seed = 1\n[train]\niterations = 10\nlearning_rate = 3\n").unwrap();
    let o = flowstep(dir.path(), &["train", "--config", "bad.toml", "--out", "m.ckpt"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));
}

#[test]
fn sample_and_bespoke_step_count_check() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&flowstep(d, &["gen-data", "--kind", "two_gaussians", "--n", "400", "--out", "d.bin"])), 0);
    let run = format!("{SMALL_RUN}[bespoke]\niterations = 5\nn_train_trajectories = 8\nn_val_trajectories = 8\ndense_steps = 32\n");
    std::fs::write(d.join("run.toml"), run).unwrap();
    assert_eq!(code(&flowstep(d, &["train", "--method", "fm", "--config", "run.toml", "--out", "fm.ckpt"])), 0);
    let o = flowstep(d, &["fit-bespoke", "--base", "fm.ckpt", "--n", "4", "--config", "run.toml", "--out", "b4.bin"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = flowstep(d, &["sample", "--model", "fm.ckpt", "--nfe", "4", "--n", "25", "--transform", "b4.bin", "--out", "s.bin"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let h = header(&d.join("s.bin"));
    assert_eq!(h["tensors"]["samples"]["shape"], serde_json::json!([25, 2]));

    let o = flowstep(d, &["sample", "--model", "fm.ckpt", "--nfe", "5", "--transform", "b4.bin", "--out", "s5.bin"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("fitted for 4 steps"), "{}", stderr(&o));
}

#[test]
fn report_renders_and_rejects_malformed_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("ok.csv"), "method,nfe,frechet\nflow,1,2.5\nflow,10,0.5\ncd,1,0.75\n").unwrap();
    let o = flowstep(d, &["report", "--csv", "ok.csv", "--out", "r", "--log-scale"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let md = std::fs::read_to_string(d.join("r.md")).unwrap();
    assert!(md.contains("| flow | 2.5 | 0.5 |") && md.contains("| cd | 0.75 | |"), "{md}");
    let svg = std::fs::read_to_string(d.join("r.svg")).unwrap();
    assert_eq!(roxmltree::Document::parse(&svg).unwrap().descendants().filter(|n| n.has_tag_name("polyline")).count(), 2);

    std::fs::write(d.join("bad.csv"), "method,nfe,frechet\nflow,1,2.5\nflow,ten,0.5\n").unwrap();
    let o = flowstep(d, &["report", "--csv", "bad.csv", "--out", "q"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("row 2"), "{}", stderr(&o));
}

#[test]
fn default_flow_training_fits_the_time_budget() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("fm.toml"), "method = \"fm\"\n[train]\niterations = 2000\nlog_every = 0\n").unwrap();
    let started = Instant::now();
    let o = flowstep(d, &["train", "--config", "fm.toml", "--out", "fm.ckpt", "--timing"]);
    let secs = started.elapsed().as_secs_f64();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(secs < 300.0, "2000 iterations took {secs:.0}s");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("fm.ckpt.manifest.json")).unwrap()).unwrap();
    assert!(manifest["wall_clock_ms"].as_f64().unwrap() > 0.0);
    assert_eq!(manifest["config"]["model"]["hidden_dim"], 256);
}
