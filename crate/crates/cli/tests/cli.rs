use std::path::Path;
use std::process::{Command, Output};

use mpdiff::harness::RunManifest;
use mpdiff::network::Preset;
use mpdiff::sampler::read_samples;

fn mpdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpdiff")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_run(dir: &Path) -> String {
    let mut m = RunManifest::toy(Preset::G);
    m.resolution = 8;
    m.channels = vec![8, 8];
    m.steps = 48;
    m.snapshot_every = 8;
    m.metrics_every = 16;
    m.classes = 2;
    let mpath = dir.join("toy.manifest");
    m.save(&mpath).unwrap();
    let out = dir.join("run");
    let o = mpdiff(&["train", "--manifest", mpath.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    out.to_str().unwrap().to_string()
}

#[test]
fn selftest_exits_zero() {
    let o = mpdiff(&["selftest"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn unknown_flag_prints_usage() {
    let o = mpdiff(&["selftest", "--bogus"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("Usage"));
    let o = mpdiff(&["frobnicate"]);
    assert!(!o.status.success());
}

#[test]
fn full_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let run = small_run(tmp.path());
    for f in ["metrics.csv", "loss_by_sigma.csv", "run.manifest", "final.phema", "snapshots/manifest.txt"] {
        assert!(Path::new(&run).join(f).exists(), "{f}");
    }

    let o = mpdiff(&["reconstruct-ema", "--run", &run, "--sigma-rel", "0.30", "--out", "unused.phema"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("0.2886"), "{}", stderr(&o));

    let rec = tmp.path().join("rec.phema");
    let o = mpdiff(&[
        "reconstruct-ema",
        "--run",
        &run,
        "--sigma-rel",
        "0.1",
        "--at-step",
        "40",
        "--per-tensor",
        "enc.*=0.05",
        "--out",
        rec.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (snap, _) = mpdiff::ema::read_snapshot(&rec).unwrap();
    assert_eq!(snap.t, 40);

    let sweep = tmp.path().join("sweep.csv");
    let o = mpdiff(&["sweep-ema", "--run", &run, "--points", "5", "--val-samples", "16", "--out", sweep.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&sweep).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "sigma_rel,metric,fit_residual");
    assert_eq!(lines.len(), 6);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 3));

    let o = mpdiff(&["measure", "--run", &run]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("step,gamma,"));
    assert_eq!(text.lines().count(), 1 + 48 / 8);

    let samples = tmp.path().join("s.bin");
    let o = mpdiff(&[
        "sample", "--run", &run, "--count", "3", "--steps", "4", "--guidance", "2", "--class", "1", "--out",
        samples.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (h, x) = read_samples(&samples).unwrap();
    assert_eq!(h.shape, vec![3, 1, 8, 8]);
    assert_eq!(h.class, Some(1));
    assert!(x.all_finite());
}

#[test]
fn missing_run_dir_fails_cleanly() {
    let o = mpdiff(&["measure", "--run", "/nonexistent/run"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error:"));
}
