use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_collapse-lab"))
        .args(args)
        .env("COLLAPSE_LAB_OUT", out)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn scalar_subcommands_print_one_value() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["eta", "--a", "0"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim().parse::<f64>().unwrap(), 1.0);

    let o = run(&["stabilize", "--lambda", "0.5"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let a: f64 = stdout(&o).trim().parse().unwrap();
    let eta = collapse_core::mathcore::eta(collapse_core::mathcore::TailThreshold::new(a).unwrap());
    assert!((eta - 2.0).abs() < 1e-9);
}

#[test]
fn invalid_arguments_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["eta", "--a", "-1"][..], &["stabilize", "--lambda", "1.5"], &["frobnicate"], &["eta"]] {
        let o = run(args, dir.path());
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(!stderr(&o).is_empty());
    }
    assert_eq!(run(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn config_errors_name_the_offending_key() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("gaussian.lamda = 0.9\n", "gaussian", "gaussian.lamda"),
        ("gmm.k = two\n", "gmm", "gmm.k"),
        ("lm.arms = ce, mse\n", "lm", "lm.arms"),
        ("this line has no equals sign\n", "lm", "line 1"),
    ];
    for (text, sub, needle) in cases {
        let cfg = dir.path().join("bad.cfg");
        std::fs::write(&cfg, text).unwrap();
        let o = run(&[sub, "--config", cfg.to_str().unwrap()], dir.path());
        assert_eq!(o.status.code(), Some(1), "{text}");
        assert!(stderr(&o).contains(needle), "{}", stderr(&o));
    }
    let o = run(&["gmm", "--config", dir.path().join("missing.cfg").to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn report_refuses_a_directory_without_a_finished_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["report", "--run", dir.path().to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("manifest"));
}

#[test]
fn gaussian_run_writes_manifest_and_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("g.cfg");
    std::fs::write(&cfg, "run.name = tiny\nseeds = 2\ngaussian.n_samples = 100\ngaussian.generations = 3\n").unwrap();
    let o = run(&["gaussian", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let root = dir.path().join("tiny");
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(root.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "complete");
    assert_eq!(manifest["subcommand"], "gaussian");
    assert_eq!(manifest["config"]["gaussian.generations"], "3");
    assert!(manifest["rng_algorithm"].as_str().unwrap().contains("xoshiro256"));

    let csv = std::fs::read_to_string(root.join("trajectory_seed1.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("generation,mu_hat,sigma_hat,retained_count"));
}

#[test]
fn kr_eval_rejects_a_corrupt_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.bin");
    let questions = dir.path().join("q.tsv");
    std::fs::write(&ckpt, b"not a checkpoint").unwrap();
    std::fs::write(&questions, "").unwrap();
    let o = run(
        &["kr-eval", "--checkpoint", ckpt.to_str().unwrap(), "--questions", questions.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
