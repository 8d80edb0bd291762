use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use unlearn_core::{HessianEnsemble, StabilityReport};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_unlearn-stab"));
    c.env_remove("UNLEARN_STAB_SEED");
    c
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().expect("spawn")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

const SMALL_SWEEP: [&str; 9] = [
    "sweep",
    "--q-list",
    "1,10,50",
    "--b-list",
    "5,10",
    "--steps",
    "150",
    "--repeats",
    "3",
];

#[test]
fn empty_config_runs_demo_simulation() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("empty.cfg"), "").unwrap();
    let o = run(&["--config", "empty.cfg"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("# mode=simulate\n# seed=0\n"), "{out}");
    assert!(out.contains("repeat,seed,log_ratio,diverged\n"));
    assert_eq!(out.lines().filter(|l| !l.starts_with('#')).count(), 11);
}

#[test]
fn unknown_key_is_a_config_error_without_output() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "eta=0.5\nbogus_key=3\n").unwrap();
    let o = run(&["sweep", "--config", "bad.cfg", "--output", "out.csv"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus-key"), "{}", stderr(&o));
    assert_eq!(
        fs::read_dir(dir.path()).unwrap().count(),
        1,
        "only the config file may remain"
    );
}

#[test]
fn malformed_values_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["sweep", "--eta", "fast"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("eta"));
    let o = run(&["simulate", "--emit-plot-data"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["simulate", "--batch", "50"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn runtime_failures_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["coherence", "--max-pairs", "4"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn sweep_writes_schema_and_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = SMALL_SWEEP.to_vec();
    args.extend(["--seed", "42", "--output", "phase.csv", "--emit-plot-data"]);
    let o = run(&args, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("phase.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(
        rows[0],
        "q,batch,sigma,lambda_max_D,thr_div,thr_conv_statement,thr_conv_proof,n_repeats,n_diverged,outcome"
    );
    assert_eq!(rows.len(), 7);
    assert!(rows[1..]
        .iter()
        .all(|r| r.ends_with("DIVERGE") || r.ends_with("CONVERGE")));
    let dat = fs::read_to_string(dir.path().join("phase.curves.dat")).unwrap();
    assert!(dat.contains("# q=10"));
    assert!(!stdout(&o).contains("q,batch"));
}

#[test]
fn echoed_config_reproduces_the_output() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = SMALL_SWEEP.to_vec();
    args.extend(["--seed", "7", "--eta", "0.8", "--output", "a.csv"]);
    assert!(run(&args, dir.path()).status.success());
    let a = fs::read_to_string(dir.path().join("a.csv")).unwrap();
    let cfg: String = a
        .lines()
        .filter_map(|l| l.strip_prefix("# "))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(dir.path().join("echo.cfg"), cfg).unwrap();
    let o = run(&["--config", "echo.cfg", "--output", "b.csv"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(a, fs::read_to_string(dir.path().join("b.csv")).unwrap());
}

#[test]
fn output_does_not_depend_on_workers() {
    let dir = tempfile::tempdir().unwrap();
    let mut outs = Vec::new();
    for w in ["1", "3"] {
        let mut args = SMALL_SWEEP.to_vec();
        args.extend(["--seed", "11", "--workers", w]);
        let o = run(&args, dir.path());
        assert!(o.status.success());
        outs.push(stdout(&o));
    }
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["simulate", "--repeats", "2", "--steps", "10"])
        .env("UNLEARN_STAB_SEED", "123")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(stdout(&o).contains("# seed=123\n"));
    let o = bin()
        .args(["simulate", "--repeats", "2", "--steps", "10", "--seed", "5"])
        .env("UNLEARN_STAB_SEED", "123")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(stdout(&o).contains("# seed=5\n"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.cfg"), "mode=simulate\nsteps=10\nrepeats=2\nseed=3\n").unwrap();
    let o = run(&["simulate", "--config", "c.cfg", "--repeats", "4"], dir.path());
    let out = stdout(&o);
    assert!(
        out.contains("# repeats=4\n") && out.contains("# steps=10\n") && out.contains("# seed=3\n"),
        "{out}"
    );
}

#[test]
fn coherence_record_round_trips_through_exported_ensemble() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &["construct", "--kind", "q", "--n", "10", "--q", "5", "-o", "q.ens"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("q.ens")).unwrap();
    let ens = HessianEnsemble::parse(&text).unwrap();
    assert_eq!((ens.n_retain(), ens.n_forget()), (10, 10));

    let from_file = stdout(&run(&["coherence", "--ensemble", "q.ens"], dir.path()));
    let demo = stdout(&run(&["coherence"], dir.path()));
    let strip = |s: &str| s.lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(&from_file), strip(&demo));
    let report = StabilityReport::parse_record(&from_file).unwrap();
    assert!((report.lambda_max_d - 2.0).abs() < 1e-12);
}

#[test]
fn matching_construction_hits_its_targets() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &[
            "construct",
            "--kind",
            "matching",
            "--sigma",
            "100",
            "--lambda",
            "0.7",
            "-o",
            "m.ens",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let rec = stdout(&run(&["coherence", "--ensemble", "m.ens", "--batch", "10"], dir.path()));
    let r = StabilityReport::parse_record(&rec).unwrap();
    assert!(
        (r.sigma - 100.0).abs() < 1e-8 && (r.lambda_max_d - 0.7).abs() < 1e-10,
        "{rec}"
    );
}

#[test]
fn cnn_train_writes_forget_trace() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &[
            "cnn-train",
            "--d",
            "20",
            "--epochs",
            "20",
            "--steps",
            "5",
            "--n-test",
            "50",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<String> = stdout(&o)
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(String::from)
        .collect();
    assert_eq!(rows[0], "step,forget_loss");
    assert_eq!(rows.len(), 7);
    assert!(stderr(&o).contains("train_loss="));
}

#[test]
fn cnn_grids_use_documented_headers() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &[
            "cnn-heatmap",
            "--signal-grid",
            "1,3",
            "--d-grid",
            "20",
            "--repeats",
            "1",
            "--epochs",
            "10",
            "--steps",
            "3",
            "--n-test",
            "20",
            "-o",
            "h.csv",
            "--emit-plot-data",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("h.csv")).unwrap();
    assert!(csv.contains("\nsignal_norm,d,snr,train_loss,test_error,forget_loss,n_failed\n"));
    assert!(dir.path().join("h.grid.dat").exists());

    let o = run(
        &[
            "coherence-curve",
            "--snr-list",
            "0.1,0.5",
            "--d",
            "20",
            "--repeats",
            "1",
            "--epochs",
            "10",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("\nsnr,lambda_max_S,max_pair_lambda,ratio\n"));
}

#[test]
fn help_lists_defaults() {
    let o = bin().args(["cnn-heatmap", "--help"]).output().unwrap();
    let h = stdout(&o);
    for needle in [
        "[default: 20]",
        "[default: 100,300,500,700,900,1100]",
        "--workers",
        "--emit-plot-data",
    ] {
        assert!(h.contains(needle), "missing {needle}");
    }
}

#[test]
fn verify_reports_pass_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["verify", "--criteria", "2,3,5"], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(), 3);

    let o = run(&["verify", "--criteria", "1", "--tamper"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL [1] boundary-bracketing"), "{}", stdout(&o));
}
