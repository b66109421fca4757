//! End-to-end runs of the `apnn` binary.

use std::path::Path;
use std::process::{Command, Output};

use apnn_cli::run::Metrics;

const SMALL: &[&str] = &[
    "-s",
    "solver.dx=0.05",
    "-s",
    "solver.dt=5e-4",
    "-s",
    "solver.snapshot_every=20",
    "-s",
    "train.hidden=[6, 6]",
    "-s",
    "train.epochs=20",
    "-s",
    "train.n_t=3",
    "-s",
    "train.n_x=5",
    "-s",
    "train.log_every=0",
    "-s",
    "output.svg=false",
];

fn apnn(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apnn"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn reference_limit_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let (kin, lim) = (dir.path().join("kin"), dir.path().join("lim"));
    let args = ["-s", "problem.epsilon=1e-8", "-s", "solver.dx=0.01", "-s", "solver.dt=5e-5"];
    let m = Metrics::parse(&stdout(&apnn(&[&["solve-ref"][..], &args].concat(), &kin)));
    assert_eq!(m.get("problem"), Some("semiconductor"));
    assert!(m.get_f64("max_mean_psi").unwrap() <= 1e-10);
    stdout(&apnn(&[&["solve-limit"][..], &args].concat(), &lim));
    let out = Command::new(env!("CARGO_BIN_EXE_apnn"))
        .args(["compare"])
        .arg(kin.join("density.csv"))
        .arg(lim.join("density.csv"))
        .output()
        .unwrap();
    let cmp = Metrics::parse(&stdout(&out));
    assert!(cmp.get_f64("rho_rel_l2").unwrap() < 1e-2, "{}", cmp.render());
}

#[test]
fn train_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let m = Metrics::parse(&stdout(&apnn(&[&["train"][..], SMALL].concat(), dir.path())));
    assert_eq!(m.get("method"), Some("apnn"));
    assert_eq!(m.get("epochs"), Some("20"));
    for f in ["config.toml", "metrics.txt", "timing.txt", "history.csv", "profile.csv"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let written = Metrics::parse(&std::fs::read_to_string(dir.path().join("metrics.txt")).unwrap());
    assert_eq!(written, m);
}

#[test]
fn show_config_echoes_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let text = stdout(&apnn(&["show-config", "-s", "train.sigma0=1.7"], dir.path()));
    assert!(text.contains("sigma0 = 1.7"), "{text}");
}

#[test]
fn bad_input_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = apnn(&["train", "-s", "train.epoch=3"], dir.path());
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("train.epoch"));
    let typed = apnn(&["train", "-s", "train.epochs=\"many\""], dir.path());
    assert_eq!(typed.status.code(), Some(2));
    let exp = apnn(&["experiment", "table9"], dir.path());
    assert_eq!(exp.status.code(), Some(2));
}
