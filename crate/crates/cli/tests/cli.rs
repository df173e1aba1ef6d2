use std::process::{Command, Output};

fn somup(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_somup")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn no_arguments_is_a_usage_error() {
    assert_eq!(somup(&[]).status.code(), Some(2));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(somup(&["train", "--no-such-flag"]).status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let o = somup(&["train", "--set", "architecture.widht=8"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("widht"));
}

#[test]
fn help_lists_config_keys() {
    let o = somup(&["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for key in ["architecture.width", "damping.rho_prime", "run.probe_steps"] {
        assert!(text.contains(key), "missing {key}");
    }
}

#[test]
fn tables_prints_the_kfac_row() {
    let o = somup(&["tables", "--family", "kfac", "--scheme", "mup", "--depth", "3"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "mup kfac L=3: b=(0, 1/2, 1), c=(0, 0, 0), d_A=(0, -1, -1), d_B=(1, 1, 0)");
}

#[test]
fn verify_golden_tables_passes() {
    let o = somup(&["verify", "--only", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains(" PASS "));
}

#[test]
fn train_writes_a_csv_with_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = somup(&[
        "train",
        "--out",
        out,
        "--set",
        "architecture.width=16",
        "--set",
        "run.steps=2",
        "--set",
        "run.probe_steps=[2]",
        "--set",
        "dataset.n_train=32",
        "--set",
        "dataset.n_probe=8",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("train.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("run_id,config_hash,family,param_scheme"));
    assert!(lines.any(|l| l.contains(",coord_dh,")));
}
