//! Acceptance suite: one line per criterion.
//!
//! The fast tier runs by default. Criteria 7, 8, 10, 11 and 12 train wide
//! networks for minutes to hours and run only with `--ignored` (or
//! `--include-ignored`), e.g. `cargo test -p somup --test acceptance -- --ignored`.
//! `--only 7,8` restricts the run to the listed criteria.

use somup::verify::{run_criterion, VerifyOptions, CRITERIA};
use std::process::ExitCode;

fn main() -> ExitCode {
    somup::blas::relaunch_with_coretype();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let slow = args.iter().any(|a| a == "--ignored" || a == "--include-ignored");
    let only: Option<Vec<u8>> = args
        .iter()
        .position(|a| a == "--only")
        .and_then(|i| args.get(i + 1))
        .map(|list| list.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let opts = VerifyOptions { jobs: 1, out: std::env::var_os("SOMUP_ACCEPTANCE_OUT").map(Into::into) };

    let mut failed = 0;
    for c in &CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&c.id)) {
            continue;
        }
        if !c.fast && !slow && only.is_none() {
            println!("criterion {:>2} {:<28} SKIP  (slow tier; run with --ignored)", c.id, c.name);
            continue;
        }
        let check = run_criterion(c, &opts);
        println!("{}", check.line());
        if !check.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
