//! Acceptance suite: runs every verification check and prints one
//! pass/fail line per check (use `--nocapture` to watch them finish).

use bihdg::verify::run_all_with;

#[test]
fn acceptance_checks() {
    let results = run_all_with(|r| println!("{}", r.line()));
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    assert!(failed.is_empty(), "failed checks: {}", failed.join(", "));
}
