//! Runs every acceptance criterion and prints one line per criterion.
//!
//! `TIDN_ACCEPTANCE_SUITE=fast` restricts the run to the oracle checks;
//! `TIDN_ACCEPTANCE_SCALE=desk` swaps the compact testbed for the desk one.
//! The verdict CSV lands next to the cached fixtures.

use std::path::PathBuf;

use tidn_core::harness::{acceptance_config, run_acceptance, HarnessOptions, Suite};

#[test]
fn acceptance_suite() {
    let suite: Suite = std::env::var("TIDN_ACCEPTANCE_SUITE").unwrap_or_else(|_| "full".into()).parse().unwrap();
    let scale = std::env::var("TIDN_ACCEPTANCE_SCALE").unwrap_or_else(|_| "compact".into());
    let config = acceptance_config(&scale).unwrap();
    let fixture_dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-fixtures");
    let options = HarnessOptions { suite, config, fixture_dir: fixture_dir.clone(), verbose: true };

    println!("acceptance suite: {suite}, scale: {scale}");
    let verdict = run_acceptance(&options, &mut |o| println!("{}", o.line())).unwrap();
    let path = fixture_dir.join(format!("verdict-{suite}-{scale}.csv"));
    verdict.write(&path).unwrap();
    let failed: Vec<&str> = verdict.failures().iter().map(|o| o.id.as_str()).collect();
    println!("{} of {} criteria passed; verdict written to {}", verdict.outcomes.len() - failed.len(), verdict.outcomes.len(), path.display());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
