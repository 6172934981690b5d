//! Acceptance suite: runs every named check and prints one PASS/FAIL line
//! each. Set `BRT_ACCEPTANCE_ONLY` to a comma-separated list of ids or
//! names to run a subset.

use brokenray::checks::{find, CHECKS};

fn main() {
    let seed = std::env::var("BRT_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(20240611);
    let selected: Vec<_> = match std::env::var("BRT_ACCEPTANCE_ONLY") {
        Ok(list) => list.split(',').map(|k| find(k.trim()).unwrap_or_else(|| panic!("unknown check '{k}'"))).collect(),
        Err(_) => CHECKS.iter().collect(),
    };
    println!("running {} acceptance criteria (seed {seed})", selected.len());
    let mut failed = 0;
    for check in selected {
        let out = check.run(seed);
        println!("{}", out.line());
        failed += usize::from(!out.passed);
    }
    println!("acceptance: {failed} failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
