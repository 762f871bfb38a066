//! Acceptance criteria, one pass/fail line each.

use std::process::ExitCode;

use edswitch::verify::{run, CHECKS};

fn main() -> ExitCode {
    let only: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check) in CHECKS {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let (c, elapsed) = run(check);
        let tag = if c.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {id:>2} {name}: {} ({:.1?})", c.detail, elapsed);
        failed += usize::from(!c.passed);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
