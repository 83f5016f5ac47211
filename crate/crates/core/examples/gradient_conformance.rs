//! Finite-difference check of every primitive, both estimators and the
//! six-step recurrent dehazer at its default width.
//!
//! `cargo run --release --example gradient_conformance -- [coords]`

use std::time::Instant;

use dehaze::conformance::{full_suite, TOLERANCE};

fn main() -> dehaze::Result<()> {
    let coords = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(100);
    let start = Instant::now();
    let rows = full_suite(0, coords)?;
    for r in &rows {
        println!(
            "{:<30} {:>4} coords ({:>2} refined)  max rel {:.2e}  {}",
            r.name,
            r.report.checked,
            r.report.refined,
            r.report.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed = rows.iter().filter(|r| !r.passed()).count();
    println!("{failed} of {} checks above {TOLERANCE:e} in {:.1?}", rows.len(), start.elapsed());
    Ok(())
}
