//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs at full scale by default. Set `UNLEARN_ACCEPTANCE=quick` for the
//! reduced settings and `UNLEARN_ACCEPTANCE_SEED` to change the master seed.

use std::process::ExitCode;
use std::time::Instant;

use unlearn_core::verify::{boundary_bracketing, run_criteria, tampered_boundaries, Scale, VerifyOptions, CRITERIA};

fn main() -> ExitCode {
    let scale = match std::env::var("UNLEARN_ACCEPTANCE").as_deref() {
        Ok("quick") => Scale::Quick,
        _ => Scale::Full,
    };
    let seed = std::env::var("UNLEARN_ACCEPTANCE_SEED")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(1);
    println!("acceptance suite: scale={scale:?} seed={seed}");
    let opts = VerifyOptions::new(scale, seed);
    let ids: Vec<u8> = CRITERIA.iter().map(|(id, _)| *id).collect();
    let start = Instant::now();
    let reports = run_criteria(&opts, &ids, |r| println!("{r}  ({:.0?})", start.elapsed()));
    let mut ok = reports.iter().all(|r| r.passed);

    // The bracketing check must be able to fail: a divergence curve off by
    // a factor of four has to be rejected.
    let tampered = VerifyOptions {
        boundaries: tampered_boundaries(),
        ..opts
    };
    let (r, _) = boundary_bracketing(&tampered);
    let rejected = !r.passed;
    println!(
        "{} [mutation] bracketing rejects a divergence curve scaled by 4: {}",
        if rejected { "PASS" } else { "FAIL" },
        r.detail
    );
    ok &= rejected;

    let passed = reports.iter().filter(|r| r.passed).count() + usize::from(rejected);
    println!(
        "{passed}/{} checks passed in {:.0?}",
        reports.len() + 1,
        start.elapsed()
    );
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
