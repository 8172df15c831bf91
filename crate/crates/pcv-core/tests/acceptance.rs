//! Acceptance gate: every closed form against its independent oracle.
//!
//! The criteria run sequentially in one test so that at most one
//! million-path set is alive at a time and the report lines print in
//! order (run with `--nocapture` to see them as they complete).

use pcv_core::verify;

#[test]
fn acceptance_criteria() {
    let results = verify::run_all(verify::DEFAULT_SEED);
    print!("{}", verify::format_report(&results));
    for r in &results {
        eprintln!(
            "criterion {:>2} finished in {:.1} s",
            r.id,
            r.elapsed.as_secs_f64()
        );
    }
    assert!(
        verify::all_passed(&results),
        "acceptance criteria failed:\n{}",
        verify::format_report(&results)
    );
}
