//! All acceptance criteria at their stated tolerances.
//!
//! Run with `cargo test --release -p markov-icl --test acceptance -- --nocapture`
//! to see one line per criterion.

use markov_icl::experiments::verify::{run_criterion, VerifyOptions, CRITERIA};

#[test]
fn acceptance_criteria() {
    let opts = VerifyOptions::default();
    let mut failed = Vec::new();
    for &(id, _) in CRITERIA.iter() {
        let o = run_criterion(id, &opts);
        println!("{}", o.line());
        if !o.passed {
            failed.push(o.id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
