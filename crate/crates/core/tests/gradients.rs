//! Fast per-op gradient spot checks; the acceptance suite runs the same
//! cases over many more seeds.

mod common;

use common::gradcheck::{check_case, op_cases};

#[test]
fn every_op_matches_finite_differences() {
    for case in op_cases() {
        for seed in 0..5 {
            check_case(&case, 1000 + seed);
        }
    }
}
