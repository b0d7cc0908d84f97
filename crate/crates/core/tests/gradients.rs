//! Reverse-mode gradients against central finite differences.

mod common;

use common::grad::*;

#[test]
fn every_op_matches_central_differences() {
    for op in op_cases() {
        let errors = op_errors(&op);
        for (seed, e) in errors.iter().enumerate() {
            assert!(*e <= OP_TOL, "{}, seed {seed}: relative error {e:.3e}", op.name);
        }
        let worst = errors.iter().cloned().fold(0.0, f64::max);
        println!("{}: worst relative error {worst:.2e} over {SEEDS} seeds", op.name);
    }
}

#[test]
fn full_loss_matches_central_differences() {
    let r = end_to_end();
    for (seed, e) in r.errors.iter().enumerate() {
        assert!(*e <= E2E_TOL, "seed {seed}: end-to-end relative error {e:.3e}");
    }
    assert!(r.min_smooth_fraction >= 0.75, "too many kinked coordinates: {}", r.min_smooth_fraction);
    let worst = r.errors.iter().cloned().fold(0.0, f64::max);
    println!(
        "end-to-end: worst relative error {worst:.2e} over {SEEDS} seeds; {}/{} coordinates straddled a relu kink",
        r.skipped, r.total
    );
}
