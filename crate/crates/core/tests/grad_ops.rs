//! Finite-difference property tests: every differentiable op, 20 seeds each.
//!
//! These are the gradient oracles the rest of the stack leans on. Central
//! differences in f64 with h = 1e-5 resolve the analytic gradient to far
//! better than the 1e-4 relative tolerance asserted here, so a failure means
//! a wrong backward rule, not numerical noise.

mod common;

use common::op_sweeps;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-4;

#[test]
fn every_op_matches_finite_differences_over_20_seeds() {
    for sweep in op_sweeps() {
        for seed in 0..SEEDS {
            let report = (sweep.run)(seed);
            assert!(
                report.passes(TOL),
                "op {} seed {}: max rel err {:.3e} at {:?}",
                sweep.name,
                seed,
                report.max_rel_err,
                report.worst
            );
            assert!(report.coords_checked > 0, "op {} checked nothing", sweep.name);
        }
    }
}
