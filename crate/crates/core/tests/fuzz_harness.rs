//! The randomized invariant harness: a clean run over mixed generators, and
//! the self-test that plants a bug and expects the harness to catch it with
//! a minimized reproduction.

use squashsim::fuzz::{run_fuzz, FuzzOptions, Mode};
use squashsim::system::BugInjection;

#[test]
fn mixed_generators_run_clean() {
    let summary = run_fuzz(&FuzzOptions {
        iters: 200,
        seed: 0,
        bug: None,
    })
    .unwrap_or_else(|v| panic!("violation of {}: {}\ncase: {:?}", v.property, v.detail, v.case));
    assert_eq!(summary.iterations, 200);
    assert!(summary.race_cases > 0);
    assert!(summary.oracle_cases > 0);
    assert!(summary.n_minus_one_cases > 0);
}

#[test]
fn zero_iterations_is_a_no_op() {
    let summary = run_fuzz(&FuzzOptions {
        iters: 0,
        seed: 0,
        bug: None,
    })
    .unwrap();
    assert_eq!(summary.iterations, 0);
}

#[test]
fn injected_bug_is_caught_and_minimized() {
    let violation = run_fuzz(&FuzzOptions {
        iters: 400,
        seed: 1,
        bug: Some(BugInjection::IgnoreCancellations),
    })
    .expect_err("a model that ignores cancellations must violate the race properties");
    assert_eq!(violation.property, "cancel-beats-response");
    assert_eq!(violation.case.mode, Mode::Race);
    // The shrinker kept it reproducible and small.
    assert!(!violation.case.actions.is_empty());
    assert!(violation.case.actions.len() <= 8);
    let json = serde_json::to_string(&*violation).unwrap();
    assert!(json.contains("cancel-beats-response"));
}
