use std::time::{Duration, Instant};

use dialmem::tensor::FaultInjection;
use dialmem::verify::{check_reference, COMPONENTS, TOLERANCE};

#[test]
fn every_objective_matches_finite_differences() {
    let t = Instant::now();
    let checks = check_reference(0, FaultInjection::None).unwrap();
    let elapsed = t.elapsed();
    assert_eq!(checks.iter().map(|c| c.component).collect::<Vec<_>>(), COMPONENTS);
    for c in &checks {
        assert!(c.result.coordinates > 0, "{}: nothing checked", c.component);
        assert!(
            c.result.max_rel_error < TOLERANCE,
            "{}: rel error {:e} at {:?}",
            c.component,
            c.result.max_rel_error,
            c.worst_param
        );
    }
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
}

#[test]
fn injected_softmax_fault_is_caught() {
    let checks = check_reference(0, FaultInjection::SoftmaxBackward).unwrap();
    let failing: Vec<_> = checks.iter().filter(|c| c.result.max_rel_error > TOLERANCE).map(|c| c.component).collect();
    assert!(failing.contains(&"l_erm") && failing.contains(&"l_lm"), "{failing:?}");
}
