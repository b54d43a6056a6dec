use std::time::Instant;

use gemuco::scenarios::gradient_suite;

#[test]
fn analytic_gradients_match_central_differences() {
    let t = Instant::now();
    let r = gradient_suite(100, 2024).unwrap();
    let secs = t.elapsed().as_secs_f64();
    assert_eq!(r.cases, 100);
    assert!(r.max_rel_weights < 1e-4, "{r:?}");
    assert!(r.max_rel_input < 1e-4, "{r:?}");
    assert!(r.max_rel_jacobian < 1e-4, "{r:?}");
    assert!(secs < 10.0, "took {secs:.1} s");
}

#[test]
fn suite_is_reproducible() {
    let a = gradient_suite(20, 5).unwrap();
    let b = gradient_suite(20, 5).unwrap();
    assert_eq!(a, b);
}
