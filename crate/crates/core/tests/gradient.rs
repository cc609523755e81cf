mod common;

#[test]
fn analytic_gradients_match_finite_differences() {
    for seed in [1, 2] {
        let r = common::gradient_check(150, seed);
        assert!(r.max_relative_error < 1e-3, "seed {seed}: {}", r.max_relative_error);
    }
}
