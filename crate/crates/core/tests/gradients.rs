mod common;

use common::{gradient_check, small_architectures};

#[test]
fn analytic_gradients_match_central_differences() {
    for (arch, steps) in small_architectures() {
        for seed in [1, 2] {
            let (err, count) = gradient_check(arch.clone(), steps, seed);
            assert!(count <= 5000, "{arch:?} has {count} params");
            assert!(err < 1e-4, "{arch:?} seed {seed}: max relative error {err:e}");
        }
    }
}
