mod common;

use common::{gradient_checks, TOLERANCE};

#[test]
fn every_loss_matches_central_differences() {
    for seed in [3, 11] {
        for (name, err, at) in gradient_checks(seed) {
            assert!(err < TOLERANCE, "{name} (seed {seed}): relative error {err:e} at {at}");
        }
    }
}
