mod common;

#[test]
fn degenerate_settings_reduce_to_simpler_losses() {
    for seed in [1, 2] {
        for (name, holds, detail) in common::identity_checks(seed) {
            assert!(holds, "{name} (seed {seed}): {detail}");
        }
    }
}
