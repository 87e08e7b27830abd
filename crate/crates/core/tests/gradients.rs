mod support;

use support::gradsuite::{run, LAYERS};

const SEEDS: u64 = 100;
const TOLERANCE: f64 = 1e-4;

#[test]
fn every_layer_matches_finite_differences_over_100_seeds() {
    for layer in LAYERS {
        let worst = (0..SEEDS).map(|s| run(layer, s)).fold(0.0, f64::max);
        assert!(worst <= TOLERANCE, "{layer}: worst relative error {worst:e}");
    }
}
