//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use recurdet::detection::Vote;
use recurdet::imaging::{GrayImage, Point};
use recurdet::mining::{rescale_to_canonical, MiningConfig};
use recurdet::pipeline::example_box;
use recurdet::synth::{generate, Preset};

/// A generated scene already rescaled to canonical resolution.
pub fn canonical_scene(preset: Preset, seed: u64) -> GrayImage {
    let (img, truth) = generate(&preset.spec(seed)).expect("preset generates");
    let bbox = example_box(&truth).expect("preset has targets");
    rescale_to_canonical(&img, &bbox, &MiningConfig::default()).expect("box fits").image
}

/// Votes for `n` objects on a grid, a few per object, plus uniform clutter.
pub fn planted_votes(n: usize, clutter: usize, seed: u64) -> Vec<Vote> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = (n as f64).sqrt().ceil() as usize;
    let extent = 50.0 + 45.0 * side as f64;
    let mut votes = Vec::new();
    for k in 0..n {
        let c = Point::new(50.0 + 45.0 * (k % side) as f64, 50.0 + 45.0 * (k / side) as f64);
        for patch in 0..rng.random_range(3..8) {
            let p = c + Point::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            votes.push(Vote { patch, center: p, hit: p });
        }
    }
    for _ in 0..clutter {
        let p = Point::new(rng.random_range(0.0..extent), rng.random_range(0.0..extent));
        votes.push(Vote { patch: rng.random_range(0..8), center: p, hit: p });
    }
    votes
}

/// Two overlapping Gaussian-ish classes in `dim` dimensions.
pub fn svm_problem(n: usize, dim: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<bool> = (0..n).map(|k| k % 2 == 0).collect();
    let points = labels
        .iter()
        .map(|&l| {
            (0..dim)
                .map(|d| {
                    let shift = if d < 3 && l { 1.0 } else { 0.0 };
                    shift + rng.random_range(-1.0..1.0)
                })
                .collect()
        })
        .collect();
    (points, labels)
}
