//! Fixtures shared by the benchmarks.

use gmn_core::data::{GridGeometry, Point, SimilarityMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` uniformly random points in a `side × side` square.
pub fn random_points(n: usize, side: f64, seed: u64) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Point::new(rng.random_range(0.0..side), rng.random_range(0.0..side)))
        .collect()
}

/// A `side × side` map with `peaks` Gaussian bumps over low noise.
pub fn bumpy_map(side: usize, peaks: usize, seed: u64) -> SimilarityMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = SimilarityMap::zeros(side, side, GridGeometry::stride4());
    for v in &mut map.values {
        *v = rng.random_range(0.0..0.2);
    }
    for _ in 0..peaks {
        let (cr, cc) = (rng.random_range(0.0..side as f64), rng.random_range(0.0..side as f64));
        for r in 0..side {
            for c in 0..side {
                let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
                map.values[r * side + c] += (5.0 * (-d2 / 8.0).exp()) as f32;
            }
        }
    }
    map
}
