//! Shared fixtures for the criterion benchmarks.

use rand::{Rng, SeedableRng};

use dualseg_core::grid::{Dims, Mask, Spacing, Volume};

/// Random blob-ish mask: a thresholded smooth field, so surfaces are
/// realistic rather than salt-and-pepper.
pub fn bench_mask(dims: Dims, seed: u64) -> Mask {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let c = [dims.z as f64 / 2.0, dims.y as f64 / 2.0, dims.x as f64 / 2.0];
    let r = dims.z.min(dims.y).min(dims.x) as f64 / 3.0;
    let jitter: f64 = rng.random_range(0.8..1.2);
    let mut data = vec![0u8; dims.len()];
    for z in 0..dims.z {
        for y in 0..dims.y {
            for x in 0..dims.x {
                let d = ((z as f64 - c[0]).powi(2)
                    + (y as f64 - c[1]).powi(2)
                    + (x as f64 - c[2]).powi(2))
                .sqrt();
                data[dims.index(z, y, x)] = u8::from(d < r * jitter);
            }
        }
    }
    Mask::new(dims, Spacing::isotropic(1.0).unwrap(), data).unwrap()
}

pub fn bench_volume(dims: Dims, seed: u64) -> Volume {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let data = (0..dims.len()).map(|_| rng.random::<f64>()).collect();
    Volume::new(dims, Spacing::isotropic(1.0).unwrap(), data).unwrap()
}
