use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ScanPair, Volume};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub noise_std: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig { dims: [16, 32, 32], noise_std: 0.1 }
    }
}

/// One random axis-aligned ellipsoid. The mask is the solid ellipsoid and
/// the image is the mask plus Gaussian noise.
pub fn ellipsoid_phantom(id: impl Into<String>, cfg: &PhantomConfig, seed: u64) -> ScanPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [d, h, w] = cfg.dims;
    let ext = [d as f64, h as f64, w as f64];
    let mut centre = [0.0; 3];
    let mut radius = [0.0; 3];
    for a in 0..3 {
        radius[a] = rng.gen_range(0.2..0.35) * ext[a];
        centre[a] = rng.gen_range(0.4..0.6) * ext[a];
    }
    let noise = Normal::new(0.0, cfg.noise_std).expect("finite noise std");
    let n = d * h * w;
    let mut mask = Vec::with_capacity(n);
    let mut image = Vec::with_capacity(n);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                let r: f64 = (0..3).map(|a| ((p[a] - centre[a]) / radius[a]).powi(2)).sum();
                let m = if r <= 1.0 { 1.0 } else { 0.0 };
                mask.push(m as f32);
                image.push((m + noise.sample(&mut rng)) as f32);
            }
        }
    }
    let image = Volume::new(cfg.dims, [1.0; 3], image).expect("phantom dims are non-zero");
    let mask = Volume::new(cfg.dims, [1.0; 3], mask).expect("phantom dims are non-zero");
    ScanPair::new(id, image, mask).expect("phantom image and mask share dims")
}

/// `count` phantoms with ids `phantom-000`, `phantom-001`, ...
pub fn phantom_set(count: usize, cfg: &PhantomConfig, seed: u64) -> Vec<ScanPair> {
    (0..count)
        .map(|i| ellipsoid_phantom(format!("phantom-{i:03}"), cfg, seed.wrapping_mul(0x9E37_79B9).wrapping_add(i as u64)))
        .collect()
}
