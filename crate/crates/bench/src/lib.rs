//! Deterministic inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpnn_core::imaging::interpolate_band;
use rpnn_core::{DecimationSpec, MtfFilterSpec, Shape, Tensor};

pub const RATIO: usize = 6;

pub fn random(shape: Shape, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _| rng.gen_range(0.0..1.0))
}

/// A PAN of side `n`, a low-resolution band of side `n / RATIO` and the band
/// interpolated back to side `n`.
pub struct BandPair {
    pub pan: Tensor,
    pub band_lr: Tensor,
    pub interp: Tensor,
}

pub fn band_pair(n: usize, seed: u64) -> BandPair {
    assert_eq!(n % RATIO, 0, "side must be a multiple of {RATIO}");
    let pan = random(Shape::new(1, n, n), seed);
    let band_lr = rpnn_core::imaging::degrade(
        &pan.map(|v| 0.8 * v + 0.1),
        &MtfFilterSpec::default(),
        &DecimationSpec::centered(RATIO),
    )
    .expect("valid sizes");
    let interp = interpolate_band(&band_lr, RATIO).expect("valid sizes");
    BandPair { pan, band_lr, interp }
}
