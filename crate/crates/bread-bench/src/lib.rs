//! Deterministic input builders shared by the benches.

use bread_core::imagecore::{Plane, RgbImage};
use bread_core::nnkit::{FinalActivation, NetworkSpec, UNet};
use bread_core::noise::StrengthLadder;
use bread_core::pipeline::BreadBundle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub fn random_plane(seed: u64, h: usize, w: usize) -> Plane {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Plane::from_vec(1, h, w, (0..h * w).map(|_| rng.gen()).collect())
}

pub fn random_image(seed: u64, h: usize, w: usize) -> RgbImage {
    RgbImage::new(
        random_plane(seed, h, w),
        random_plane(seed ^ 1, h, w),
        random_plane(seed ^ 2, h, w),
    )
    .expect("uniform samples are in range")
}

/// A bundle with freshly initialized weights; throughput does not depend on
/// the parameter values.
pub fn fresh_bundle(seed: u64) -> BreadBundle {
    let sigmoid = FinalActivation::Sigmoid;
    BreadBundle::new(
        UNet::init(NetworkSpec::with_io(1, 1, sigmoid), seed).expect("valid spec"),
        UNet::init(NetworkSpec::with_io(2, 1, FinalActivation::None), seed ^ 1).expect("valid spec"),
        UNet::init(NetworkSpec::with_io(6, 1, sigmoid), seed ^ 2).expect("valid spec"),
        UNet::init(NetworkSpec::with_io(4, 2, sigmoid), seed ^ 3).expect("valid spec"),
        false,
        StrengthLadder::default(),
    )
    .expect("matching roles")
}
