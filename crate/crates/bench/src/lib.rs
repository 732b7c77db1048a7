//! Shared fixtures for the criterion benches.

use iconforge_core::network::{ModelConfig, UNetConfig};
use iconforge_core::synth::{smooth_displacement, textured_volume};
use iconforge_core::transform::warp;
use iconforge_core::{RegistrationModel, TransformMap, Volume};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A textured volume, a smooth deformation and the deformed copy, all on a
/// cube of side `side`.
pub fn pair(side: usize, seed: u64) -> (Volume, Volume, TransformMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = [side; 3];
    let a = textured_volume(d, 2.0, &mut rng).expect("valid dims");
    let phi = smooth_displacement(d, 3.0, 2.0, &mut rng).expect("valid dims");
    let b = warp(&a, &phi, None).expect("matching grids");
    (a, b, phi)
}

/// A model whose network grid is `side` with `channels` base features.
pub fn model(side: usize, channels: usize) -> RegistrationModel {
    RegistrationModel::new(ModelConfig {
        unet: UNetConfig { base_channels: channels, ..UNetConfig::default() },
        canonical_side: side,
        ..ModelConfig::default()
    })
    .expect("valid config")
}
