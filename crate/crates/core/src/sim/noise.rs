//! Range-proportional depth noise drawn from a counter-based stream.
//!
//! Each zone reading gets its own ChaCha8 stream keyed by
//! `(seed, sensor, step)` with the zone index as stream id, so a draw never
//! depends on how many other draws happened before it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseModel {
    /// `ε ~ N(0, noise_rel²)`.
    #[default]
    GaussianRelative,
    /// `ε ~ U(−noise_rel, noise_rel)`.
    UniformRelative,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn zone_rng(seed: u64, sensor: &str, step: u32, zone: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a64(sensor.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&u64::from(step).to_le_bytes());
    key[24..].copy_from_slice(b"tofnoise");
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(zone as u64);
    rng
}

/// Relative error `ε` for one zone reading; the measured range is `d·(1+ε)`.
pub fn relative_error(model: NoiseModel, noise_rel: f64, seed: u64, sensor: &str, step: u32, zone: usize) -> f64 {
    if noise_rel == 0.0 {
        return 0.0;
    }
    let mut rng = zone_rng(seed, sensor, step, zone);
    match model {
        NoiseModel::GaussianRelative => {
            let z: f64 = rng.sample(StandardNormal);
            noise_rel * z
        }
        NoiseModel::UniformRelative => rng.random_range(-noise_rel..=noise_rel),
    }
}
