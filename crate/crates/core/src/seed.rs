//! Seed splitting.
//!
//! Every random stream in a run descends from one master seed. A child seed
//! is `splitmix64(parent ^ fnv1a64(label))` for named streams and
//! `splitmix64(parent ^ splitmix64(index + 1))` for indexed streams, so any
//! sub-phase can be re-run on its own given the master seed and the path of
//! labels leading to it.
//!
//! Labels used by the pipeline:
//!
//! | path                          | stream                                  |
//! |-------------------------------|-----------------------------------------|
//! | `software/init`               | truncated-normal weight init            |
//! | `software/batches`            | per-epoch shuffles for phase A          |
//! | `fabrication`                 | transfer-curve mismatch                 |
//! | `placement`                   | logical-to-circuit neuron placement     |
//! | `calibration`                 | trial noise during calibration sweeps   |
//! | `itl/batches`                 | per-epoch shuffles for phase C          |
//! | `itl/trial/<iteration>`       | configuration noise per reconfiguration |
//! | `eval/subset`                 | fixed test subset                       |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a64(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Child seed for a named stream.
pub fn derive(parent: u64, label: &str) -> u64 {
    splitmix64(parent ^ fnv1a64(label))
}

/// Child seed for the `index`-th member of a family of streams.
pub fn derive_index(parent: u64, index: u64) -> u64 {
    splitmix64(parent ^ splitmix64(index.wrapping_add(1)))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable_and_label_sensitive() {
        assert_eq!(derive(7, "fabrication"), derive(7, "fabrication"));
        assert_ne!(derive(7, "fabrication"), derive(7, "placement"));
        assert_ne!(derive(7, "fabrication"), derive(8, "fabrication"));
        assert_ne!(derive_index(7, 0), derive_index(7, 1));
    }

    #[test]
    fn splitmix_reference_value() {
        // First output of the reference SplitMix64 generator seeded with 0.
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
    }
}
