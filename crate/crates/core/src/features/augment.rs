use rand::Rng;
use serde::{Deserialize, Serialize};

use super::FeatureSequence;
use crate::numerics::Tensor;

/// Time and frequency masking parameters. Widths are clamped to the axis
/// extent when applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecAugmentConfig {
    pub num_time_masks: usize,
    pub max_time_width: usize,
    pub num_freq_masks: usize,
    pub max_freq_width: usize,
    pub mask_value: f64,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self {
            num_time_masks: 2,
            max_time_width: 10,
            num_freq_masks: 2,
            max_freq_width: 8,
            mask_value: 0.0,
        }
    }
}

impl SpecAugmentConfig {
    pub fn disabled() -> Self {
        Self {
            num_time_masks: 0,
            max_time_width: 0,
            num_freq_masks: 0,
            max_freq_width: 0,
            mask_value: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        (self.num_time_masks == 0 || self.max_time_width == 0)
            && (self.num_freq_masks == 0 || self.max_freq_width == 0)
    }
}

/// Returns a masked copy of `x`. Each mask draws its width uniformly from
/// `0..=max_width` and its start uniformly from the positions where it fits.
pub fn spec_augment<R: Rng + ?Sized>(
    x: &FeatureSequence,
    cfg: &SpecAugmentConfig,
    rng: &mut R,
) -> FeatureSequence {
    let (t_len, f) = (x.len(), x.channels());
    let mut data = x.frames().data().to_vec();
    for _ in 0..cfg.num_time_masks {
        let w = rng.random_range(0..=cfg.max_time_width.min(t_len));
        let start = rng.random_range(0..=t_len - w);
        for t in start..start + w {
            data[t * f..(t + 1) * f].fill(cfg.mask_value);
        }
    }
    for _ in 0..cfg.num_freq_masks {
        let w = rng.random_range(0..=cfg.max_freq_width.min(f));
        let start = rng.random_range(0..=f - w);
        for row in data.chunks_mut(f) {
            row[start..start + w].fill(cfg.mask_value);
        }
    }
    let frames = Tensor::matrix(t_len, f, data).expect("shape preserved");
    FeatureSequence::new(frames, x.sample_rate_hz).expect("mask value keeps features finite")
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn ramp(t: usize, f: usize) -> FeatureSequence {
        let data = (0..t * f).map(|i| 1.0 + i as f64).collect();
        FeatureSequence::new(Tensor::matrix(t, f, data).unwrap(), None).unwrap()
    }

    #[test]
    fn no_masks_is_identity() {
        let x = ramp(10, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(spec_augment(&x, &SpecAugmentConfig::disabled(), &mut rng), x);
    }

    #[test]
    fn one_time_mask_of_width_three() {
        let x = ramp(10, 4);
        let cfg = SpecAugmentConfig {
            num_time_masks: 1,
            max_time_width: 3,
            num_freq_masks: 0,
            max_freq_width: 0,
            mask_value: -7.0,
        };
        // Search seeds for a draw of width exactly 3 and count the changes.
        let mut found = false;
        for seed in 0..64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = spec_augment(&x, &cfg, &mut rng);
            let changed = x
                .frames()
                .data()
                .iter()
                .zip(y.frames().data())
                .filter(|(a, b)| a != b)
                .count();
            assert_eq!(changed % 4, 0);
            assert!(changed <= 12);
            if changed == 12 {
                found = true;
            }
        }
        assert!(found);
    }

    #[test]
    fn different_rng_states_differ() {
        let x = ramp(40, 16);
        let cfg = SpecAugmentConfig {
            mask_value: -1.0,
            ..SpecAugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = spec_augment(&x, &cfg, &mut rng);
        let b = spec_augment(&x, &cfg, &mut rng);
        assert_ne!(a, b);
    }

    proptest! {
        #[test]
        fn shape_kept_and_unmasked_cells_untouched(t in 1usize..30, f in 1usize..12, seed in any::<u64>()) {
            let x = ramp(t, f);
            let cfg = SpecAugmentConfig { mask_value: -1.0, ..SpecAugmentConfig::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = spec_augment(&x, &cfg, &mut rng);
            prop_assert_eq!(y.frames().shape(), x.frames().shape());
            for (a, b) in x.frames().data().iter().zip(y.frames().data()) {
                prop_assert!(a == b || *b == -1.0);
            }
        }
    }
}
