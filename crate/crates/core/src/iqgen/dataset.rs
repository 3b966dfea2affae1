//! Stratified dataset generation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    apply_channel, is_grid_snr, modulate, standard_snr_grid, Impairments, IqGenError,
    LabeledFrame, ModulationScheme, Split,
};
use crate::FRAME_LEN;

pub const TRAIN_FRACTION: f64 = 0.81;
pub const VAL_FRACTION: f64 = 0.09;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub frames_per_scheme_per_snr: u32,
    pub snr_grid: Vec<i16>,
    pub samples_per_symbol: usize,
    pub rng_seed: u64,
    pub impairments: Impairments,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            frames_per_scheme_per_snr: 20,
            snr_grid: standard_snr_grid(),
            samples_per_symbol: 8,
            rng_seed: 0x5eed,
            impairments: Impairments::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), IqGenError> {
        if self.frames_per_scheme_per_snr == 0 {
            return Err(IqGenError::InvalidConfig("zero frames requested".into()));
        }
        if self.samples_per_symbol == 0 || self.samples_per_symbol > FRAME_LEN {
            return Err(IqGenError::InvalidConfig(format!(
                "samples_per_symbol must be in 1..={FRAME_LEN}"
            )));
        }
        if self.snr_grid.is_empty() {
            return Err(IqGenError::InvalidConfig("empty SNR grid".into()));
        }
        if self.snr_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(IqGenError::InvalidConfig(
                "SNR grid must be strictly increasing".into(),
            ));
        }
        if let Some(bad) = self.snr_grid.iter().find(|s| !is_grid_snr(**s)) {
            return Err(IqGenError::InvalidConfig(format!(
                "SNR {bad} dB is not on the -20..=20 dB, 2 dB grid"
            )));
        }
        Ok(())
    }
}

/// Per-stratum split sizes `(train, val, test)` by nearest-integer rounding.
pub fn split_counts(n: u32) -> (u32, u32, u32) {
    let train = (TRAIN_FRACTION * n as f64).round() as u32;
    let val = ((VAL_FRACTION * n as f64).round() as u32).min(n - train);
    (train, val, n - train - val)
}

/// RNG for one (scheme, snr) stratum: ChaCha8 keyed by the run seed, with the
/// stratum index `scheme_index * n_snr + snr_index` selecting the stream.
pub fn stratum_rng(seed: u64, stratum: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stratum);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub snr_grid: Vec<i16>,
    pub frames_per_cell: u32,
    /// Canonical order: scheme-major, SNR-minor, frame index innermost.
    pub frames: Vec<LabeledFrame>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.iter().filter(|s| **s == split).count()
    }
}

pub fn generate_dataset(config: &GenConfig) -> Result<Dataset, IqGenError> {
    config.validate()?;
    let n = config.frames_per_scheme_per_snr;
    let (n_train, n_val, _) = split_counts(n);
    let total = ModulationScheme::ALL.len() * config.snr_grid.len() * n as usize;
    let mut frames = Vec::with_capacity(total);
    let mut splits = Vec::with_capacity(total);

    for scheme in ModulationScheme::ALL {
        for (si, &snr) in config.snr_grid.iter().enumerate() {
            let stratum = (scheme.index() * config.snr_grid.len() + si) as u64;
            let mut rng = stratum_rng(config.rng_seed, stratum);
            for k in 0..n {
                let clean = modulate(scheme, &mut rng, FRAME_LEN, config.samples_per_symbol)?;
                let iq = apply_channel(&clean, snr as f64, &config.impairments, &mut rng)?;
                frames.push(LabeledFrame {
                    iq,
                    label: scheme,
                    snr_db: snr,
                });
                splits.push(if k < n_train {
                    Split::Train
                } else if k < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                });
            }
        }
    }
    Ok(Dataset {
        snr_grid: config.snr_grid.clone(),
        frames_per_cell: n,
        frames,
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn small(n: u32) -> GenConfig {
        GenConfig {
            frames_per_scheme_per_snr: n,
            ..GenConfig::default()
        }
    }

    #[test]
    fn split_counts_round_to_nearest() {
        assert_eq!(split_counts(20), (16, 2, 2));
        assert_eq!(split_counts(10), (8, 1, 1));
        assert_eq!(split_counts(2000), (1620, 180, 200));
        assert_eq!(split_counts(1), (1, 0, 0));
    }

    #[test]
    fn stratified_counts_and_order() {
        let d = generate_dataset(&small(20)).unwrap();
        assert_eq!(d.len(), 4200);
        let mut cells: HashMap<(ModulationScheme, i16), [usize; 3]> = HashMap::new();
        for (f, s) in d.frames.iter().zip(&d.splits) {
            cells.entry((f.label, f.snr_db)).or_default()[s.tag() as usize] += 1;
        }
        assert_eq!(cells.len(), 210);
        assert!(cells.values().all(|c| *c == [16, 2, 2]));
        assert_eq!(d.frames[0].label, ModulationScheme::Qam16);
        assert_eq!(d.frames[0].snr_db, -20);
        assert_eq!(d.frames[20].snr_db, -18);
        assert_eq!(d.frames[4199].label, ModulationScheme::Qpsk);
        assert!(d.frames.iter().all(|f| f.iq.is_finite()));
    }

    #[test]
    fn every_cell_feeds_all_splits_from_ten_frames() {
        let mut cfg = small(10);
        cfg.snr_grid = vec![-4, 0, 4];
        let d = generate_dataset(&cfg).unwrap();
        for split in [Split::Train, Split::Val, Split::Test] {
            assert_eq!(d.count(split), match split {
                Split::Train => 8,
                _ => 1,
            } * 30);
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let mut cfg = small(3);
        cfg.snr_grid = vec![-10, 10];
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        cfg.rng_seed += 1;
        let c = generate_dataset(&cfg).unwrap();
        assert_ne!(a.frames[0].iq, c.frames[0].iq);
    }

    #[test]
    fn config_validation() {
        assert!(generate_dataset(&small(0)).is_err());
        let mut cfg = small(1);
        cfg.snr_grid = vec![0, 0];
        assert!(cfg.validate().is_err());
        cfg.snr_grid = vec![];
        assert!(cfg.validate().is_err());
        cfg.snr_grid = vec![3];
        assert!(cfg.validate().is_err());
    }
}
