//! Compact early-exit AMC classifier.
//!
//! A temporal-convolution stem followed by three residual stages feeds the final-exit
//! head; the early-exit head pools the output of a configurable stage. Both heads are a
//! global average pool plus one dense layer.

mod cost;
mod manifest;
mod model;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensornet::{ProbVector, TensorError};

pub use cost::{avg_macs, avg_macs_counts, count_macs, CostProfile};
pub use manifest::{load_model, parse_manifest, save_model, ModelManifest};
pub use model::{frame_tensor, AmcModel, BackboneProbe, ExitCache, Trunk};
pub use train::{
    evaluate_accuracy, train_backbone, train_exit_branch, BackboneTrainConfig, EpochStats,
    ExitTrainConfig, TrainLog,
};

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("exit cache is stale (cached model {cached_id} v{cached_version}, current model {model_id} v{model_version})")]
    StaleCache {
        cached_id: u64,
        cached_version: u64,
        model_id: u64,
        model_version: u64,
    },
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("frozen parameters changed during {0}")]
    FrozenDrift(&'static str),
    #[error("split {0} is empty")]
    EmptySplit(&'static str),
    #[error("model manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Stage whose output feeds the early-exit head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum ExitPoint {
    Stage1 = 1,
    Stage2 = 2,
    Stage3 = 3,
}

impl ExitPoint {
    pub const ALL: [ExitPoint; 3] = [ExitPoint::Stage1, ExitPoint::Stage2, ExitPoint::Stage3];

    /// Number of stages run before the early exit (1-based stage index).
    pub fn stage(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            ExitPoint::Stage1 => "EE-RS1",
            ExitPoint::Stage2 => "EE-RS2",
            ExitPoint::Stage3 => "EE-RS3",
        }
    }
}

impl TryFrom<u8> for ExitPoint {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            1 => Ok(ExitPoint::Stage1),
            2 => Ok(ExitPoint::Stage2),
            3 => Ok(ExitPoint::Stage3),
            _ => Err(format!("exit point must be 1, 2 or 3, got {v}")),
        }
    }
}

impl From<ExitPoint> for u8 {
    fn from(e: ExitPoint) -> u8 {
        e as u8
    }
}

impl std::fmt::Display for ExitPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", *self as u8)
    }
}

impl std::str::FromStr for ExitPoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let v: u8 = s.trim().parse().map_err(|_| format!("bad exit point {s:?}"))?;
        ExitPoint::try_from(v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub stem_channels: usize,
    pub stage_widths: [usize; 3],
    pub blocks_per_stage: usize,
    pub stem_kernel: usize,
    pub block_kernel: usize,
    pub exit_point: ExitPoint,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            stage_widths: [16, 32, 64],
            blocks_per_stage: 2,
            stem_kernel: 7,
            block_kernel: 5,
            exit_point: ExitPoint::Stage1,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<(), BackboneError> {
        let bad = |m: &str| Err(BackboneError::InvalidArch(m.to_string()));
        if self.stem_channels == 0 || self.stage_widths.contains(&0) {
            return bad("channel counts must be positive");
        }
        if self.blocks_per_stage == 0 {
            return bad("each stage needs at least one block");
        }
        if self.stem_kernel.is_multiple_of(2) || self.block_kernel.is_multiple_of(2) {
            return bad("kernels must be odd for same padding");
        }
        Ok(())
    }

    /// Temporal stride of the first block in stage `s` (0-based).
    pub fn stage_stride(s: usize) -> usize {
        if s == 0 {
            1
        } else {
            2
        }
    }

    pub fn with_exit_point(&self, exit_point: ExitPoint) -> Self {
        Self {
            exit_point,
            ..self.clone()
        }
    }
}

/// Paired early/final exit outputs for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitPair {
    pub p_e: ProbVector,
    pub p_f: Option<ProbVector>,
    pub yhat_e: usize,
    pub yhat_f: Option<usize>,
}

impl ExitPair {
    pub fn early(p_e: ProbVector) -> Self {
        Self {
            yhat_e: p_e.argmax(),
            p_e,
            p_f: None,
            yhat_f: None,
        }
    }

    pub fn full(p_e: ProbVector, p_f: ProbVector) -> Self {
        Self {
            yhat_e: p_e.argmax(),
            yhat_f: Some(p_f.argmax()),
            p_e,
            p_f: Some(p_f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iqgen::IqMatrix;
    use crate::tensornet::{gradcheck, Dense, GradCheckConfig, Parameters};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame<R: Rng>(rng: &mut R) -> IqMatrix {
        let mut iq = IqMatrix::zeros();
        iq.0.iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
        iq
    }

    fn model(exit: ExitPoint, seed: u64) -> AmcModel {
        let arch = ArchConfig::default().with_exit_point(exit);
        AmcModel::new(arch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn temporal_lengths_follow_the_stage_schedule() {
        let m = model(ExitPoint::Stage1, 1);
        let x = frame_tensor(&random_frame(&mut ChaCha8Rng::seed_from_u64(2))).unwrap();
        let mut h = m.trunk().stem_forward(&x).unwrap();
        assert_eq!(h.shape(), &[16, 128]);
        let expect = [(16, 128), (32, 64), (64, 32)];
        for (s, &(c, l)) in expect.iter().enumerate() {
            h = m.trunk().run_stages(h, s, s + 1).unwrap();
            assert_eq!(h.shape(), &[c, l]);
        }
    }

    #[test]
    fn mac_examples_and_additivity() {
        assert_eq!(Dense::zeros(10, 64).macs(), 640);
        let m = model(ExitPoint::Stage2, 3);
        assert_eq!(m.trunk().stem.macs(128).unwrap(), 2 * 16 * 7 * 128);
        let full_path = {
            let t = m.trunk();
            let mut len = 128;
            let mut total = t.stem.macs(len).unwrap();
            for b in t.stages.iter().flatten() {
                total += b.macs(len).unwrap();
                len = b.conv1.out_len(len).unwrap();
            }
            total + t.fe_head.macs()
        };
        for e in ExitPoint::ALL {
            let p = count_macs(&model(e, 3)).unwrap();
            assert_eq!(p.macs_prefix + p.macs_suffix + p.macs_fe_head, full_path);
            assert_eq!(
                p.macs_ee_head,
                10 * ArchConfig::default().stage_widths[e.stage() - 1] as u64
            );
        }
        let p3 = count_macs(&model(ExitPoint::Stage3, 3)).unwrap();
        assert_eq!(p3.macs_suffix, 0);
    }

    #[test]
    fn compact_size() {
        let m = model(ExitPoint::Stage1, 4);
        let n = m.trunk().num_params();
        assert!((80_000..120_000).contains(&n), "{n} params");
    }

    #[test]
    fn avg_macs_endpoints_and_affinity() {
        let p = CostProfile {
            macs_prefix: 1000,
            macs_ee_head: 160,
            macs_suffix: 5000,
            macs_fe_head: 640,
            macs_lbap: 2720,
        };
        assert_eq!(avg_macs(&p, 0.0, false).unwrap(), 1160.0);
        assert_eq!(avg_macs(&p, 0.0, true).unwrap(), 3880.0);
        assert_eq!(avg_macs(&p, 1.0, false).unwrap(), 6800.0);
        let mid = avg_macs(&p, 0.5, true).unwrap();
        let ends = (avg_macs(&p, 0.0, true).unwrap() + avg_macs(&p, 1.0, true).unwrap()) / 2.0;
        assert!((mid - ends).abs() < 1e-9);
        assert!(avg_macs(&p, 1.5, false).is_err());
        assert_eq!(avg_macs_counts(&p, 1, 4, false).unwrap(), 1160.0 + 5640.0 / 4.0);
        assert!(avg_macs_counts(&p, 5, 4, false).is_err());
    }

    #[test]
    fn split_forward_is_bitwise_equal_to_full_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for e in ExitPoint::ALL {
            let m = model(e, 6);
            for _ in 0..5 {
                let iq = random_frame(&mut rng);
                let (early, cache) = m.forward_to_exit(&iq).unwrap();
                let p_f = m.forward_final(&cache).unwrap();
                let full = m.forward_full(&iq).unwrap();
                assert_eq!(early.p_e, full.p_e);
                assert_eq!(Some(p_f), full.p_f);
                let s = early.p_e.as_slice().iter().sum::<f64>();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn stale_caches_are_rejected() {
        let mut m = model(ExitPoint::Stage1, 7);
        let iq = random_frame(&mut ChaCha8Rng::seed_from_u64(8));
        let (_, cache) = m.forward_to_exit(&iq).unwrap();
        let other = m.clone();
        assert!(matches!(
            other.forward_final(&cache),
            Err(BackboneError::StaleCache { .. })
        ));
        m.ee_head_mut();
        assert!(matches!(
            m.forward_final(&cache),
            Err(BackboneError::StaleCache { .. })
        ));
        let (_, fresh) = m.forward_to_exit(&iq).unwrap();
        assert!(m.forward_final(&fresh).is_ok());
    }

    #[test]
    fn zero_exit_head_gives_uniform_output() {
        let mut m = model(ExitPoint::Stage2, 9);
        m.ee_head_mut().fill(0.0);
        let (pair, _) = m.forward_to_exit(&random_frame(&mut ChaCha8Rng::seed_from_u64(1))).unwrap();
        assert!(pair.p_e.as_slice().iter().all(|&p| (p - 0.1).abs() < 1e-15));
        assert_eq!(pair.yhat_e, 0);
    }

    #[test]
    fn malformed_frames_are_rejected() {
        let m = model(ExitPoint::Stage1, 10);
        let mut iq = IqMatrix::zeros();
        iq.0[17] = f32::NAN;
        assert!(matches!(
            m.forward_full(&iq),
            Err(BackboneError::MalformedFrame(_))
        ));
    }

    #[test]
    fn exit_point_parsing() {
        assert_eq!("2".parse::<ExitPoint>().unwrap(), ExitPoint::Stage2);
        assert!("4".parse::<ExitPoint>().is_err());
        assert!(ArchConfig {
            block_kernel: 4,
            ..ArchConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = model(ExitPoint::Stage3, 11);
        m.round_to_f32();
        let (ck, mf) = (dir.path().join("m.ck"), dir.path().join("m.manifest"));
        save_model(&m, &ck, &mf).unwrap();
        let back = load_model(&ck, &mf).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.version(), m.version());
        assert_eq!(back.exit_point(), ExitPoint::Stage3);
        let text = std::fs::read_to_string(&mf).unwrap();
        assert!(text.contains("stage_widths=16,32,64"));
        assert_eq!(parse_manifest(&text).unwrap(), ModelManifest::of(&m));
        assert!(parse_manifest("format=beacon-model\n").is_err());
    }

    #[test]
    fn trunk_gradients_match_finite_differences() {
        let arch = ArchConfig {
            stem_channels: 3,
            stage_widths: [3, 4, 5],
            blocks_per_stage: 1,
            stem_kernel: 7,
            block_kernel: 3,
            exit_point: ExitPoint::Stage1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let probe = BackboneProbe::random(&arch, &mut rng).unwrap();
        let cfg = GradCheckConfig {
            max_params: Some(150),
            ..GradCheckConfig::default()
        };
        let r = gradcheck(&probe, &cfg);
        assert!(r.passed(), "{r:?}");
    }
}
