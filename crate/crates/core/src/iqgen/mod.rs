//! Synthetic labeled I/Q modulation dataset.
//!
//! Frames are 2×128 real matrices (row 0 in-phase, row 1 quadrature) produced by
//! modulating a random message, passing it through an AWGN channel with optional
//! phase and carrier-frequency offsets, and tagging it with its modulation label,
//! SNR and split.

mod augment;
mod channel;
mod dataset;
mod format;
mod modulate;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::BinError;
use crate::{FRAME_LEN, NUM_CLASSES};

pub use augment::{augment, augment_with, AugmentParams};
pub use channel::{apply_channel, apply_phase_offset, Impairments};
pub use dataset::{generate_dataset, stratum_rng, split_counts, Dataset, GenConfig};
pub use format::{dataset_from_bytes, dataset_to_bytes, load_dataset, save_dataset};
pub use modulate::{modulate, rrc_taps, RRC_ROLLOFF, RRC_SPAN_SYMBOLS};

#[derive(Debug, Error)]
pub enum IqGenError {
    #[error("unknown modulation scheme {0:?}")]
    UnknownScheme(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite input sample")]
    NonFinite,
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset file: {0}")]
    Format(#[from] BinError),
}

/// The ten modulation classes, in the fixed class order used by every probability vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModulationScheme {
    Qam16,
    Qam64,
    Psk8,
    Wbfm,
    Bpsk,
    Cpfsk,
    AmDsb,
    Gfsk,
    Pam4,
    Qpsk,
}

impl ModulationScheme {
    pub const ALL: [ModulationScheme; NUM_CLASSES] = [
        Self::Qam16,
        Self::Qam64,
        Self::Psk8,
        Self::Wbfm,
        Self::Bpsk,
        Self::Cpfsk,
        Self::AmDsb,
        Self::Gfsk,
        Self::Pam4,
        Self::Qpsk,
    ];

    /// Zero-based class index (position in a probability vector).
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Result<Self, IqGenError> {
        Self::ALL
            .get(index)
            .copied()
            .ok_or_else(|| IqGenError::UnknownScheme(format!("class index {index}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Qam16 => "QAM16",
            Self::Qam64 => "QAM64",
            Self::Psk8 => "8PSK",
            Self::Wbfm => "WBFM",
            Self::Bpsk => "BPSK",
            Self::Cpfsk => "CPFSK",
            Self::AmDsb => "AM-DSB",
            Self::Gfsk => "GFSK",
            Self::Pam4 => "PAM4",
            Self::Qpsk => "QPSK",
        }
    }
}

impl fmt::Display for ModulationScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModulationScheme {
    type Err = IqGenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| IqGenError::UnknownScheme(s.to_string()))
    }
}

/// Dataset split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Row-major 2×128 I/Q matrix.
#[derive(Clone, PartialEq)]
pub struct IqMatrix(pub [f32; 2 * FRAME_LEN]);

impl IqMatrix {
    pub fn zeros() -> Self {
        IqMatrix([0.0; 2 * FRAME_LEN])
    }

    pub fn i(&self) -> &[f32] {
        &self.0[..FRAME_LEN]
    }

    pub fn q(&self) -> &[f32] {
        &self.0[FRAME_LEN..]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn mean_power(&self) -> f64 {
        self.0.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / FRAME_LEN as f64
    }
}

impl fmt::Debug for IqMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "IqMatrix(2x{FRAME_LEN}, power={:.4})", self.mean_power())
    }
}

/// One labeled frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    pub iq: IqMatrix,
    pub label: ModulationScheme,
    pub snr_db: i16,
}

/// SNR levels admitted by the generator: −20 dB to +20 dB in 2 dB steps.
pub fn standard_snr_grid() -> Vec<i16> {
    (-10..=10).map(|k| 2 * k).collect()
}

pub(crate) fn is_grid_snr(snr: i16) -> bool {
    (-20..=20).contains(&snr) && snr % 2 == 0
}
