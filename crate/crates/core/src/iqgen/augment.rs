//! Training-time I/Q augmentation: amplitude scaling, phase rotation, circular time shift.

use std::f64::consts::PI;

use rand::Rng;

use super::{IqMatrix, LabeledFrame};
use crate::FRAME_LEN;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    pub rotation: f64,
    pub shift: usize,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        scale: 1.0,
        rotation: 0.0,
        shift: 0,
    };

    /// Scale ~ U[0.8, 1.2], rotation ~ U[0, 2π), shift ~ U{0..127}.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            scale: rng.random_range(0.8..=1.2),
            rotation: rng.random_range(0.0..2.0 * PI),
            shift: rng.random_range(0..FRAME_LEN),
        }
    }
}

pub fn augment_with(frame: &LabeledFrame, params: AugmentParams) -> LabeledFrame {
    let (s, c) = params.rotation.sin_cos();
    let (s, c) = (s * params.scale, c * params.scale);
    let mut iq = IqMatrix::zeros();
    for t in 0..FRAME_LEN {
        let src = (t + FRAME_LEN - params.shift % FRAME_LEN) % FRAME_LEN;
        let i = frame.iq.0[src] as f64;
        let q = frame.iq.0[FRAME_LEN + src] as f64;
        iq.0[t] = (c * i - s * q) as f32;
        iq.0[FRAME_LEN + t] = (s * i + c * q) as f32;
    }
    LabeledFrame {
        iq,
        label: frame.label,
        snr_db: frame.snr_db,
    }
}

pub fn augment<R: Rng + ?Sized>(frame: &LabeledFrame, rng: &mut R) -> LabeledFrame {
    augment_with(frame, AugmentParams::sample(rng))
}
