//! AWGN channel with optional phase, carrier-frequency and timing offsets.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{IqGenError, IqMatrix};
use crate::FRAME_LEN;

/// Channel impairment switches and their magnitude ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Impairments {
    /// Constant carrier phase drawn uniformly from [0, 2π).
    pub phase_offset: bool,
    /// Normalized carrier-frequency offset drawn uniformly from ±`max_cfo` cycles/sample.
    pub max_cfo: Option<f64>,
    /// Fractional timing offset drawn uniformly from ±`max_timing_offset` samples.
    pub max_timing_offset: Option<f64>,
}

impl Default for Impairments {
    fn default() -> Self {
        Self {
            phase_offset: true,
            max_cfo: Some(1e-3),
            max_timing_offset: None,
        }
    }
}

impl Impairments {
    pub fn none() -> Self {
        Self {
            phase_offset: false,
            max_cfo: None,
            max_timing_offset: None,
        }
    }
}

/// Rotates every sample by `theta` radians.
pub fn apply_phase_offset(samples: &mut [Complex64], theta: f64) {
    let r = Complex64::from_polar(1.0, theta);
    samples.iter_mut().for_each(|s| *s *= r);
}

fn fractional_delay(samples: &[Complex64], delay: f64) -> Vec<Complex64> {
    let n = samples.len() as isize;
    (0..n)
        .map(|i| {
            let t = i as f64 - delay;
            let lo = t.floor();
            let frac = t - lo;
            let at = |k: isize| samples[k.clamp(0, n - 1) as usize];
            at(lo as isize) * (1.0 - frac) + at(lo as isize + 1) * frac
        })
        .collect()
}

/// Passes a unit-power clean frame through the channel and returns the 2×128 I/Q matrix.
///
/// Noise is circular complex Gaussian with total variance `10^(-snr_db/10)`.
/// `snr_db = +inf` disables the noise.
pub fn apply_channel<R: Rng + ?Sized>(
    clean: &[Complex64],
    snr_db: f64,
    impairments: &Impairments,
    rng: &mut R,
) -> Result<IqMatrix, IqGenError> {
    if clean.len() != FRAME_LEN {
        return Err(IqGenError::InvalidArgument(format!(
            "expected {FRAME_LEN} samples, got {}",
            clean.len()
        )));
    }
    if clean.iter().any(|s| !s.re.is_finite() || !s.im.is_finite()) {
        return Err(IqGenError::NonFinite);
    }
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(IqGenError::InvalidArgument(format!("snr_db = {snr_db}")));
    }

    let mut x = match impairments.max_timing_offset {
        Some(max) if max > 0.0 => fractional_delay(clean, rng.random_range(-max..=max)),
        _ => clean.to_vec(),
    };
    if impairments.phase_offset {
        apply_phase_offset(&mut x, rng.random_range(0.0..2.0 * PI));
    }
    if let Some(max) = impairments.max_cfo.filter(|m| *m > 0.0) {
        let cfo = rng.random_range(-max..=max);
        for (n, s) in x.iter_mut().enumerate() {
            *s *= Complex64::from_polar(1.0, 2.0 * PI * cfo * n as f64);
        }
    }
    if snr_db.is_finite() {
        let sigma = (10f64.powf(-snr_db / 10.0) / 2.0).sqrt();
        for s in x.iter_mut() {
            let ni: f64 = StandardNormal.sample(rng);
            let nq: f64 = StandardNormal.sample(rng);
            *s += Complex64::new(sigma * ni, sigma * nq);
        }
    }

    let mut iq = IqMatrix::zeros();
    for (n, s) in x.iter().enumerate() {
        iq.0[n] = s.re as f32;
        iq.0[FRAME_LEN + n] = s.im as f32;
    }
    Ok(iq)
}
