//! Clean baseband waveform synthesis for each modulation class.

use std::f64::consts::{PI, SQRT_2};

use num_complex::Complex64;
use rand::Rng;

use super::{IqGenError, ModulationScheme};

pub const RRC_ROLLOFF: f64 = 0.35;
pub const RRC_SPAN_SYMBOLS: usize = 4;

const CPFSK_INDEX: f64 = 0.5;
const GFSK_INDEX: f64 = 0.35;
const GFSK_BT: f64 = 0.3;
const ANALOG_TONES: usize = 8;
const ANALOG_MAX_FREQ: f64 = 0.1;
const WBFM_DEVIATION: f64 = 0.08;
const AM_INDEX: f64 = 0.5;

/// Root-raised-cosine taps spanning `span` symbols, normalized to unit energy.
pub fn rrc_taps(rolloff: f64, span: usize, sps: usize) -> Vec<f64> {
    let half = (span * sps / 2) as isize;
    let b = rolloff;
    let mut taps: Vec<f64> = (-half..=half)
        .map(|m| {
            let t = m as f64 / sps as f64;
            if m == 0 {
                1.0 - b + 4.0 * b / PI
            } else if b > 0.0 && ((4.0 * b * t).abs() - 1.0).abs() < 1e-9 {
                let a = PI / (4.0 * b);
                b / SQRT_2 * ((1.0 + 2.0 / PI) * a.sin() + (1.0 - 2.0 / PI) * a.cos())
            } else {
                ((PI * t * (1.0 - b)).sin() + 4.0 * b * t * (PI * t * (1.0 + b)).cos())
                    / (PI * t * (1.0 - (4.0 * b * t).powi(2)))
            }
        })
        .collect();
    let energy: f64 = taps.iter().map(|h| h * h).sum();
    let norm = energy.sqrt();
    taps.iter_mut().for_each(|h| *h /= norm);
    taps
}

fn constellation(scheme: ModulationScheme) -> Option<Vec<Complex64>> {
    let square = |levels: &[f64]| -> Vec<Complex64> {
        let mut pts = Vec::with_capacity(levels.len() * levels.len());
        for &re in levels {
            for &im in levels {
                pts.push(Complex64::new(re, im));
            }
        }
        pts
    };
    let psk = |m: usize, offset: f64| -> Vec<Complex64> {
        (0..m)
            .map(|k| Complex64::from_polar(1.0, offset + 2.0 * PI * k as f64 / m as f64))
            .collect()
    };
    let pts = match scheme {
        ModulationScheme::Bpsk => vec![Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)],
        ModulationScheme::Qpsk => psk(4, PI / 4.0),
        ModulationScheme::Psk8 => psk(8, 0.0),
        ModulationScheme::Pam4 => [-3.0, -1.0, 1.0, 3.0]
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .collect(),
        ModulationScheme::Qam16 => square(&[-3.0, -1.0, 1.0, 3.0]),
        ModulationScheme::Qam64 => square(&[-7.0, -5.0, -3.0, -1.0, 1.0, 3.0, 5.0, 7.0]),
        _ => return None,
    };
    Some(pts)
}

fn normalize_power(samples: &mut [Complex64]) {
    let power = samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / samples.len() as f64;
    if power > 0.0 {
        let g = power.sqrt().recip();
        samples.iter_mut().for_each(|s| *s *= g);
    }
}

/// Pulse-shaped linear modulation. Output index `j * sps` is the instant of symbol `j + span / 2`.
pub(crate) fn linear_burst<R: Rng + ?Sized>(
    points: &[Complex64],
    rng: &mut R,
    n_samples: usize,
    sps: usize,
) -> (Vec<Complex64>, Vec<Complex64>) {
    let taps = rrc_taps(RRC_ROLLOFF, RRC_SPAN_SYMBOLS, sps);
    let half = taps.len() / 2;
    let n_sym = (half + n_samples - 1 + half) / sps + 1;
    let symbols: Vec<Complex64> = (0..n_sym)
        .map(|_| points[rng.random_range(0..points.len())])
        .collect();

    let mut out = vec![Complex64::new(0.0, 0.0); n_samples];
    for (n, y) in out.iter_mut().enumerate() {
        let g = n + half;
        let k_lo = g.saturating_sub(half).div_ceil(sps);
        let k_hi = ((g + half) / sps).min(n_sym - 1);
        for k in k_lo..=k_hi {
            let tap = taps[g + half - k * sps];
            *y += symbols[k] * tap;
        }
    }
    (out, symbols)
}

fn fsk_burst<R: Rng + ?Sized>(
    rng: &mut R,
    n_samples: usize,
    sps: usize,
    index: f64,
    gaussian_bt: Option<f64>,
) -> Vec<Complex64> {
    let lead = RRC_SPAN_SYMBOLS * sps;
    let n_sym = (lead + n_samples).div_ceil(sps) + 1;
    let bits: Vec<f64> = (0..n_sym)
        .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    let nrz: Vec<f64> = (0..n_sym * sps).map(|n| bits[n / sps]).collect();

    let freq: Vec<f64> = match gaussian_bt {
        None => nrz,
        Some(bt) => {
            let sigma = (2f64.ln()).sqrt() / (2.0 * PI * bt);
            let half = (RRC_SPAN_SYMBOLS * sps / 2) as isize;
            let mut g: Vec<f64> = (-half..=half)
                .map(|m| {
                    let t = m as f64 / sps as f64;
                    (-t * t / (2.0 * sigma * sigma)).exp()
                })
                .collect();
            let s: f64 = g.iter().sum();
            g.iter_mut().for_each(|v| *v /= s);
            (0..nrz.len())
                .map(|n| {
                    g.iter()
                        .enumerate()
                        .map(|(j, w)| {
                            let idx = n as isize + j as isize - half;
                            let idx = idx.clamp(0, nrz.len() as isize - 1) as usize;
                            w * nrz[idx]
                        })
                        .sum()
                })
                .collect()
        }
    };

    let step = PI * index / sps as f64;
    let mut phase = 0.0;
    let mut out = Vec::with_capacity(n_samples);
    for (n, f) in freq.iter().enumerate().take(lead + n_samples) {
        if n >= lead {
            out.push(Complex64::from_polar(1.0, phase));
        }
        phase += step * f;
    }
    out
}

/// Band-limited message: a sum of random-phase tones below `ANALOG_MAX_FREQ`, peak-normalized.
fn analog_message<R: Rng + ?Sized>(rng: &mut R, n_samples: usize) -> Vec<f64> {
    let tones: Vec<(f64, f64)> = (0..ANALOG_TONES)
        .map(|_| {
            (
                rng.random_range(0.0..ANALOG_MAX_FREQ),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let mut m: Vec<f64> = (0..n_samples)
        .map(|n| {
            tones
                .iter()
                .map(|(f, ph)| (2.0 * PI * f * n as f64 + ph).cos())
                .sum()
        })
        .collect();
    let peak = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak > 0.0 {
        m.iter_mut().for_each(|v| *v /= peak);
    }
    m
}

/// Unit-average-power clean baseband waveform of `n_samples` samples for `scheme`.
pub fn modulate<R: Rng + ?Sized>(
    scheme: ModulationScheme,
    rng: &mut R,
    n_samples: usize,
    samples_per_symbol: usize,
) -> Result<Vec<Complex64>, IqGenError> {
    if samples_per_symbol == 0 {
        return Err(IqGenError::InvalidArgument(
            "samples_per_symbol must be positive".into(),
        ));
    }
    if n_samples < samples_per_symbol {
        return Err(IqGenError::InvalidArgument(format!(
            "n_samples ({n_samples}) < samples_per_symbol ({samples_per_symbol})"
        )));
    }
    let sps = samples_per_symbol;
    let mut out = match scheme {
        ModulationScheme::Cpfsk => fsk_burst(rng, n_samples, sps, CPFSK_INDEX, None),
        ModulationScheme::Gfsk => fsk_burst(rng, n_samples, sps, GFSK_INDEX, Some(GFSK_BT)),
        ModulationScheme::Wbfm => {
            let m = analog_message(rng, n_samples);
            let mut phase = 0.0;
            m.iter()
                .map(|v| {
                    let s = Complex64::from_polar(1.0, phase);
                    phase += 2.0 * PI * WBFM_DEVIATION * v;
                    s
                })
                .collect()
        }
        ModulationScheme::AmDsb => analog_message(rng, n_samples)
            .into_iter()
            .map(|v| Complex64::new(1.0 + AM_INDEX * v, 0.0))
            .collect(),
        linear => {
            let points = constellation(linear).expect("linear scheme has a constellation");
            linear_burst(&points, rng, n_samples, sps).0
        }
    };
    normalize_power(&mut out);
    Ok(out)
}
