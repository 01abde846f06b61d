//! Recording preprocessing: 200 Hz low-pass, 50/100 Hz notches, decimation to
//! 512 Hz and per-channel z-scoring, applied in that order.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{MobreError, Result};
use crate::synth::Recording;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub lowpass_hz: f64,
    /// Odd tap count of the Hamming-windowed sinc low-pass.
    pub lowpass_taps: usize,
    pub notch_hz: Vec<f64>,
    pub notch_q: f64,
    pub target_rate: f64,
    /// Channels whose standard deviation falls below this are only mean-centred.
    pub std_floor: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            lowpass_hz: 200.0,
            lowpass_taps: 201,
            notch_hz: vec![50.0, 100.0],
            notch_q: 30.0,
            target_rate: 512.0,
            std_floor: 1e-12,
        }
    }
}

/// Hamming-windowed sinc low-pass with unit DC gain.
pub fn design_lowpass(cutoff_hz: f64, fs: f64, taps: usize) -> Vec<f64> {
    assert!(taps % 2 == 1, "linear-phase type I filter needs an odd tap count");
    let fc = cutoff_hz / fs;
    let mid = (taps / 2) as f64;
    let mut h: Vec<f64> = (0..taps)
        .map(|i| {
            let n = i as f64 - mid;
            let sinc = if n == 0.0 {
                2.0 * fc
            } else {
                (2.0 * PI * fc * n).sin() / (PI * n)
            };
            let w = 0.54 - 0.46 * (2.0 * PI * i as f64 / (taps - 1) as f64).cos();
            sinc * w
        })
        .collect();
    let dc: f64 = h.iter().sum();
    for v in &mut h {
        *v /= dc;
    }
    h
}

/// Magnitude response of an FIR filter at `f_hz`.
pub fn fir_gain(h: &[f64], f_hz: f64, fs: f64) -> f64 {
    let w = 2.0 * PI * f_hz / fs;
    let (mut re, mut im) = (0.0, 0.0);
    for (n, &c) in h.iter().enumerate() {
        re += c * (w * n as f64).cos();
        im -= c * (w * n as f64).sin();
    }
    (re * re + im * im).sqrt()
}

/// Zero-delay FIR filtering with odd-reflection padding at both ends.
pub fn fir_filter(x: &[f64], h: &[f64]) -> Vec<f64> {
    let half = h.len() / 2;
    let padded = reflect_pad(x, half);
    (0..x.len())
        .map(|i| {
            let seg = &padded[i..i + h.len()];
            seg.iter().zip(h.iter().rev()).map(|(a, b)| a * b).sum()
        })
        .collect()
}

fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let pad = pad.min(n.saturating_sub(1));
    let mut out = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        out.push(2.0 * x[0] - x[i]);
    }
    out.extend_from_slice(x);
    for i in 1..=pad {
        out.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }
    out
}

/// Second-order IIR notch (normalized so `a0 = 1`).
#[derive(Clone, Copy, Debug)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    pub fn notch(f0: f64, fs: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * f0 / fs;
        let alpha = w0.sin() / (2.0 * q);
        let cw = w0.cos();
        let a0 = 1.0 + alpha;
        Biquad {
            b: [1.0 / a0, -2.0 * cw / a0, 1.0 / a0],
            a: [1.0, -2.0 * cw / a0, (1.0 - alpha) / a0],
        }
    }

    /// Transposed direct-form II pass, states initialized to the step
    /// steady state scaled by the first sample.
    fn run(&self, x: &[f64]) -> Vec<f64> {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        let dc = (b0 + b1 + b2) / (1.0 + a1 + a2);
        let x0 = x.first().copied().unwrap_or(0.0);
        let mut z2 = (b2 - a2 * dc) * x0;
        let mut z1 = (dc - b0) * x0;
        x.iter()
            .map(|&v| {
                let y = b0 * v + z1;
                z1 = b1 * v - a1 * y + z2;
                z2 = b2 * v - a2 * y;
                y
            })
            .collect()
    }

    /// Forward-backward (zero-phase) filtering.
    pub fn filtfilt(&self, x: &[f64], pad: usize) -> Vec<f64> {
        let n = x.len();
        let padded = reflect_pad(x, pad);
        let p = (padded.len() - n) / 2;
        let mut y = self.run(&padded);
        y.reverse();
        let mut y = self.run(&y);
        y.reverse();
        y[p..p + n].to_vec()
    }
}

/// Applies a zero-phase notch at `f0`, padding by several decay constants.
pub fn notch_filter(x: &[f64], fs: f64, f0: f64, q: f64) -> Vec<f64> {
    let bandwidth = f0 / q;
    let tau = fs / (PI * bandwidth);
    Biquad::notch(f0, fs, q).filtfilt(x, (6.0 * tau).ceil() as usize)
}

/// Keeps every `factor`-th sample.
pub fn decimate(x: &[f64], factor: usize) -> Vec<f64> {
    x.iter().step_by(factor).copied().collect()
}

/// Subtracts the mean and divides by the population standard deviation.
pub fn zscore(x: &mut [f64], std_floor: f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let div = if std < std_floor { 1.0 } else { std };
    for v in x.iter_mut() {
        *v = (*v - mean) / div;
    }
}

/// Full pipeline on one recording.
pub fn preprocess(raw: &Recording, cfg: &PreprocessConfig) -> Result<Recording> {
    let fs = raw.sample_rate;
    if fs < cfg.target_rate {
        return Err(MobreError::Resample {
            from: fs,
            to: cfg.target_rate,
        });
    }
    let ratio = fs / cfg.target_rate;
    let factor = ratio.round() as usize;
    if (ratio - factor as f64).abs() > 1e-9 {
        return Err(MobreError::Resample {
            from: fs,
            to: cfg.target_rate,
        });
    }
    let t = raw.num_samples();
    if t < cfg.lowpass_taps {
        return Err(MobreError::SignalTooShort {
            required: cfg.lowpass_taps,
            got: t,
        });
    }
    let c = raw.num_channels();
    let h = design_lowpass(cfg.lowpass_hz, fs, cfg.lowpass_taps);
    let out_len = t.div_ceil(factor);
    let mut out = vec![0.0; out_len * c];
    for ch in 0..c {
        let x = raw.channel(ch);
        let mut y = fir_filter(&x, &h);
        for &f0 in &cfg.notch_hz {
            if f0 < fs / 2.0 {
                y = notch_filter(&y, fs, f0, cfg.notch_q);
            }
        }
        let mut y = decimate(&y, factor);
        zscore(&mut y, cfg.std_floor);
        for (i, v) in y.into_iter().enumerate() {
            out[i * c + ch] = v;
        }
    }
    Ok(Recording {
        samples: out,
        num_samples: out_len,
        sample_rate: cfg.target_rate,
        ..raw.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::RegionMap;
    use std::collections::BTreeMap;

    fn rec(samples: Vec<f64>, t: usize, c: usize, fs: f64) -> Recording {
        Recording {
            subject_id: 0,
            recording_id: 0,
            samples,
            num_samples: t,
            num_channels: c,
            sample_rate: fs,
            region_map: RegionMap::new(vec![0; c], vec!["r0".into()]).unwrap(),
            labels: BTreeMap::new(),
        }
    }

    /// Hann-windowed periodogram power at exactly bin `k` (direct DFT sum).
    fn bin_power(x: &[f64], k: usize) -> f64 {
        let n = x.len() as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (i, &v) in x.iter().enumerate() {
            let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos();
            let a = 2.0 * PI * k as f64 * i as f64 / n;
            re += w * v * a.cos();
            im -= w * v * a.sin();
        }
        (re * re + im * im) / n
    }

    #[test]
    fn lowpass_transition_is_narrower_than_20hz_at_1024hz() {
        let h = design_lowpass(200.0, 1024.0, 201);
        assert!(fir_gain(&h, 190.0, 1024.0) > 0.89, "passband edge");
        assert!(fir_gain(&h, 210.0, 1024.0) < 0.01, "stopband edge");
        assert!((fir_gain(&h, 0.0, 1024.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn notch_removes_50hz_by_40db() {
        let fs = 1024.0;
        let x: Vec<f64> = (0..2048).map(|i| (2.0 * PI * 50.0 * i as f64 / fs).sin()).collect();
        let y = notch_filter(&x, fs, 50.0, 30.0);
        let before = bin_power(&x, 100);
        let after = bin_power(&y, 100);
        let db = 10.0 * (before / after).log10();
        assert!(db >= 40.0, "attenuation {db} dB");
    }

    #[test]
    fn notch_passes_distant_frequencies() {
        let fs = 1024.0;
        let x: Vec<f64> = (0..2048).map(|i| (2.0 * PI * 20.0 * i as f64 / fs).sin()).collect();
        let y = notch_filter(&x, fs, 50.0, 30.0);
        let ratio = bin_power(&y, 40) / bin_power(&x, 40);
        assert!((ratio - 1.0).abs() < 0.01);
    }

    #[test]
    fn constant_channel_becomes_zero() {
        let r = rec(vec![3.5; 1024 * 2], 1024, 2, 1024.0);
        let p = preprocess(&r, &PreprocessConfig::default()).unwrap();
        assert_eq!(p.sample_rate, 512.0);
        assert!(p.samples.iter().all(|v| v.abs() < 1e-9));
        assert!(p.all_finite());
    }

    #[test]
    fn already_at_target_rate_keeps_length() {
        let t = 600;
        let x: Vec<f64> = (0..t).map(|i| ((i * 37 % 101) as f64).sin()).collect();
        let r = rec(x, t, 1, 512.0);
        let p = preprocess(&r, &PreprocessConfig::default()).unwrap();
        assert_eq!(p.num_samples, t);
    }

    #[test]
    fn zscore_bounds_hold() {
        let t = 2048;
        let x: Vec<f64> = (0..t * 3).map(|i| ((i * 7919 % 1013) as f64) * 0.37 - 20.0).collect();
        let r = rec(x, t, 3, 1024.0);
        let p = preprocess(&r, &PreprocessConfig::default()).unwrap();
        for ch in 0..3 {
            let y = p.channel(ch);
            let n = y.len() as f64;
            let mean = y.iter().sum::<f64>() / n;
            let std = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_short_and_upsampling_inputs() {
        let r = rec(vec![0.0; 100], 100, 1, 1024.0);
        assert!(matches!(
            preprocess(&r, &PreprocessConfig::default()),
            Err(MobreError::SignalTooShort { .. })
        ));
        let r = rec(vec![0.0; 1000], 1000, 1, 256.0);
        assert!(matches!(
            preprocess(&r, &PreprocessConfig::default()),
            Err(MobreError::Resample { .. })
        ));
    }
}
