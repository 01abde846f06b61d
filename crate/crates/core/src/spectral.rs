//! One-sided DFT amplitude/phase encoding of real patches and its inverse.

use std::f64::consts::PI;

use crate::error::{MobreError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralTarget {
    /// `|X_m| / N` for `m = 0..=N/2`.
    pub amplitude: Vec<f64>,
    /// `atan2(Im X_m, Re X_m)` in `(-π, π]`.
    pub phase: Vec<f64>,
    pub num_samples: usize,
}

pub fn num_bins(n: usize) -> usize {
    n / 2 + 1
}

/// Weight of bin `m` when folding the one-sided spectrum back to a real signal.
pub fn fold_weight(m: usize, n: usize) -> f64 {
    if m == 0 || (n.is_multiple_of(2) && m == n / 2) {
        1.0
    } else {
        2.0
    }
}

/// `cos(2π·j/N)` and `sin(2π·j/N)` for `j = 0..N`.
fn twiddles(n: usize) -> (Vec<f64>, Vec<f64>) {
    (0..n)
        .map(|j| {
            let a = 2.0 * PI * j as f64 / n as f64;
            (a.cos(), a.sin())
        })
        .unzip()
}

fn wrap_phase(theta: f64) -> f64 {
    if theta <= -PI {
        theta + 2.0 * PI
    } else {
        theta
    }
}

pub fn spectral_encode(x: &[f64]) -> Result<SpectralTarget> {
    let n = x.len();
    if n == 0 {
        return Err(MobreError::Invalid("empty patch".into()));
    }
    let (cos, sin) = twiddles(n);
    let bins = num_bins(n);
    let mut amplitude = Vec::with_capacity(bins);
    let mut phase = Vec::with_capacity(bins);
    for m in 0..bins {
        let (mut re, mut im) = (0.0, 0.0);
        for (i, &v) in x.iter().enumerate() {
            let j = (m * i) % n;
            re += v * cos[j];
            im -= v * sin[j];
        }
        amplitude.push(re.hypot(im) / n as f64);
        phase.push(wrap_phase(im.atan2(re)));
    }
    Ok(SpectralTarget {
        amplitude,
        phase,
        num_samples: n,
    })
}

pub fn spectral_decode(t: &SpectralTarget) -> Result<Vec<f64>> {
    let n = t.num_samples;
    if n == 0 || t.amplitude.len() != num_bins(n) || t.phase.len() != num_bins(n) {
        return Err(MobreError::Invalid(format!(
            "spectral target with {} amplitude / {} phase bins for N = {n}",
            t.amplitude.len(),
            t.phase.len()
        )));
    }
    let (cos, sin) = twiddles(n);
    let mut out = vec![0.0; n];
    for (m, (&a, &th)) in t.amplitude.iter().zip(&t.phase).enumerate() {
        let w = fold_weight(m, n) * a;
        let (c, s) = (th.cos(), th.sin());
        for (i, o) in out.iter_mut().enumerate() {
            let j = (m * i) % n;
            *o += w * (cos[j] * c - sin[j] * s);
        }
    }
    Ok(out)
}

/// Synthesis matrices `C[m, n] = w_m cos(2πmn/N)` and `S[m, n] = w_m sin(2πmn/N)`,
/// each `[N/2+1 × N]`, so that a patch is `(A⊙cosθ)·C − (A⊙sinθ)·S`.
pub fn synthesis_matrices(n: usize) -> (Vec<f64>, Vec<f64>) {
    let (cos, sin) = twiddles(n);
    let bins = num_bins(n);
    let mut cm = vec![0.0; bins * n];
    let mut sm = vec![0.0; bins * n];
    for m in 0..bins {
        let w = fold_weight(m, n);
        for i in 0..n {
            let j = (m * i) % n;
            cm[m * n + i] = w * cos[j];
            sm[m * n + i] = w * sin[j];
        }
    }
    (cm, sm)
}
