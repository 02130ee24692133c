//! Mel-cepstral distortion.
//!
//! Cepstra are DCT-II coefficients 1..=13 of the natural-log mel spectrum
//! (c0, overall level, is excluded). Frames are paired by dynamic time
//! warping on cepstral Euclidean distance, and the score is the path-mean
//! distance scaled by 10*sqrt(2)/ln 10. Self-contained rather than
//! WORLD-style cepstra: the formula constant matches, absolute values are
//! only comparable within this codebase.

use ndarray::Array2;

use crate::audio::{mel_spectrogram, MelSpectrogram, Waveform};
use crate::config::AnalysisConfig;
use crate::error::{CoreError, Result};

pub const MCD_COEFFS: usize = 13;

/// `frames x 13` cepstra from a log-mel spectrogram.
pub fn mel_cepstra(mel: &MelSpectrogram) -> Array2<f64> {
    let (t, m) = mel.frames.dim();
    let mut out = Array2::<f64>::zeros((t, MCD_COEFFS));
    for ti in 0..t {
        for k in 1..=MCD_COEFFS {
            let mut acc = 0.0;
            for j in 0..m {
                acc += mel.frames[[ti, j]] as f64
                    * (std::f64::consts::PI * k as f64 * (j as f64 + 0.5) / m as f64).cos();
            }
            out[[ti, k - 1]] = acc;
        }
    }
    out
}

/// DTW pairing (symmetric steps) minimizing summed Euclidean distance;
/// returns the aligned index pairs.
pub fn dtw_path(a: &Array2<f64>, b: &Array2<f64>) -> Vec<(usize, usize)> {
    let (n, m) = (a.nrows(), b.nrows());
    assert!(n > 0 && m > 0, "DTW needs non-empty sequences");
    let dist = |i: usize, j: usize| -> f64 {
        let mut acc = 0.0;
        for k in 0..a.ncols() {
            let d = a[[i, k]] - b[[j, k]];
            acc += d * d;
        }
        acc.sqrt()
    };

    let mut cost = Array2::<f64>::from_elem((n, m), f64::INFINITY);
    cost[[0, 0]] = dist(0, 0);
    for i in 0..n {
        for j in 0..m {
            if i == 0 && j == 0 {
                continue;
            }
            let mut best = f64::INFINITY;
            if i > 0 {
                best = best.min(cost[[i - 1, j]]);
            }
            if j > 0 {
                best = best.min(cost[[i, j - 1]]);
            }
            if i > 0 && j > 0 {
                best = best.min(cost[[i - 1, j - 1]]);
            }
            cost[[i, j]] = dist(i, j) + best;
        }
    }

    // Backtrack, preferring the diagonal on ties.
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let diag = if i > 0 && j > 0 { cost[[i - 1, j - 1]] } else { f64::INFINITY };
        let up = if i > 0 { cost[[i - 1, j]] } else { f64::INFINITY };
        let left = if j > 0 { cost[[i, j - 1]] } else { f64::INFINITY };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        path.push((i, j));
    }
    path.reverse();
    path
}

/// MCD in dB between two cepstral sequences.
pub fn mcd_from_cepstra(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(CoreError::Metric("empty cepstral sequence".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(CoreError::Metric(format!(
            "cepstral orders differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let path = dtw_path(a, b);
    let mut sum = 0.0;
    for &(i, j) in &path {
        let mut acc = 0.0;
        for k in 0..a.ncols() {
            let d = a[[i, k]] - b[[j, k]];
            acc += d * d;
        }
        sum += acc.sqrt();
    }
    let constant = 10.0 * 2f64.sqrt() / 10f64.ln();
    Ok(constant * sum / path.len() as f64)
}

/// MCD between two waveforms under the given analysis settings.
pub fn mcd(reference: &Waveform, degraded: &Waveform, cfg: &AnalysisConfig) -> Result<f64> {
    let a = mel_cepstra(&mel_spectrogram(reference, cfg)?);
    let b = mel_cepstra(&mel_spectrogram(degraded, cfg)?);
    mcd_from_cepstra(&a, &b)
}
