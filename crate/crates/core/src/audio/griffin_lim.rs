//! Griffin-Lim inversion of log-mel spectrograms.
//!
//! The mel filterbank is inverted by a ridge-regularized pseudo-inverse
//! (computed once per call from the analysis config), giving a linear
//! magnitude estimate that seeds iterative phase refinement from random
//! phase under an explicit seed.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use super::mel::{mel_filterbank, MelSpectrogram};
use super::{istft, stft, Waveform};
use crate::config::AnalysisConfig;
use crate::error::{CoreError, Result};

/// Solves `A x = b` for symmetric positive definite `A` via Cholesky.
fn cholesky_solve(a: &Array2<f64>, b: &[f64]) -> Vec<f64> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                l[[i, j]] = s.max(1e-300).sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    // Forward then back substitution.
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// `pinv(F) = F^T (F F^T + eps I)^-1`, mapping mel power back to linear power.
fn filterbank_pseudo_inverse(fb: &Array2<f64>) -> Array2<f64> {
    let (m, k) = fb.dim();
    let gram = fb.dot(&fb.t());
    let mut reg = gram.clone();
    let scale = gram.diag().sum() / m as f64;
    for i in 0..m {
        reg[[i, i]] += 1e-8 * scale;
    }
    // Solve reg * X = fb  (row by row of fb), then pinv = X^T.
    let mut x = Array2::<f64>::zeros((m, k));
    for col in 0..k {
        let b: Vec<f64> = (0..m).map(|i| fb[[i, col]]).collect();
        let sol = cholesky_solve(&reg, &b);
        for i in 0..m {
            x[[i, col]] = sol[i];
        }
    }
    x.t().to_owned()
}

/// Reconstructs a waveform from a log-mel spectrogram with `cfg.gl_iters`
/// phase refinement passes. Output length is `T * hop`.
pub fn griffin_lim(m: &MelSpectrogram, cfg: &AnalysisConfig, seed: u64) -> Result<Waveform> {
    cfg.validate()?;
    if m.frames.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::AudioFormat("non-finite spectrogram values".into()));
    }
    if m.num_bins() != cfg.n_mels {
        return Err(CoreError::Shape(format!(
            "mel bins {} do not match config {}",
            m.num_bins(),
            cfg.n_mels
        )));
    }
    let t_frames = m.num_frames();
    let n_bins = cfg.n_fft / 2 + 1;

    let fb = mel_filterbank(cfg);
    let pinv = filterbank_pseudo_inverse(&fb);

    // Log-mel -> mel power -> linear power (clipped) -> magnitude.
    let mut mag = Array2::<f64>::zeros((t_frames, n_bins));
    for t in 0..t_frames {
        let mel_power: Vec<f64> = (0..cfg.n_mels).map(|b| (m.frames[[t, b]] as f64).exp()).collect();
        for k in 0..n_bins {
            let mut acc = 0.0;
            for b in 0..cfg.n_mels {
                acc += pinv[[k, b]] * mel_power[b];
            }
            mag[[t, k]] = acc.max(0.0).sqrt();
        }
    }

    // Random initial phase, then alternate projections.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec: Vec<Vec<Complex64>> = (0..t_frames)
        .map(|t| {
            (0..n_bins)
                .map(|k| {
                    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    Complex64::from_polar(mag[[t, k]], phi)
                })
                .collect()
        })
        .collect();

    let mut x = istft(&spec, cfg.n_fft, cfg.hop, cfg.win);
    for _ in 0..cfg.gl_iters {
        let reanalyzed = stft(&x, cfg.n_fft, cfg.hop, cfg.win);
        for t in 0..t_frames.min(reanalyzed.len()) {
            for k in 0..n_bins {
                let phase = reanalyzed[t][k].arg();
                spec[t][k] = Complex64::from_polar(mag[[t, k]], phase);
            }
        }
        x = istft(&spec, cfg.n_fft, cfg.hop, cfg.win);
    }

    let samples: Vec<f32> = x.iter().map(|&v| v.clamp(-1.0, 1.0)).collect();
    Waveform::new(samples, cfg.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::mel_spectrogram;

    fn cfg() -> AnalysisConfig {
        AnalysisConfig::default()
    }

    #[test]
    fn output_length_contract() {
        let c = cfg();
        let mel = MelSpectrogram {
            frames: Array2::from_elem((100, 80), (1e-5f64).ln() as f32),
            frame_rate: 100.0,
        };
        let w = griffin_lim(&mel, &c, 0).unwrap();
        let len = w.samples.len() as i64;
        assert!((len - 16_000).unsigned_abs() as usize <= c.win, "len {len}");
    }

    #[test]
    fn silent_spectrogram_reconstructs_near_silence() {
        let c = cfg();
        let mel = MelSpectrogram {
            frames: Array2::from_elem((50, 80), (1e-5f64).ln() as f32),
            frame_rate: 100.0,
        };
        let w = griffin_lim(&mel, &c, 3).unwrap();
        let rms =
            (w.samples.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / w.samples.len() as f64).sqrt();
        assert!(rms < 1e-3, "rms {rms}");
    }

    #[test]
    fn rejects_non_finite_input() {
        let c = cfg();
        let mut frames = Array2::from_elem((10, 80), -5.0f32);
        frames[[3, 40]] = f32::NAN;
        let mel = MelSpectrogram { frames, frame_rate: 100.0 };
        assert!(griffin_lim(&mel, &c, 0).is_err());
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let c = cfg();
        let w = Waveform::new(
            (0..8_000)
                .map(|i| {
                    let t = i as f64 / 16_000.0;
                    (0.5 * (2.0 * std::f64::consts::PI * 180.0 * t).sin()) as f32
                })
                .collect(),
            16_000,
        )
        .unwrap();
        let mel = mel_spectrogram(&w, &c).unwrap();
        let a = griffin_lim(&mel, &c, 11).unwrap();
        let b = griffin_lim(&mel, &c, 11).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    // Round-trip quality is asserted with this crate's own STOI in the
    // acceptance suite; here we only require substantial energy recovery.
    #[test]
    fn round_trip_preserves_energy_scale() {
        let c = cfg();
        let w = Waveform::new(
            (0..16_000)
                .map(|i| {
                    let t = i as f64 / 16_000.0;
                    (0.4 * (2.0 * std::f64::consts::PI * 220.0 * t).sin()
                        + 0.2 * (2.0 * std::f64::consts::PI * 660.0 * t).sin())
                        as f32
                })
                .collect(),
            16_000,
        )
        .unwrap();
        let mel = mel_spectrogram(&w, &c).unwrap();
        let y = griffin_lim(&mel, &c, 5).unwrap();
        let rms = |s: &[f32]| {
            (s.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / s.len() as f64).sqrt()
        };
        let (r0, r1) = (rms(&w.samples), rms(&y.samples));
        assert!((r1 / r0) > 0.5 && (r1 / r0) < 2.0, "rms ratio {}", r1 / r0);
    }
}
