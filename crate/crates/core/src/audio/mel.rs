//! Log-mel spectrogram analysis.
//!
//! 80 triangular filters on an HTK mel scale between `fmin` and `fmax`,
//! area-normalized, applied to the power spectrum of each frame. Values are
//! floored at `log_floor` before the natural log, so silence maps to
//! `ln(1e-5)` under defaults.

use ndarray::Array2;

use super::{stft, Waveform};
use crate::config::AnalysisConfig;
use crate::error::{CoreError, Result};

/// Log-mel frames, one row per hop.
#[derive(Debug, Clone)]
pub struct MelSpectrogram {
    /// `T x mel_bins`, natural-log mel power.
    pub frames: Array2<f32>,
    pub frame_rate: f64,
}

impl MelSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn num_bins(&self) -> usize {
        self.frames.ncols()
    }
}

pub(crate) fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub(crate) fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank, `n_mels x (n_fft/2 + 1)`, peak-normalized.
/// Peak normalization keeps pseudo-inverse amplification bounded, so a
/// floor-valued spectrogram inverts to near-silence.
pub fn mel_filterbank(cfg: &AnalysisConfig) -> Array2<f64> {
    let n_bins = cfg.n_fft / 2 + 1;
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(cfg.fmax);
    // n_mels + 2 edge frequencies, equally spaced in mel.
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz: Vec<f64> =
        (0..n_bins).map(|k| k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64).collect();

    let mut fb = Array2::<f64>::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = bin_hz[k];
            let w = if f <= lo || f >= hi {
                0.0
            } else if f <= center {
                (f - lo) / (center - lo)
            } else {
                (hi - f) / (hi - center)
            };
            fb[[m, k]] = w;
        }
    }
    fb
}

/// Center frequencies of the mel filters, in Hz.
pub fn mel_center_frequencies(cfg: &AnalysisConfig) -> Vec<f64> {
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(cfg.fmax);
    (1..=cfg.n_mels)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Computes the log-mel spectrogram with `floor(len / hop)` frames.
pub fn mel_spectrogram(w: &Waveform, cfg: &AnalysisConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    if w.samples.len() < cfg.win {
        return Err(CoreError::Shape(format!(
            "waveform of {} samples shorter than one window ({})",
            w.samples.len(),
            cfg.win
        )));
    }
    if w.sample_rate != cfg.sample_rate {
        return Err(CoreError::AudioFormat(format!(
            "waveform rate {} does not match analysis rate {}",
            w.sample_rate, cfg.sample_rate
        )));
    }
    let spec = stft(&w.samples, cfg.n_fft, cfg.hop, cfg.win);
    let fb = mel_filterbank(cfg);
    let t_frames = spec.len();
    let n_bins = cfg.n_fft / 2 + 1;

    let mut frames = Array2::<f32>::zeros((t_frames, cfg.n_mels));
    for (t, row) in spec.iter().enumerate() {
        let power: Vec<f64> = row.iter().map(|c| c.norm_sqr()).collect();
        for m in 0..cfg.n_mels {
            let mut acc = 0.0;
            for k in 0..n_bins {
                acc += fb[[m, k]] * power[k];
            }
            frames[[t, m]] = acc.max(cfg.log_floor).ln() as f32;
        }
    }
    Ok(MelSpectrogram { frames, frame_rate: cfg.frame_rate() })
}
