//! Deterministic signal processing: waveform I/O, mel analysis, F0
//! extraction, Griffin-Lim inversion and cross-modal length alignment.
//!
//! Everything here is a pure function of its inputs (Griffin-Lim takes an
//! explicit phase seed). The analysis grid is shared: one frame per `hop`
//! samples, `T = floor(len / hop)`, windows centered on `t * hop` with
//! reflective padding, so mel and F0 lengths always agree on the same input.

mod align;
mod griffin_lim;
mod io;
mod mel;
mod pitch;
mod resample;
mod stft;

pub use align::align_lengths;
pub use griffin_lim::griffin_lim;
pub use io::{load_waveform, save_waveform};
pub use mel::{mel_filterbank, mel_spectrogram, MelSpectrogram};
pub use pitch::{extract_f0, pool_f0_to_unit_rate, PitchContour};
pub use resample::resample;
pub(crate) use stft::{hann_window, istft, reflect_pad, stft};

use crate::error::{CoreError, Result};

/// Mono audio in [-1, 1].
#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(CoreError::AudioFormat("empty audio".into()));
        }
        if sample_rate == 0 {
            return Err(CoreError::AudioFormat("sample_rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(CoreError::AudioFormat("non-finite sample".into()));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}
