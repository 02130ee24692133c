//! System composition: the standalone voice converter (source + reference
//! utterance -> waveform) and the full video-to-speech path (silent lips +
//! reference utterance -> waveform).
//!
//! Both paths share the decoder tail: quantized units and a speaker
//! embedding in, predicted pitch and mel out, phase reconstruction last.
//! The index sequence depends on the input content alone and the embedding
//! on the reference alone; diagnostics expose both so callers can assert
//! the separation rather than trust it.

use std::time::Instant;

use ndarray::{Array1, Array2, Array3};
use serde::Serialize;

use crate::audio::{
    griffin_lim, mel_spectrogram, resample, MelSpectrogram, Waveform,
};
use crate::config::AnalysisConfig;
use crate::error::{CoreError, Result};
use crate::lip2ind::{center_crop, predict_indices, Lip2IndModel};
use crate::lips::LipSequence;
use crate::nn::{Lease, Tape};
use crate::trainer::{l2i_from_checkpoint, vc_from_checkpoint, Checkpoint};
use crate::vc::{Codebook, UnitIndexSequence, VcModel};

/// Minimum reference length; stats-pooled embeddings degrade sharply on
/// shorter snippets.
pub const MIN_REFERENCE_SECONDS: f64 = 0.5;

/// Codeword frames for an index sequence, one row per unit frame.
pub fn lookup_units(idx: &UnitIndexSequence, cb: &Codebook) -> Result<Array2<f32>> {
    let entries = cb.entries();
    let n = entries.nrows();
    let mut out = Array2::<f32>::zeros((idx.len(), entries.ncols()));
    for (t, &i) in idx.iter().enumerate() {
        if i >= n {
            return Err(CoreError::Shape(format!(
                "index {i} at frame {t} outside the {n}-entry codebook"
            )));
        }
        out.row_mut(t).assign(&entries.row(i));
    }
    Ok(out)
}

/// Intermediate products of one synthesis or conversion call.
#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub indices: UnitIndexSequence,
    pub speaker_embedding: Vec<f32>,
    /// Predicted normalized log-F0 at the unit rate.
    pub f0: Vec<f32>,
    #[serde(skip)]
    pub mel: MelSpectrogram,
    pub timing_ms: TimingMs,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TimingMs {
    /// Lip reading (zero for plain conversion, which encodes audio instead).
    pub content_ms: f64,
    pub speaker_ms: f64,
    pub decode_ms: f64,
    pub vocoder_ms: f64,
}

/// Frozen models plus the analysis settings they were trained under.
pub struct Pipeline {
    pub vc: VcModel,
    pub l2i: Lip2IndModel,
    pub analysis: AnalysisConfig,
}

impl Pipeline {
    /// Composes the two stages, refusing checkpoints whose codebooks
    /// disagree: the lip reader's classes would name different codewords.
    pub fn from_checkpoints(vc_ckpt: &Checkpoint, l2i_ckpt: &Checkpoint) -> Result<Pipeline> {
        let vc = vc_from_checkpoint(vc_ckpt)?;
        let l2i = l2i_from_checkpoint(l2i_ckpt)?;
        let trained_against = l2i_ckpt.codebook_checksum.as_deref().ok_or_else(|| {
            CoreError::Checkpoint("lip-to-index checkpoint lacks a codebook checksum".into())
        })?;
        let actual = vc.codebook.checksum();
        if trained_against != actual {
            return Err(CoreError::Checkpoint(format!(
                "lip reader was trained against codebook {trained_against}, voice model carries \
                 {actual}; re-extract targets and retrain"
            )));
        }
        Ok(Pipeline { vc, l2i, analysis: vc_ckpt.config.analysis.clone() })
    }

    /// Silent lips + reference utterance -> waveform.
    pub fn synthesize(
        &self,
        lips: &LipSequence,
        reference: &Waveform,
        seed: u64,
    ) -> Result<(Waveform, Diagnostics)> {
        let t0 = Instant::now();
        let view = if lips.height() == self.l2i.cfg.input_size
            && lips.width() == self.l2i.cfg.input_size
        {
            lips.clone()
        } else {
            center_crop(lips, self.l2i.cfg.input_size)?
        };
        let indices = predict_indices(&self.l2i.posterior(&view)?);
        let units = lookup_units(&indices, &self.vc.codebook)?;
        let content_ms = ms_since(t0);

        let t1 = Instant::now();
        let (s, _) = speaker_embedding(&self.vc, &self.analysis, reference)?;
        let speaker_ms = ms_since(t1);

        finish(&self.vc, &self.analysis, units, s, indices, content_ms, speaker_ms, seed)
    }

    pub fn convert(
        &self,
        source: &Waveform,
        reference: &Waveform,
        seed: u64,
    ) -> Result<(Waveform, Diagnostics)> {
        convert_voice(&self.vc, &self.analysis, source, reference, seed)
    }
}

/// Standalone any-to-one conversion: source content, reference identity.
pub fn convert_voice(
    vc: &VcModel,
    analysis: &AnalysisConfig,
    source: &Waveform,
    reference: &Waveform,
    seed: u64,
) -> Result<(Waveform, Diagnostics)> {
    let t0 = Instant::now();
    let mel = analysis_mel(analysis, source)?;
    // The encoder halves time, so odd trailing frames are dropped.
    let frames = mel.num_frames() / 2 * 2;
    if frames < 4 {
        return Err(CoreError::Shape(format!(
            "source yields {frames} usable mel frames, need at least 4"
        )));
    }
    let mel3 = Array3::from_shape_fn((1, frames, mel.num_bins()), |(_, t, m)| mel.frames[[t, m]]);

    let tape = Tape::new();
    let lease = Lease::new(&tape, vc.params.len());
    let z = vc.content_encode(&lease, tape.constant(mel3.into_dyn()));
    let (_, index_rows) = vc.quantize_batch(&z.value())?;
    let indices: UnitIndexSequence = index_rows.row(0).to_vec();
    let units = lookup_units(&indices, &vc.codebook)?;
    let content_ms = ms_since(t0);

    let t1 = Instant::now();
    let (s, _) = speaker_embedding(vc, analysis, reference)?;
    let speaker_ms = ms_since(t1);

    finish(vc, analysis, units, s, indices, content_ms, speaker_ms, seed)
}

/// Decoder tail shared by both paths: predict pitch, decode mel, rebuild
/// phase.
#[allow(clippy::too_many_arguments)]
fn finish(
    vc: &VcModel,
    analysis: &AnalysisConfig,
    units: Array2<f32>,
    s: Array1<f32>,
    indices: UnitIndexSequence,
    content_ms: f64,
    speaker_ms: f64,
    seed: u64,
) -> Result<(Waveform, Diagnostics)> {
    let t2 = Instant::now();
    let t_units = units.nrows();
    let tape = Tape::new();
    let lease = Lease::new(&tape, vc.params.len());
    let zq = tape.constant(units.insert_axis(ndarray::Axis(0)).into_dyn());
    let sv = tape.constant(s.clone().insert_axis(ndarray::Axis(0)).into_dyn());
    let f0 = vc.predict_f0(&lease, zq, sv);
    let mel_hat = vc.decode(&lease, zq, sv, f0);

    let f0_track: Vec<f32> = f0.value().iter().copied().collect();
    let frames = Array2::from_shape_fn((2 * t_units, analysis.n_mels), |(t, m)| {
        mel_hat.value()[[0, t, m]]
    });
    let mel = MelSpectrogram {
        frames,
        frame_rate: analysis.sample_rate as f64 / analysis.hop as f64,
    };
    let decode_ms = ms_since(t2);

    let t3 = Instant::now();
    let wav = griffin_lim(&mel, analysis, seed)?;
    let vocoder_ms = ms_since(t3);

    let diag = Diagnostics {
        indices,
        speaker_embedding: s.to_vec(),
        f0: f0_track,
        mel,
        timing_ms: TimingMs { content_ms, speaker_ms, decode_ms, vocoder_ms },
    };
    Ok((wav, diag))
}

/// Reference utterance -> unit-norm speaker embedding (plus its mel, which
/// callers may reuse).
fn speaker_embedding(
    vc: &VcModel,
    analysis: &AnalysisConfig,
    reference: &Waveform,
) -> Result<(Array1<f32>, MelSpectrogram)> {
    if reference.duration_s() < MIN_REFERENCE_SECONDS {
        return Err(CoreError::AudioFormat(format!(
            "reference utterance is {:.2} s, need at least {MIN_REFERENCE_SECONDS} s",
            reference.duration_s()
        )));
    }
    let mel = analysis_mel(analysis, reference)?;
    let mel3 = Array3::from_shape_fn((1, mel.num_frames(), mel.num_bins()), |(_, t, m)| {
        mel.frames[[t, m]]
    });
    let tape = Tape::new();
    let lease = Lease::new(&tape, vc.params.len());
    let s = vc.speaker_encode(&lease, tape.constant(mel3.into_dyn()));
    let emb = Array1::from_iter(s.value().iter().copied());
    Ok((emb, mel))
}

fn analysis_mel(analysis: &AnalysisConfig, w: &Waveform) -> Result<MelSpectrogram> {
    if w.sample_rate == analysis.sample_rate {
        mel_spectrogram(w, analysis)
    } else {
        mel_spectrogram(&resample(w, analysis.sample_rate)?, analysis)
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}
