//! Minibatch assembly for paired audio/lip training.
//!
//! Crops are aligned across modalities: mel frames at 100 Hz, unit-rate
//! features at 50 Hz, lip frames at 25 Hz, so a crop of `T` mel frames spans
//! `T/2` units and `T/4` lip frames. Crop starts are therefore restricted to
//! multiples of 4 mel frames.

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::AVSample;
use crate::audio::{pool_f0_to_unit_rate, PitchContour};

/// One training minibatch. `mask` is 1.0 for real mel frames and 0.0 for
/// repeat-padded ones (clips shorter than the crop).
pub struct Batch {
    pub mel: Array3<f32>,
    /// Per-utterance normalized log-F0 at unit rate; 0.0 where unvoiced.
    pub f0: Array2<f32>,
    /// Unit-rate voicing indicator (1.0 voiced, 0.0 unvoiced).
    pub voiced: Array2<f32>,
    pub lips: Array4<f32>,
    pub speaker: Vec<usize>,
    pub sample_ids: Vec<String>,
    pub crop_starts: Vec<usize>,
    pub mask: Array2<f32>,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.mel.shape()[0]
    }

    pub fn mel_frames(&self) -> usize {
        self.mel.shape()[1]
    }
}

struct PreparedSample {
    sample: AVSample,
    speaker_index: usize,
    /// Mean and stddev of voiced log-F0 over the whole utterance.
    f0_stats: (f64, f64),
    /// F0 pooled to unit rate (half the mel frame rate).
    pooled_f0: PitchContour,
}

/// Deterministic epoch-shuffled minibatch source. The same `(seed, epoch)`
/// pair always yields the same sequence of batches; partial trailing batches
/// are dropped.
pub struct BatchIterator {
    samples: Vec<PreparedSample>,
    batch_size: usize,
    crop_frames: usize,
    seed: u64,
}

impl BatchIterator {
    /// `speakers` is the canonical sorted speaker list; every sample's
    /// speaker must appear in it.
    pub fn new(
        samples: Vec<AVSample>,
        speakers: &[String],
        batch_size: usize,
        crop_frames: usize,
        seed: u64,
    ) -> Self {
        assert!(batch_size > 0 && crop_frames > 0 && crop_frames % 4 == 0);
        let samples = samples
            .into_iter()
            .map(|sample| {
                let speaker_index = speakers
                    .iter()
                    .position(|s| *s == sample.speaker_id)
                    .expect("sample speaker missing from speaker list");
                let f0_stats = sample.f0.log_f0_stats().unwrap_or((0.0, 1.0));
                let f0_stats = (f0_stats.0, if f0_stats.1 < 1e-6 { 1.0 } else { f0_stats.1 });
                let pooled_f0 = pool_f0_to_unit_rate(&sample.f0)
                    .expect("aligned contours have even length");
                PreparedSample { sample, speaker_index, f0_stats, pooled_f0 }
            })
            .collect();
        Self { samples, batch_size, crop_frames, seed }
    }

    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn num_batches(&self) -> usize {
        self.samples.len() / self.batch_size
    }

    pub fn epoch(&self, epoch: u64) -> EpochBatches<'_> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch.wrapping_add(1));
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        EpochBatches { source: self, order, rng, cursor: 0 }
    }
}

pub struct EpochBatches<'a> {
    source: &'a BatchIterator,
    order: Vec<usize>,
    rng: ChaCha8Rng,
    cursor: usize,
}

impl Iterator for EpochBatches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let b = self.source.batch_size;
        if self.cursor + b > self.order.len() {
            return None;
        }
        let chunk = &self.order[self.cursor..self.cursor + b];
        self.cursor += b;

        let crop = self.source.crop_frames;
        let units = crop / 2;
        let first = &self.source.samples[chunk[0]].sample;
        let n_mels = first.mel.num_bins();
        let lip_size = first.lips.height();

        let mut mel = Array3::<f32>::zeros((b, crop, n_mels));
        let mut f0 = Array2::<f32>::zeros((b, units));
        let mut voiced = Array2::<f32>::zeros((b, units));
        let mut lips = Array4::<f32>::zeros((b, crop / 4, lip_size, lip_size));
        let mut mask = Array2::<f32>::zeros((b, crop));
        let mut speaker = Vec::with_capacity(b);
        let mut sample_ids = Vec::with_capacity(b);
        let mut crop_starts = Vec::with_capacity(b);

        for (row, &idx) in chunk.iter().enumerate() {
            let prepared = &self.source.samples[idx];
            let s = &prepared.sample;
            let total = s.mel.num_frames();
            // Aligned lengths are multiples of 4, so modular repeat-padding
            // preserves the mel/unit/lip phase relationship.
            let start = if total >= crop {
                4 * self.rng.random_range(0..=(total - crop) / 4)
            } else {
                0
            };

            for t in 0..crop {
                let src = (start + t) % total;
                for m in 0..n_mels {
                    mel[[row, t, m]] = s.mel.frames[[src, m]];
                }
                mask[[row, t]] = if start + t < total { 1.0 } else { 0.0 };
            }

            let (mean, std) = prepared.f0_stats;
            for u in 0..units {
                let src_unit = (start / 2 + u) % (total / 2);
                if prepared.pooled_f0.voiced[src_unit] {
                    let value = prepared.pooled_f0.values[src_unit];
                    f0[[row, u]] = ((value.ln() - mean) / std) as f32;
                    voiced[[row, u]] = 1.0;
                }
            }

            for lf in 0..crop / 4 {
                let src = (start / 4 + lf) % (total / 4);
                let frame = s.lips.frame(src);
                for y in 0..lip_size {
                    for x in 0..lip_size {
                        lips[[row, lf, y, x]] = frame[y * lip_size + x];
                    }
                }
            }

            speaker.push(prepared.speaker_index);
            sample_ids.push(s.sample_id.clone());
            crop_starts.push(start);
        }

        Some(Batch { mel, f0, voiced, lips, speaker, sample_ids, crop_starts, mask })
    }
}
