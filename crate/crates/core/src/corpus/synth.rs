//! Synthetic paired audio/lip corpus.
//!
//! Every clip is a random sequence of pseudo-phoneme segments aligned to the
//! 40 ms lip-frame grid. Audio renders each segment as a three-formant
//! filtered excitation: an impulse train at the speaker's F0 contour for
//! voiced phonemes, white noise for unvoiced ones. Lips render a soft-edged
//! ellipse whose semi-axes are a deterministic function of the phoneme plus
//! a per-speaker offset and small per-frame noise.
//!
//! The generator doubles as the test oracle: phoneme templates, speaker base
//! F0 and lip offsets are all exposed so downstream checks (unit purity,
//! speaker clustering, lip decodability) can compare against ground truth.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AlignmentSpan, Manifest, ManifestEntry, Split};
use crate::audio::{save_waveform, Waveform};
use crate::config::SynthConfig;
use crate::error::{CoreError, Result};
use crate::lips::{save_lips, LipSequence};

const SAMPLE_RATE: u32 = 16_000;
const SAMPLES_PER_LIP_FRAME: usize = 640; // 40 ms at 16 kHz
const VOICED_RMS: f64 = 0.15;
const UNVOICED_RMS: f64 = 0.08;

/// Ground-truth description of one pseudo-phoneme.
#[derive(Debug, Clone)]
pub struct PhonemeProfile {
    pub label: String,
    pub voiced: bool,
    /// Formant frequencies in Hz (before the per-speaker shift).
    pub formants: [f64; 3],
    /// Canonical lip ellipse semi-axes in pixels: (aperture, width).
    pub aperture: f64,
    pub width: f64,
}

/// Deterministic phoneme inventory: formants and lip shapes laid out on a
/// grid so templates stay well separated. Every sixth phoneme is unvoiced.
pub fn phoneme_profile(num_phonemes: usize, index: usize) -> PhonemeProfile {
    assert!(index < num_phonemes);
    let cols = (num_phonemes as f64).sqrt().ceil() as usize;
    let rows = num_phonemes.div_ceil(cols);
    let (row, col) = (index / cols, index % cols);
    let rf = if rows > 1 { row as f64 / (rows - 1) as f64 } else { 0.0 };
    let cf = if cols > 1 { col as f64 / (cols - 1) as f64 } else { 0.0 };

    PhonemeProfile {
        label: format!("p{index:02}"),
        voiced: index % 6 != 5,
        formants: [
            300.0 + 500.0 * rf,
            950.0 + 1350.0 * cf,
            2600.0 + 150.0 * ((row + col) % 3) as f64,
        ],
        aperture: 8.0 + 20.0 * rf,
        width: 14.0 + 20.0 * cf,
    }
}

/// Log-spaced per-speaker base F0 across the configured range.
pub fn speaker_base_f0(cfg: &SynthConfig, speaker: usize) -> f64 {
    if cfg.num_speakers <= 1 {
        return cfg.base_f0_low;
    }
    let t = speaker as f64 / (cfg.num_speakers - 1) as f64;
    (cfg.base_f0_low.ln() + (cfg.base_f0_high.ln() - cfg.base_f0_low.ln()) * t).exp()
}

/// Multiplicative formant shift, spread over roughly +/-4%.
pub fn speaker_formant_shift(cfg: &SynthConfig, speaker: usize) -> f64 {
    if cfg.num_speakers <= 1 {
        return 1.0;
    }
    let t = speaker as f64 / (cfg.num_speakers - 1) as f64;
    0.96 + 0.08 * t
}

/// Per-speaker lip ellipse offset in pixels, distinct per speaker and
/// bounded well inside the inter-template spacing.
pub fn speaker_lip_offset(cfg: &SynthConfig, speaker: usize) -> (f64, f64) {
    let angle = TAU * speaker as f64 / cfg.num_speakers.max(1) as f64;
    (angle.cos(), angle.sin())
}

/// Canonical noise-free lip frame for one phoneme (no speaker offset); the
/// nearest-template oracle for decodability tests.
pub fn lip_template(cfg: &SynthConfig, phoneme: usize) -> Vec<f32> {
    let p = phoneme_profile(cfg.num_phonemes, phoneme);
    render_lip_frame(cfg.lip_size, p.aperture, p.width, 0.0)
}

fn render_lip_frame(size: usize, aperture: f64, width: f64, brightness: f64) -> Vec<f32> {
    const INTERIOR: f64 = 0.08;
    const RING: f64 = 0.35;
    const FACE: f64 = 0.55;
    let c = size as f64 / 2.0;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let dy = (y as f64 + 0.5 - c) / aperture.max(1.0);
            let dx = (x as f64 + 0.5 - c) / width.max(1.0);
            let rho = (dy * dy + dx * dx).sqrt();
            let v = if rho <= 0.78 {
                INTERIOR
            } else if rho <= 0.82 {
                let t = (rho - 0.78) / 0.04;
                INTERIOR + (RING - INTERIOR) * t
            } else if rho <= 0.98 {
                RING
            } else if rho <= 1.02 {
                let t = (rho - 0.98) / 0.04;
                RING + (FACE - RING) * t
            } else {
                FACE
            };
            out.push((v + brightness).clamp(0.0, 1.0) as f32);
        }
    }
    out
}

/// Two-pole resonator cascade applied in place.
fn formant_filter(x: &mut [f64], formants: &[f64; 3], sr: f64) {
    for &f in formants {
        let bw = 80.0 + 0.06 * f;
        let r = (-PI * bw / sr).exp();
        let theta = TAU * f / sr;
        let (a1, a2) = (2.0 * r * theta.cos(), -r * r);
        let (mut y1, mut y2) = (0.0f64, 0.0f64);
        for v in x.iter_mut() {
            let y = *v + a1 * y1 + a2 * y2;
            y2 = y1;
            y1 = y;
            *v = y;
        }
    }
}

struct SegmentPlan {
    phoneme: usize,
    start_lip: usize,
    end_lip: usize,
}

fn plan_segments(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<SegmentPlan> {
    let total = cfg.lip_frames_per_clip();
    let mut segments = Vec::new();
    let mut cursor = 0usize;
    let mut prev = usize::MAX;
    while cursor < total {
        let want = rng.random_range(cfg.min_segment_lip_frames..=cfg.max_segment_lip_frames);
        let len = want.min(total - cursor);
        let mut phoneme = rng.random_range(0..cfg.num_phonemes);
        while cfg.num_phonemes > 1 && phoneme == prev {
            phoneme = rng.random_range(0..cfg.num_phonemes);
        }
        segments.push(SegmentPlan { phoneme, start_lip: cursor, end_lip: cursor + len });
        cursor += len;
        prev = phoneme;
    }
    segments
}

fn render_audio(
    cfg: &SynthConfig,
    speaker: usize,
    segments: &[SegmentPlan],
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let sr = SAMPLE_RATE as f64;
    let n = cfg.lip_frames_per_clip() * SAMPLES_PER_LIP_FRAME;
    let duration = n as f64 / sr;
    let base = speaker_base_f0(cfg, speaker);
    let shift = speaker_formant_shift(cfg, speaker);
    let vib_phase: f64 = rng.random_range(0.0..TAU);

    // Sample-accurate F0 with gentle vibrato and declination; median stays
    // within about 1% of the speaker base.
    let f0_at = |i: usize| {
        let t = i as f64 / sr;
        base * (1.0 + 0.02 * (TAU * 4.5 * t + vib_phase).sin()) * (1.02 - 0.04 * t / duration)
    };

    // Continuous excitation phase keeps pitch coherent across segments.
    let mut phase = 0.0f64;
    let mut pulses = vec![0.0f64; n];
    for (i, p) in pulses.iter_mut().enumerate() {
        phase += f0_at(i) / sr;
        if phase >= 1.0 {
            phase -= 1.0;
            *p = 1.0;
        }
    }

    let mut clip = vec![0.0f64; n];
    for seg in segments {
        let profile = phoneme_profile(cfg.num_phonemes, seg.phoneme);
        let (s0, s1) =
            (seg.start_lip * SAMPLES_PER_LIP_FRAME, seg.end_lip * SAMPLES_PER_LIP_FRAME);
        let mut buf: Vec<f64> = if profile.voiced {
            pulses[s0..s1].to_vec()
        } else {
            (s0..s1).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        let formants = [
            profile.formants[0] * shift,
            profile.formants[1] * shift,
            profile.formants[2] * shift,
        ];
        formant_filter(&mut buf, &formants, sr);

        let rms = (buf.iter().map(|v| v * v).sum::<f64>() / buf.len() as f64).sqrt();
        if rms > 1e-12 {
            let target = if profile.voiced { VOICED_RMS } else { UNVOICED_RMS };
            let g = target / rms;
            for v in buf.iter_mut() {
                *v *= g;
            }
        }
        // Raised-cosine fades avoid clicks at segment joins.
        let fade = 64.min(buf.len() / 4);
        for i in 0..fade {
            let w = 0.5 - 0.5 * (PI * i as f64 / fade as f64).cos();
            buf[i] *= w;
            let j = buf.len() - 1 - i;
            buf[j] *= w;
        }
        for (i, v) in buf.iter().enumerate() {
            clip[s0 + i] += v;
        }
    }

    let peak = clip.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.7 { 0.7 / peak } else { 1.0 };
    clip.iter().map(|&v| (v * scale) as f32).collect()
}

fn render_lips(
    cfg: &SynthConfig,
    speaker: usize,
    segments: &[SegmentPlan],
    rng: &mut ChaCha8Rng,
) -> LipSequence {
    let total = cfg.lip_frames_per_clip();
    let (da, db) = speaker_lip_offset(cfg, speaker);
    let size = cfg.lip_size;
    let mut data = Vec::with_capacity(total * size * size);
    for seg in segments {
        let p = phoneme_profile(cfg.num_phonemes, seg.phoneme);
        for _ in seg.start_lip..seg.end_lip {
            let a = p.aperture + da + rng.random_range(-0.3..0.3);
            let b = p.width + db + rng.random_range(-0.3..0.3);
            let brightness = rng.random_range(-0.01..0.01);
            data.extend(render_lip_frame(size, a, b, brightness));
        }
    }
    LipSequence::new(data, total, size, size).expect("rendered lips are well formed")
}

/// Per-speaker stratified split: floors of the configured fractions with
/// leftovers alternating between dev and test by speaker parity, so every
/// speaker appears in all three splits under the defaults.
fn split_counts(cfg: &SynthConfig, speaker: usize) -> (usize, usize, usize) {
    let n = cfg.clips_per_speaker;
    let train = (n as f64 * cfg.split_fractions[0]).floor() as usize;
    let dev = (n as f64 * cfg.split_fractions[1]).floor() as usize;
    let test = (n as f64 * cfg.split_fractions[2]).floor() as usize;
    let mut counts = [train, dev, test];
    let mut leftover = n - (train + dev + test);
    let order = if speaker % 2 == 0 { [1usize, 2, 0] } else { [2usize, 1, 0] };
    let mut i = 0;
    while leftover > 0 {
        counts[order[i % 3]] += 1;
        leftover -= 1;
        i += 1;
    }
    (counts[0], counts[1], counts[2])
}

/// Generates the corpus under `out_dir`: WAV and lip files plus a JSON-lines
/// manifest with ground-truth alignments. Fully deterministic in `seed`.
pub fn generate_synthetic_corpus(cfg: &SynthConfig, seed: u64, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let audio_dir = out_dir.join("audio");
    let lips_dir = out_dir.join("lips");
    std::fs::create_dir_all(&audio_dir).map_err(|e| CoreError::io(&audio_dir, e))?;
    std::fs::create_dir_all(&lips_dir).map_err(|e| CoreError::io(&lips_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();

    for speaker in 0..cfg.num_speakers {
        let speaker_id = format!("spk{speaker:02}");
        let (n_train, n_dev, _) = split_counts(cfg, speaker);
        // Deterministic shuffle of clip indices into splits.
        let mut order: Vec<usize> = (0..cfg.clips_per_speaker).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }

        for clip in 0..cfg.clips_per_speaker {
            let sample_id = format!("{speaker_id}_clip{clip:03}");
            let segments = plan_segments(cfg, &mut rng);
            let audio = render_audio(cfg, speaker, &segments, &mut rng);
            let lips = render_lips(cfg, speaker, &segments, &mut rng);

            let wav_rel = Path::new("audio").join(format!("{sample_id}.wav"));
            let lip_rel = Path::new("lips").join(format!("{sample_id}.lips"));
            let wave = Waveform::new(audio, SAMPLE_RATE)?;
            save_waveform(&wave, &out_dir.join(&wav_rel))?;
            save_lips(&lips, &out_dir.join(&lip_rel))?;

            let alignment: Vec<AlignmentSpan> = segments
                .iter()
                .map(|s| AlignmentSpan {
                    label: phoneme_profile(cfg.num_phonemes, s.phoneme).label,
                    start_frame: s.start_lip * 4,
                    end_frame: s.end_lip * 4,
                })
                .collect();

            let rank = order.iter().position(|&o| o == clip).unwrap();
            let split = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_dev {
                Split::Dev
            } else {
                Split::Test
            };

            entries.push(ManifestEntry {
                sample_id,
                wav_path: wav_rel,
                lip_path: lip_rel,
                speaker_id: speaker_id.clone(),
                split,
                phoneme_alignment: Some(alignment),
            });
        }
    }

    let manifest = Manifest { root: out_dir.to_path_buf(), entries };
    super::save_manifest(&manifest, &out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::AnalysisConfig;
    use crate::corpus::{load_manifest, load_sample};

    fn small_cfg() -> SynthConfig {
        SynthConfig { num_speakers: 2, clips_per_speaker: 5, ..SynthConfig::default() }
    }

    #[test]
    fn default_counts_and_split_sizes() {
        let cfg = SynthConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic_corpus(&cfg, 7, dir.path()).unwrap();
        assert_eq!(m.entries.len(), 200);
        assert_eq!(m.entries_for(Split::Train).len(), 160);
        assert_eq!(m.entries_for(Split::Dev).len(), 20);
        assert_eq!(m.entries_for(Split::Test).len(), 20);
        // Stratification: every speaker present in every split.
        for split in [Split::Train, Split::Dev, Split::Test] {
            let speakers: std::collections::HashSet<_> =
                m.entries_for(split).iter().map(|e| e.speaker_id.clone()).collect();
            assert_eq!(speakers.len(), 8, "{split}");
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let cfg = small_cfg();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = generate_synthetic_corpus(&cfg, 99, d1.path()).unwrap();
        let _ = generate_synthetic_corpus(&cfg, 99, d2.path()).unwrap();
        let a = std::fs::read(d1.path().join("manifest.jsonl")).unwrap();
        let b = std::fs::read(d2.path().join("manifest.jsonl")).unwrap();
        assert_eq!(a, b);
        for e in &m1.entries {
            let wa = std::fs::read(d1.path().join(&e.wav_path)).unwrap();
            let wb = std::fs::read(d2.path().join(&e.wav_path)).unwrap();
            assert_eq!(wa, wb, "{}", e.sample_id);
            let la = std::fs::read(d1.path().join(&e.lip_path)).unwrap();
            let lb = std::fs::read(d2.path().join(&e.lip_path)).unwrap();
            assert_eq!(la, lb, "{}", e.sample_id);
        }
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = small_cfg();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_synthetic_corpus(&cfg, 1, d1.path()).unwrap();
        generate_synthetic_corpus(&cfg, 2, d2.path()).unwrap();
        let a = std::fs::read(d1.path().join("manifest.jsonl")).unwrap();
        let b = std::fs::read(d2.path().join("manifest.jsonl")).unwrap();
        assert_ne!(a, b);
    }

    // Oracle: generator templates decode the rendered lips.
    #[test]
    fn lips_decode_to_generating_phonemes() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic_corpus(&cfg, 42, dir.path()).unwrap();
        let templates: Vec<Vec<f32>> =
            (0..cfg.num_phonemes).map(|p| lip_template(&cfg, p)).collect();

        let mut total = 0usize;
        let mut correct = 0usize;
        for e in &m.entries {
            let lips = crate::lips::load_lips(&m.lip_abspath(e)).unwrap();
            let spans = e.phoneme_alignment.as_ref().unwrap();
            for f in 0..lips.num_frames() {
                let mel_frame = f * 4;
                let span = spans
                    .iter()
                    .find(|s| s.start_frame <= mel_frame && mel_frame < s.end_frame)
                    .unwrap();
                let truth: usize = span.label[1..].parse().unwrap();
                let frame = lips.frame(f);
                let decoded = templates
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| {
                        let da: f32 = frame.iter().zip(a.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
                        let db: f32 = frame.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap()
                    .0;
                total += 1;
                if decoded == truth {
                    correct += 1;
                }
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc >= 0.99, "decode accuracy {acc}");
    }

    #[test]
    fn loaded_sample_has_contracted_lengths_and_f0() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic_corpus(&cfg, 5, dir.path()).unwrap();
        let m = load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        let id = m.entries[0].sample_id.clone();
        let s = load_sample(&m, &id, &AnalysisConfig::default()).unwrap();
        assert_eq!(s.mel.num_frames(), 120);
        assert_eq!(s.lips.num_frames(), 30);
        assert_eq!(s.f0.len(), 120);

        // Median voiced F0 within 5% of the configured speaker base.
        let speaker: usize = s.speaker_id[3..].parse().unwrap();
        let base = speaker_base_f0(&cfg, speaker);
        let mut voiced: Vec<f64> = s
            .f0
            .values
            .iter()
            .zip(&s.f0.voiced)
            .filter(|(_, &v)| v)
            .map(|(&f, _)| f)
            .collect();
        assert!(!voiced.is_empty());
        voiced.sort_by(f64::total_cmp);
        let median = voiced[voiced.len() / 2];
        assert!(
            (median - base).abs() <= 0.05 * base,
            "median {median} vs base {base}"
        );
    }

    #[test]
    fn unknown_sample_id_errors() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic_corpus(&cfg, 5, dir.path()).unwrap();
        let m = load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        assert!(load_sample(&m, "nope", &AnalysisConfig::default()).is_err());
    }
}
