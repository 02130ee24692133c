//! WAV reading and writing (RIFF PCM16 mono).

use std::path::Path;

use super::{resample, Waveform};
use crate::error::{CoreError, Result};

/// Loads a 16-bit PCM mono WAV file, scaling samples to [-1, 1] and
/// resampling to `target_rate` when the header rate differs.
pub fn load_waveform(path: &Path, target_rate: u32) -> Result<Waveform> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| CoreError::AudioFormat(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(CoreError::AudioFormat(format!(
            "{}: expected mono, got {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(CoreError::AudioFormat(format!(
            "{}: expected 16-bit PCM, got {:?} {}-bit",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    let samples: Vec<f32> = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CoreError::AudioFormat(format!("{}: {e}", path.display())))?;
    let w = Waveform::new(samples, spec.sample_rate)?;
    if spec.sample_rate == target_rate {
        Ok(w)
    } else {
        resample(&w, target_rate)
    }
}

/// Writes a waveform as 16-bit PCM mono WAV, clamping to [-1, 1].
pub fn save_waveform(w: &Waveform, path: &Path) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| CoreError::AudioFormat(format!("{}: {e}", path.display())))?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer
            .write_sample(v)
            .map_err(|e| CoreError::AudioFormat(format!("{}: {e}", path.display())))?;
    }
    writer
        .finalize()
        .map_err(|e| CoreError::AudioFormat(format!("{}: {e}", path.display())))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("silence.wav");
        let w = Waveform::new(vec![0.0; 16_000], 16_000).unwrap();
        save_waveform(&w, &path).unwrap();
        let back = load_waveform(&path, 16_000).unwrap();
        assert_eq!(back.samples.len(), 16_000);
        assert!(back.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn int16_full_scale_maps_near_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fs.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..100 {
            writer.write_sample(32767i16).unwrap();
        }
        writer.finalize().unwrap();
        let w = load_waveform(&path, 16_000).unwrap();
        assert!((w.samples[0] - 1.0).abs() <= 1.0 / 32768.0);
    }

    #[test]
    fn rejects_stereo() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..64 {
            writer.write_sample(0i16).unwrap();
            writer.write_sample(0i16).unwrap();
        }
        writer.finalize().unwrap();
        assert!(load_waveform(&path, 16_000).is_err());
    }

    #[test]
    fn missing_file_errors() {
        assert!(load_waveform(Path::new("/nonexistent/x.wav"), 16_000).is_err());
    }

    #[test]
    fn loader_resamples_to_target_rate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("slow.wav");
        let w = Waveform::new(vec![0.25; 8_000], 8_000).unwrap();
        save_waveform(&w, &path).unwrap();
        let up = load_waveform(&path, 16_000).unwrap();
        assert_eq!(up.sample_rate, 16_000);
        assert_eq!(up.samples.len(), 16_000);
    }
}
