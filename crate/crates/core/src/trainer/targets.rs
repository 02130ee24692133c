//! Unit-index target extraction and storage.
//!
//! After the voice-conversion stage converges, every corpus clip is pushed
//! through the frozen content encoder and quantizer to produce its
//! full-length index sequence. The lip-reading stage trains against these
//! files, and a JSON sidecar records the codebook checksum so stale targets
//! are refused rather than silently learned.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::config::AnalysisConfig;
use crate::corpus::{load_sample, Manifest};
use crate::error::{CoreError, Result};
use crate::nn::{Lease, Tape};
use crate::vc::{UnitIndexSequence, VcModel};

pub const TARGETS_VERSION: u32 = 1;
const SIDECAR: &str = "targets.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetMeta {
    pub version: u32,
    /// Checksum of the codebook that produced these indices.
    pub codebook_checksum: String,
    pub num_classes: usize,
}

/// A directory of per-sample `<sample_id>.idx` files plus metadata.
#[derive(Debug, Clone)]
pub struct TargetStore {
    dir: PathBuf,
    pub meta: TargetMeta,
}

impl TargetStore {
    pub fn open(dir: &Path) -> Result<TargetStore> {
        let sidecar = dir.join(SIDECAR);
        let text = std::fs::read_to_string(&sidecar).map_err(|e| CoreError::io(&sidecar, e))?;
        let meta: TargetMeta = serde_json::from_str(&text)
            .map_err(|e| CoreError::Checkpoint(format!("{}: {e}", sidecar.display())))?;
        if meta.version != TARGETS_VERSION {
            return Err(CoreError::Checkpoint(format!(
                "target store version {}, this build reads {TARGETS_VERSION}",
                meta.version
            )));
        }
        Ok(TargetStore { dir: dir.to_path_buf(), meta })
    }

    pub fn checksum(&self) -> &str {
        &self.meta.codebook_checksum
    }

    pub fn indices(&self, sample_id: &str) -> Result<UnitIndexSequence> {
        let path = self.dir.join(format!("{sample_id}.idx"));
        let mut bytes = Vec::new();
        std::fs::File::open(&path)
            .map_err(|e| CoreError::io(&path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| CoreError::io(&path, e))?;
        if bytes.len() % 2 != 0 {
            return Err(CoreError::Checkpoint(format!(
                "{}: odd byte count, file is truncated",
                path.display()
            )));
        }
        let mut out = Vec::with_capacity(bytes.len() / 2);
        for chunk in bytes.chunks_exact(2) {
            let v = u16::from_le_bytes(chunk.try_into().unwrap()) as usize;
            if v >= self.meta.num_classes {
                return Err(CoreError::Checkpoint(format!(
                    "{}: index {v} outside the {}-entry codebook",
                    path.display(),
                    self.meta.num_classes
                )));
            }
            out.push(v);
        }
        Ok(out)
    }
}

/// Quantize every clip in the manifest (all splits, full length, no crops)
/// and write the index files plus sidecar into `out_dir`.
pub fn extract_targets(
    model: &VcModel,
    manifest: &Manifest,
    analysis: &AnalysisConfig,
    out_dir: &Path,
) -> Result<TargetStore> {
    let num_classes = model.cfg.codebook_size;
    if num_classes > usize::from(u16::MAX) + 1 {
        return Err(CoreError::Checkpoint(format!(
            "codebook size {num_classes} does not fit the 16-bit index format"
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;

    for entry in &manifest.entries {
        let sample = load_sample(manifest, &entry.sample_id, analysis)?;
        // Trailing frames that do not fill a lip frame are dropped so unit
        // and lip sequences stay in 2:1 correspondence.
        let total = sample.mel.num_frames() / 4 * 4;
        if total == 0 {
            return Err(CoreError::Shape(format!(
                "{}: clip too short to quantize",
                entry.sample_id
            )));
        }
        let mel = Array3::from_shape_fn((1, total, sample.mel.frames.ncols()), |(_, t, m)| {
            sample.mel.frames[[t, m]]
        })
        .into_dyn();

        let tape = Tape::new();
        let lease = Lease::new(&tape, model.params.len());
        let z = model.content_encode(&lease, tape.constant(mel));
        let (_, indices) = model.quantize_batch(&z.value())?;

        let mut bytes = Vec::with_capacity(indices.ncols() * 2);
        for &idx in indices.row(0) {
            bytes.extend_from_slice(&(idx as u16).to_le_bytes());
        }
        let path = out_dir.join(format!("{}.idx", entry.sample_id));
        let mut file = std::fs::File::create(&path).map_err(|e| CoreError::io(&path, e))?;
        file.write_all(&bytes).map_err(|e| CoreError::io(&path, e))?;
    }

    let meta = TargetMeta {
        version: TARGETS_VERSION,
        codebook_checksum: model.codebook.checksum(),
        num_classes,
    };
    let sidecar = out_dir.join(SIDECAR);
    let text = serde_json::to_string_pretty(&meta)
        .map_err(|e| CoreError::Checkpoint(format!("sidecar serialization: {e}")))?;
    std::fs::write(&sidecar, text).map_err(|e| CoreError::io(&sidecar, e))?;
    Ok(TargetStore { dir: out_dir.to_path_buf(), meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{SynthConfig, VcModelConfig};
    use crate::corpus::generate_synthetic_corpus;

    fn tiny_setup(dir: &Path) -> (VcModel, Manifest, AnalysisConfig) {
        let synth = SynthConfig {
            num_speakers: 2,
            clips_per_speaker: 3,
            clip_seconds: 0.6,
            ..SynthConfig::default()
        };
        let manifest = generate_synthetic_corpus(&synth, 11, &dir.join("corpus")).unwrap();
        let cfg = VcModelConfig {
            content_dim: 12,
            codebook_size: 10,
            context_dim: 10,
            speaker_dim: 10,
            encoder_widths: [16, 12],
            speaker_width: 14,
            pitch_width: 12,
            decoder_dim: 16,
            decoder_blocks: 1,
            decoder_ffn: 24,
            decoder_conv_kernel: 5,
            cpc_negatives: 2,
            mi_hidden: 9,
            ..VcModelConfig::default()
        };
        let model = VcModel::new(&cfg, 4).unwrap();
        (model, manifest, AnalysisConfig::default())
    }

    #[test]
    fn extraction_covers_every_sample_at_half_mel_rate() {
        let dir = tempfile::tempdir().unwrap();
        let (model, manifest, analysis) = tiny_setup(dir.path());
        let store = extract_targets(&model, &manifest, &analysis, &dir.path().join("t")).unwrap();
        assert_eq!(manifest.entries.len(), 6);
        for entry in &manifest.entries {
            let idx = store.indices(&entry.sample_id).unwrap();
            let sample = load_sample(&manifest, &entry.sample_id, &analysis).unwrap();
            assert_eq!(idx.len(), sample.mel.num_frames() / 4 * 4 / 2, "{}", entry.sample_id);
            assert!(idx.iter().all(|&v| v < store.meta.num_classes));
        }
    }

    #[test]
    fn re_extraction_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (model, manifest, analysis) = tiny_setup(dir.path());
        extract_targets(&model, &manifest, &analysis, &dir.path().join("a")).unwrap();
        extract_targets(&model, &manifest, &analysis, &dir.path().join("b")).unwrap();
        for entry in &manifest.entries {
            let name = format!("{}.idx", entry.sample_id);
            let a = std::fs::read(dir.path().join("a").join(&name)).unwrap();
            let b = std::fs::read(dir.path().join("b").join(&name)).unwrap();
            assert_eq!(a, b, "{name}");
            assert!(!a.is_empty());
        }
    }

    #[test]
    fn reopened_store_reports_the_codebook_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let (model, manifest, analysis) = tiny_setup(dir.path());
        let out = dir.path().join("t");
        extract_targets(&model, &manifest, &analysis, &out).unwrap();
        let store = TargetStore::open(&out).unwrap();
        assert_eq!(store.checksum(), model.codebook.checksum());
        assert_eq!(store.meta.num_classes, 10);
    }

    #[test]
    fn out_of_range_indices_are_rejected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let (model, manifest, analysis) = tiny_setup(dir.path());
        let out = dir.path().join("t");
        extract_targets(&model, &manifest, &analysis, &out).unwrap();
        let victim = out.join(format!("{}.idx", manifest.entries[0].sample_id));
        std::fs::write(&victim, 500u16.to_le_bytes()).unwrap();
        let store = TargetStore::open(&out).unwrap();
        assert!(store.indices(&manifest.entries[0].sample_id).is_err());
    }
}
