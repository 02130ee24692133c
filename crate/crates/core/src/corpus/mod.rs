//! Paired audio/lip corpora: manifest handling, sample loading and the
//! synthetic desk-scale generator.

mod batch;
mod synth;

pub use batch::{Batch, BatchIterator};
pub use synth::{
    generate_synthetic_corpus, lip_template, phoneme_profile, speaker_base_f0,
    speaker_formant_shift, speaker_lip_offset, PhonemeProfile,
};

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{
    align_lengths, extract_f0, load_waveform, mel_spectrogram, MelSpectrogram, PitchContour,
};
use crate::config::AnalysisConfig;
use crate::error::{CoreError, Result};
use crate::lips::{load_lips, LipSequence};

/// A labeled span of mel frames (100 FPS).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AlignmentSpan {
    pub label: String,
    pub start_frame: usize,
    pub end_frame: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Dev => write!(f, "dev"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One corpus entry. Paths are stored relative to the manifest location.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub wav_path: PathBuf,
    pub lip_path: PathBuf,
    pub speaker_id: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phoneme_alignment: Option<Vec<AlignmentSpan>>,
}

/// An in-memory corpus listing rooted at some directory.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn entries_for(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn entry(&self, sample_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.sample_id == sample_id)
    }

    /// Speaker ids in sorted order; index in this list is the canonical
    /// integer speaker index used by training.
    pub fn speakers(&self) -> Vec<String> {
        let mut set: Vec<String> = self
            .entries
            .iter()
            .map(|e| e.speaker_id.clone())
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        set.sort();
        set
    }

    pub fn wav_abspath(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.wav_path)
    }

    pub fn lip_abspath(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.lip_path)
    }
}

/// Writes a manifest as JSON-lines next to its data.
pub fn save_manifest(m: &Manifest, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    for entry in &m.entries {
        let line = serde_json::to_string(entry)
            .map_err(|e| CoreError::Manifest(format!("serialize {}: {e}", entry.sample_id)))?;
        writeln!(file, "{line}").map_err(|e| CoreError::io(path, e))?;
    }
    Ok(())
}

/// Loads and validates a JSON-lines manifest: every line one entry, ids
/// unique, referenced files present relative to the manifest directory.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = std::fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let reader = std::io::BufReader::new(file);

    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CoreError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| CoreError::Manifest(format!("line {}: {e}", i + 1)))?;
        if !seen.insert(entry.sample_id.clone()) {
            return Err(CoreError::Manifest(format!(
                "line {}: duplicate sample_id {}",
                i + 1,
                entry.sample_id
            )));
        }
        for p in [&entry.wav_path, &entry.lip_path] {
            if !root.join(p).exists() {
                return Err(CoreError::Manifest(format!(
                    "line {}: missing file {}",
                    i + 1,
                    root.join(p).display()
                )));
            }
        }
        entries.push(entry);
    }
    Ok(Manifest { root, entries })
}

/// A fully loaded, length-aligned sample.
#[derive(Debug, Clone)]
pub struct AVSample {
    pub sample_id: String,
    pub speaker_id: String,
    pub mel: MelSpectrogram,
    pub lips: LipSequence,
    pub f0: PitchContour,
    pub alignment: Option<Vec<AlignmentSpan>>,
}

/// Loads one sample by id: waveform -> mel + F0, lips from the container,
/// then the cross-modal alignment contract is enforced.
pub fn load_sample(m: &Manifest, sample_id: &str, cfg: &AnalysisConfig) -> Result<AVSample> {
    let entry = m
        .entry(sample_id)
        .ok_or_else(|| CoreError::Manifest(format!("unknown sample_id {sample_id}")))?;
    let wave = load_waveform(&m.wav_abspath(entry), cfg.sample_rate)?;
    let mel = mel_spectrogram(&wave, cfg)?;
    let f0 = extract_f0(&wave, cfg)?;
    let lips = load_lips(&m.lip_abspath(entry))?;
    let (mel, lips) = align_lengths(&mel, &lips)?;

    let t = mel.num_frames();
    let f0 = PitchContour {
        values: f0.values[..t].to_vec(),
        voiced: f0.voiced[..t].to_vec(),
        frame_rate: f0.frame_rate,
    };
    let alignment = entry.phoneme_alignment.as_ref().map(|spans| {
        spans
            .iter()
            .filter(|s| s.start_frame < t)
            .map(|s| AlignmentSpan {
                label: s.label.clone(),
                start_frame: s.start_frame,
                end_frame: s.end_frame.min(t),
            })
            .collect()
    });
    Ok(AVSample {
        sample_id: sample_id.to_string(),
        speaker_id: entry.speaker_id.clone(),
        mel,
        lips,
        f0,
        alignment,
    })
}

/// Loads every sample of a split.
pub fn load_split(m: &Manifest, split: Split, cfg: &AnalysisConfig) -> Result<Vec<AVSample>> {
    let ids: Vec<String> = m.entries_for(split).iter().map(|e| e.sample_id.clone()).collect();
    ids.iter().map(|id| load_sample(m, id, cfg)).collect()
}
