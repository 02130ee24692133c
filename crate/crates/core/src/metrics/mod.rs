//! Objective evaluation: intelligibility (STOI/ESTOI), spectral distortion
//! (MCD), pitch accuracy (F0 RMSE), unit-index purity against phoneme
//! alignments, and speaker-embedding geometry. `evaluate_system` drives the
//! full synthesize-and-score loop over a corpus split and writes JSON + CSV
//! reports; PESQ is delegated to an external executable when configured.

mod f0;
mod intelligibility;
mod mcd;
mod projection;
mod purity;

pub use f0::f0_rmse;
pub use intelligibility::{estoi, stoi};
pub use mcd::{dtw_path, mcd, mcd_from_cepstra, mel_cepstra};
pub use projection::{render_projection, silhouette_score, speaker_projection, ProjectionReport};
pub use purity::{render_index_overlay, unit_purity_report, LabeledClip, PhonemeStats, PurityReport};

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::audio::{extract_f0, save_waveform, Waveform};
use crate::config::EvalConfig;
use crate::corpus::{load_sample, Manifest, ManifestEntry, Split};
use crate::error::{CoreError, Result};
use crate::pipeline::Pipeline;

/// Scores for one synthesized clip, ground truth as reference.
#[derive(Debug, Clone, Serialize)]
pub struct ClipScores {
    pub sample_id: String,
    pub speaker_id: String,
    /// Clip whose audio provided the speaker reference.
    pub reference_id: String,
    pub stoi: f64,
    pub estoi: f64,
    pub mcd_db: f64,
    /// Absent when alignment finds no co-voiced frames (synthesis came out
    /// entirely unvoiced); the failure is visible, not averaged away.
    pub f0_rmse_hz: Option<f64>,
    /// Co-voiced frame pairs behind the F0 figure.
    pub f0_frames: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pesq: Option<f64>,
}

/// Unweighted means over the scored clips. `f0_rmse_hz` averages the clips
/// that produced a pitch comparison; `f0_scored` says how many did.
#[derive(Debug, Clone, Serialize)]
pub struct MeanScores {
    pub stoi: f64,
    pub estoi: f64,
    pub mcd_db: f64,
    pub f0_rmse_hz: Option<f64>,
    pub f0_scored: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pesq: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub split: Split,
    pub seed: u64,
    pub clips: Vec<ClipScores>,
    pub mean: MeanScores,
    pub json_path: PathBuf,
    pub csv_path: PathBuf,
}

/// Synthesizes every clip of `split` from its lips plus a same-speaker
/// reference utterance, scores it against the ground-truth audio, and writes
/// `evaluation_<split>.json` / `.csv` under `out_dir`.
pub fn evaluate_system(
    manifest: &Manifest,
    split: Split,
    pipeline: &Pipeline,
    eval: &EvalConfig,
    out_dir: &Path,
    seed: u64,
) -> Result<EvaluationReport> {
    let entries = manifest.entries_for(split);
    if entries.is_empty() {
        return Err(CoreError::Manifest(format!("split {split} has no entries")));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;
    let synth_dir = out_dir.join("synth");
    std::fs::create_dir_all(&synth_dir).map_err(|e| CoreError::io(&synth_dir, e))?;

    let mut clips = Vec::with_capacity(entries.len());
    for entry in &entries {
        let truth = load_sample(manifest, &entry.sample_id, &pipeline.analysis)?;
        let reference_id = reference_for(manifest, entry).sample_id.clone();
        let ref_sample = load_sample(manifest, &reference_id, &pipeline.analysis)?;
        let ref_wave = waveform_of(&ref_sample.mel, manifest, &reference_id, pipeline)?;
        let truth_wave = waveform_of(&truth.mel, manifest, &entry.sample_id, pipeline)?;

        let (synth, _) = pipeline.synthesize(&truth.lips, &ref_wave, seed)?;
        let synth_path = synth_dir.join(format!("{}.wav", entry.sample_id));
        save_waveform(&synth, &synth_path)?;

        let stoi = intelligibility::stoi(&truth_wave, &synth)?;
        let estoi = intelligibility::estoi(&truth_wave, &synth)?;
        let mcd_db = mcd::mcd(&truth_wave, &synth, &pipeline.analysis)?;
        let (f0_rmse_hz, f0_frames) =
            match f0::f0_rmse(&truth.f0, &extract_f0(&synth, &pipeline.analysis)?) {
                Ok((rmse, n)) => (Some(rmse), n),
                Err(CoreError::Metric(m)) if m.contains("co-voiced") => (None, 0),
                Err(e) => return Err(e),
            };
        let pesq = match &eval.pesq_command {
            Some(cmd) => Some(run_pesq(cmd, manifest.wav_abspath(entry).as_path(), &synth_path)?),
            None => None,
        };

        clips.push(ClipScores {
            sample_id: entry.sample_id.clone(),
            speaker_id: entry.speaker_id.clone(),
            reference_id,
            stoi,
            estoi,
            mcd_db,
            f0_rmse_hz,
            f0_frames,
            pesq,
        });
    }

    let n = clips.len() as f64;
    let f0_values: Vec<f64> = clips.iter().filter_map(|c| c.f0_rmse_hz).collect();
    let mean = MeanScores {
        stoi: clips.iter().map(|c| c.stoi).sum::<f64>() / n,
        estoi: clips.iter().map(|c| c.estoi).sum::<f64>() / n,
        mcd_db: clips.iter().map(|c| c.mcd_db).sum::<f64>() / n,
        f0_rmse_hz: (!f0_values.is_empty())
            .then(|| f0_values.iter().sum::<f64>() / f0_values.len() as f64),
        f0_scored: f0_values.len(),
        pesq: clips
            .iter()
            .map(|c| c.pesq)
            .collect::<Option<Vec<_>>>()
            .map(|v| v.iter().sum::<f64>() / n),
    };

    let report = EvaluationReport {
        split,
        seed,
        clips,
        mean,
        json_path: out_dir.join(format!("evaluation_{split}.json")),
        csv_path: out_dir.join(format!("evaluation_{split}.csv")),
    };
    write_json(&report)?;
    write_csv(&report)?;
    Ok(report)
}

/// First other clip by the same speaker in manifest order; a speaker with a
/// single clip references itself.
fn reference_for<'a>(manifest: &'a Manifest, entry: &'a ManifestEntry) -> &'a ManifestEntry {
    manifest
        .entries
        .iter()
        .find(|e| e.speaker_id == entry.speaker_id && e.sample_id != entry.sample_id)
        .unwrap_or(entry)
}

/// Ground-truth audio at the analysis rate, trimmed to the aligned mel
/// length so truth and synthesis cover the same span.
fn waveform_of(
    mel: &crate::audio::MelSpectrogram,
    manifest: &Manifest,
    sample_id: &str,
    pipeline: &Pipeline,
) -> Result<Waveform> {
    let entry = manifest
        .entry(sample_id)
        .ok_or_else(|| CoreError::Manifest(format!("unknown sample_id {sample_id}")))?;
    let wave =
        crate::audio::load_waveform(&manifest.wav_abspath(entry), pipeline.analysis.sample_rate)?;
    let keep = (mel.num_frames() * pipeline.analysis.hop_length).min(wave.samples.len());
    Ok(Waveform { samples: wave.samples[..keep].to_vec(), sample_rate: wave.sample_rate })
}

/// Invokes the external scorer as `<cmd> <ref.wav> <deg.wav>` and parses the
/// first float on stdout.
fn run_pesq(command: &str, reference: &Path, degraded: &Path) -> Result<f64> {
    let output = std::process::Command::new(command)
        .arg(reference)
        .arg(degraded)
        .output()
        .map_err(|e| CoreError::Metric(format!("pesq command {command}: {e}")))?;
    if !output.status.success() {
        return Err(CoreError::Metric(format!(
            "pesq command {command} exited with {}",
            output.status
        )));
    }
    let stdout = String::from_utf8_lossy(&output.stdout);
    stdout
        .split_whitespace()
        .find_map(|tok| tok.trim_matches(|c: char| !c.is_ascii_digit() && c != '.' && c != '-').parse::<f64>().ok())
        .ok_or_else(|| CoreError::Metric(format!("pesq output held no score: {stdout:?}")))
}

fn write_json(report: &EvaluationReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| CoreError::Metric(format!("serialize report: {e}")))?;
    std::fs::write(&report.json_path, text).map_err(|e| CoreError::io(&report.json_path, e))
}

fn write_csv(report: &EvaluationReport) -> Result<()> {
    let mut file =
        std::fs::File::create(&report.csv_path).map_err(|e| CoreError::io(&report.csv_path, e))?;
    let has_pesq = report.clips.iter().any(|c| c.pesq.is_some());
    let mut header = "sample_id,speaker_id,reference_id,stoi,estoi,mcd_db,f0_rmse_hz,f0_frames"
        .to_string();
    if has_pesq {
        header.push_str(",pesq");
    }
    writeln!(file, "{header}").map_err(|e| CoreError::io(&report.csv_path, e))?;
    for c in &report.clips {
        let f0 = c.f0_rmse_hz.map_or(String::new(), |v| format!("{v:.6}"));
        let mut line = format!(
            "{},{},{},{:.6},{:.6},{:.6},{f0},{}",
            c.sample_id, c.speaker_id, c.reference_id, c.stoi, c.estoi, c.mcd_db, c.f0_frames
        );
        if has_pesq {
            match c.pesq {
                Some(p) => line.push_str(&format!(",{p:.6}")),
                None => line.push(','),
            }
        }
        writeln!(file, "{line}").map_err(|e| CoreError::io(&report.csv_path, e))?;
    }
    Ok(())
}
