//! Checkpoint container: a JSON metadata header followed by named f32
//! tensors (row-major, little-endian) and a trailing SHA-256 digest.
//!
//! The header records the full config snapshot, the training epoch, the
//! seed, and for unit-based models the codebook checksum, so any artifact
//! can be traced to the codebook it depends on.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::AppConfig;
use crate::error::{CoreError, Result};
use crate::lip2ind::Lip2IndModel;
use crate::vc::{Codebook, VcModel};

const MAGIC: &[u8; 8] = b"VCTSCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    epoch: usize,
    seed: u64,
    codebook_checksum: Option<String>,
    #[serde(default)]
    codebook_unused: Vec<u32>,
    config: AppConfig,
    tensors: Vec<TensorMeta>,
}

/// A deserialized checkpoint; tensor order is the serialization order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub epoch: usize,
    pub seed: u64,
    pub codebook_checksum: Option<String>,
    pub codebook_unused: Vec<u32>,
    pub config: AppConfig,
    pub tensors: Vec<(String, ArrayD<f32>)>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let header = Header {
        kind: ckpt.kind.clone(),
        epoch: ckpt.epoch,
        seed: ckpt.seed,
        codebook_checksum: ckpt.codebook_checksum.clone(),
        codebook_unused: ckpt.codebook_unused.clone(),
        config: ckpt.config.clone(),
        tensors: ckpt
            .tensors
            .iter()
            .map(|(name, v)| TensorMeta { name: name.clone(), shape: v.shape().to_vec() })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| CoreError::Checkpoint(format!("header serialization: {e}")))?;

    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for (_, tensor) in &ckpt.tensors {
        for &v in tensor.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);

    let mut file = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    file.write_all(&bytes).map_err(|e| CoreError::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| CoreError::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| CoreError::io(path, e))?;
    let err = |msg: &str| CoreError::Checkpoint(format!("{}: {msg}", path.display()));

    if bytes.len() < 8 + 4 + 8 + 32 {
        return Err(err("truncated file"));
    }
    if &bytes[..8] != MAGIC {
        return Err(err("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(err(&format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }

    let body_len = bytes.len() - 32;
    let digest = Sha256::digest(&bytes[..body_len]);
    if digest[..] != bytes[body_len..] {
        return Err(err("digest mismatch, file is corrupt"));
    }

    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let payload_start = 20 + header_len;
    if payload_start > body_len {
        return Err(err("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[20..payload_start])
        .map_err(|e| CoreError::Checkpoint(format!("{}: bad header: {e}", path.display())))?;

    let mut offset = payload_start;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for tm in &header.tensors {
        let count: usize = tm.shape.iter().product();
        let end = offset + 4 * count;
        if end > body_len {
            return Err(err(&format!("tensor {} runs past the payload", tm.name)));
        }
        let mut data = Vec::with_capacity(count);
        for chunk in bytes[offset..end].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        let tensor = ArrayD::from_shape_vec(IxDyn(&tm.shape), data)
            .map_err(|e| CoreError::Checkpoint(format!("tensor {}: {e}", tm.name)))?;
        tensors.push((tm.name.clone(), tensor));
        offset = end;
    }
    if offset != body_len {
        return Err(err("trailing bytes after the last tensor"));
    }

    Ok(Checkpoint {
        kind: header.kind,
        epoch: header.epoch,
        seed: header.seed,
        codebook_checksum: header.codebook_checksum,
        codebook_unused: header.codebook_unused,
        config: header.config,
        tensors,
    })
}

/// Snapshot a voice-conversion model, its posterior estimator and the
/// codebook into one artifact.
pub fn vc_to_checkpoint(model: &VcModel, config: &AppConfig, epoch: usize, seed: u64) -> Checkpoint {
    let mut tensors: Vec<(String, ArrayD<f32>)> = Vec::new();
    for (name, value) in model.params.iter() {
        tensors.push((name.to_string(), value.clone()));
    }
    for (name, value) in model.mi_params.iter() {
        tensors.push((name.to_string(), value.clone()));
    }
    let cb = &model.codebook;
    tensors.push(("codebook.entries".into(), cb.entries().to_owned().into_dyn()));
    tensors.push(("codebook.ema_counts".into(), cb.ema_counts().to_owned().into_dyn()));
    tensors.push(("codebook.ema_sums".into(), cb.ema_sums().to_owned().into_dyn()));
    Checkpoint {
        kind: "vc".into(),
        epoch,
        seed,
        codebook_checksum: Some(cb.checksum()),
        codebook_unused: cb.unused_steps().to_vec(),
        config: config.clone(),
        tensors,
    }
}

/// Rebuild a voice-conversion model from a checkpoint, verifying the
/// stored codebook against its recorded checksum.
pub fn vc_from_checkpoint(ckpt: &Checkpoint) -> Result<VcModel> {
    if ckpt.kind != "vc" {
        return Err(CoreError::Checkpoint(format!(
            "expected a voice-conversion checkpoint, found kind {}",
            ckpt.kind
        )));
    }
    let mut model = VcModel::new(&ckpt.config.vc_model, ckpt.seed)?;
    let mut entries = None;
    let mut counts = None;
    let mut sums = None;
    for (name, value) in &ckpt.tensors {
        match name.as_str() {
            "codebook.entries" => entries = Some(value.clone()),
            "codebook.ema_counts" => counts = Some(value.clone()),
            "codebook.ema_sums" => sums = Some(value.clone()),
            _ if name.starts_with("mi.") => {
                model
                    .mi_params
                    .load(name, value.clone())
                    .map_err(|e| CoreError::Checkpoint(e))?;
            }
            _ => {
                model.params.load(name, value.clone()).map_err(CoreError::Checkpoint)?;
            }
        }
    }
    let fetch2 = |v: Option<ArrayD<f32>>, what: &str| {
        v.ok_or_else(|| CoreError::Checkpoint(format!("missing {what}")))?
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|e| CoreError::Checkpoint(format!("{what}: {e}")))
    };
    let entries = fetch2(entries, "codebook.entries")?;
    let sums = fetch2(sums, "codebook.ema_sums")?;
    let counts = counts
        .ok_or_else(|| CoreError::Checkpoint("missing codebook.ema_counts".into()))?
        .into_dimensionality::<ndarray::Ix1>()
        .map_err(|e| CoreError::Checkpoint(format!("codebook.ema_counts: {e}")))?;
    model.codebook = Codebook::from_parts(entries, counts, sums, ckpt.codebook_unused.clone())?;
    if let Some(expected) = &ckpt.codebook_checksum {
        let actual = model.codebook.checksum();
        if &actual != expected {
            return Err(CoreError::Checkpoint(format!(
                "codebook checksum {actual} does not match recorded {expected}"
            )));
        }
    }
    Ok(model)
}

/// Snapshot a lip-to-index model; `codebook_checksum` ties it to the
/// codebook whose indices it was trained to predict.
pub fn l2i_to_checkpoint(
    model: &Lip2IndModel,
    config: &AppConfig,
    epoch: usize,
    seed: u64,
    codebook_checksum: &str,
) -> Checkpoint {
    let tensors = model
        .params
        .iter()
        .map(|(name, value)| (name.to_string(), value.clone()))
        .collect();
    Checkpoint {
        kind: "lip2ind".into(),
        epoch,
        seed,
        codebook_checksum: Some(codebook_checksum.to_string()),
        codebook_unused: Vec::new(),
        config: config.clone(),
        tensors,
    }
}

pub fn l2i_from_checkpoint(ckpt: &Checkpoint) -> Result<Lip2IndModel> {
    if ckpt.kind != "lip2ind" {
        return Err(CoreError::Checkpoint(format!(
            "expected a lip-to-index checkpoint, found kind {}",
            ckpt.kind
        )));
    }
    let mut model = Lip2IndModel::new(&ckpt.config.l2i_model, ckpt.seed)?;
    for (name, value) in &ckpt.tensors {
        model.params.load(name, value.clone()).map_err(CoreError::Checkpoint)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_app_config() -> AppConfig {
        let mut cfg = AppConfig::default();
        cfg.vc_model = crate::config::VcModelConfig {
            n_mels: 8,
            content_dim: 12,
            codebook_size: 10,
            context_dim: 10,
            speaker_dim: 10,
            encoder_widths: [16, 12],
            speaker_width: 14,
            speaker_kernel: 3,
            pitch_width: 12,
            pitch_kernel: 3,
            decoder_dim: 16,
            decoder_blocks: 2,
            decoder_heads: 2,
            decoder_ffn: 24,
            decoder_conv_kernel: 5,
            cpc_horizon: 2,
            cpc_negatives: 2,
            mi_hidden: 9,
        };
        cfg.l2i_model = crate::config::L2IModelConfig {
            stem_channels: 2,
            channel_multiplier: 0.125,
            temporal_width: 16,
            temporal_layers: 2,
            temporal_kernels: [3, 5, 7],
            num_classes: 10,
            input_size: 16,
        };
        cfg.l2i_train.augment.crop_size = 16;
        cfg
    }

    #[test]
    fn vc_round_trip_is_bit_exact_and_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_app_config();
        let model = VcModel::new(&cfg.vc_model, 5).unwrap();
        let ckpt = vc_to_checkpoint(&model, &cfg, 7, 5);

        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&ckpt, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let rebuilt = vc_from_checkpoint(&loaded).unwrap();
        for (name, value) in model.params.iter() {
            let id = rebuilt.params.id_by_name(name).unwrap();
            assert_eq!(rebuilt.params.value(id), value, "{name}");
        }
        assert_eq!(rebuilt.codebook.entries(), model.codebook.entries());
        assert_eq!(rebuilt.codebook.checksum(), model.codebook.checksum());
        assert_eq!(loaded.epoch, 7);
    }

    #[test]
    fn l2i_round_trip_preserves_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_app_config();
        let model = Lip2IndModel::new(&cfg.l2i_model, 3).unwrap();
        let ckpt = l2i_to_checkpoint(&model, &cfg, 2, 3, "feedbeef");
        let path = dir.path().join("l2i.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.codebook_checksum.as_deref(), Some("feedbeef"));
        let rebuilt = l2i_from_checkpoint(&loaded).unwrap();
        for (name, value) in model.params.iter() {
            let id = rebuilt.params.id_by_name(name).unwrap();
            assert_eq!(rebuilt.params.value(id), value, "{name}");
        }
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_app_config();
        let model = VcModel::new(&cfg.vc_model, 1).unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&vc_to_checkpoint(&model, &cfg, 0, 1), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&cut), Err(CoreError::Checkpoint(_))));

        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0xff;
        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, &flipped).unwrap();
        let msg = format!("{}", load_checkpoint(&bad).unwrap_err());
        assert!(msg.contains("corrupt"), "{msg}");
    }

    #[test]
    fn version_mismatch_is_an_explicit_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_app_config();
        let model = VcModel::new(&cfg.vc_model, 1).unwrap();
        let path = dir.path().join("v.ckpt");
        save_checkpoint(&vc_to_checkpoint(&model, &cfg, 0, 1), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99;
        // Digest covers the version field, so fix it up to isolate the check.
        let body = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..body]);
        bytes[body..].copy_from_slice(&digest);
        std::fs::write(&path, &bytes).unwrap();
        let msg = format!("{}", load_checkpoint(&path).unwrap_err());
        assert!(msg.contains("version"), "{msg}");
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let cfg = tiny_app_config();
        let model = VcModel::new(&cfg.vc_model, 1).unwrap();
        let ckpt = vc_to_checkpoint(&model, &cfg, 0, 1);
        assert!(l2i_from_checkpoint(&ckpt).is_err());
    }

    #[test]
    fn evaluation_survives_the_round_trip_bit_exactly() {
        use crate::nn::{Lease, Tape};
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_app_config();
        let model = VcModel::new(&cfg.vc_model, 9).unwrap();
        let path = dir.path().join("rt.ckpt");
        save_checkpoint(&vc_to_checkpoint(&model, &cfg, 0, 9), &path).unwrap();
        let rebuilt = vc_from_checkpoint(&load_checkpoint(&path).unwrap()).unwrap();

        let mel = ndarray::Array3::from_shape_fn((1, 16, 8), |(_, t, m)| {
            ((t * 3 + m) as f32 * 0.37).sin() * 0.5
        })
        .into_dyn();
        let run = |m: &VcModel| {
            let tape = Tape::new();
            let lease = Lease::new(&tape, m.params.len());
            let x = tape.constant(mel.clone());
            let z = m.content_encode(&lease, x);
            let s = m.speaker_encode(&lease, x);
            let f0 = m.predict_f0(&lease, z, s);
            (z.value(), s.value(), f0.value())
        };
        let (z1, s1, f1) = run(&model);
        let (z2, s2, f2) = run(&rebuilt);
        assert_eq!(z1, z2);
        assert_eq!(s1, s2);
        assert_eq!(f1, f2);
    }
}
