//! Training loops, learning-rate schedules, target extraction and the
//! checkpoint container.
//!
//! Both training stages follow the same discipline: deterministic batch
//! order and augmentation given a seed, one JSONL log line per epoch, the
//! best-dev checkpoint retained, and an immediate abort (with the offending
//! step recorded) if any loss leaves the finite range.

pub mod checkpoint;
mod l2i;
pub mod targets;
mod vc;

pub use checkpoint::{
    l2i_from_checkpoint, l2i_to_checkpoint, load_checkpoint, save_checkpoint, vc_from_checkpoint,
    vc_to_checkpoint, Checkpoint, FORMAT_VERSION,
};
pub use l2i::{train_lip2ind, L2ITrainSummary};
pub use targets::{extract_targets, TargetMeta, TargetStore, TARGETS_VERSION};
pub use vc::{train_vc, LossBreakdown, VcTrainSummary};

use crate::config::{L2ITrainConfig, VcTrainConfig};
use crate::error::{CoreError, Result};

/// Voice-conversion schedule: linear warmup, then constant. Asking for an
/// epoch past the end of the run is a caller bug, not a clamp.
pub fn warmup_then_constant_lr(cfg: &VcTrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(CoreError::Config(format!(
            "epoch {epoch} is outside the {}-epoch schedule",
            cfg.epochs
        )));
    }
    Ok(cfg.learning_rate(epoch))
}

/// Lip-to-index schedule: cosine decay to zero across the run.
pub fn cosine_lr(cfg: &L2ITrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(CoreError::Config(format!(
            "epoch {epoch} is outside the {}-epoch schedule",
            cfg.epochs
        )));
    }
    Ok(cfg.learning_rate(epoch))
}

/// Splitmix-style seed derivation so every (epoch, step) pair draws from an
/// independent, reproducible stream.
pub(crate) fn derive_seed(seed: u64, epoch: u64, step: u64) -> u64 {
    let mut x = seed
        .wrapping_add(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(step.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_hits_its_anchor_points() {
        let cfg = VcTrainConfig::default();
        assert_eq!(warmup_then_constant_lr(&cfg, 0).unwrap(), 1e-6);
        assert_eq!(warmup_then_constant_lr(&cfg, cfg.warmup_epochs).unwrap(), 1e-3);
        assert_eq!(warmup_then_constant_lr(&cfg, cfg.epochs - 1).unwrap(), 1e-3);
        // Linear ramp: midpoint of the endpoints.
        let mid = warmup_then_constant_lr(&cfg, 7).unwrap()
            + warmup_then_constant_lr(&cfg, 8).unwrap();
        assert!((mid / 2.0 - 5.005e-4).abs() < 1e-12);
    }

    #[test]
    fn cosine_decays_monotonically_from_the_peak() {
        let cfg = L2ITrainConfig::default();
        assert_eq!(cosine_lr(&cfg, 0).unwrap(), cfg.lr);
        let half = cosine_lr(&cfg, cfg.epochs / 2).unwrap();
        assert!((half - cfg.lr * 0.5).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for e in 0..cfg.epochs {
            let lr = cosine_lr(&cfg, e).unwrap();
            assert!(lr <= prev && lr > 0.0);
            prev = lr;
        }
    }

    #[test]
    fn out_of_range_epochs_are_errors() {
        let vc = VcTrainConfig::default();
        let l2i = L2ITrainConfig::default();
        assert!(warmup_then_constant_lr(&vc, vc.epochs).is_err());
        assert!(cosine_lr(&l2i, l2i.epochs + 3).is_err());
    }

    #[test]
    fn derived_seeds_differ_across_epochs_and_steps() {
        let a = derive_seed(7, 0, 0);
        let b = derive_seed(7, 0, 1);
        let c = derive_seed(7, 1, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(b, c);
        assert_eq!(a, derive_seed(7, 0, 0));
    }
}
