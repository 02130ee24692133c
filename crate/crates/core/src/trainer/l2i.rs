//! Stage-two training: the lip reader learns to predict the frozen
//! codebook's index sequences from video alone.
//!
//! Targets come from a `TargetStore` written by `extract_targets`; the
//! store's recorded codebook checksum must match the checkpoint the caller
//! trained against, otherwise the indices describe a different codebook and
//! training them would silently succeed at the wrong task.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::AppConfig;
use crate::corpus::{load_sample, Manifest, Split};
use crate::error::{CoreError, Result};
use crate::lip2ind::{augment, center_crop, mixup_pair, predict_indices, transfer_loss_graph, Lip2IndModel};
use crate::lips::LipSequence;
use crate::nn::{Adam, AdamConfig, Lease, Tape};
use crate::vc::UnitIndexSequence;

use super::checkpoint::{l2i_to_checkpoint, save_checkpoint};
use super::targets::TargetStore;
use super::cosine_lr;

#[derive(Serialize)]
struct LogLine {
    epoch: usize,
    lr: f64,
    train_loss: f64,
    dev_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct L2ITrainSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Frame accuracy of the retained checkpoint when a dev split exists.
    pub best_dev_accuracy: Option<f64>,
    pub final_train_loss: f64,
    pub final_dev_accuracy: Option<f64>,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

struct ClipExample {
    lips: LipSequence,
    indices: UnitIndexSequence,
}

fn clip_set(
    manifest: &Manifest,
    split: Split,
    cfg: &AppConfig,
    targets: &TargetStore,
) -> Result<Vec<ClipExample>> {
    let mut out = Vec::new();
    for entry in manifest.entries_for(split) {
        let sample = load_sample(manifest, &entry.sample_id, &cfg.analysis)?;
        let indices = targets.indices(&entry.sample_id)?;
        if indices.len() != 2 * sample.lips.num_frames() {
            return Err(CoreError::Shape(format!(
                "{}: {} target indices for {} lip frames; re-extract targets",
                entry.sample_id,
                indices.len(),
                sample.lips.num_frames()
            )));
        }
        out.push(ClipExample { lips: sample.lips, indices });
    }
    Ok(out)
}

/// Augmented training view of one clip: cropped lips and one-hot targets
/// for the matching unit span.
fn training_view(
    clip: &ClipExample,
    start: usize,
    crop: usize,
    num_classes: usize,
    cfg: &AppConfig,
    aug_seed: u64,
) -> Result<(Array3<f32>, Array2<f32>)> {
    let view = clip.lips.slice_frames(start, crop);
    let aug = augment(&view, &cfg.l2i_train.augment, aug_seed)?;
    let s = aug.height();
    let lips = Array3::from_shape_vec((crop, s, s), aug.data().to_vec())
        .expect("lip data is row-major");
    let mut one_hot = Array2::<f32>::zeros((2 * crop, num_classes));
    for u in 0..2 * crop {
        one_hot[[u, clip.indices[2 * start + u]]] = 1.0;
    }
    Ok((lips, one_hot))
}

fn dev_accuracy(model: &Lip2IndModel, clips: &[ClipExample], input_size: usize) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for clip in clips {
        let q = model.posterior(&center_crop(&clip.lips, input_size)?)?;
        for (u, &pred) in predict_indices(&q).iter().enumerate() {
            correct += usize::from(pred == clip.indices[u]);
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

pub fn train_lip2ind(
    manifest: &Manifest,
    targets: &TargetStore,
    expected_checksum: Option<&str>,
    cfg: &AppConfig,
    out_dir: &Path,
) -> Result<L2ITrainSummary> {
    cfg.validate()?;
    let t = cfg.l2i_train.clone();
    let seed = cfg.seed.unwrap_or(0);

    if let Some(expected) = expected_checksum {
        if targets.checksum() != expected {
            return Err(CoreError::Checkpoint(format!(
                "target store was extracted with codebook {}, expected {expected}; re-extract targets",
                targets.checksum()
            )));
        }
    }
    let num_classes = cfg.l2i_model.num_classes;
    if targets.meta.num_classes != num_classes {
        return Err(CoreError::Config(format!(
            "target store has {} classes, model expects {num_classes}",
            targets.meta.num_classes
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;

    let train_clips = clip_set(manifest, Split::Train, cfg, targets)?;
    let dev_clips = clip_set(manifest, Split::Dev, cfg, targets)?;
    if train_clips.len() < t.batch_size {
        return Err(CoreError::Manifest(format!(
            "train split has {} clips, need at least one batch of {}",
            train_clips.len(),
            t.batch_size
        )));
    }
    for clip in &train_clips {
        if clip.lips.num_frames() < t.crop_frames {
            return Err(CoreError::Shape(format!(
                "clip has {} lip frames, crop needs {}",
                clip.lips.num_frames(),
                t.crop_frames
            )));
        }
    }

    let mut model = Lip2IndModel::new(&cfg.l2i_model, seed)?;
    let mut opt = Adam::new(
        &model.params,
        AdamConfig {
            beta1: t.adam_beta1,
            beta2: t.adam_beta2,
            eps: t.adam_eps,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
        },
    );

    let log_path = out_dir.join("l2i_train_log.jsonl");
    let mut log = std::fs::File::create(&log_path).map_err(|e| CoreError::io(&log_path, e))?;
    let ckpt_path = out_dir.join("l2i_best.ckpt");

    let crop = t.crop_frames;
    let mixup_on = t.augment.enabled && t.augment.mixup_alpha > 0.0;
    let mut global_step: u64 = 0;
    let mut best: Option<(usize, f64)> = None;
    let mut final_train_loss = 0.0;
    let mut final_dev_accuracy = None;

    for epoch in 0..t.epochs {
        let lr = cosine_lr(&t, epoch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..train_clips.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }

        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks_exact(t.batch_size) {
            let mut views = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let clip = &train_clips[idx];
                let start = rng.random_range(0..=clip.lips.num_frames() - crop);
                let aug_seed = rng.random::<u64>();
                views.push(training_view(clip, start, crop, num_classes, cfg, aug_seed)?);
            }
            let b = views.len();
            let mixed: Vec<(Array3<f32>, Array2<f32>)> = if mixup_on {
                let mut out = Vec::with_capacity(b);
                for i in 0..b {
                    let j = (i + 1) % b;
                    let pair_seed = rng.random::<u64>();
                    out.push(mixup_pair(
                        (&views[i].0, &views[i].1),
                        (&views[j].0, &views[j].1),
                        t.augment.mixup_alpha,
                        pair_seed,
                    )?);
                }
                out
            } else {
                views
            };

            let s = cfg.l2i_model.input_size;
            let mut lips = Array4::<f32>::zeros((b, crop, s, s));
            let mut soft = ndarray::Array3::<f32>::zeros((b, 2 * crop, num_classes));
            for (i, (l, y)) in mixed.iter().enumerate() {
                lips.index_axis_mut(ndarray::Axis(0), i).assign(l);
                soft.index_axis_mut(ndarray::Axis(0), i).assign(y);
            }

            let tape = Tape::new();
            let lease = Lease::new(&tape, model.params.len());
            let logits = model.forward(&lease, tape.constant(lips.into_dyn()));
            let loss = transfer_loss_graph(logits, &soft.into_dyn());
            let loss_val = loss.scalar_value();
            if !loss_val.is_finite() {
                return Err(CoreError::Diverged {
                    quantity: "train transfer loss".into(),
                    step: global_step,
                });
            }
            let mut grads = tape.backward(loss);
            let main_grads = lease.collect_grads(&mut grads);
            opt.step(&mut model.params, main_grads, lr);
            loss_sum += loss_val;
            steps += 1;
            global_step += 1;
        }
        let train_loss = loss_sum / steps.max(1) as f64;

        let dev_acc = if dev_clips.is_empty() {
            None
        } else {
            Some(dev_accuracy(&model, &dev_clips, cfg.l2i_model.input_size)?)
        };

        let line = LogLine { epoch, lr, train_loss, dev_accuracy: dev_acc };
        let text = serde_json::to_string(&line)
            .map_err(|e| CoreError::Checkpoint(format!("log serialization: {e}")))?;
        writeln!(log, "{text}").map_err(|e| CoreError::io(&log_path, e))?;

        // Dev accuracy selects when available (higher wins); otherwise the
        // lowest train loss does.
        let improved = match (dev_acc, best) {
            (_, None) => true,
            (Some(acc), Some((_, m))) => acc > m,
            (None, Some((_, m))) => train_loss < m,
        };
        if improved {
            best = Some((epoch, dev_acc.unwrap_or(train_loss)));
            let ckpt = l2i_to_checkpoint(&model, cfg, epoch, seed, targets.checksum());
            save_checkpoint(&ckpt, &ckpt_path)?;
        }
        final_train_loss = train_loss;
        final_dev_accuracy = dev_acc;
    }

    let (best_epoch, best_metric) = best.expect("at least one epoch ran");
    Ok(L2ITrainSummary {
        epochs_run: t.epochs,
        best_epoch,
        best_dev_accuracy: final_dev_accuracy.is_some().then_some(best_metric),
        final_train_loss,
        final_dev_accuracy,
        checkpoint_path: ckpt_path,
        log_path,
    })
}
