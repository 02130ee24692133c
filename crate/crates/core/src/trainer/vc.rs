//! Stage-one training: content encoder, quantizer, speaker encoder, pitch
//! predictor and decoder, optimized jointly with an alternating update of
//! the variational speaker posterior.
//!
//! The posterior network lives in its own parameter store and optimizer.
//! During the main step its parameters are frozen (the mutual-information
//! penalty only shapes the content encoder); immediately afterwards it takes
//! one gradient step of its own toward the current embeddings.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::AppConfig;
use crate::corpus::{load_split, Batch, BatchIterator, Manifest, Split};
use crate::error::{CoreError, Result};
use crate::nn::{Adam, AdamConfig, Lease, ParamId, Tape};
use crate::vc::{mi_estimator_loss, vc_total_loss, VcModel};

use super::checkpoint::{save_checkpoint, vc_to_checkpoint};
use super::{derive_seed, warmup_then_constant_lr};

/// Per-epoch loss components, averaged over steps.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub vq: f64,
    pub cpc: f64,
    pub mi: f64,
    pub f0: f64,
    pub rec: f64,
}

impl LossBreakdown {
    fn zero() -> LossBreakdown {
        LossBreakdown { total: 0.0, vq: 0.0, cpc: 0.0, mi: 0.0, f0: 0.0, rec: 0.0 }
    }

    fn add(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.vq += other.vq;
        self.cpc += other.cpc;
        self.mi += other.mi;
        self.f0 += other.f0;
        self.rec += other.rec;
    }

    fn scaled(&self, k: f64) -> LossBreakdown {
        LossBreakdown {
            total: self.total * k,
            vq: self.vq * k,
            cpc: self.cpc * k,
            mi: self.mi * k,
            f0: self.f0 * k,
            rec: self.rec * k,
        }
    }
}

#[derive(Serialize)]
struct LogLine<'a> {
    epoch: usize,
    lr: f64,
    train: &'a LossBreakdown,
    dev: Option<&'a LossBreakdown>,
}

#[derive(Debug, Clone)]
pub struct VcTrainSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Selection metric of the retained checkpoint (dev total when a dev
    /// split exists, train total otherwise).
    pub best_metric: f64,
    pub final_train: LossBreakdown,
    pub final_dev: Option<LossBreakdown>,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

struct StepOutcome {
    losses: LossBreakdown,
    main_grads: Option<Vec<(ParamId, ArrayD<f32>)>>,
    content: ArrayD<f32>,
    indices_flat: Vec<usize>,
    zbar: ArrayD<f32>,
    speaker: ArrayD<f32>,
}

/// One forward pass; with `with_grads` the main-store gradients are
/// returned for the caller to apply (the tape cannot outlive this frame).
fn run_step(
    model: &VcModel,
    batch: &Batch,
    cfg: &AppConfig,
    negatives_seed: u64,
    global_step: u64,
    with_grads: bool,
) -> Result<StepOutcome> {
    let tape = Tape::new();
    let lease = Lease::new(&tape, model.params.len());
    let mi_lease = Lease::new(&tape, model.mi_params.len());
    let step =
        vc_total_loss(model, &lease, &mi_lease, batch, &cfg.vc_train.loss_weights, negatives_seed)?;
    let losses = LossBreakdown {
        total: step.total.scalar_value(),
        vq: step.vq.scalar_value(),
        cpc: step.cpc.scalar_value(),
        mi: step.mi.scalar_value(),
        f0: step.f0.scalar_value(),
        rec: step.rec.scalar_value(),
    };
    if !losses.total.is_finite() {
        let phase = if with_grads { "train" } else { "dev" };
        return Err(CoreError::Diverged {
            quantity: format!("{phase} total loss"),
            step: global_step,
        });
    }
    let main_grads = if with_grads {
        let mut grads = tape.backward(step.total);
        // Posterior gradients from this pass are deliberately dropped; the
        // posterior only learns through its own alternating step.
        Some(lease.collect_grads(&mut grads))
    } else {
        None
    };
    Ok(StepOutcome {
        losses,
        main_grads,
        content: step.content,
        indices_flat: step.indices.iter().copied().collect(),
        zbar: step.zbar,
        speaker: step.speaker,
    })
}

/// One ascent step of the posterior toward the current (frozen) embeddings.
fn posterior_step(
    model: &mut VcModel,
    opt: &mut Adam<f32>,
    zbar: &ArrayD<f32>,
    speaker: &ArrayD<f32>,
    lr: f64,
    global_step: u64,
) -> Result<()> {
    let tape = Tape::new();
    let mi_lease = Lease::new(&tape, model.mi_params.len());
    let loss = mi_estimator_loss(model, &mi_lease, zbar, speaker);
    if !loss.scalar_value().is_finite() {
        return Err(CoreError::Diverged {
            quantity: "posterior likelihood".into(),
            step: global_step,
        });
    }
    let mut grads = tape.backward(loss);
    let mi_grads = mi_lease.collect_grads(&mut grads);
    opt.step(&mut model.mi_params, mi_grads, lr);
    Ok(())
}

fn update_codebook(model: &mut VcModel, out: &StepOutcome, cfg: &AppConfig, rng: &mut ChaCha8Rng) {
    let t = &cfg.vc_train;
    let shape = out.content.shape();
    let (rows, d) = (shape[0] * shape[1], shape[2]);
    let flat = out
        .content
        .view()
        .into_shape_with_order((rows, d))
        .expect("content frames are contiguous");
    model.codebook.ema_update(flat, &out.indices_flat, t.ema_decay, t.ema_eps);
    if t.dead_code_steps > 0 {
        model.codebook.reseed_dead(flat, t.dead_code_steps as u32, rng);
    }
}

pub fn train_vc(manifest: &Manifest, cfg: &AppConfig, out_dir: &Path) -> Result<VcTrainSummary> {
    cfg.validate()?;
    let t = cfg.vc_train.clone();
    let seed = cfg.seed.unwrap_or(0);
    std::fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;

    let train_samples = load_split(manifest, Split::Train, &cfg.analysis)?;
    if train_samples.len() < t.batch_size {
        return Err(CoreError::Manifest(format!(
            "train split has {} clips, need at least one batch of {}",
            train_samples.len(),
            t.batch_size
        )));
    }
    let dev_samples = load_split(manifest, Split::Dev, &cfg.analysis)?;
    let speakers = manifest.speakers();

    let train_iter =
        BatchIterator::new(train_samples, &speakers, t.batch_size, t.crop_frames, seed);
    // The contrastive and posterior terms need at least two clips per batch.
    let dev_bs = t.batch_size.min(dev_samples.len());
    let dev_iter = (dev_bs >= 2)
        .then(|| BatchIterator::new(dev_samples, &speakers, dev_bs, t.crop_frames, seed));

    let mut model = VcModel::new(&cfg.vc_model, seed)?;
    let adam = |wd: f64| AdamConfig {
        beta1: t.adam_beta1,
        beta2: t.adam_beta2,
        eps: t.adam_eps,
        weight_decay: wd,
        grad_clip: t.grad_clip,
    };
    let mut opt = Adam::new(&model.params, adam(0.0));
    let mut mi_opt = Adam::new(&model.mi_params, adam(0.0));
    let mut reseed_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX, 0));

    let log_path = out_dir.join("vc_train_log.jsonl");
    let mut log = std::fs::File::create(&log_path).map_err(|e| CoreError::io(&log_path, e))?;
    let ckpt_path = out_dir.join("vc_best.ckpt");

    let mut initialized = false;
    let mut global_step: u64 = 0;
    let mut best: Option<(usize, f64)> = None;
    let mut final_train = LossBreakdown::zero();
    let mut final_dev: Option<LossBreakdown> = None;

    for epoch in 0..t.epochs {
        let lr = warmup_then_constant_lr(&t, epoch)?;
        let mut train_sum = LossBreakdown::zero();
        let mut train_steps = 0usize;

        for batch in train_iter.epoch(epoch as u64) {
            if !initialized {
                seed_codebook(&mut model, &batch, seed)?;
                initialized = true;
            }
            let negatives_seed = derive_seed(seed, epoch as u64, global_step);
            let mut out = run_step(&model, &batch, cfg, negatives_seed, global_step, true)?;
            opt.step(&mut model.params, out.main_grads.take().unwrap(), lr);
            update_codebook(&mut model, &out, cfg, &mut reseed_rng);
            posterior_step(&mut model, &mut mi_opt, &out.zbar, &out.speaker, t.mi_lr, global_step)?;
            train_sum.add(&out.losses);
            train_steps += 1;
            global_step += 1;
        }
        let train_avg = train_sum.scaled(1.0 / train_steps.max(1) as f64);

        let dev_avg = match &dev_iter {
            Some(iter) => {
                let mut sum = LossBreakdown::zero();
                let mut steps = 0usize;
                for batch in iter.epoch(0) {
                    let out = run_step(&model, &batch, cfg, derive_seed(seed, u64::MAX, 1), global_step, false)?;
                    sum.add(&out.losses);
                    steps += 1;
                }
                (steps > 0).then(|| sum.scaled(1.0 / steps as f64))
            }
            None => None,
        };

        let line = LogLine { epoch, lr, train: &train_avg, dev: dev_avg.as_ref() };
        let text = serde_json::to_string(&line)
            .map_err(|e| CoreError::Checkpoint(format!("log serialization: {e}")))?;
        writeln!(log, "{text}").map_err(|e| CoreError::io(&log_path, e))?;

        let metric = dev_avg.as_ref().map_or(train_avg.total, |d| d.total);
        if best.map_or(true, |(_, m)| metric < m) {
            best = Some((epoch, metric));
            save_checkpoint(&vc_to_checkpoint(&model, cfg, epoch, seed), &ckpt_path)?;
        }
        final_train = train_avg;
        final_dev = dev_avg;
    }

    let (best_epoch, best_metric) = best.expect("at least one epoch ran");
    Ok(VcTrainSummary {
        epochs_run: t.epochs,
        best_epoch,
        best_metric,
        final_train,
        final_dev,
        checkpoint_path: ckpt_path,
        log_path,
    })
}

/// Farthest-point initialization of the codebook from the first batch's
/// encoder outputs, before any gradient step.
fn seed_codebook(model: &mut VcModel, batch: &Batch, seed: u64) -> Result<()> {
    let tape = Tape::new();
    let lease = Lease::new(&tape, model.params.len());
    let z = model.content_encode(&lease, tape.constant(batch.mel.clone().into_dyn()));
    let value = z.value();
    let shape = value.shape().to_vec();
    let flat = value
        .view()
        .into_shape_with_order((shape[0] * shape[1], shape[2]))
        .expect("content frames are contiguous");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX, 2));
    model.codebook.init_from_frames(flat, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{SynthConfig, VcModelConfig, VcTrainConfig};
    use crate::corpus::generate_synthetic_corpus;

    fn tiny_cfg() -> AppConfig {
        let mut cfg = AppConfig::default();
        cfg.seed = Some(3);
        cfg.vc_model = VcModelConfig {
            content_dim: 8,
            codebook_size: 6,
            context_dim: 8,
            speaker_dim: 8,
            encoder_widths: [12, 10],
            speaker_width: 10,
            pitch_width: 10,
            decoder_dim: 12,
            decoder_blocks: 1,
            decoder_ffn: 16,
            decoder_conv_kernel: 5,
            cpc_horizon: 2,
            cpc_negatives: 2,
            mi_hidden: 8,
            ..VcModelConfig::default()
        };
        cfg.vc_train = VcTrainConfig {
            epochs: 2,
            batch_size: 2,
            crop_frames: 16,
            warmup_epochs: 1,
            dead_code_steps: 3,
            ..VcTrainConfig::default()
        };
        cfg.l2i_model.num_classes = cfg.vc_model.codebook_size;
        cfg
    }

    fn tiny_corpus(dir: &Path, seed: u64) -> Manifest {
        let synth = SynthConfig {
            num_speakers: 2,
            clips_per_speaker: 4,
            clip_seconds: 0.6,
            ..SynthConfig::default()
        };
        generate_synthetic_corpus(&synth, seed, dir).unwrap()
    }

    #[test]
    fn two_epochs_produce_logs_and_a_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_corpus(&dir.path().join("corpus"), 21);
        let cfg = tiny_cfg();
        let summary = train_vc(&manifest, &cfg, &dir.path().join("run")).unwrap();
        assert_eq!(summary.epochs_run, 2);
        assert!(summary.checkpoint_path.exists());
        assert!(summary.final_train.total.is_finite());

        let log = std::fs::read_to_string(&summary.log_path).unwrap();
        let lines: Vec<_> = log.lines().collect();
        assert_eq!(lines.len(), 2);
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first["epoch"], 0);
        assert!(first["train"]["total"].as_f64().unwrap().is_finite());

        let ckpt = super::super::load_checkpoint(&summary.checkpoint_path).unwrap();
        assert_eq!(ckpt.kind, "vc");
        assert_eq!(ckpt.epoch, summary.best_epoch);
    }

    #[test]
    fn same_seed_reproduces_the_run_bit_for_bit() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_corpus(&dir.path().join("corpus"), 22);
        let cfg = tiny_cfg();
        let a = train_vc(&manifest, &cfg, &dir.path().join("a")).unwrap();
        let b = train_vc(&manifest, &cfg, &dir.path().join("b")).unwrap();
        assert_eq!(a.final_train.total, b.final_train.total);
        assert_eq!(
            a.final_dev.map(|d| d.total.to_bits()),
            b.final_dev.map(|d| d.total.to_bits())
        );
        assert_eq!(
            std::fs::read(&a.log_path).unwrap(),
            std::fs::read(&b.log_path).unwrap()
        );
        assert_eq!(
            std::fs::read(&a.checkpoint_path).unwrap(),
            std::fs::read(&b.checkpoint_path).unwrap()
        );
    }

    #[test]
    fn runaway_learning_rate_reports_divergence() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_corpus(&dir.path().join("corpus"), 23);
        let mut cfg = tiny_cfg();
        cfg.vc_train.lr_start = 1e30;
        cfg.vc_train.lr_peak = 1e30;
        cfg.vc_train.warmup_epochs = 0;
        cfg.vc_train.epochs = 4;
        let err = train_vc(&manifest, &cfg, &dir.path().join("run")).unwrap_err();
        assert!(matches!(err, CoreError::Diverged { .. }), "{err}");
    }

    #[test]
    fn undersized_train_split_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_corpus(&dir.path().join("corpus"), 24);
        let mut cfg = tiny_cfg();
        cfg.vc_train.batch_size = 64;
        assert!(train_vc(&manifest, &cfg, &dir.path().join("run")).is_err());
    }
}
