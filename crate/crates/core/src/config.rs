//! Configuration types for every stage of the system.
//!
//! All structs deserialize from TOML with per-field defaults, so a config
//! file only needs to name the fields it overrides. `AppConfig` is the
//! root schema used by the CLI; library code takes the individual sections.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Signal analysis parameters shared by the mel front end, F0 extraction
/// and Griffin-Lim resynthesis.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub win: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Griffin-Lim iteration count.
    pub gl_iters: usize,
    pub f0_min: f64,
    pub f0_max: f64,
    /// Normalized autocorrelation peak below this is treated as unvoiced.
    pub voicing_threshold: f64,
    /// Log-mel floor applied before the log.
    pub log_floor: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            sample_rate: 16_000,
            n_fft: 400,
            hop: 160,
            win: 400,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8_000.0,
            gl_iters: 60,
            f0_min: 50.0,
            f0_max: 500.0,
            voicing_threshold: 0.3,
            log_floor: 1e-5,
        }
    }
}

impl AnalysisConfig {
    /// Frames per second of the mel/F0 analysis grid.
    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hop <= self.win && self.win <= self.n_fft) {
            return Err(CoreError::Config(format!(
                "require hop <= win <= n_fft, got hop={} win={} n_fft={}",
                self.hop, self.win, self.n_fft
            )));
        }
        if self.fmax > self.sample_rate as f64 / 2.0 {
            return Err(CoreError::Config(format!(
                "fmax {} exceeds Nyquist {}",
                self.fmax,
                self.sample_rate as f64 / 2.0
            )));
        }
        if self.fmin < 0.0 || self.fmin >= self.fmax {
            return Err(CoreError::Config(format!(
                "require 0 <= fmin < fmax, got fmin={} fmax={}",
                self.fmin, self.fmax
            )));
        }
        if self.f0_min <= 0.0 || self.f0_min >= self.f0_max {
            return Err(CoreError::Config(format!(
                "require 0 < f0_min < f0_max, got f0_min={} f0_max={}",
                self.f0_min, self.f0_max
            )));
        }
        Ok(())
    }
}

/// Synthetic corpus layout. Durations are chosen so that every clip length
/// is a whole number of lip frames (the audio/video rate ratio is fixed:
/// 100 mel frames per second against 25 lip frames per second).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_speakers: usize,
    pub num_phonemes: usize,
    pub clips_per_speaker: usize,
    pub clip_seconds: f64,
    /// Pseudo-phoneme segment length bounds, in lip frames (40 ms units).
    pub min_segment_lip_frames: usize,
    pub max_segment_lip_frames: usize,
    /// Lip frame height and width in pixels.
    pub lip_size: usize,
    /// Lowest and highest per-speaker base F0 in Hz, log-spaced across speakers.
    pub base_f0_low: f64,
    pub base_f0_high: f64,
    /// Train/dev/test fractions; must sum to 1.
    pub split_fractions: [f64; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_speakers: 8,
            num_phonemes: 12,
            clips_per_speaker: 25,
            clip_seconds: 1.2,
            min_segment_lip_frames: 2,
            max_segment_lip_frames: 4,
            lip_size: 96,
            base_f0_low: 150.0,
            base_f0_high: 300.0,
            split_fractions: [0.8, 0.1, 0.1],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_speakers == 0 || self.num_phonemes < 2 || self.clips_per_speaker == 0 {
            return Err(CoreError::Config("corpus dimensions must be positive".into()));
        }
        if self.min_segment_lip_frames == 0 || self.min_segment_lip_frames > self.max_segment_lip_frames {
            return Err(CoreError::Config("bad segment length bounds".into()));
        }
        let s: f64 = self.split_fractions.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(CoreError::Config("split fractions must sum to 1".into()));
        }
        let lip_frames = self.clip_seconds * 25.0;
        if (lip_frames - lip_frames.round()).abs() > 1e-9 {
            return Err(CoreError::Config(
                "clip_seconds must be a whole number of lip frames (multiples of 0.04 s)".into(),
            ));
        }
        Ok(())
    }

    pub fn lip_frames_per_clip(&self) -> usize {
        (self.clip_seconds * 25.0).round() as usize
    }
}

/// Voice conversion model dimensions.
///
/// The defaults are mutually consistent: content frames are 160-dim at half
/// the mel frame rate, the speaker embedding is 256-dim, and the decoder
/// operates at width 384.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VcModelConfig {
    pub n_mels: usize,
    /// Content (and codeword) dimensionality.
    pub content_dim: usize,
    /// Codebook size.
    pub codebook_size: usize,
    /// Context network hidden size.
    pub context_dim: usize,
    pub speaker_dim: usize,
    /// Hidden widths of the two stride-1 content encoder blocks.
    pub encoder_widths: [usize; 2],
    /// Speaker encoder convolution width and kernel size.
    pub speaker_width: usize,
    pub speaker_kernel: usize,
    /// Pitch predictor convolution width and kernel size.
    pub pitch_width: usize,
    pub pitch_kernel: usize,
    /// Decoder width, block count, attention heads, feed-forward width and
    /// depthwise convolution kernel.
    pub decoder_dim: usize,
    pub decoder_blocks: usize,
    pub decoder_heads: usize,
    pub decoder_ffn: usize,
    pub decoder_conv_kernel: usize,
    /// Contrastive prediction horizon and negative count.
    pub cpc_horizon: usize,
    pub cpc_negatives: usize,
    /// Hidden width of the variational speaker-posterior network used by
    /// the mutual-information bound.
    pub mi_hidden: usize,
}

impl Default for VcModelConfig {
    fn default() -> Self {
        VcModelConfig {
            n_mels: 80,
            content_dim: 160,
            codebook_size: 200,
            context_dim: 256,
            speaker_dim: 256,
            encoder_widths: [768, 512],
            speaker_width: 256,
            speaker_kernel: 3,
            pitch_width: 384,
            pitch_kernel: 3,
            decoder_dim: 384,
            decoder_blocks: 4,
            decoder_heads: 2,
            decoder_ffn: 1536,
            decoder_conv_kernel: 31,
            cpc_horizon: 4,
            cpc_negatives: 10,
            mi_hidden: 256,
        }
    }
}

impl VcModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.decoder_dim % self.decoder_heads != 0 {
            return Err(CoreError::Config(format!(
                "decoder_dim {} not divisible by heads {}",
                self.decoder_dim, self.decoder_heads
            )));
        }
        if self.decoder_conv_kernel % 2 == 0 {
            return Err(CoreError::Config("decoder_conv_kernel must be odd".into()));
        }
        if self.cpc_horizon == 0 || self.cpc_negatives == 0 {
            return Err(CoreError::Config("cpc horizon and negatives must be positive".into()));
        }
        if self.speaker_kernel % 2 == 0 || self.pitch_kernel % 2 == 0 {
            return Err(CoreError::Config("speaker and pitch kernels must be odd".into()));
        }
        Ok(())
    }
}

/// Relative weights of the five voice-conversion loss components. The
/// training objective is their weighted sum; all default to 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VcLossWeights {
    pub vq: f64,
    pub cpc: f64,
    pub mi: f64,
    pub f0: f64,
    pub rec: f64,
}

impl Default for VcLossWeights {
    fn default() -> Self {
        VcLossWeights { vq: 1.0, cpc: 1.0, mi: 1.0, f0: 1.0, rec: 1.0 }
    }
}

/// Voice conversion training schedule. Desk-scale defaults: a full run on
/// the default synthetic corpus finishes in tens of minutes on one CPU core.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VcTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Training crop length in mel frames; must be a multiple of 4 so lip
    /// and content frame boundaries stay aligned.
    pub crop_frames: usize,
    pub lr_peak: f64,
    pub lr_start: f64,
    pub warmup_epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    /// Codebook exponential-moving-average decay and Laplace smoothing.
    pub ema_decay: f64,
    pub ema_eps: f64,
    /// A codeword unused for this many consecutive steps is reseeded from
    /// a random encoder output of the current batch.
    pub dead_code_steps: usize,
    /// Learning rate of the alternating posterior-network update.
    pub mi_lr: f64,
    pub loss_weights: VcLossWeights,
}

impl Default for VcTrainConfig {
    fn default() -> Self {
        VcTrainConfig {
            epochs: 40,
            batch_size: 32,
            crop_frames: 96,
            lr_peak: 1e-3,
            lr_start: 1e-6,
            warmup_epochs: 15,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 5.0,
            ema_decay: 0.999,
            ema_eps: 1e-5,
            dead_code_steps: 200,
            mi_lr: 3e-4,
            loss_weights: VcLossWeights::default(),
        }
    }
}

impl VcTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_frames % 4 != 0 {
            return Err(CoreError::Config(format!(
                "crop_frames must be a multiple of 4, got {}",
                self.crop_frames
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::Config("epochs and batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(CoreError::Config("ema_decay must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Linear warmup to `lr_peak` over `warmup_epochs`, constant afterwards.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if self.warmup_epochs == 0 || epoch >= self.warmup_epochs {
            return self.lr_peak;
        }
        let t = epoch as f64 / self.warmup_epochs as f64;
        self.lr_start + (self.lr_peak - self.lr_start) * t
    }
}

/// Lip-to-index model dimensions.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct L2IModelConfig {
    /// Channels produced by the temporal upsampling front end.
    pub stem_channels: usize,
    /// Channel multiplier applied to the residual trunk (1.0 restores the
    /// standard 64/128/256/512 progression).
    pub channel_multiplier: f64,
    /// Width of the multi-scale temporal layers.
    pub temporal_width: usize,
    pub temporal_layers: usize,
    pub temporal_kernels: [usize; 3],
    /// Output classes; must match the unit codebook size.
    pub num_classes: usize,
    /// Input crop given to the network (pixels).
    pub input_size: usize,
}

impl Default for L2IModelConfig {
    fn default() -> Self {
        L2IModelConfig {
            stem_channels: 4,
            channel_multiplier: 0.5,
            temporal_width: 256,
            temporal_layers: 4,
            temporal_kernels: [3, 5, 7],
            num_classes: 200,
            input_size: 88,
        }
    }
}

impl L2IModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channel_multiplier <= 0.0 {
            return Err(CoreError::Config("channel_multiplier must be positive".into()));
        }
        if self.temporal_kernels.iter().any(|k| k % 2 == 0) {
            return Err(CoreError::Config("temporal kernels must be odd".into()));
        }
        Ok(())
    }

    /// Residual trunk stage widths after applying the multiplier.
    pub fn stage_channels(&self) -> [usize; 4] {
        let m = self.channel_multiplier;
        let f = |c: usize| ((c as f64 * m).round() as usize).max(1);
        [f(64), f(128), f(256), f(512)]
    }
}

/// Data augmentation for lip-to-index training.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Spatial crop applied to raw lip frames; must match the model's
    /// expected input size.
    pub crop_size: usize,
    pub flip_prob: f64,
    /// Beta distribution parameter for clip-level mixup; 0 disables mixup.
    pub mixup_alpha: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { enabled: true, crop_size: 88, flip_prob: 0.5, mixup_alpha: 0.4 }
    }
}

/// Lip-to-index training schedule. Default batch and crop are sized so the
/// visual trunk (the dominant cost) trains within the desk-scale budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct L2ITrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Crop length in lip frames.
    pub crop_frames: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub augment: AugmentConfig,
}

impl Default for L2ITrainConfig {
    fn default() -> Self {
        L2ITrainConfig {
            epochs: 30,
            batch_size: 16,
            crop_frames: 12,
            lr: 3e-4,
            weight_decay: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 5.0,
            augment: AugmentConfig::default(),
        }
    }
}

impl L2ITrainConfig {
    /// Cosine decay from `lr` to zero across the run.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let t = epoch as f64 / self.epochs.max(1) as f64;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::Config("epochs and batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.augment.flip_prob) {
            return Err(CoreError::Config("flip_prob must lie in [0, 1]".into()));
        }
        if self.augment.crop_size == 0 || self.augment.mixup_alpha < 0.0 {
            return Err(CoreError::Config("crop_size must be positive, mixup_alpha >= 0".into()));
        }
        Ok(())
    }
}

/// Evaluation options.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// External PESQ binary, invoked as `pesq <ref.wav> <deg.wav>` with the
    /// score read from stdout. Absent by default; all other metrics are
    /// computed natively.
    pub pesq_command: Option<String>,
}

/// Root configuration schema for the command-line tool.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    /// Global RNG seed. Resolution order: CLI flag, then this file, then
    /// the `VCVTS_SEED` environment variable, then 0.
    pub seed: Option<u64>,
    pub analysis: AnalysisConfig,
    pub synth: SynthConfig,
    pub vc_model: VcModelConfig,
    pub vc_train: VcTrainConfig,
    pub l2i_model: L2IModelConfig,
    pub l2i_train: L2ITrainConfig,
    pub eval: EvalConfig,
}

impl AppConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: AppConfig =
            toml::from_str(text).map_err(|e| CoreError::Config(format!("TOML parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.analysis.validate()?;
        self.synth.validate()?;
        self.vc_model.validate()?;
        self.vc_train.validate()?;
        self.l2i_model.validate()?;
        self.l2i_train.validate()?;
        if self.l2i_model.num_classes != self.vc_model.codebook_size {
            return Err(CoreError::Config(format!(
                "l2i_model.num_classes {} must equal vc_model.codebook_size {}",
                self.l2i_model.num_classes, self.vc_model.codebook_size
            )));
        }
        if self.l2i_train.augment.crop_size != self.l2i_model.input_size {
            return Err(CoreError::Config(format!(
                "augment crop_size {} must equal l2i_model.input_size {}",
                self.l2i_train.augment.crop_size, self.l2i_model.input_size
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        AppConfig::default().validate().unwrap();
    }

    #[test]
    fn sparse_toml_overrides_only_named_fields() {
        let cfg = AppConfig::from_toml_str(
            "seed = 7\n[vc_train]\nepochs = 3\n[analysis]\nhop = 80\nwin = 160\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.vc_train.epochs, 3);
        assert_eq!(cfg.vc_train.batch_size, 32);
        assert_eq!(cfg.analysis.hop, 80);
        assert_eq!(cfg.analysis.n_fft, 400);
    }

    #[test]
    fn invalid_frame_params_rejected() {
        let mut cfg = AnalysisConfig::default();
        cfg.win = 500; // exceeds n_fft
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn warmup_schedule_endpoints() {
        let cfg = VcTrainConfig::default();
        assert!((cfg.learning_rate(0) - 1e-6).abs() < 1e-12);
        assert!((cfg.learning_rate(15) - 1e-3).abs() < 1e-12);
        assert!((cfg.learning_rate(39) - 1e-3).abs() < 1e-12);
        // Linear in between.
        let mid = cfg.learning_rate(7) + cfg.learning_rate(8);
        assert!((mid - (cfg.learning_rate(0) + cfg.learning_rate(15))).abs() < 1e-9);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = L2ITrainConfig::default();
        assert!((cfg.learning_rate(0) - cfg.lr).abs() < 1e-12);
        assert!(cfg.learning_rate(cfg.epochs - 1) > 0.0);
        assert!(cfg.learning_rate(cfg.epochs - 1) < cfg.lr * 0.02);
    }
}
