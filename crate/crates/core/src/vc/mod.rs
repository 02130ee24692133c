//! Voice conversion over discrete acoustic units.
//!
//! A content encoder maps mel frames to a 50 Hz stream that a learned
//! codebook quantizes; contrastive prediction shapes the units, a sampled
//! upper bound on mutual information pushes speaker identity out of them,
//! and a Conformer decoder rebuilds mel frames from units + speaker
//! embedding + F0.

mod losses;
mod model;
mod quantizer;

/// Codebook indices for one utterance, one entry per unit frame.
pub type UnitIndexSequence = Vec<usize>;

pub use losses::{
    club, cpc_loss, f0_mse, mi_estimator_loss, recon_loss, sample_cpc_negatives, vc_total_loss,
    vq_loss, VcStep,
};
pub use model::{mi_posterior, sinusoidal_encoding, VcModel};
pub use quantizer::Codebook;
