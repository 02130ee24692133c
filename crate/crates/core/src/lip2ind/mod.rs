//! Lip-to-index classification: infer the codebook index sequence of an
//! utterance from silent lip video, two index frames per video frame.

mod augment;
mod loss;
mod model;

pub use augment::{augment, center_crop, flip_horizontal, mixup_pair, mixup_with_lambda};
pub use loss::{predict_indices, transfer_loss, transfer_loss_graph, IndexPosterior};
pub use model::Lip2IndModel;
