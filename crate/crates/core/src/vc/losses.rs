//! Training objectives for the voice-conversion model and the assembly
//! that turns one batch into a differentiable total.
//!
//! Every loss is a plain mean over whatever it sees. Batches repeat-pad
//! short clips, so padded frames are real (wrapped) signal and masking
//! them out buys nothing; the mask is carried for diagnostics only.

use ndarray::{Array2, ArrayD};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::VcLossWeights;
use crate::corpus::Batch;
use crate::error::{CoreError, Result};
use crate::nn::{concat, Lease, Scalar, Var};
use crate::vc::model::VcModel;

/// Commitment loss: mean squared distance from each content frame to its
/// assigned codeword, averaged over frames (summed over the codeword dim).
/// Pass the codewords as a constant so the gradient flows only into `z`.
pub fn vq_loss<'t, F: Scalar>(z: Var<'t, F>, codewords: Var<'t, F>) -> Var<'t, F> {
    let shape = z.shape();
    assert_eq!(shape, codewords.shape(), "codeword grid must match content frames");
    let frames: usize = shape[..shape.len() - 1].iter().product();
    let d = z.sub(codewords);
    d.mul(d).sum_all().scale(1.0 / frames as f64)
}

/// Contrastive predictive loss. For each offset `m`, head `m` maps context
/// `r_t` to a prediction scored against the true unit `m` steps ahead and
/// `num_negatives` distractor frames from the same utterance; the loss is
/// the mean cross-entropy of picking the true frame.
///
/// `zq [B, T2, D]`, `r [B, T2, C]`, `heads[m-1] [D, C]`,
/// `negatives[m-1] [B, (T2-M) * num_negatives]` frame indices into `zq`.
pub fn cpc_loss<'t, F: Scalar>(
    zq: Var<'t, F>,
    r: Var<'t, F>,
    heads: &[Var<'t, F>],
    negatives: &[Array2<usize>],
) -> Var<'t, F> {
    let (b, t2, d) = (zq.shape()[0], zq.shape()[1], zq.shape()[2]);
    let m_max = heads.len();
    assert!(m_max >= 1, "need at least one prediction head");
    assert_eq!(negatives.len(), m_max, "one negative grid per offset");
    assert!(t2 > m_max, "sequence too short for the prediction horizon");
    let tp = t2 - m_max;
    let bt = b * tp;
    let nn = negatives[0].ncols() / tp;
    let mut total: Option<Var<'t, F>> = None;
    for (m, (head, idx)) in heads.iter().zip(negatives).enumerate() {
        let m = m + 1;
        assert_eq!(idx.dim(), (b, tp * nn), "negative grid shape for offset {m}");
        let pred = r
            .slice_axis(1, 0, tp)
            .reshape(&[bt, r.shape()[2]])
            .matmul(head.permute(&[1, 0]));
        let pos = zq.slice_axis(1, m, tp).reshape(&[bt, d]);
        let pos_score = pred.mul(pos).sum_axis(1).reshape(&[bt, 1]);
        let neg = zq.gather_axis1(idx).reshape(&[bt, nn, d]);
        let neg_score = neg.bmm(pred.reshape(&[bt, d, 1])).reshape(&[bt, nn]);
        let logp = concat(1, &[pos_score, neg_score]).log_softmax_last();
        let picked = logp.slice_axis(1, 0, 1).sum_all();
        let step = picked.scale(-1.0 / bt as f64);
        total = Some(match total {
            Some(acc) => acc.add(step),
            None => step,
        });
    }
    total.unwrap().scale(1.0 / m_max as f64)
}

/// Sampled contrastive upper bound on I(z̄; s) from a diagonal Gaussian
/// posterior: mean matched log-likelihood minus mean mismatched
/// log-likelihood over all ordered cross pairs in the batch.
///
/// Returns `(bound, matched_ll)`; the second term is what the posterior's
/// own training step maximizes.
pub fn club<'t, F: Scalar>(
    mu: Var<'t, F>,
    logvar: Var<'t, F>,
    s: Var<'t, F>,
) -> (Var<'t, F>, Var<'t, F>) {
    let (b, d) = (mu.shape()[0], mu.shape()[1]);
    assert!(b >= 2, "mutual-information bound needs a batch of at least 2");
    assert_eq!(mu.shape(), logvar.shape());
    assert_eq!(mu.shape(), s.shape());
    let mu_rows = mu.reshape(&[b, 1, d]).repeat_interleave(1, b);
    let lv_rows = logvar.reshape(&[b, 1, d]).repeat_interleave(1, b);
    let s_cols = s.reshape(&[1, b, d]).repeat_interleave(0, b);
    let diff = s_cols.sub(mu_rows);
    let terms = diff
        .mul(diff)
        .mul(lv_rows.neg().exp())
        .add(lv_rows)
        .add_scalar(std::f64::consts::TAU.ln());
    // logq[i, j] = log q(s_j | z̄_i)
    let logq = terms.sum_axis(2).scale(-0.5);
    let eye = Array2::<F>::eye(b).into_dyn();
    let matched_sum = logq.mul_const(&eye).sum_all();
    let matched = matched_sum.scale(1.0 / b as f64);
    let mismatched = logq.sum_all().sub(matched_sum).scale(1.0 / (b * (b - 1)) as f64);
    (matched.sub(mismatched), matched)
}

/// Mean squared error in normalized log-F0 space over all unit frames;
/// unvoiced frames carry the normalized value 0 on both sides.
pub fn f0_mse<'t, F: Scalar>(pred: Var<'t, F>, target: Var<'t, F>) -> Var<'t, F> {
    assert_eq!(pred.shape(), target.shape());
    let d = pred.sub(target);
    d.mul(d).mean_all()
}

/// Mel reconstruction: mean absolute plus mean squared error.
pub fn recon_loss<'t, F: Scalar>(pred: Var<'t, F>, target: Var<'t, F>) -> Var<'t, F> {
    assert_eq!(pred.shape(), target.shape());
    let d = pred.sub(target);
    d.abs().mean_all().add(d.mul(d).mean_all())
}

/// Distractor frames for the contrastive loss: for every offset, sequence
/// and time step, `num_negatives` distinct frames drawn uniformly from the
/// same utterance excluding the positive frame.
pub fn sample_cpc_negatives(
    batch: usize,
    t2: usize,
    horizon: usize,
    num_negatives: usize,
    seed: u64,
) -> Result<Vec<Array2<usize>>> {
    if t2 <= horizon {
        return Err(CoreError::Shape(format!(
            "{t2} unit frames cannot support a prediction horizon of {horizon}"
        )));
    }
    if num_negatives + 1 > t2 {
        return Err(CoreError::Shape(format!(
            "cannot draw {num_negatives} distinct negatives from {t2} frames"
        )));
    }
    let tp = t2 - horizon;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = Vec::with_capacity(t2 - 1);
    let mut out = Vec::with_capacity(horizon);
    for m in 1..=horizon {
        let mut idx = Array2::zeros((batch, tp * num_negatives));
        for k in 0..batch {
            for t in 0..tp {
                pool.clear();
                pool.extend((0..t2).filter(|&j| j != t + m));
                for j in 0..num_negatives {
                    let pick = rng.random_range(j..pool.len());
                    pool.swap(j, pick);
                    idx[[k, t * num_negatives + j]] = pool[j];
                }
            }
        }
        out.push(idx);
    }
    Ok(out)
}

/// One training step's worth of graph heads plus the codebook statistics
/// the optimizer step needs afterwards.
pub struct VcStep<'t> {
    pub total: Var<'t, f32>,
    pub vq: Var<'t, f32>,
    pub cpc: Var<'t, f32>,
    pub mi: Var<'t, f32>,
    pub f0: Var<'t, f32>,
    pub rec: Var<'t, f32>,
    /// Pre-quantization content frames, for codebook EMA and reseeding.
    pub content: ArrayD<f32>,
    /// Assigned codeword per unit frame.
    pub indices: Array2<usize>,
    /// Time-pooled content frames, input to the posterior's own step.
    pub zbar: ArrayD<f32>,
    /// Speaker embeddings, target of the posterior's own step.
    pub speaker: ArrayD<f32>,
}

/// Build the full training graph for one batch. The decoder is teacher
/// forced with the batch's ground-truth F0 track; the pitch predictor
/// trains in parallel against the same track and takes over at inference.
pub fn vc_total_loss<'t>(
    model: &VcModel,
    lease: &Lease<'t, f32>,
    mi_lease: &Lease<'t, f32>,
    batch: &Batch,
    weights: &VcLossWeights,
    negatives_seed: u64,
) -> Result<VcStep<'t>> {
    let tape = lease.tape();
    let cfg = &model.cfg;
    let t2 = batch.mel_frames() / 2;
    assert_eq!(batch.f0.ncols(), t2, "F0 track must be at the unit rate");

    let mel = tape.constant(batch.mel.clone().into_dyn());
    let z = model.content_encode(lease, mel);
    let content = z.value();
    let (snapped, indices) = model.quantize_batch(&content)?;
    let vq = vq_loss(z, tape.constant(snapped.clone()));
    let zq = z.straight_through(&snapped);

    let r = model.context(lease, zq);
    let heads = model.cpc_heads(lease);
    let negatives =
        sample_cpc_negatives(batch.batch_size(), t2, cfg.cpc_horizon, cfg.cpc_negatives, negatives_seed)?;
    let cpc = cpc_loss(zq, r, &heads, &negatives);

    let s = model.speaker_encode(lease, mel);
    let speaker = s.value();
    let f0_true = tape.constant(batch.f0.clone().into_dyn());
    let f0 = f0_mse(model.predict_f0(lease, zq, s), f0_true);
    let mel_hat = model.decode(lease, zq, s, f0_true);
    let rec = recon_loss(mel_hat, mel);

    let zbar_var = z.mean_axis(1);
    let zbar = zbar_var.value();
    let (mu, lv) = model.mi_forward(mi_lease, zbar_var);
    let (mi, _) = club(mu, lv, s);

    let total = vq
        .scale(weights.vq)
        .add(cpc.scale(weights.cpc))
        .add(mi.scale(weights.mi))
        .add(f0.scale(weights.f0))
        .add(rec.scale(weights.rec));
    Ok(VcStep { total, vq, cpc, mi, f0, rec, content, indices, zbar, speaker })
}

/// Objective for the posterior's alternating step: negative matched
/// log-likelihood of the (frozen) speaker embeddings under `q(s | z̄)`.
/// Build this on a fresh tape with `zbar` and `speaker` as constants.
pub fn mi_estimator_loss<'t>(
    model: &VcModel,
    mi_lease: &Lease<'t, f32>,
    zbar: &ArrayD<f32>,
    speaker: &ArrayD<f32>,
) -> Var<'t, f32> {
    let tape = mi_lease.tape();
    let (mu, lv) = model.mi_forward(mi_lease, tape.constant(zbar.clone()));
    let (_, matched) = club(mu, lv, tape.constant(speaker.clone()));
    matched.neg()
}
