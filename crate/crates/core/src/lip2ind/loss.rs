//! Index posteriors, the knowledge-transfer objective and argmax decoding.

use ndarray::{Array2, ArrayD};

use crate::error::{CoreError, Result};
use crate::nn::{Scalar, Var};
use crate::vc::UnitIndexSequence;

/// Row-stochastic posteriors over codebook indices, two rows per lip
/// frame. Construction validates the softmax contract.
#[derive(Debug, Clone)]
pub struct IndexPosterior {
    pub probs: Array2<f32>,
}

impl IndexPosterior {
    pub fn new(probs: Array2<f32>) -> Result<IndexPosterior> {
        if probs.nrows() == 0 || probs.ncols() == 0 {
            return Err(CoreError::Shape("empty posterior".into()));
        }
        for (r, row) in probs.rows().into_iter().enumerate() {
            let sum: f32 = row.sum();
            if (sum - 1.0).abs() > 1e-5 || row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(CoreError::Shape(format!(
                    "posterior row {r} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(IndexPosterior { probs })
    }

    pub fn num_frames(&self) -> usize {
        self.probs.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.ncols()
    }
}

/// Mean negative log posterior at the target indices.
pub fn transfer_loss(q: &IndexPosterior, targets: &UnitIndexSequence) -> Result<f64> {
    if q.num_frames() != targets.len() {
        return Err(CoreError::Shape(format!(
            "{} posterior rows vs {} targets",
            q.num_frames(),
            targets.len()
        )));
    }
    let n = q.num_classes();
    let mut total = 0.0f64;
    for (row, &idx) in q.probs.rows().into_iter().zip(targets) {
        if idx >= n {
            return Err(CoreError::Shape(format!("target index {idx} out of [0, {n})")));
        }
        total -= (row[idx] as f64).ln();
    }
    Ok(total / targets.len() as f64)
}

/// Differentiable form on logits with soft targets (one-hot rows unless
/// mixup blended them): expected cross-entropy, averaged over frames.
pub fn transfer_loss_graph<'t, F: Scalar>(logits: Var<'t, F>, targets: &ArrayD<F>) -> Var<'t, F> {
    let shape = logits.shape();
    assert_eq!(shape, targets.shape().to_vec(), "soft targets must match logits");
    let frames: usize = shape[..shape.len() - 1].iter().product();
    logits
        .log_softmax_last()
        .mul_const(targets)
        .sum_all()
        .scale(-1.0 / frames as f64)
}

/// Per-frame argmax with ties resolved to the lowest index.
pub fn predict_indices(q: &IndexPosterior) -> UnitIndexSequence {
    q.probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{check_gradients, Tape};
    use ndarray::IxDyn;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform_posterior(frames: usize, n: usize) -> IndexPosterior {
        IndexPosterior::new(Array2::from_elem((frames, n), 1.0 / n as f32)).unwrap()
    }

    #[test]
    fn uniform_posterior_costs_ln_n() {
        let q = uniform_posterior(10, 200);
        let loss = transfer_loss(&q, &vec![17usize; 10]).unwrap();
        assert!((loss - 200f64.ln()).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn perfect_posterior_costs_zero() {
        let mut probs = Array2::zeros((6, 9));
        let targets: UnitIndexSequence = (0..6).map(|t| (t * 2) % 9).collect();
        for (r, &i) in targets.iter().enumerate() {
            probs[[r, i]] = 1.0;
        }
        let q = IndexPosterior::new(probs).unwrap();
        assert_eq!(transfer_loss(&q, &targets).unwrap(), 0.0);
    }

    #[test]
    fn transfer_loss_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let mut probs = Array2::from_shape_fn((5, 7), |_| rng.random_range(0.01f32..1.0));
            for mut row in probs.rows_mut() {
                let s = row.sum();
                row.mapv_inplace(|v| v / s);
            }
            let q = IndexPosterior::new(probs).unwrap();
            let targets: UnitIndexSequence = (0..5).map(|_| rng.random_range(0..7)).collect();
            assert!(transfer_loss(&q, &targets).unwrap() > 0.0);
        }
    }

    #[test]
    fn transfer_loss_rejects_bad_targets() {
        let q = uniform_posterior(4, 5);
        assert!(transfer_loss(&q, &vec![0usize; 3]).is_err());
        assert!(transfer_loss(&q, &vec![5usize; 4]).is_err());
    }

    #[test]
    fn posterior_validation_rejects_non_distributions() {
        assert!(IndexPosterior::new(Array2::from_elem((2, 4), 0.3)).is_err());
        assert!(IndexPosterior::new(Array2::zeros((0, 4))).is_err());
        let mut bad = Array2::zeros((1, 3));
        bad[[0, 0]] = 1.5;
        bad[[0, 1]] = -0.5;
        assert!(IndexPosterior::new(bad).is_err());
    }

    #[test]
    fn graph_form_agrees_with_posterior_form_on_one_hot_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (b, u, n) = (2usize, 3usize, 6usize);
        let logits = ArrayD::from_shape_fn(IxDyn(&[b, u, n]), |_| rng.random_range(-2.0f32..2.0));
        let targets: Vec<usize> = (0..b * u).map(|_| rng.random_range(0..n)).collect();
        let onehot = ArrayD::from_shape_fn(IxDyn(&[b, u, n]), |ix| {
            f32::from(targets[ix[0] * u + ix[1]] == ix[2])
        });

        let tape = Tape::<f32>::new();
        let graph = transfer_loss_graph(tape.constant(logits.clone()), &onehot).scalar_value();

        let mut eval_total = 0.0;
        for k in 0..b {
            let mut probs = Array2::zeros((u, n));
            for t in 0..u {
                let row: Vec<f32> = (0..n).map(|j| logits[[k, t, j]]).collect();
                let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let denom: f32 = row.iter().map(|v| (v - max).exp()).sum();
                for j in 0..n {
                    probs[[t, j]] = (row[j] - max).exp() / denom;
                }
            }
            let q = IndexPosterior::new(probs).unwrap();
            let tg: UnitIndexSequence = (0..u).map(|t| targets[k * u + t]).collect();
            eval_total += transfer_loss(&q, &tg).unwrap();
        }
        let eval = eval_total / b as f64;
        assert!((graph - eval).abs() < 1e-5, "{graph} vs {eval}");
    }

    #[test]
    fn graph_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = ArrayD::from_shape_fn(IxDyn(&[2, 3, 5]), |_| rng.random_range(-1.0..1.0));
        let mut soft = ArrayD::from_shape_fn(IxDyn(&[2, 3, 5]), |_| rng.random_range(0.0..1.0));
        for b in 0..2 {
            for t in 0..3 {
                let s: f64 = (0..5).map(|j| soft[[b, t, j]]).sum();
                for j in 0..5 {
                    soft[[b, t, j]] /= s;
                }
            }
        }
        check_gradients(&[logits], |_, vars| transfer_loss_graph(vars[0], &soft));
    }

    #[test]
    fn argmax_breaks_ties_to_the_lowest_index() {
        let mut probs = Array2::zeros((3, 4));
        probs[[0, 0]] = 0.1;
        probs[[0, 1]] = 0.7;
        probs[[0, 2]] = 0.2;
        probs[[0, 3]] = 0.0;
        probs[[1, 1]] = 0.5;
        probs[[1, 2]] = 0.5;
        probs[[2, 3]] = 1.0;
        let q = IndexPosterior::new(probs).unwrap();
        assert_eq!(predict_indices(&q), vec![1, 1, 3]);
    }

    #[test]
    fn one_hot_posteriors_recover_targets_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let targets: UnitIndexSequence = (0..40).map(|_| rng.random_range(0..13)).collect();
        let mut probs = Array2::zeros((40, 13));
        for (r, &i) in targets.iter().enumerate() {
            probs[[r, i]] = 1.0;
        }
        let q = IndexPosterior::new(probs).unwrap();
        assert_eq!(predict_indices(&q), targets);
        assert_eq!(transfer_loss(&q, &targets).unwrap(), 0.0);
    }
}
