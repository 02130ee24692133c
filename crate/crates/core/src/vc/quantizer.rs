//! Acoustic-unit codebook: nearest-neighbor quantization with
//! moving-average codeword learning.
//!
//! Codewords are never touched by gradients. Assignment statistics are
//! tracked as exponential moving averages with Laplace smoothing; the
//! commitment loss trains only the encoder side, and the straight-through
//! estimator carries decoder gradients past the argmin.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};

/// Learned set of `n` codewords of dimension `d`.
#[derive(Debug, Clone)]
pub struct Codebook {
    entries: Array2<f32>,
    ema_counts: Array1<f32>,
    ema_sums: Array2<f32>,
    /// Consecutive updates since each codeword last won an assignment.
    unused_steps: Vec<u32>,
}

impl Codebook {
    /// Small uniform random codewords. Training overwrites these via
    /// [`Codebook::init_from_frames`] before the first update so that
    /// initial distances are data-scaled.
    pub fn new(n: usize, d: usize, seed: u64) -> Self {
        assert!(n > 0 && d > 0, "codebook dimensions must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (d as f32).sqrt();
        let entries = Array2::from_shape_fn((n, d), |_| rng.random_range(-bound..bound));
        Codebook {
            ema_counts: Array1::ones(n),
            ema_sums: entries.clone(),
            entries,
            unused_steps: vec![0; n],
        }
    }

    /// Rebuild from serialized state (see the trainer checkpoint format).
    pub fn from_parts(
        entries: Array2<f32>,
        ema_counts: Array1<f32>,
        ema_sums: Array2<f32>,
        unused_steps: Vec<u32>,
    ) -> Result<Self> {
        let (n, d) = entries.dim();
        if n == 0 || d == 0 {
            return Err(CoreError::Checkpoint("empty codebook".into()));
        }
        if ema_counts.len() != n || ema_sums.dim() != (n, d) || unused_steps.len() != n {
            return Err(CoreError::Checkpoint(format!(
                "codebook state shapes disagree: entries {n}x{d}, counts {}, sums {:?}",
                ema_counts.len(),
                ema_sums.dim()
            )));
        }
        if entries.iter().chain(ema_sums.iter()).any(|v| !v.is_finite())
            || ema_counts.iter().any(|c| !c.is_finite() || *c < 0.0)
        {
            return Err(CoreError::Checkpoint("codebook state must be finite, counts >= 0".into()));
        }
        Ok(Codebook { entries, ema_counts, ema_sums, unused_steps })
    }

    pub fn num_entries(&self) -> usize {
        self.entries.nrows()
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn entries(&self) -> ArrayView2<'_, f32> {
        self.entries.view()
    }

    pub fn ema_counts(&self) -> ArrayView1<'_, f32> {
        self.ema_counts.view()
    }

    pub fn ema_sums(&self) -> ArrayView2<'_, f32> {
        self.ema_sums.view()
    }

    pub fn unused_steps(&self) -> &[u32] {
        &self.unused_steps
    }

    /// Nearest codeword per row of `z` by squared Euclidean distance, ties
    /// to the lowest index. Returns the snapped rows and their indices;
    /// every returned row is bit-identical to its codebook row.
    pub fn quantize(&self, z: ArrayView2<f32>) -> Result<(Array2<f32>, Vec<usize>)> {
        if z.nrows() == 0 {
            return Err(CoreError::Shape("quantize: empty input".into()));
        }
        if z.ncols() != self.dim() {
            return Err(CoreError::Shape(format!(
                "quantize: frame dim {} != codeword dim {}",
                z.ncols(),
                self.dim()
            )));
        }
        let mut snapped = Array2::zeros((z.nrows(), self.dim()));
        let mut indices = Vec::with_capacity(z.nrows());
        for (t, frame) in z.outer_iter().enumerate() {
            let mut best = 0usize;
            let mut best_dist = f32::INFINITY;
            for (i, e) in self.entries.outer_iter().enumerate() {
                let mut dist = 0.0f32;
                for (a, b) in frame.iter().zip(e.iter()) {
                    let r = a - b;
                    dist += r * r;
                }
                // Strict < keeps the lowest index on exact ties.
                if dist < best_dist {
                    best_dist = dist;
                    best = i;
                }
            }
            indices.push(best);
            snapped.row_mut(t).assign(&self.entries.row(best));
        }
        Ok((snapped, indices))
    }

    /// Codeword retrieval by index.
    pub fn lookup(&self, indices: &[usize]) -> Result<Array2<f32>> {
        let mut out = Array2::zeros((indices.len(), self.dim()));
        for (t, &i) in indices.iter().enumerate() {
            if i >= self.num_entries() {
                return Err(CoreError::Shape(format!(
                    "unit index {i} out of range for codebook of {}",
                    self.num_entries()
                )));
            }
            out.row_mut(t).assign(&self.entries.row(i));
        }
        Ok(out)
    }

    /// One moving-average update from a batch of content frames and their
    /// assignments (from [`Codebook::quantize`] on the same frames).
    /// `decay` weighs history; Laplace smoothing `eps` keeps every count
    /// positive so no codeword divides by zero.
    pub fn ema_update(&mut self, z: ArrayView2<f32>, indices: &[usize], decay: f64, eps: f64) {
        assert_eq!(z.nrows(), indices.len(), "one assignment per frame");
        assert_eq!(z.ncols(), self.dim());
        let n = self.num_entries();
        let (decay, eps) = (decay as f32, eps as f32);

        let mut batch_counts = vec![0.0f32; n];
        let mut batch_sums = Array2::<f32>::zeros((n, self.dim()));
        for (frame, &i) in z.outer_iter().zip(indices) {
            assert!(i < n, "assignment index out of range");
            batch_counts[i] += 1.0;
            let mut row = batch_sums.row_mut(i);
            row += &frame;
        }

        for i in 0..n {
            self.ema_counts[i] = decay * self.ema_counts[i] + (1.0 - decay) * batch_counts[i];
        }
        let total = self.ema_counts.sum();
        for i in 0..n {
            self.ema_counts[i] = (self.ema_counts[i] + eps) / (total + n as f32 * eps) * total;
        }
        self.ema_sums.zip_mut_with(&batch_sums, |s, &b| *s = decay * *s + (1.0 - decay) * b);
        for i in 0..n {
            let inv = 1.0 / self.ema_counts[i];
            let target = self.ema_sums.row(i).mapv(|v| v * inv);
            self.entries.row_mut(i).assign(&target);
        }
        for i in 0..n {
            if batch_counts[i] == 0.0 {
                self.unused_steps[i] = self.unused_steps[i].saturating_add(1);
            } else {
                self.unused_steps[i] = 0;
            }
        }
    }

    /// Reseed codewords that have gone `threshold` consecutive updates
    /// without an assignment onto random rows of `z` (fresh encoder
    /// outputs). Returns how many codewords were reseeded.
    pub fn reseed_dead(&mut self, z: ArrayView2<f32>, threshold: u32, rng: &mut ChaCha8Rng) -> usize {
        assert!(threshold > 0);
        assert!(z.nrows() > 0 && z.ncols() == self.dim());
        let mut reseeded = 0;
        for i in 0..self.num_entries() {
            if self.unused_steps[i] >= threshold {
                let r = rng.random_range(0..z.nrows());
                self.entries.row_mut(i).assign(&z.row(r));
                self.ema_sums.row_mut(i).assign(&z.row(r));
                self.ema_counts[i] = 1.0;
                self.unused_steps[i] = 0;
                reseeded += 1;
            }
        }
        reseeded
    }

    /// Re-initialize every codeword from data: one random pick, then greedy
    /// farthest-point selection. This spreads codewords across the occupied
    /// region regardless of how unbalanced the frame distribution is, so
    /// the moving averages start from distinct basins.
    pub fn init_from_frames(&mut self, z: ArrayView2<f32>, rng: &mut ChaCha8Rng) -> Result<()> {
        let (rows, d) = z.dim();
        if d != self.dim() {
            return Err(CoreError::Shape(format!("init frames dim {d} != codeword dim {}", self.dim())));
        }
        if rows < self.num_entries() {
            return Err(CoreError::Shape(format!(
                "need at least {} frames to seed the codebook, got {rows}",
                self.num_entries()
            )));
        }
        let first = rng.random_range(0..rows);
        self.entries.row_mut(0).assign(&z.row(first));
        let mut min_dist = vec![f32::INFINITY; rows];
        for k in 1..self.num_entries() {
            let last = self.entries.row(k - 1).to_owned();
            let mut far = 0usize;
            let mut far_dist = f32::NEG_INFINITY;
            for (r, frame) in z.outer_iter().enumerate() {
                let mut dist = 0.0f32;
                for (a, b) in frame.iter().zip(last.iter()) {
                    let v = a - b;
                    dist += v * v;
                }
                if dist < min_dist[r] {
                    min_dist[r] = dist;
                }
                if min_dist[r] > far_dist {
                    far_dist = min_dist[r];
                    far = r;
                }
            }
            self.entries.row_mut(k).assign(&z.row(far));
        }
        self.ema_sums.assign(&self.entries);
        self.ema_counts.fill(1.0);
        self.unused_steps.iter_mut().for_each(|u| *u = 0);
        Ok(())
    }

    /// Hex SHA-256 over dimensions and codeword bytes. Identifies the unit
    /// vocabulary, so stores of extracted indices can detect drift.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.num_entries() as u64).to_le_bytes());
        h.update((self.dim() as u64).to_le_bytes());
        for v in self.entries.iter() {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn rand_frames(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Array2<f32> {
        Array2::from_shape_fn((rows, d), |_| rng.random_range(-1.0f32..1.0))
    }

    #[test]
    fn picks_nearest_codeword() {
        let cb = Codebook::from_parts(
            array![[0.0f32, 0.0], [1.0, 1.0]],
            Array1::ones(2),
            array![[0.0f32, 0.0], [1.0, 1.0]],
            vec![0, 0],
        )
        .unwrap();
        let (snapped, idx) = cb.quantize(array![[0.1f32, 0.2]].view()).unwrap();
        assert_eq!(idx, vec![0]);
        assert_eq!(snapped.row(0).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn exact_codeword_maps_to_itself() {
        let cb = Codebook::new(8, 4, 3);
        let z = cb.entries().row(3).insert_axis(ndarray::Axis(0)).to_owned();
        let (snapped, idx) = cb.quantize(z.view()).unwrap();
        assert_eq!(idx, vec![3]);
        assert_eq!(snapped.row(0).to_vec(), cb.entries().row(3).to_vec());
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let e = array![[1.0f32, 0.0], [5.0, 5.0], [1.0, 0.0]];
        let cb = Codebook::from_parts(e.clone(), Array1::ones(3), e, vec![0; 3]).unwrap();
        let (_, idx) = cb.quantize(array![[1.0f32, 0.1]].view()).unwrap();
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn empty_input_is_an_error() {
        let cb = Codebook::new(4, 2, 0);
        assert!(cb.quantize(Array2::zeros((0, 2)).view()).is_err());
    }

    // The oracle repeats the scan with its own loop. Distances accumulate
    // in the same ascending-dimension order so exact ties stay exact.
    #[test]
    fn agrees_with_brute_force_scan_on_1000_instances() {
        for instance in 0..1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(90_000 + instance);
            let cb = Codebook::new(16, 8, instance);
            let z = rand_frames(&mut rng, 50, 8);
            let (_, idx) = cb.quantize(z.view()).unwrap();
            for (t, frame) in z.outer_iter().enumerate() {
                let oracle = (0..16)
                    .map(|i| {
                        let mut d = 0.0f32;
                        for k in 0..8 {
                            let r = frame[k] - cb.entries()[[i, k]];
                            d += r * r;
                        }
                        d
                    })
                    .enumerate()
                    .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                    .unwrap()
                    .0;
                assert_eq!(idx[t], oracle, "instance {instance}, frame {t}");
            }
        }
    }

    #[test]
    fn zero_decay_jumps_to_assigned_means() {
        let mut cb = Codebook::new(2, 3, 1);
        let z = array![[1.0f32, 2.0, 3.0], [3.0, 4.0, 5.0], [-1.0, -1.0, -1.0]];
        cb.ema_update(z.view(), &[0, 0, 1], 0.0, 1e-5);
        let e0 = cb.entries().row(0).to_owned();
        let e1 = cb.entries().row(1).to_owned();
        for (got, want) in e0.iter().zip([2.0, 3.0, 4.0]) {
            assert!((got - want).abs() < 1e-3, "{got} vs {want}");
        }
        for (got, want) in e1.iter().zip([-1.0, -1.0, -1.0]) {
            assert!((got - want).abs() < 1e-3);
        }
    }

    #[test]
    fn unassigned_codeword_keeps_direction_and_decays_count() {
        let mut cb = Codebook::new(3, 4, 7);
        let before = cb.entries().row(2).to_owned();
        let count_before = cb.ema_counts()[2];
        let z = array![[0.5f32, 0.5, 0.5, 0.5]];
        let (_, idx) = cb.quantize(z.view()).unwrap();
        // Force the assignment away from codeword 2 if it happened to win.
        let idx = if idx[0] == 2 { vec![0] } else { idx };
        cb.ema_update(z.view(), &idx, 0.9, 1e-5);
        let after = cb.entries().row(2).to_owned();
        let (nb, na) = (
            before.iter().map(|v| v * v).sum::<f32>().sqrt(),
            after.iter().map(|v| v * v).sum::<f32>().sqrt(),
        );
        for (b, a) in before.iter().zip(after.iter()) {
            assert!((b / nb - a / na).abs() < 1e-5, "direction changed");
        }
        assert!(cb.ema_counts()[2] < count_before);
        assert_eq!(cb.unused_steps()[2], 1);
    }

    #[test]
    fn toy_gaussian_stream_converges_to_cluster_means() {
        let d = 8;
        let mut means = Array2::<f32>::zeros((4, d));
        means[[0, 0]] = 3.0;
        means[[1, 1]] = -3.0;
        means[[2, 2]] = 3.0;
        means[[3, 3]] = -3.0;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draw = |rng: &mut ChaCha8Rng, rows: usize| {
            let mut z = Array2::<f32>::zeros((rows, d));
            for mut row in z.outer_iter_mut() {
                let c = rng.random_range(0..4usize);
                for (k, v) in row.iter_mut().enumerate() {
                    *v = means[[c, k]] + rng.random_range(-0.05f32..0.05);
                }
            }
            z
        };
        let mut cb = Codebook::new(4, d, 5);
        let warm = draw(&mut rng, 256);
        cb.init_from_frames(warm.view(), &mut rng).unwrap();
        for _ in 0..500 {
            let z = draw(&mut rng, 64);
            let (_, idx) = cb.quantize(z.view()).unwrap();
            cb.ema_update(z.view(), &idx, 0.99, 1e-5);
        }
        let mut claimed = [usize::MAX; 4];
        for m in 0..4 {
            let (mut best, mut best_d) = (0usize, f32::INFINITY);
            for i in 0..4 {
                let mut dist = 0.0f32;
                for k in 0..d {
                    let r = means[[m, k]] - cb.entries()[[i, k]];
                    dist += r * r;
                }
                if dist < best_d {
                    best_d = dist;
                    best = i;
                }
            }
            assert!(best_d.sqrt() < 0.1, "cluster {m} unresolved: L2 {}", best_d.sqrt());
            claimed[m] = best;
        }
        claimed.sort_unstable();
        claimed.windows(2).for_each(|w| assert_ne!(w[0], w[1], "two means share a codeword"));
    }

    #[test]
    fn dead_codewords_reseed_from_the_batch() {
        let e = array![[0.0f32, 0.0], [10.0, 10.0]];
        let mut cb = Codebook::from_parts(e.clone(), Array1::ones(2), e, vec![0, 0]).unwrap();
        let z = array![[0.1f32, 0.1], [0.2, -0.1]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for step in 0..3 {
            let (_, idx) = cb.quantize(z.view()).unwrap();
            assert!(idx.iter().all(|&i| i == 0), "far codeword should never win");
            cb.ema_update(z.view(), &idx, 0.9, 1e-5);
            assert_eq!(cb.unused_steps()[1], step + 1);
        }
        assert_eq!(cb.reseed_dead(z.view(), 3, &mut rng), 1);
        assert_eq!(cb.unused_steps()[1], 0);
        let entries = cb.entries();
        let e1 = entries.row(1);
        assert!(
            e1 == z.row(0) || e1 == z.row(1),
            "reseeded codeword must equal a batch frame"
        );
    }

    #[test]
    fn farthest_point_init_is_deterministic_and_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let z = rand_frames(&mut rng, 64, 6);
        let mut a = Codebook::new(8, 6, 0);
        let mut b = Codebook::new(8, 6, 999);
        a.init_from_frames(z.view(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        b.init_from_frames(z.view(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.entries(), b.entries());
        for i in 0..8 {
            for j in (i + 1)..8 {
                assert_ne!(a.entries().row(i), a.entries().row(j));
            }
        }
        let few = rand_frames(&mut rng, 4, 6);
        assert!(a.init_from_frames(few.view(), &mut rng).is_err());
    }

    #[test]
    fn lookup_roundtrips_and_bounds_checks() {
        let cb = Codebook::new(5, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = rand_frames(&mut rng, 7, 3);
        let (snapped, idx) = cb.quantize(z.view()).unwrap();
        let looked = cb.lookup(&idx).unwrap();
        assert_eq!(snapped, looked);
        assert!(cb.lookup(&[5]).is_err());
    }

    #[test]
    fn checksum_tracks_entry_bytes() {
        let cb = Codebook::new(6, 4, 9);
        let same = cb.clone();
        assert_eq!(cb.checksum(), same.checksum());
        assert_eq!(cb.checksum().len(), 64);
        let mut entries = cb.entries().to_owned();
        entries[[0, 0]] += 1e-6;
        let other = Codebook::from_parts(
            entries,
            cb.ema_counts().to_owned(),
            cb.ema_sums().to_owned(),
            cb.unused_steps().to_vec(),
        )
        .unwrap();
        assert_ne!(cb.checksum(), other.checksum());
    }

    #[test]
    fn from_parts_rejects_inconsistent_state() {
        let e = Array2::<f32>::zeros((3, 2));
        assert!(Codebook::from_parts(e.clone(), Array1::ones(2), e.clone(), vec![0; 3]).is_err());
        let mut bad = e.clone();
        bad[[0, 0]] = f32::NAN;
        assert!(Codebook::from_parts(bad, Array1::ones(3), e.clone(), vec![0; 3]).is_err());
        assert!(
            Codebook::from_parts(e.clone(), Array1::from_vec(vec![1.0, -1.0, 1.0]), e, vec![0; 3])
                .is_err()
        );
    }

    proptest! {
        // Quantization invariants: the snapped frame is a codebook row, and
        // no other codeword is strictly closer.
        #[test]
        fn snapped_rows_are_optimal_codewords(seed in 0u64..500, rows in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cb = Codebook::new(10, 5, seed ^ 0xabcd);
            let z = rand_frames(&mut rng, rows, 5);
            let (snapped, idx) = cb.quantize(z.view()).unwrap();
            let entries = cb.entries();
            for (t, frame) in z.outer_iter().enumerate() {
                prop_assert_eq!(snapped.row(t), entries.row(idx[t]));
                let chosen: f32 = frame
                    .iter()
                    .zip(cb.entries().row(idx[t]))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                for e in cb.entries().outer_iter() {
                    let d: f32 = frame.iter().zip(e.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                    prop_assert!(d >= chosen - 1e-6);
                }
            }
        }
    }
}
