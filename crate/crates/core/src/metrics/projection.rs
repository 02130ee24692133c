//! Speaker-embedding geometry: silhouette score in the native space and a
//! small seeded t-SNE (perplexity 10, 500 iterations, PCA initialization)
//! for the 2-D scatter. The clustering claim rides on the silhouette, which
//! is computed on the original embeddings, never on the projection.

use ndarray::{Array1, Array2};
use serde::Serialize;

use crate::error::{CoreError, Result};

const PERPLEXITY: f64 = 10.0;
const ITERATIONS: usize = 500;
const EARLY_EXAGGERATION: f64 = 12.0;
const EXAGGERATION_ITERS: usize = 100;
const LEARNING_RATE: f64 = 200.0;

#[derive(Debug, Clone, Serialize)]
pub struct ProjectionReport {
    /// `n x 2` coordinates, row order matching the input.
    pub coords: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
    /// Silhouette on the original high-dimensional embeddings.
    pub silhouette: f64,
}

/// Mean silhouette over all points (Euclidean, original dimensionality).
pub fn silhouette_score(x: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let n = x.nrows();
    check_groups(n, labels)?;
    let dist = pairwise_distances(x);

    let mut total = 0.0;
    for i in 0..n {
        let mut same_sum = 0.0;
        let mut same_count = 0usize;
        let mut other: std::collections::HashMap<usize, (f64, usize)> = Default::default();
        for j in 0..n {
            if i == j {
                continue;
            }
            if labels[j] == labels[i] {
                same_sum += dist[[i, j]];
                same_count += 1;
            } else {
                let e = other.entry(labels[j]).or_insert((0.0, 0));
                e.0 += dist[[i, j]];
                e.1 += 1;
            }
        }
        let a = same_sum / same_count as f64;
        let b = other
            .values()
            .map(|&(s, c)| s / c as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        total += if denom > 0.0 { (b - a) / denom } else { 0.0 };
    }
    Ok(total / n as f64)
}

/// 2-D t-SNE plus silhouette; deterministic for a given seed.
pub fn speaker_projection(
    embeddings: &Array2<f64>,
    labels: &[usize],
    seed: u64,
) -> Result<ProjectionReport> {
    let n = embeddings.nrows();
    check_groups(n, labels)?;
    let silhouette = silhouette_score(embeddings, labels)?;

    let p = affinities(embeddings);
    let mut y = pca_init(embeddings, seed);
    let mut velocity = Array2::<f64>::zeros((n, 2));

    for iter in 0..ITERATIONS {
        let exaggeration = if iter < EXAGGERATION_ITERS { EARLY_EXAGGERATION } else { 1.0 };
        let momentum = if iter < 250 { 0.5 } else { 0.8 };

        // Student-t affinities in the embedding plane.
        let mut w = Array2::<f64>::zeros((n, n));
        let mut z = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = y[[i, 0]] - y[[j, 0]];
                let dy = y[[i, 1]] - y[[j, 1]];
                let v = 1.0 / (1.0 + dx * dx + dy * dy);
                w[[i, j]] = v;
                w[[j, i]] = v;
                z += 2.0 * v;
            }
        }
        let z = z.max(1e-12);

        let mut grad = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = (w[[i, j]] / z).max(1e-12);
                let coef = 4.0 * (exaggeration * p[[i, j]] - q) * w[[i, j]];
                grad[[i, 0]] += coef * (y[[i, 0]] - y[[j, 0]]);
                grad[[i, 1]] += coef * (y[[i, 1]] - y[[j, 1]]);
            }
        }
        for i in 0..n {
            for d in 0..2 {
                velocity[[i, d]] = momentum * velocity[[i, d]] - LEARNING_RATE * grad[[i, d]];
                y[[i, d]] += velocity[[i, d]];
            }
        }
        // Keep the embedding centered so it cannot drift.
        for d in 0..2 {
            let mean = y.column(d).mean().unwrap();
            y.column_mut(d).mapv_inplace(|v| v - mean);
        }
    }

    if y.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Metric("projection diverged to non-finite coordinates".into()));
    }
    Ok(ProjectionReport {
        coords: (0..n).map(|i| [y[[i, 0]], y[[i, 1]]]).collect(),
        labels: labels.to_vec(),
        silhouette,
    })
}

/// Scatter plot of a projection, one color per label.
pub fn render_projection(report: &ProjectionReport) -> String {
    const SIZE: f64 = 480.0;
    const PAD: f64 = 30.0;
    let (mut min_x, mut max_x, mut min_y, mut max_y) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for c in &report.coords {
        min_x = min_x.min(c[0]);
        max_x = max_x.max(c[0]);
        min_y = min_y.min(c[1]);
        max_y = max_y.max(c[1]);
    }
    let span_x = (max_x - min_x).max(1e-9);
    let span_y = (max_y - min_y).max(1e-9);
    let groups = report.labels.iter().max().map_or(1, |&m| m + 1);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{0}\" viewBox=\"0 0 {0} {0}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
        SIZE + 2.0 * PAD
    );
    for (c, &label) in report.coords.iter().zip(&report.labels) {
        let x = PAD + (c[0] - min_x) / span_x * SIZE;
        let y = PAD + (c[1] - min_y) / span_y * SIZE;
        let hue = 360.0 * label as f64 / groups as f64;
        svg.push_str(&format!(
            "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"4\" fill=\"hsl({hue:.0},70%,50%)\">\
             <title>speaker {label}</title></circle>\n"
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn check_groups(n: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != n {
        return Err(CoreError::Metric(format!("{} labels for {n} points", labels.len())));
    }
    let mut counts: std::collections::HashMap<usize, usize> = Default::default();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if counts.len() < 2 || counts.values().any(|&c| c < 3) {
        return Err(CoreError::Metric(
            "need at least two groups with three points each".into(),
        ));
    }
    Ok(())
}

fn pairwise_distances(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let mut acc = 0.0;
            for k in 0..x.ncols() {
                let v = x[[i, k]] - x[[j, k]];
                acc += v * v;
            }
            let v = acc.sqrt();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Symmetrized input affinities with per-point bandwidths bisected to match
/// the target perplexity.
fn affinities(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let d = pairwise_distances(x);
    let target_entropy = PERPLEXITY.min((n - 1) as f64).ln();

    let mut p = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let mut beta = 1.0;
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        let mut row = vec![0.0; n];
        for _ in 0..50 {
            let mut sum = 0.0;
            for j in 0..n {
                row[j] = if j == i { 0.0 } else { (-beta * d[[i, j]] * d[[i, j]]).exp() };
                sum += row[j];
            }
            if sum <= 0.0 {
                // All other points coincide with this one: fall back to a
                // uniform row rather than chasing an unreachable entropy.
                for (j, r) in row.iter_mut().enumerate() {
                    *r = if j == i { 0.0 } else { 1.0 };
                }
                break;
            }
            let mut entropy = 0.0;
            for &r in &row {
                if r > 0.0 {
                    let q = r / sum;
                    entropy -= q * q.ln();
                }
            }
            if (entropy - target_entropy).abs() < 1e-5 {
                break;
            }
            if entropy > target_entropy {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        let sum: f64 = row.iter().sum();
        for j in 0..n {
            p[[i, j]] = row[j] / sum.max(1e-12);
        }
    }

    // Symmetrize and floor.
    let mut sym = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            sym[[i, j]] = ((p[[i, j]] + p[[j, i]]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    for i in 0..n {
        sym[[i, i]] = 0.0;
    }
    sym
}

/// Top-2 principal directions via seeded power iteration on the centered
/// Gram matrix, scaled to a tiny spread as the optimizer's starting point.
fn pca_init(x: &Array2<f64>, seed: u64) -> Array2<f64> {
    use rand::{Rng, SeedableRng};
    let n = x.nrows();
    let mut centered = x.clone();
    for k in 0..x.ncols() {
        let mean = centered.column(k).mean().unwrap();
        centered.column_mut(k).mapv_inplace(|v| v - mean);
    }
    let mut gram = centered.dot(&centered.t());

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut components = Array2::<f64>::zeros((n, 2));
    for c in 0..2 {
        let mut v = Array1::from_shape_fn(n, |_| rng.random_range(-1.0..1.0));
        for _ in 0..200 {
            v = gram.dot(&v);
            let norm = v.dot(&v).sqrt();
            if norm < 1e-12 {
                break;
            }
            v /= norm;
        }
        let lambda = v.dot(&gram.dot(&v)).max(0.0);
        let scores = v.clone() * lambda.sqrt();
        // Normalize the column to std 1e-4, the customary t-SNE start.
        let std = (scores.dot(&scores) / n as f64).sqrt().max(1e-12);
        for i in 0..n {
            components[[i, c]] = scores[i] / std * 1e-4;
        }
        // Deflate.
        for i in 0..n {
            for j in 0..n {
                gram[[i, j]] -= lambda * v[i] * v[j];
            }
        }
    }
    components
}
