//! Clip-level augmentation for lip-to-index training: one crop offset and
//! one flip decision per clip, plus mixup across clip pairs.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::config::AugmentConfig;
use crate::error::{CoreError, Result};
use crate::lips::LipSequence;

fn crop_with(l: &LipSequence, oy: usize, ox: usize, size: usize, flip: bool) -> LipSequence {
    let frames = l.num_frames();
    let mut data = Vec::with_capacity(frames * size * size);
    for f in 0..frames {
        for y in 0..size {
            for x in 0..size {
                let sx = if flip { ox + size - 1 - x } else { ox + x };
                data.push(l.pixel(f, oy + y, sx));
            }
        }
    }
    LipSequence::new(data, frames, size, size).expect("crop layout")
}

fn check_crop(l: &LipSequence, size: usize) -> Result<()> {
    if size > l.height() || size > l.width() {
        return Err(CoreError::LipFormat(format!(
            "crop {size} exceeds frame size {}x{}",
            l.height(),
            l.width()
        )));
    }
    Ok(())
}

/// Deterministic evaluation view: centered crop, no flip.
pub fn center_crop(l: &LipSequence, size: usize) -> Result<LipSequence> {
    check_crop(l, size)?;
    Ok(crop_with(l, (l.height() - size) / 2, (l.width() - size) / 2, size, false))
}

/// Training view: uniformly random crop offset and a Bernoulli horizontal
/// flip, both held fixed across the clip's frames. With augmentation
/// disabled this degrades to the evaluation view.
pub fn augment(l: &LipSequence, cfg: &AugmentConfig, seed: u64) -> Result<LipSequence> {
    if !cfg.enabled {
        return center_crop(l, cfg.crop_size);
    }
    check_crop(l, cfg.crop_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let oy = rng.random_range(0..=l.height() - cfg.crop_size);
    let ox = rng.random_range(0..=l.width() - cfg.crop_size);
    let flip = rng.random_bool(cfg.flip_prob);
    Ok(crop_with(l, oy, ox, cfg.crop_size, flip))
}

/// Mirror every frame left-to-right.
pub fn flip_horizontal(l: &LipSequence) -> LipSequence {
    let (frames, h, w) = (l.num_frames(), l.height(), l.width());
    let mut data = Vec::with_capacity(frames * h * w);
    for f in 0..frames {
        for y in 0..h {
            for x in 0..w {
                data.push(l.pixel(f, y, w - 1 - x));
            }
        }
    }
    LipSequence::new(data, frames, h, w).expect("flip layout")
}

/// Convex combination of two clips and their per-frame soft targets with
/// an explicit coefficient; `lam = 1` returns pair `a` untouched.
pub fn mixup_with_lambda(
    a: (&Array3<f32>, &Array2<f32>),
    b: (&Array3<f32>, &Array2<f32>),
    lam: f32,
) -> Result<(Array3<f32>, Array2<f32>)> {
    if a.0.dim() != b.0.dim() || a.1.dim() != b.1.dim() {
        return Err(CoreError::Shape(format!(
            "mixup needs matching shapes: {:?}/{:?} vs {:?}/{:?}",
            a.0.dim(),
            a.1.dim(),
            b.0.dim(),
            b.1.dim()
        )));
    }
    let lips = a.0 * lam + b.0 * (1.0 - lam);
    let targets = a.1 * lam + b.1 * (1.0 - lam);
    Ok((lips, targets))
}

/// Mixup as used in training: one coefficient per pair drawn from
/// Beta(alpha, alpha). Targets stay row-stochastic because the inputs are.
pub fn mixup_pair(
    a: (&Array3<f32>, &Array2<f32>),
    b: (&Array3<f32>, &Array2<f32>),
    alpha: f64,
    seed: u64,
) -> Result<(Array3<f32>, Array2<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lam = if alpha > 0.0 {
        Beta::new(alpha, alpha)
            .map_err(|e| CoreError::Config(format!("mixup alpha: {e}")))?
            .sample(&mut rng) as f32
    } else {
        1.0
    };
    mixup_with_lambda(a, b, lam)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Pixels encode their source coordinates, scaled by 2^-23 to satisfy
    /// the intensity range while staying exact in f32.
    fn coded_clip(frames: usize, h: usize, w: usize) -> LipSequence {
        let mut data = Vec::with_capacity(frames * h * w);
        for f in 0..frames {
            for y in 0..h {
                for x in 0..w {
                    data.push((f * 1_000_000 + y * 1000 + x) as f32 / 8_388_608.0);
                }
            }
        }
        LipSequence::new(data, frames, h, w).unwrap()
    }

    fn decode(v: f32) -> (usize, usize, usize) {
        let v = (v * 8_388_608.0).round() as usize;
        (v / 1_000_000, (v / 1000) % 1000, v % 1000)
    }

    #[test]
    fn center_crop_starts_at_four_four() {
        let clip = coded_clip(2, 96, 96);
        let c = center_crop(&clip, 88).unwrap();
        assert_eq!(c.num_frames(), 2);
        assert_eq!(decode(c.pixel(0, 0, 0)), (0, 4, 4));
        assert_eq!(decode(c.pixel(1, 87, 87)), (1, 91, 91));
    }

    #[test]
    fn flip_is_an_involution() {
        let clip = coded_clip(3, 12, 12);
        let twice = flip_horizontal(&flip_horizontal(&clip));
        assert_eq!(twice.data(), clip.data());
    }

    #[test]
    fn augment_is_deterministic_per_seed() {
        let clip = coded_clip(4, 96, 96);
        let cfg = AugmentConfig::default();
        let a = augment(&clip, &cfg, 123).unwrap();
        let b = augment(&clip, &cfg, 123).unwrap();
        let c = augment(&clip, &cfg, 124).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn augment_uses_one_offset_and_flip_for_the_whole_clip() {
        let clip = coded_clip(5, 96, 96);
        let cfg = AugmentConfig::default();
        for seed in 0..20u64 {
            let out = augment(&clip, &cfg, seed).unwrap();
            // Recover the transform from the first pixel, then check every
            // frame agrees with it.
            let (_, oy, x0) = decode(out.pixel(0, 0, 0));
            // Flipped clips step left-to-right through decreasing source x.
            let flipped = x0 == decode(out.pixel(0, 0, 1)).2 + 1;
            let ox = if flipped { x0 - 87 } else { x0 };
            assert!(oy <= 8 && ox <= 8, "offset out of range: ({oy}, {ox})");
            for f in 0..5 {
                for y in [0usize, 40, 87] {
                    for x in [0usize, 13, 87] {
                        let want = if flipped {
                            (f, oy + y, ox + 87 - x)
                        } else {
                            (f, oy + y, ox + x)
                        };
                        assert_eq!(decode(out.pixel(f, y, x)), want, "seed {seed}");
                    }
                }
            }
        }
    }

    #[test]
    fn augment_disabled_is_the_eval_view() {
        let clip = coded_clip(2, 96, 96);
        let cfg = AugmentConfig { enabled: false, ..AugmentConfig::default() };
        let out = augment(&clip, &cfg, 9).unwrap();
        assert_eq!(out.data(), center_crop(&clip, 88).unwrap().data());
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let clip = coded_clip(1, 96, 96);
        let cfg = AugmentConfig { crop_size: 100, ..AugmentConfig::default() };
        assert!(augment(&clip, &cfg, 0).is_err());
        assert!(center_crop(&clip, 100).is_err());
    }

    #[test]
    fn mixup_endpoint_returns_the_first_clip_exactly() {
        let a_lips = Array3::from_shape_fn((2, 4, 4), |(f, y, x)| (f + y + x) as f32 * 0.1);
        let b_lips = Array3::from_shape_fn((2, 4, 4), |(f, y, x)| (f * y * x) as f32 * 0.3);
        let a_t = Array2::from_shape_fn((4, 5), |(r, c)| f32::from(c == r % 5));
        let b_t = Array2::from_shape_fn((4, 5), |(r, c)| f32::from(c == (r + 1) % 5));
        let (ml, mt) = mixup_with_lambda((&a_lips, &a_t), (&b_lips, &b_t), 1.0).unwrap();
        assert_eq!(ml, a_lips);
        assert_eq!(mt, a_t);
    }

    #[test]
    fn mixup_halfway_blends_one_hot_targets() {
        let lips = Array3::zeros((1, 2, 2));
        let mut a_t = Array2::zeros((3, 10));
        let mut b_t = Array2::zeros((3, 10));
        for r in 0..3 {
            a_t[[r, 3]] = 1.0;
            b_t[[r, 7]] = 1.0;
        }
        let (_, mt) = mixup_with_lambda((&lips, &a_t), (&lips, &b_t), 0.5).unwrap();
        for r in 0..3 {
            assert_eq!(mt[[r, 3]], 0.5);
            assert_eq!(mt[[r, 7]], 0.5);
            assert!((mt.row(r).sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mixup_rejects_mismatched_shapes() {
        let a = (Array3::zeros((2, 4, 4)), Array2::zeros((4, 5)));
        let b = (Array3::zeros((3, 4, 4)), Array2::zeros((6, 5)));
        assert!(mixup_with_lambda((&a.0, &a.1), (&b.0, &b.1), 0.5).is_err());
    }

    #[test]
    fn mixup_pair_is_seeded_and_stochastic_rows_survive() {
        let a_lips = Array3::from_elem((2, 3, 3), 1.0f32);
        let b_lips = Array3::zeros((2, 3, 3));
        let a_t = Array2::from_elem((4, 5), 0.2f32);
        let b_t = {
            let mut t = Array2::zeros((4, 5));
            for r in 0..4 {
                t[[r, 0]] = 1.0;
            }
            t
        };
        let (l1, t1) = mixup_pair((&a_lips, &a_t), (&b_lips, &b_t), 0.4, 11).unwrap();
        let (l2, _) = mixup_pair((&a_lips, &a_t), (&b_lips, &b_t), 0.4, 11).unwrap();
        assert_eq!(l1, l2);
        for r in 0..4 {
            assert!((t1.row(r).sum() - 1.0).abs() < 1e-6);
        }
        let lam = l1[[0, 0, 0]];
        assert!((0.0..=1.0).contains(&lam));
    }
}
