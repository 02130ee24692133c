//! Pitch accuracy: RMSE in Hz over co-voiced frames after DTW alignment.

use ndarray::Array2;

use crate::audio::PitchContour;
use crate::error::{CoreError, Result};

use super::mcd::dtw_path;

/// Voicing-mismatch alignment cost in log-F0 units; roughly one octave so
/// the path prefers matching voiced stretches to skipping them.
const VOICING_PENALTY: f64 = std::f64::consts::LN_2;

/// RMSE in Hz plus the number of co-voiced aligned frame pairs.
pub fn f0_rmse(reference: &PitchContour, degraded: &PitchContour) -> Result<(f64, usize)> {
    if (reference.frame_rate - degraded.frame_rate).abs() > 1e-9 {
        return Err(CoreError::Metric(format!(
            "frame rates differ: {} vs {}",
            reference.frame_rate, degraded.frame_rate
        )));
    }
    if reference.is_empty() || degraded.is_empty() {
        return Err(CoreError::Metric("empty pitch contour".into()));
    }

    // Alignment feature: (log f0, voicing flag scaled by the penalty), so
    // voiced-unvoiced pairs cost at least VOICING_PENALTY.
    let features = |p: &PitchContour| -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((p.len(), 2));
        for t in 0..p.len() {
            if p.voiced[t] {
                out[[t, 0]] = p.values[t].ln();
                out[[t, 1]] = VOICING_PENALTY;
            }
        }
        out
    };
    let path = dtw_path(&features(reference), &features(degraded));

    let mut sq_sum = 0.0;
    let mut co_voiced = 0usize;
    for &(i, j) in &path {
        if reference.voiced[i] && degraded.voiced[j] {
            let d = reference.values[i] - degraded.values[j];
            sq_sum += d * d;
            co_voiced += 1;
        }
    }
    if co_voiced == 0 {
        return Err(CoreError::Metric("no co-voiced frames after alignment".into()));
    }
    Ok(((sq_sum / co_voiced as f64).sqrt(), co_voiced))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn contour(values: Vec<f64>, voiced: Vec<bool>) -> PitchContour {
        PitchContour { values, voiced, frame_rate: 100.0 }
    }

    #[test]
    fn identical_contours_score_zero() {
        let a = contour(vec![120.0, 130.0, 140.0, 150.0], vec![true; 4]);
        let (rmse, n) = f0_rmse(&a, &a).unwrap();
        assert_eq!(rmse, 0.0);
        assert_eq!(n, 4);
    }

    #[test]
    fn constant_offset_is_exactly_ten_hz() {
        let a = contour(vec![100.0; 50], vec![true; 50]);
        let b = contour(vec![110.0; 50], vec![true; 50]);
        let (rmse, n) = f0_rmse(&a, &b).unwrap();
        assert_eq!(rmse, 10.0);
        assert!(n >= 50);
    }

    #[test]
    fn fully_unvoiced_degraded_is_an_error() {
        let a = contour(vec![200.0; 20], vec![true; 20]);
        let b = contour(vec![0.0; 20], vec![false; 20]);
        assert!(f0_rmse(&a, &b).is_err());
    }

    #[test]
    fn rate_mismatch_is_an_error() {
        let a = contour(vec![200.0; 20], vec![true; 20]);
        let mut b = a.clone();
        b.frame_rate = 50.0;
        assert!(f0_rmse(&a, &b).is_err());
    }

    #[test]
    fn unvoiced_stretches_are_excluded_from_the_error() {
        // Matching halves voiced at different pitches, separated by silence
        // in both; only the voiced pairs count.
        let mut values = vec![150.0; 10];
        values.extend([0.0; 5]);
        values.extend([180.0; 10]);
        let mut voiced = vec![true; 10];
        voiced.extend([false; 5]);
        voiced.extend([true; 10]);
        let a = contour(values.clone(), voiced.clone());
        let b = contour(
            values.iter().map(|&v| if v > 0.0 { v + 5.0 } else { 0.0 }).collect(),
            voiced,
        );
        let (rmse, n) = f0_rmse(&a, &b).unwrap();
        assert!((rmse - 5.0).abs() < 1e-9, "{rmse}");
        assert_eq!(n, 20);
    }

    #[test]
    fn alignment_tolerates_a_small_tempo_difference() {
        // Same rising glide, one sampled half as often; DTW pairs the
        // nearest pitches so the RMSE stays far below the raw offset.
        let fine: Vec<f64> = (0..60).map(|t| 120.0 * 1.005f64.powi(t)).collect();
        let coarse: Vec<f64> = (0..30).map(|t| 120.0 * 1.005f64.powi(2 * t)).collect();
        let a = contour(fine.clone(), vec![true; 60]);
        let b = contour(coarse, vec![true; 30]);
        let (rmse, _) = f0_rmse(&a, &b).unwrap();
        let raw: f64 = fine.iter().zip(fine.iter().skip(30)).map(|(x, y)| (x - y).powi(2)).sum();
        assert!(rmse < (raw / 30.0).sqrt() * 0.5, "{rmse}");
    }
}
