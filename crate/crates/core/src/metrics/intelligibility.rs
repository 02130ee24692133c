//! Short-time objective intelligibility, classic and extended.
//!
//! Both scores share one front end: resample to 10 kHz, drop frames where
//! the reference is silent (40 dB below its loudest frame), and reduce the
//! spectrum to 15 one-third-octave band magnitudes starting at 150 Hz.
//! Scores then correlate 384 ms segments: per band with normalization and
//! clipping (STOI), or across whole row-and-column normalized segment
//! matrices (ESTOI, which makes it exactly gain-invariant).

use ndarray::Array2;
use rustfft::{num_complex::Complex64, FftPlanner};

use crate::audio::{hann_window, resample, Waveform};
use crate::error::{CoreError, Result};

const FS: u32 = 10_000;
const WIN: usize = 256;
const HOP: usize = 128;
const N_FFT: usize = 512;
const N_BANDS: usize = 15;
const LOWEST_CF_HZ: f64 = 150.0;
const SEGMENT_FRAMES: usize = 30;
const DYN_RANGE_DB: f64 = 40.0;
/// Signal-to-distortion clipping bound, -beta dB.
const BETA_DB: f64 = -15.0;

/// Band magnitudes `T x 15` for the non-silent frames of both signals.
fn band_envelopes(reference: &Waveform, degraded: &Waveform) -> Result<(Array2<f64>, Array2<f64>)> {
    if reference.sample_rate != degraded.sample_rate {
        return Err(CoreError::Metric(format!(
            "sample rates differ: {} vs {}",
            reference.sample_rate, degraded.sample_rate
        )));
    }
    let r = resample(reference, FS)?;
    let d = resample(degraded, FS)?;
    let n = r.samples.len().min(d.samples.len());
    if n < WIN {
        return Err(CoreError::Metric("signals shorter than one analysis frame".into()));
    }

    let window = hann_window(WIN);
    let frames = (n - WIN) / HOP + 1;
    let frame = |x: &[f32], t: usize| -> Vec<f64> {
        (0..WIN).map(|i| x[t * HOP + i] as f64 * window[i]).collect()
    };

    // Silence gate from the reference's own frame energies.
    let energies: Vec<f64> = (0..frames)
        .map(|t| frame(&r.samples, t).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let max_db = energies.iter().fold(f64::MIN, |a, &e| a.max(db(e)));
    let kept: Vec<usize> = (0..frames).filter(|&t| db(energies[t]) > max_db - DYN_RANGE_DB).collect();
    if kept.len() < SEGMENT_FRAMES {
        return Err(CoreError::Metric(format!(
            "{} frames after silence removal, need {SEGMENT_FRAMES} (384 ms)",
            kept.len()
        )));
    }

    let bands = band_bins();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(N_FFT);
    let mut spectrum = |x: &[f32], t: usize| -> Vec<f64> {
        let mut buf = vec![Complex64::new(0.0, 0.0); N_FFT];
        for (i, v) in frame(x, t).into_iter().enumerate() {
            buf[i].re = v;
        }
        fft.process(&mut buf);
        bands
            .iter()
            .map(|bin_range| {
                bin_range.clone().map(|k| buf[k].norm_sqr()).sum::<f64>().sqrt()
            })
            .collect()
    };

    let mut x = Array2::<f64>::zeros((kept.len(), N_BANDS));
    let mut y = Array2::<f64>::zeros((kept.len(), N_BANDS));
    for (row, &t) in kept.iter().enumerate() {
        for (j, v) in spectrum(&r.samples, t).into_iter().enumerate() {
            x[[row, j]] = v;
        }
        for (j, v) in spectrum(&d.samples, t).into_iter().enumerate() {
            y[[row, j]] = v;
        }
    }
    Ok((x, y))
}

fn db(v: f64) -> f64 {
    20.0 * (v + 1e-12).log10()
}

/// FFT bin ranges of the 15 one-third-octave bands.
fn band_bins() -> Vec<std::ops::Range<usize>> {
    let bin_hz = FS as f64 / N_FFT as f64;
    (0..N_BANDS)
        .map(|k| {
            let cf = LOWEST_CF_HZ * 2f64.powf(k as f64 / 3.0);
            let lo = cf / 2f64.powf(1.0 / 6.0);
            let hi = cf * 2f64.powf(1.0 / 6.0);
            let lo_bin = (lo / bin_hz).ceil() as usize;
            let hi_bin = ((hi / bin_hz).ceil() as usize).min(N_FFT / 2 + 1);
            lo_bin..hi_bin
        })
        .collect()
}

/// Short-time objective intelligibility in roughly [0, 1].
pub fn stoi(reference: &Waveform, degraded: &Waveform) -> Result<f64> {
    let (x, y) = band_envelopes(reference, degraded)?;
    let clip_gain = 10f64.powf(-BETA_DB / 20.0) + 1.0;
    let t = x.nrows();
    let mut sum = 0.0;
    let mut count = 0usize;
    for m in SEGMENT_FRAMES..=t {
        for j in 0..N_BANDS {
            let xs: Vec<f64> = (m - SEGMENT_FRAMES..m).map(|i| x[[i, j]]).collect();
            let ys: Vec<f64> = (m - SEGMENT_FRAMES..m).map(|i| y[[i, j]]).collect();
            let nx = norm(&xs);
            let ny = norm(&ys);
            let alpha = if ny > 0.0 { nx / ny } else { 0.0 };
            let clipped: Vec<f64> =
                xs.iter().zip(&ys).map(|(&xv, &yv)| (alpha * yv).min(clip_gain * xv)).collect();
            sum += correlation(&xs, &clipped);
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Extended STOI: segment-level spectrogram correlation, gain-invariant.
pub fn estoi(reference: &Waveform, degraded: &Waveform) -> Result<f64> {
    let (x, y) = band_envelopes(reference, degraded)?;
    let t = x.nrows();
    let mut sum = 0.0;
    let mut count = 0usize;
    for m in SEGMENT_FRAMES..=t {
        let xs = normalized_segment(&x, m);
        let ys = normalized_segment(&y, m);
        let mut rho = 0.0;
        for n in 0..SEGMENT_FRAMES {
            for j in 0..N_BANDS {
                rho += xs[[j, n]] * ys[[j, n]];
            }
        }
        sum += rho / SEGMENT_FRAMES as f64;
        count += 1;
    }
    Ok(sum / count as f64)
}

/// One segment as a `bands x frames` matrix with rows, then columns,
/// mean-centered and unit-normalized.
fn normalized_segment(env: &Array2<f64>, end: usize) -> Array2<f64> {
    let mut seg = Array2::<f64>::zeros((N_BANDS, SEGMENT_FRAMES));
    for j in 0..N_BANDS {
        for n in 0..SEGMENT_FRAMES {
            seg[[j, n]] = env[[end - SEGMENT_FRAMES + n, j]];
        }
    }
    for j in 0..N_BANDS {
        let mut row = seg.row_mut(j);
        let mean = row.mean().unwrap();
        row.mapv_inplace(|v| v - mean);
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
    for n in 0..SEGMENT_FRAMES {
        let mut col = seg.column_mut(n);
        let mean = col.mean().unwrap();
        col.mapv_inplace(|v| v - mean);
        let norm = col.dot(&col).sqrt();
        if norm > 0.0 {
            col.mapv_inplace(|v| v / norm);
        }
    }
    seg
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db2 = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        da += (x - ma) * (x - ma);
        db2 += (y - mb) * (y - mb);
    }
    let denom = (da * db2).sqrt();
    if denom > 0.0 {
        num / denom
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Modulated multi-harmonic signal with enough spectral movement for
    /// the band correlations to be meaningful.
    fn speechy(seconds: f64, seed: u64) -> Waveform {
        let rate = 16_000u32;
        let n = (seconds * rate as f64) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f0 = rng.random_range(120.0..260.0);
        let samples = (0..n)
            .map(|i| {
                let t = i as f64 / rate as f64;
                let sweep = f0 * (1.0 + 0.25 * (std::f64::consts::TAU * 1.3 * t).sin());
                let mut v = 0.0;
                for h in 1..=6 {
                    v += (std::f64::consts::TAU * sweep * h as f64 * t).sin() / h as f64;
                }
                let envelope = 0.55 + 0.45 * (std::f64::consts::TAU * 2.1 * t).sin();
                (0.25 * v * envelope) as f32
            })
            .collect();
        Waveform::new(samples, rate).unwrap()
    }

    fn white_noise(seconds: f64, amplitude: f32, seed: u64) -> Waveform {
        let rate = 16_000u32;
        let n = (seconds * rate as f64) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n).map(|_| rng.random_range(-amplitude..amplitude)).collect();
        Waveform::new(samples, rate).unwrap()
    }

    fn mix_at_snr(x: &Waveform, snr_db: f64, seed: u64) -> Waveform {
        let noise = white_noise(x.duration_s(), 1.0, seed);
        let px = x.samples.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
        let pn = noise.samples.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
        let gain = ((px / pn) / 10f64.powf(snr_db / 10.0)).sqrt() as f32;
        let samples = x
            .samples
            .iter()
            .zip(&noise.samples)
            .map(|(&s, &n)| (s + gain * n).clamp(-1.0, 1.0))
            .collect();
        Waveform::new(samples, x.sample_rate).unwrap()
    }

    #[test]
    fn self_similarity_is_near_one() {
        let x = speechy(1.0, 1);
        assert!(stoi(&x, &x).unwrap() >= 0.99);
        assert!(estoi(&x, &x).unwrap() >= 0.99);
    }

    #[test]
    fn unrelated_noise_scores_low() {
        let x = speechy(1.0, 2);
        let n = white_noise(1.0, 0.3, 3);
        assert!(stoi(&x, &n).unwrap() <= 0.25);
        assert!(estoi(&x, &n).unwrap() <= 0.2);
    }

    #[test]
    fn estoi_ignores_global_gain() {
        let x = speechy(1.0, 4);
        let deg = mix_at_snr(&x, 10.0, 5);
        let half = Waveform::new(deg.samples.iter().map(|&v| v * 0.5).collect(), 16_000).unwrap();
        let a = estoi(&x, &deg).unwrap();
        let b = estoi(&x, &half).unwrap();
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }

    #[test]
    fn noise_degrades_scores_monotonically() {
        let x = speechy(1.2, 6);
        for metric in [stoi, estoi] {
            let clean = metric(&x, &x).unwrap();
            let s20 = metric(&x, &mix_at_snr(&x, 20.0, 7)).unwrap();
            let s10 = metric(&x, &mix_at_snr(&x, 10.0, 8)).unwrap();
            let s0 = metric(&x, &mix_at_snr(&x, 0.0, 9)).unwrap();
            assert!(s20 <= clean + 0.02);
            assert!(s10 <= s20 + 0.02, "{s10} vs {s20}");
            assert!(s0 <= s10 + 0.02, "{s0} vs {s10}");
            assert!(s0 < clean - 0.1, "0 dB SNR should hurt: {s0} vs {clean}");
        }
    }

    #[test]
    fn small_alignment_shifts_barely_move_the_score() {
        let x = speechy(1.0, 10);
        let shift = (0.002 * 16_000.0) as usize;
        let shifted = Waveform::new(
            x.samples[shift..].iter().chain(std::iter::repeat(&0.0).take(shift)).copied().collect(),
            16_000,
        )
        .unwrap();
        let base = stoi(&x, &x).unwrap();
        let moved = stoi(&x, &shifted).unwrap();
        assert!((base - moved).abs() < 0.05, "{base} vs {moved}");
    }

    #[test]
    fn contract_errors_are_reported() {
        let x = speechy(1.0, 11);
        let short = Waveform::new(vec![0.1; 800], 16_000).unwrap();
        assert!(stoi(&x, &short).is_err());
        let other_rate = Waveform::new(x.samples.clone(), 8_000).unwrap();
        assert!(stoi(&x, &other_rate).is_err());
    }

    #[test]
    fn bands_cover_150hz_to_under_nyquist() {
        let bands = band_bins();
        assert_eq!(bands.len(), 15);
        let bin_hz = 10_000.0 / 512.0;
        assert!(bands[0].start as f64 * bin_hz >= 130.0);
        assert!((bands[14].end as f64) * bin_hz <= 5_000.0 + bin_hz);
        for w in bands.windows(2) {
            assert!(w[0].end <= w[1].start + 1, "bands out of order");
        }
        for b in &bands {
            assert!(!b.is_empty(), "every band needs at least one bin");
        }
    }
}
