//! Short-time Fourier analysis/synthesis shared by the mel front end and
//! Griffin-Lim.
//!
//! Framing convention: `T = floor(len / hop)` frames, frame `t` windowed
//! around sample `t * hop` after reflective padding of `win / 2` samples on
//! each side. `istft` inverts this exactly (up to windowing) and returns
//! `T * hop` samples.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// Periodic Hann window.
pub(crate) fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Reflective padding without repeating the edge sample.
pub(crate) fn reflect_pad(x: &[f32], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    for i in 0..pad {
        let idx = (pad - i).min(n - 1);
        out.push(x[idx] as f64);
    }
    out.extend(x.iter().map(|&v| v as f64));
    for i in 0..pad {
        let idx = n - 1 - (i + 1).min(n - 1);
        out.push(x[idx] as f64);
    }
    out
}

/// Complex spectrogram: `T x (n_fft/2 + 1)`, one row per frame.
pub(crate) fn stft(x: &[f32], n_fft: usize, hop: usize, win: usize) -> Vec<Vec<Complex64>> {
    let t_frames = x.len() / hop;
    let window = hann_window(win);
    let padded = reflect_pad(x, win / 2);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let n_bins = n_fft / 2 + 1;

    let mut frames = Vec::with_capacity(t_frames);
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for t in 0..t_frames {
        let start = t * hop;
        for b in buf.iter_mut() {
            *b = Complex64::new(0.0, 0.0);
        }
        for i in 0..win {
            buf[i] = Complex64::new(padded[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        frames.push(buf[..n_bins].to_vec());
    }
    frames
}

/// Overlap-add inverse with squared-window normalization; returns exactly
/// `T * hop` samples.
pub(crate) fn istft(frames: &[Vec<Complex64>], n_fft: usize, hop: usize, win: usize) -> Vec<f32> {
    let t_frames = frames.len();
    if t_frames == 0 {
        return Vec::new();
    }
    let window = hann_window(win);
    let pad = win / 2;
    let total = t_frames * hop + 2 * pad;
    let mut acc = vec![0.0f64; total];
    let mut wsum = vec![0.0f64; total];

    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(n_fft);
    let n_bins = n_fft / 2 + 1;
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];

    for (t, spec) in frames.iter().enumerate() {
        assert_eq!(spec.len(), n_bins, "spectrum width mismatch");
        for b in buf.iter_mut() {
            *b = Complex64::new(0.0, 0.0);
        }
        buf[..n_bins].copy_from_slice(spec);
        // Hermitian completion for a real signal.
        for k in 1..n_fft - n_bins + 1 {
            buf[n_fft - k] = spec[k].conj();
        }
        ifft.process(&mut buf);
        let start = t * hop;
        for i in 0..win {
            let v = buf[i].re / n_fft as f64;
            acc[start + i] += v * window[i];
            wsum[start + i] += window[i] * window[i];
        }
    }
    let out_len = t_frames * hop;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let j = i + pad;
        let denom = if wsum[j] > 1e-9 { wsum[j] } else { 1.0 };
        out.push((acc[j] / denom) as f32);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_is_floor_len_over_hop() {
        let x = vec![0.1f32; 16_000];
        let frames = stft(&x, 400, 160, 400);
        assert_eq!(frames.len(), 100);
        assert_eq!(frames[0].len(), 201);
    }

    #[test]
    fn stft_istft_round_trip_reconstructs_interior() {
        let x: Vec<f32> = (0..4_000)
            .map(|i| {
                let t = i as f64 / 16_000.0;
                (0.6 * (2.0 * std::f64::consts::PI * 220.0 * t).sin()
                    + 0.3 * (2.0 * std::f64::consts::PI * 710.0 * t).sin()) as f32
            })
            .collect();
        let frames = stft(&x, 400, 160, 400);
        let y = istft(&frames, 400, 160, 400);
        assert_eq!(y.len(), 25 * 160);
        let guard = 400;
        let err = x[guard..y.len() - guard]
            .iter()
            .zip(&y[guard..y.len() - guard])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err < 1e-4, "round trip error {err}");
    }

    #[test]
    fn reflect_pad_mirrors_without_edge_repeat() {
        let x = [1.0f32, 2.0, 3.0, 4.0];
        let p = reflect_pad(&x, 2);
        assert_eq!(p, vec![3.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 2.0]);
    }

    #[test]
    fn tone_peak_bin_matches_frequency() {
        let f = 1_000.0;
        let x: Vec<f32> = (0..8_000)
            .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / 16_000.0).sin() as f32)
            .collect();
        let frames = stft(&x, 400, 160, 400);
        let mid = &frames[frames.len() / 2];
        let peak = mid
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm_sqr().total_cmp(&b.1.norm_sqr()))
            .unwrap()
            .0;
        // Bin spacing 40 Hz at 16 kHz / 400-point FFT.
        assert_eq!(peak, 25);
    }
}
