//! Cross-modal length alignment: mel at 100 FPS against lips at 25 FPS.

use super::mel::MelSpectrogram;
use crate::error::{CoreError, Result};
use crate::lips::LipSequence;

/// Trims both streams from the end so the returned mel length is divisible
/// by 4 and the lips have exactly `mel_T / 4` frames. A disagreement of more
/// than one lip frame (4 mel frames) signals a corrupt pairing and errors.
pub fn align_lengths(m: &MelSpectrogram, l: &LipSequence) -> Result<(MelSpectrogram, LipSequence)> {
    let mel_t = m.num_frames();
    let lip_l = l.num_frames();
    let mismatch = (mel_t as f64 / 4.0 - lip_l as f64).abs();
    if mismatch > 1.0 {
        return Err(CoreError::Shape(format!(
            "mel/lip length mismatch beyond one lip frame: {mel_t} mel vs {lip_l} lips"
        )));
    }
    let target = (mel_t / 4).min(lip_l);
    if target == 0 {
        return Err(CoreError::Shape("stream empty after alignment trimming".into()));
    }
    let mel_out = MelSpectrogram {
        frames: m.frames.slice(ndarray::s![..4 * target, ..]).to_owned(),
        frame_rate: m.frame_rate,
    };
    let lips_out = l.truncated(target);
    Ok((mel_out, lips_out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn mel(t: usize) -> MelSpectrogram {
        MelSpectrogram { frames: Array2::zeros((t, 80)), frame_rate: 100.0 }
    }

    fn lips(l: usize) -> LipSequence {
        LipSequence::constant(l, 8, 8, 0.5)
    }

    #[test]
    fn trims_to_divisibility() {
        let (m, l) = align_lengths(&mel(103), &lips(26)).unwrap();
        assert_eq!(m.num_frames(), 100);
        assert_eq!(l.num_frames(), 25);
    }

    #[test]
    fn exact_pair_unchanged() {
        let (m, l) = align_lengths(&mel(100), &lips(25)).unwrap();
        assert_eq!(m.num_frames(), 100);
        assert_eq!(l.num_frames(), 25);
    }

    #[test]
    fn large_mismatch_rejected() {
        assert!(align_lengths(&mel(100), &lips(20)).is_err());
    }

    #[test]
    fn result_always_satisfies_ratio() {
        for (t, l) in [(41usize, 10usize), (99, 25), (120, 30), (8, 2), (7, 2)] {
            if let Ok((m, lp)) = align_lengths(&mel(t), &lips(l)) {
                assert_eq!(m.num_frames() % 4, 0);
                assert_eq!(m.num_frames() / 4, lp.num_frames());
            }
        }
    }
}
