//! Phoneme consistency of the learned units.
//!
//! Uses the synthetic corpus's alignment labels: for each phoneme, how much
//! of its frame mass lands on its single most common index. The report also
//! carries codebook usage statistics and can render an index-over-time
//! overlay for visual inspection.

use std::collections::HashMap;

use serde::Serialize;

use crate::corpus::AlignmentSpan;
use crate::error::{CoreError, Result};
use crate::vc::UnitIndexSequence;

#[derive(Debug, Clone, Serialize)]
pub struct PhonemeStats {
    pub label: String,
    /// Unit frames labeled with this phoneme.
    pub frames: usize,
    pub top_index: usize,
    /// Fraction of this phoneme's frames carrying the top index.
    pub purity: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PurityReport {
    /// Frame-weighted mean of per-phoneme purity.
    pub purity: f64,
    pub phonemes: Vec<PhonemeStats>,
    /// Entropy (nats) of the global index usage distribution.
    pub usage_entropy: f64,
    pub used_entries: usize,
    pub total_frames: usize,
}

/// A clip's index sequence plus its phoneme alignment (mel-frame spans).
pub type LabeledClip<'a> = (&'a UnitIndexSequence, &'a [AlignmentSpan]);

/// Label of the unit frame `u` (mel frames `2u..2u+2`), if annotated.
fn label_at<'a>(spans: &'a [AlignmentSpan], u: usize) -> Option<&'a str> {
    let mel_frame = 2 * u;
    spans
        .iter()
        .find(|s| s.start_frame <= mel_frame && mel_frame < s.end_frame)
        .map(|s| s.label.as_str())
}

pub fn unit_purity_report(clips: &[LabeledClip<'_>]) -> Result<PurityReport> {
    if clips.is_empty() {
        return Err(CoreError::Metric("no clips to analyze".into()));
    }
    let mut per_phoneme: HashMap<&str, HashMap<usize, usize>> = HashMap::new();
    let mut usage: HashMap<usize, usize> = HashMap::new();
    let mut total_frames = 0usize;

    for (indices, spans) in clips {
        if spans.is_empty() {
            return Err(CoreError::Metric(
                "clip lacks phoneme alignment; purity needs labeled data".into(),
            ));
        }
        for (u, &idx) in indices.iter().enumerate() {
            let Some(label) = label_at(spans, u) else { continue };
            *per_phoneme.entry(label).or_default().entry(idx).or_default() += 1;
            *usage.entry(idx).or_default() += 1;
            total_frames += 1;
        }
    }
    if total_frames == 0 {
        return Err(CoreError::Metric("alignments cover no unit frames".into()));
    }

    let mut phonemes: Vec<PhonemeStats> = per_phoneme
        .into_iter()
        .map(|(label, hist)| {
            let frames: usize = hist.values().sum();
            // Deterministic argmax: highest count, then lowest index.
            let (&top_index, &top_count) = hist
                .iter()
                .max_by_key(|(&idx, &count)| (count, std::cmp::Reverse(idx)))
                .expect("non-empty histogram");
            PhonemeStats {
                label: label.to_string(),
                frames,
                top_index,
                purity: top_count as f64 / frames as f64,
            }
        })
        .collect();
    phonemes.sort_by(|a, b| a.label.cmp(&b.label));

    let purity = phonemes.iter().map(|p| p.purity * p.frames as f64).sum::<f64>()
        / total_frames as f64;
    let usage_entropy = -usage
        .values()
        .map(|&c| {
            let q = c as f64 / total_frames as f64;
            q * q.ln()
        })
        .sum::<f64>();

    Ok(PurityReport {
        purity,
        phonemes,
        usage_entropy,
        used_entries: usage.len(),
        total_frames,
    })
}

/// Index-over-time strip chart: one lane per clip, unit frames colored by
/// index, phoneme boundaries ticked.
pub fn render_index_overlay(clips: &[LabeledClip<'_>], num_classes: usize) -> String {
    const LANE_H: usize = 26;
    const GAP: usize = 8;
    const PX_PER_FRAME: usize = 6;

    let width = clips.iter().map(|(idx, _)| idx.len()).max().unwrap_or(0) * PX_PER_FRAME + 20;
    let height = clips.len() * (LANE_H + GAP) + 20;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (lane, (indices, spans)) in clips.iter().enumerate() {
        let y = 10 + lane * (LANE_H + GAP);
        for (u, &idx) in indices.iter().enumerate() {
            let hue = 360.0 * idx as f64 / num_classes.max(1) as f64;
            let x = 10 + u * PX_PER_FRAME;
            svg.push_str(&format!(
                "<rect x=\"{x}\" y=\"{y}\" width=\"{PX_PER_FRAME}\" height=\"{LANE_H}\" \
                 fill=\"hsl({hue:.0},70%,55%)\"><title>unit {u}: index {idx}</title></rect>\n"
            ));
        }
        for span in spans.iter() {
            let x = 10 + span.start_frame / 2 * PX_PER_FRAME;
            svg.push_str(&format!(
                "<line x1=\"{x}\" y1=\"{y}\" x2=\"{x}\" y2=\"{}\" stroke=\"black\" \
                 stroke-width=\"1\"/>\n",
                y + LANE_H
            ));
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" font-size=\"8\" font-family=\"sans-serif\">{}</text>\n",
                x + 2,
                y + LANE_H - 3,
                span.label
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn span(label: &str, start: usize, end: usize) -> AlignmentSpan {
        AlignmentSpan { label: label.into(), start_frame: start, end_frame: end }
    }

    #[test]
    fn unique_constant_index_per_phoneme_is_fully_pure() {
        let indices: UnitIndexSequence =
            vec![3, 3, 3, 3, 7, 7, 7, 7, 1, 1, 1, 1];
        let spans = vec![span("aa", 0, 8), span("ee", 8, 16), span("oo", 16, 24)];
        let clips = [(&indices, spans.as_slice())];
        let report = unit_purity_report(&clips).unwrap();
        assert_eq!(report.purity, 1.0);
        assert_eq!(report.total_frames, 12);
        assert_eq!(report.used_entries, 3);
        for p in &report.phonemes {
            assert_eq!(p.purity, 1.0);
            assert_eq!(p.frames, 4);
        }
    }

    #[test]
    fn uniform_random_indices_score_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 200usize;
        let indices: UnitIndexSequence = (0..30_000).map(|_| rng.random_range(0..n)).collect();
        let spans = vec![span("aa", 0, 30_000), span("ee", 30_000, 60_000)];
        let clips = [(&indices, spans.as_slice())];
        let report = unit_purity_report(&clips).unwrap();
        // Expected max-cell mass of a uniform multinomial: 1/N plus
        // fluctuation; generously bounded.
        assert!(report.purity < 3.0 / n as f64, "{}", report.purity);
        assert!(report.usage_entropy > 0.95 * (n as f64).ln());
    }

    #[test]
    fn purity_is_invariant_under_index_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let indices: UnitIndexSequence = (0..400).map(|_| rng.random_range(0..10)).collect();
        let spans = vec![span("aa", 0, 300), span("ee", 300, 500), span("oo", 500, 800)];

        let mut perm: Vec<usize> = (0..10).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let relabeled: UnitIndexSequence = indices.iter().map(|&i| perm[i]).collect();

        let a = unit_purity_report(&[(&indices, spans.as_slice())]).unwrap();
        let b = unit_purity_report(&[(&relabeled, spans.as_slice())]).unwrap();
        assert_eq!(a.purity, b.purity);
        assert!((a.usage_entropy - b.usage_entropy).abs() < 1e-12);
    }

    #[test]
    fn missing_alignment_is_an_error() {
        let indices: UnitIndexSequence = vec![1, 2, 3];
        let clips = [(&indices, &[] as &[AlignmentSpan])];
        assert!(unit_purity_report(&clips).is_err());
    }

    #[test]
    fn overlay_is_well_formed_svg() {
        let indices: UnitIndexSequence = vec![0, 1, 2, 3, 4, 5];
        let spans = vec![span("aa", 0, 6), span("ee", 6, 12)];
        let clips = [(&indices, spans.as_slice())];
        let svg = render_index_overlay(&clips, 6);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect").count(), 7, "6 frames + background");
        assert_eq!(svg.matches("<line").count(), 2);
    }
}
