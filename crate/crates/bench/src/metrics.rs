//! One-pass evaluation metrics: precision over center error, success over overlap.

use std::collections::BTreeMap;

use gdt_core::{center_distance, iou, BoundingBox};

use crate::dataset::Attribute;
use crate::BenchError;

/// Pixel threshold reported as the representative precision score.
pub const PRECISION_THRESHOLD: f64 = 20.0;

/// Number of evenly spaced overlap thresholds in `[0, 1]`.
pub const SUCCESS_BINS: usize = 101;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalCurve {
    /// `(threshold, value)` with strictly increasing thresholds and values in `[0, 1]`.
    pub samples: Vec<(f64, f64)>,
}

impl EvalCurve {
    pub fn value_at(&self, threshold: f64) -> Option<f64> {
        self.samples.iter().find(|(t, _)| *t == threshold).map(|&(_, v)| v)
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().map(|&(_, v)| v).sum::<f64>() / self.samples.len() as f64
    }
}

fn check_lengths(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<(), BenchError> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(BenchError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    Ok(())
}

/// Fraction of frames whose center error is at most `t`, for `t = 0, step, ..., max`.
pub fn precision_curve(pred: &[BoundingBox], gt: &[BoundingBox], max_threshold: f64, step: f64) -> Result<EvalCurve, BenchError> {
    check_lengths(pred, gt)?;
    let errors: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| center_distance(p, g)).collect();
    let n = (max_threshold / step).floor() as usize;
    let samples = (0..=n)
        .map(|k| {
            let t = k as f64 * step;
            (t, errors.iter().filter(|&&e| e <= t).count() as f64 / errors.len() as f64)
        })
        .collect();
    Ok(EvalCurve { samples })
}

pub fn default_precision_curve(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<EvalCurve, BenchError> {
    precision_curve(pred, gt, 50.0, 1.0)
}

pub fn precision_at(curve: &EvalCurve, threshold: f64) -> Option<f64> {
    curve.value_at(threshold)
}

/// Fraction of frames with IoU at least `t`, for `t = k / 100`, `k = 0..=100`.
pub fn success_curve(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<EvalCurve, BenchError> {
    check_lengths(pred, gt)?;
    let overlaps: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| iou(p, g)).collect();
    let samples = (0..SUCCESS_BINS)
        .map(|k| {
            let t = k as f64 / (SUCCESS_BINS - 1) as f64;
            (t, overlaps.iter().filter(|&&o| o >= t).count() as f64 / overlaps.len() as f64)
        })
        .collect();
    Ok(EvalCurve { samples })
}

pub fn success_auc(curve: &EvalCurve) -> f64 {
    curve.mean()
}

pub fn mean_iou(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<f64, BenchError> {
    check_lengths(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| iou(p, g)).sum::<f64>() / gt.len() as f64)
}

/// Representative scores of one tracked sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceScores {
    pub name: String,
    pub attributes: Vec<Attribute>,
    pub precision: f64,
    pub success: f64,
}

impl SequenceScores {
    pub fn evaluate(name: impl Into<String>, attributes: Vec<Attribute>, pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<Self, BenchError> {
        let curve = default_precision_curve(pred, gt)?;
        Ok(Self {
            name: name.into(),
            attributes,
            precision: precision_at(&curve, PRECISION_THRESHOLD).expect("20 px is on the default grid"),
            success: success_auc(&success_curve(pred, gt)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeRow {
    /// `ALL` or an attribute tag.
    pub label: String,
    pub sequences: usize,
    pub precision: f64,
    pub success: f64,
}

/// Mean scores over all sequences (`ALL`) and over the sequences carrying each tag.
pub fn attribute_report(results: &[SequenceScores]) -> Vec<AttributeRow> {
    let row = |label: String, members: Vec<&SequenceScores>| AttributeRow {
        label,
        sequences: members.len(),
        precision: members.iter().map(|s| s.precision).sum::<f64>() / members.len() as f64,
        success: members.iter().map(|s| s.success).sum::<f64>() / members.len() as f64,
    };
    let mut rows = Vec::new();
    if results.is_empty() {
        return rows;
    }
    rows.push(row("ALL".into(), results.iter().collect()));
    let mut by_tag: BTreeMap<Attribute, Vec<&SequenceScores>> = BTreeMap::new();
    for r in results {
        let mut tags = r.attributes.clone();
        tags.sort();
        tags.dedup();
        for t in tags {
            by_tag.entry(t).or_default().push(r);
        }
    }
    rows.extend(by_tag.into_iter().map(|(t, m)| row(t.to_string(), m)));
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    fn track(n: usize) -> Vec<BoundingBox> {
        (0..n).map(|i| bx(10.0 + i as f64, 20.0, 30.0, 30.0)).collect()
    }

    #[test]
    fn perfect_tracking() {
        let gt = track(12);
        let p = default_precision_curve(&gt, &gt).unwrap();
        assert!(p.samples.iter().all(|&(_, v)| v == 1.0));
        let s = success_curve(&gt, &gt).unwrap();
        assert!(s.samples.iter().all(|&(_, v)| v == 1.0));
        assert_eq!(success_auc(&s), 1.0);
    }

    #[test]
    fn constant_offset() {
        let gt = track(8);
        let pred: Vec<_> = gt.iter().map(|b| bx(b.x + 25.0, b.y, b.w, b.h)).collect();
        let c = default_precision_curve(&pred, &gt).unwrap();
        assert_eq!(precision_at(&c, 20.0), Some(0.0));
        assert_eq!(precision_at(&c, 30.0), Some(1.0));
    }

    #[test]
    fn half_far_half_exact() {
        let gt = track(10);
        let pred: Vec<_> = gt.iter().enumerate().map(|(i, b)| if i % 2 == 0 { *b } else { bx(b.x + 100.0, b.y, b.w, b.h) }).collect();
        assert_eq!(precision_at(&default_precision_curve(&pred, &gt).unwrap(), 20.0), Some(0.5));
    }

    #[test]
    fn disjoint_auc_counts_only_zero_bin() {
        let gt = track(5);
        let pred: Vec<_> = gt.iter().map(|b| bx(b.x + 200.0, b.y, b.w, b.h)).collect();
        let auc = success_auc(&success_curve(&pred, &gt).unwrap());
        assert!((auc - 1.0 / 101.0).abs() < 1e-15);
    }

    #[test]
    fn half_overlap_auc() {
        // oracle: thresholds 0.00..=0.50 pass, 51 of 101 bins
        let gt: Vec<_> = (0..4).map(|_| bx(0.0, 0.0, 20.0, 10.0)).collect();
        let pred: Vec<_> = (0..4).map(|_| bx(0.0, 0.0, 10.0, 10.0)).collect();
        assert_eq!(iou(&pred[0], &gt[0]), 0.5);
        let auc = success_auc(&success_curve(&pred, &gt).unwrap());
        assert!((auc - 51.0 / 101.0).abs() < 1e-15);
        assert!((auc - 0.5).abs() <= 0.01);
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(
            success_curve(&track(3), &track(4)),
            Err(BenchError::LengthMismatch { pred: 3, gt: 4 })
        ));
    }

    #[test]
    fn attribute_rows() {
        let s = |name: &str, tags: Vec<Attribute>, p: f64, a: f64| SequenceScores {
            name: name.into(),
            attributes: tags,
            precision: p,
            success: a,
        };
        let rows = attribute_report(&[s("a", vec![Attribute::OCC], 0.8, 0.6)]);
        assert_eq!(rows[1].label, "OCC");
        assert_eq!((rows[1].precision, rows[1].success), (0.8, 0.6));

        let rows = attribute_report(&[s("plain", vec![], 0.5, 0.5)]);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].label, "ALL");

        let rows = attribute_report(&[
            s("a", vec![Attribute::SV, Attribute::OCC], 0.8, 0.6),
            s("b", vec![Attribute::SV], 0.4, 0.2),
        ]);
        let sv = rows.iter().find(|r| r.label == "SV").unwrap();
        assert_eq!(sv.sequences, 2);
        assert!((sv.precision - 0.6).abs() < 1e-15 && (sv.success - 0.4).abs() < 1e-15);
    }

    fn arb_track() -> impl Strategy<Value = (Vec<BoundingBox>, Vec<BoundingBox>)> {
        proptest::collection::vec((0.0..200.0f64, 0.0..200.0f64, 5.0..50.0f64, 5.0..50.0f64, -30.0..30.0f64, -30.0..30.0f64, 0.7..1.3f64), 1..40)
            .prop_map(|v| {
                v.into_iter()
                    .map(|(x, y, w, h, dx, dy, s)| (bx(x + dx, y + dy, w * s, h * s), bx(x, y, w, h)))
                    .unzip()
            })
    }

    proptest! {
        #[test]
        fn curves_are_monotone_and_bounded((pred, gt) in arb_track()) {
            let p = default_precision_curve(&pred, &gt).unwrap();
            let s = success_curve(&pred, &gt).unwrap();
            for w in p.samples.windows(2) {
                prop_assert!(w[0].0 < w[1].0 && w[0].1 <= w[1].1);
            }
            for w in s.samples.windows(2) {
                prop_assert!(w[0].0 < w[1].0 && w[0].1 >= w[1].1);
            }
            prop_assert!(p.samples.iter().chain(&s.samples).all(|&(_, v)| (0.0..=1.0).contains(&v)));
            let mean = s.samples.iter().map(|x| x.1).sum::<f64>() / s.samples.len() as f64;
            prop_assert!((success_auc(&s) - mean).abs() < 1e-15);
        }
    }
}
