//! Scoring and stress-testing of activation maps: threshold masks and overlap
//! metrics, attribution baselines, map-similarity statistics, randomization
//! sanity checks, the planted-bias experiment, and loss ablations.

pub mod ablate;
pub mod attribution;
pub mod bias;
pub mod sanity;
pub mod similarity;

use crate::diffcore::DiffError;
use crate::phantom::Mask;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("threshold grid is empty")]
    EmptyGrid,
    #[error("no scans with a non-empty ground-truth mask to score")]
    NoScorableScans,
    #[error("constant map: {0} is undefined")]
    ConstantMap(&'static str),
    #[error("integrated gradients needs at least 1 step, got {0}")]
    BadSteps(usize),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Classifier(#[from] crate::classifier::ClassifierError),
    #[error(transparent)]
    Bam(#[from] crate::bam::BamError),
    #[error(transparent)]
    Phantom(#[from] crate::phantom::PhantomError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Binary mask from one map channel: statistics over strictly positive values
/// only, mask = { v >= mean_pos + h * std_pos } intersected with { v > 0 }.
/// An empty positive set yields an empty mask.
pub fn threshold_map(map: &[f32], h: f64, height: usize, width: usize) -> Mask {
    let mut mask = Mask::empty(height, width);
    let pos: Vec<f64> = map.iter().filter(|&&v| v > 0.0).map(|&v| v as f64).collect();
    if pos.is_empty() {
        return mask;
    }
    let mean = pos.iter().sum::<f64>() / pos.len() as f64;
    let var = pos.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / pos.len() as f64;
    let thr = mean + h * var.sqrt();
    for (m, &v) in mask.data.iter_mut().zip(map.iter()) {
        *m = v > 0.0 && v as f64 >= thr;
    }
    mask
}

/// Overlap metrics between a predicted and a ground-truth mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub f1: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Standard set-overlap definitions. Both masks empty counts as perfect
/// agreement (all ones); exactly one empty yields zero F1 with the 0/0 -> 0
/// convention for precision and recall.
pub fn seg_metrics(pred: &Mask, truth: &Mask) -> Result<SegMetrics> {
    if pred.h != truth.h || pred.w != truth.w {
        return Err(EvalError::Shape(format!(
            "mask {}x{} vs {}x{}",
            pred.h, pred.w, truth.h, truth.w
        )));
    }
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut t = 0usize;
    for (&a, &b) in pred.data.iter().zip(&truth.data) {
        if a {
            p += 1;
        }
        if b {
            t += 1;
        }
        if a && b {
            inter += 1;
        }
    }
    if p == 0 && t == 0 {
        return Ok(SegMetrics {
            f1: 1.0,
            iou: 1.0,
            precision: 1.0,
            recall: 1.0,
        });
    }
    let precision = if p == 0 { 0.0 } else { inter as f64 / p as f64 };
    let recall = if t == 0 { 0.0 } else { inter as f64 / t as f64 };
    let union = p + t - inter;
    let iou = inter as f64 / union as f64;
    let f1 = 2.0 * inter as f64 / (p + t) as f64;
    Ok(SegMetrics {
        f1,
        iou,
        precision,
        recall,
    })
}

/// The default threshold search grid {0, 0.25, ..., 3.0}.
pub fn default_threshold_grid() -> Vec<f64> {
    (0..=12).map(|i| i as f64 * 0.25).collect()
}

/// Picks the grid value maximizing the mean F1 over paired (map, truth)
/// sets; ties resolve to the smallest h. Maps are single channels.
pub fn select_threshold(
    maps: &[&[f32]],
    truths: &[&Mask],
    grid: &[f64],
) -> Result<(f64, f64)> {
    if grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    if maps.is_empty() {
        return Err(EvalError::NoScorableScans);
    }
    let mut best: Option<(f64, f64)> = None;
    for &h in grid {
        let mut sum = 0.0;
        for (map, truth) in maps.iter().zip(truths) {
            let pred = threshold_map(map, h, truth.h, truth.w);
            sum += seg_metrics(&pred, truth)?.f1;
        }
        let mean = sum / maps.len() as f64;
        let better = match best {
            None => true,
            Some((_, bf)) => mean > bf,
        };
        if better {
            best = Some((h, mean));
        }
    }
    Ok(best.expect("grid is non-empty"))
}

/// Mean of per-scan metrics at a fixed threshold.
pub fn mean_seg_metrics_at(
    maps: &[&[f32]],
    truths: &[&Mask],
    h: f64,
) -> Result<SegMetrics> {
    if maps.is_empty() {
        return Err(EvalError::NoScorableScans);
    }
    let mut acc = SegMetrics {
        f1: 0.0,
        iou: 0.0,
        precision: 0.0,
        recall: 0.0,
    };
    for (map, truth) in maps.iter().zip(truths) {
        let pred = threshold_map(map, h, truth.h, truth.w);
        let m = seg_metrics(&pred, truth)?;
        acc.f1 += m.f1;
        acc.iou += m.iou;
        acc.precision += m.precision;
        acc.recall += m.recall;
    }
    let n = maps.len() as f64;
    Ok(SegMetrics {
        f1: acc.f1 / n,
        iou: acc.iou / n,
        precision: acc.precision / n,
        recall: acc.recall / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(bits: &[u8], h: usize, w: usize) -> Mask {
        Mask {
            h,
            w,
            data: bits.iter().map(|&b| b != 0).collect(),
        }
    }

    #[test]
    fn threshold_map_hand_cases() {
        // all-zero map -> empty mask for any h
        let m = threshold_map(&[0.0; 9], 0.0, 3, 3);
        assert_eq!(m.area(), 0);

        // {0,0,0,1}: positive set {1}, std 0, threshold 1 -> that pixel only
        let m = threshold_map(&[0.0, 0.0, 0.0, 1.0], 1.0, 2, 2);
        assert_eq!(m.area(), 1);
        assert!(m.get(1, 1));

        // enormous h on a non-constant positive set -> empty mask
        let m = threshold_map(&[0.1, 0.5, 0.9, 0.2], 1e9, 2, 2);
        assert_eq!(m.area(), 0);
    }

    #[test]
    fn threshold_map_is_monotone_in_h() {
        let map: Vec<f32> = (0..64).map(|i| ((i * 37 % 23) as f32 - 4.0) / 23.0).collect();
        let mut prev = threshold_map(&map, 0.0, 8, 8);
        for step in 1..=8 {
            let cur = threshold_map(&map, step as f64 * 0.4, 8, 8);
            for (c, p) in cur.data.iter().zip(&prev.data) {
                assert!(!c || *p, "mask must shrink as h grows");
            }
            prev = cur;
        }
    }

    #[test]
    fn seg_metrics_hand_cases() {
        let a = mask_from(&[1, 1, 0, 0], 2, 2);
        let b = mask_from(&[0, 0, 1, 1], 2, 2);
        let same = seg_metrics(&a, &a).unwrap();
        assert_eq!(
            same,
            SegMetrics {
                f1: 1.0,
                iou: 1.0,
                precision: 1.0,
                recall: 1.0
            }
        );
        let disjoint = seg_metrics(&a, &b).unwrap();
        assert_eq!(disjoint.f1, 0.0);
        assert_eq!(disjoint.iou, 0.0);
        assert_eq!(disjoint.precision, 0.0);
        assert_eq!(disjoint.recall, 0.0);

        // |P∩G|=1, |P|=1, |G|=2
        let p = mask_from(&[1, 0, 0, 0], 2, 2);
        let g = mask_from(&[1, 1, 0, 0], 2, 2);
        let m = seg_metrics(&p, &g).unwrap();
        assert_eq!(m.precision, 1.0);
        assert_eq!(m.recall, 0.5);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.iou, 0.5);

        // empty vs empty -> ones; empty vs non-empty -> zero F1
        let e = mask_from(&[0, 0, 0, 0], 2, 2);
        assert_eq!(seg_metrics(&e, &e).unwrap().f1, 1.0);
        assert_eq!(seg_metrics(&e, &g).unwrap().f1, 0.0);
        assert_eq!(seg_metrics(&e, &g).unwrap().precision, 0.0);

        let wrong = mask_from(&[0; 6], 2, 3);
        assert!(seg_metrics(&a, &wrong).is_err());
    }

    #[test]
    fn f1_iou_identity_holds() {
        // F1 = 2 IoU / (1 + IoU) for any mask pair
        let cases = [
            (vec![1u8, 1, 0, 0], vec![1u8, 0, 1, 0]),
            (vec![1, 1, 1, 0], vec![0, 1, 1, 1]),
            (vec![1, 0, 0, 0], vec![1, 1, 1, 1]),
        ];
        for (pa, ga) in cases {
            let m = seg_metrics(&mask_from(&pa, 2, 2), &mask_from(&ga, 2, 2)).unwrap();
            assert!((m.f1 - 2.0 * m.iou / (1.0 + m.iou)).abs() < 1e-12);
            assert!(m.iou <= m.f1 + 1e-12);
        }
    }

    #[test]
    fn select_threshold_matches_exhaustive_search() {
        let truth = mask_from(&[0, 1, 1, 0, 0, 1, 0, 0, 0], 3, 3);
        // map equals a scaled truth indicator: some h reaches F1 = 1
        let map: Vec<f32> = truth
            .data
            .iter()
            .map(|&b| if b { 0.9 } else { 0.1 })
            .collect();
        let grid = default_threshold_grid();
        let (h_star, f1) = select_threshold(&[&map], &[&truth], &grid).unwrap();
        assert_eq!(f1, 1.0);
        // brute force over the grid agrees
        let mut best = (f64::NAN, -1.0);
        for &h in &grid {
            let pred = threshold_map(&map, h, 3, 3);
            let f = seg_metrics(&pred, &truth).unwrap().f1;
            if f > best.1 {
                best = (h, f);
            }
        }
        assert_eq!(h_star, best.0);

        // single-element grid returns that element
        let (h_one, _) = select_threshold(&[&map], &[&truth], &[0.75]).unwrap();
        assert_eq!(h_one, 0.75);
        assert!(matches!(
            select_threshold(&[&map], &[&truth], &[]),
            Err(EvalError::EmptyGrid)
        ));
    }
}
