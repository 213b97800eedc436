//! Map-similarity statistics used by the randomization sanity checks:
//! Spearman rank correlation, SSIM with a 7x7 uniform window, and Pearson
//! correlation of HOG descriptors.

use super::{EvalError, Result};
use crate::imgproc::uniform_filter_plane;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MapSimilarity {
    pub spearman: f64,
    pub ssim: f64,
    pub hog_pearson: f64,
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Average ranks with ties sharing their midpoint rank.
fn ranks(values: &[f32]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation over flattened pixels, average ranks for ties.
pub fn spearman(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(EvalError::Shape(format!("{} vs {} values", a.len(), b.len())));
    }
    let ra = ranks(a);
    let rb = ranks(b);
    pearson(&ra, &rb).ok_or(EvalError::ConstantMap("spearman"))
}

/// Mean SSIM with a 7x7 uniform window, K1=0.01, K2=0.03, data range from the
/// observed extrema of the pair; the window-radius border is cropped before
/// averaging.
pub fn ssim(a: &[f32], b: &[f32], h: usize, w: usize) -> Result<f64> {
    const WIN: usize = 7;
    const K1: f64 = 0.01;
    const K2: f64 = 0.03;
    if a.len() != h * w || b.len() != h * w {
        return Err(EvalError::Shape("map does not match h*w".into()));
    }
    if h < WIN || w < WIN {
        return Err(EvalError::Shape(format!("map {h}x{w} smaller than the {WIN}x{WIN} window")));
    }
    let mut mn = f64::INFINITY;
    let mut mx = f64::NEG_INFINITY;
    for &v in a.iter().chain(b.iter()) {
        mn = mn.min(v as f64);
        mx = mx.max(v as f64);
    }
    let range = mx - mn;
    if range == 0.0 {
        return Err(EvalError::ConstantMap("ssim"));
    }
    let c1 = (K1 * range) * (K1 * range);
    let c2 = (K2 * range) * (K2 * range);

    let af: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let bf: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let aa: Vec<f64> = af.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = bf.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = af.iter().zip(&bf).map(|(x, y)| x * y).collect();

    let mu_a = uniform_filter_plane(&af, h, w, WIN);
    let mu_b = uniform_filter_plane(&bf, h, w, WIN);
    let e_aa = uniform_filter_plane(&aa, h, w, WIN);
    let e_bb = uniform_filter_plane(&bb, h, w, WIN);
    let e_ab = uniform_filter_plane(&ab, h, w, WIN);

    let pad = WIN / 2;
    let mut acc = 0.0;
    let mut count = 0usize;
    for y in pad..h - pad {
        for x in pad..w - pad {
            let i = y * w + x;
            let va = e_aa[i] - mu_a[i] * mu_a[i];
            let vb = e_bb[i] - mu_b[i] * mu_b[i];
            let cov = e_ab[i] - mu_a[i] * mu_b[i];
            let num = (2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2);
            let den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2);
            acc += num / den;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// HOG descriptor: 9 unsigned orientation bins, 8x8-pixel cells, blocks of
/// 2x2 cells at 1-cell stride, each block L2-normalized.
pub fn hog_descriptor(map: &[f32], h: usize, w: usize) -> Vec<f64> {
    const BINS: usize = 9;
    const CELL: usize = 8;
    let cells_y = h / CELL;
    let cells_x = w / CELL;
    let mut hist = vec![0.0f64; cells_y * cells_x * BINS];
    let px = |y: usize, x: usize| map[y * w + x] as f64;
    for y in 0..h {
        for x in 0..w {
            let gx = px(y, (x + 1).min(w - 1)) - px(y, x.saturating_sub(1));
            let gy = px((y + 1).min(h - 1), x) - px(y.saturating_sub(1), x);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let cy = y / CELL;
            let cx = x / CELL;
            if cy >= cells_y || cx >= cells_x {
                continue;
            }
            // unsigned orientation in [0, 180)
            let mut angle = gy.atan2(gx).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            if angle >= 180.0 {
                angle -= 180.0;
            }
            let pos = angle / (180.0 / BINS as f64) - 0.5;
            let b0 = pos.floor();
            let frac = pos - b0;
            let i0 = ((b0 as i64).rem_euclid(BINS as i64)) as usize;
            let i1 = (i0 + 1) % BINS;
            let base = (cy * cells_x + cx) * BINS;
            hist[base + i0] += mag * (1.0 - frac);
            hist[base + i1] += mag * frac;
        }
    }
    // block normalization
    let mut out = Vec::new();
    for by in 0..cells_y.saturating_sub(1) {
        for bx in 0..cells_x.saturating_sub(1) {
            let mut block = Vec::with_capacity(4 * BINS);
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let base = ((by + dy) * cells_x + bx + dx) * BINS;
                block.extend_from_slice(&hist[base..base + BINS]);
            }
            let norm = block.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            out.extend(block.into_iter().map(|v| v / norm));
        }
    }
    out
}

/// Pearson correlation of the two maps' HOG descriptors.
pub fn hog_pearson(a: &[f32], b: &[f32], h: usize, w: usize) -> Result<f64> {
    let da = hog_descriptor(a, h, w);
    let db = hog_descriptor(b, h, w);
    if da.is_empty() {
        return Err(EvalError::Shape(format!(
            "map {h}x{w} too small for 8x8-cell HOG blocks"
        )));
    }
    pearson(&da, &db).ok_or(EvalError::ConstantMap("hog"))
}

/// All three similarity statistics for one pair of single-channel maps.
pub fn compare_maps(a: &[f32], b: &[f32], h: usize, w: usize) -> Result<MapSimilarity> {
    Ok(MapSimilarity {
        spearman: spearman(a, b)?,
        ssim: ssim(a, b, h, w)?,
        hog_pearson: hog_pearson(a, b, h, w)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_map(h: usize, w: usize, seed: u64) -> Vec<f32> {
        (0..h * w)
            .map(|i| (((i as u64).wrapping_mul(seed * 2 + 31) % 97) as f32) / 97.0)
            .collect()
    }

    #[test]
    fn self_comparison_is_exactly_one() {
        let a = demo_map(32, 32, 5);
        let sim = compare_maps(&a, &a, 32, 32).unwrap();
        assert_eq!(sim.spearman, 1.0);
        assert_eq!(sim.ssim, 1.0);
        assert_eq!(sim.hog_pearson, 1.0);
    }

    #[test]
    fn spearman_rank_reversal_is_minus_one() {
        let a: Vec<f32> = (0..100).map(|i| i as f32 * 0.7 + 1.0).collect();
        let neg: Vec<f32> = a.iter().map(|&v| -v).collect();
        assert_eq!(spearman(&a, &neg).unwrap(), -1.0);
    }

    #[test]
    fn spearman_handles_ties_by_average_rank() {
        // a = [1, 1, 2], b = [3, 3, 4]: tied pairs keep perfect correlation
        let s = spearman(&[1.0, 1.0, 2.0], &[3.0, 3.0, 4.0]).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_maps_are_flagged_not_crashed() {
        let c = vec![0.5f32; 64];
        let v = demo_map(8, 8, 3);
        assert!(matches!(
            spearman(&c, &v),
            Err(EvalError::ConstantMap(_))
        ));
        assert!(matches!(
            ssim(&c, &c, 8, 8),
            Err(EvalError::ConstantMap(_))
        ));
    }

    #[test]
    fn ssim_decreases_with_noise() {
        let a = demo_map(32, 32, 9);
        let mut b = a.clone();
        for (i, v) in b.iter_mut().enumerate() {
            if i % 3 == 0 {
                *v = 1.0 - *v;
            }
        }
        let s = ssim(&a, &b, 32, 32).unwrap();
        assert!(s < 0.9, "ssim {s} should drop for a corrupted map");
    }

    #[test]
    fn hog_is_invariant_to_constant_offset_and_catches_rotation() {
        let a = demo_map(32, 32, 13);
        let shifted: Vec<f32> = a.iter().map(|&v| v + 0.25).collect();
        let p = hog_pearson(&a, &shifted, 32, 32).unwrap();
        assert!((p - 1.0).abs() < 1e-9, "gradients ignore constant offsets");

        // transpose changes gradient orientations
        let mut t = vec![0.0f32; 32 * 32];
        for y in 0..32 {
            for x in 0..32 {
                t[x * 32 + y] = a[y * 32 + x];
            }
        }
        let pt = hog_pearson(&a, &t, 32, 32).unwrap();
        assert!(pt < 0.9);
    }
}
