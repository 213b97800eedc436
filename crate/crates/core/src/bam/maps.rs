//! Activation-map extraction from a trained main generator.
//!
//! The difference image between the main generator's output and its input is
//! Gaussian-filtered into two per-channel maps: an absolute map (total
//! contribution) and a signed map that separates value increases from value
//! decreases:
//!
//! ```text
//! abs    = f_g(|G(x) - x|)
//! signed = f_g(relu(G(x) - x)) - f_g(relu(x - G(x)))
//! ```

use super::Result;
use crate::diffcore::Tensor;
use crate::generator::GeneratorModel;
use crate::imgproc::gaussian_blur_plane;
use crate::par;

/// Default Gaussian width: H/32 pixels (2 px at 64x64).
pub fn default_sigma(height: usize) -> f64 {
    (height as f64 / 32.0).max(0.5)
}

/// Per-channel absolute and signed maps for one positively classified scan.
#[derive(Debug, Clone)]
pub struct BamPair {
    /// `f_g(|G(x) - x|)` per channel, non-negative.
    pub abs: Tensor<f32>,
    /// `f_g(relu(G(x)-x)) - f_g(relu(x-G(x)))` per channel.
    pub signed: Tensor<f32>,
    /// Index of the source scan in the evaluated set.
    pub scan_index: usize,
}

fn filter_channels(delta: &[f32], c: usize, h: usize, w: usize, sigma: f64) -> Vec<f32> {
    let mut out = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        out.extend(gaussian_blur_plane(
            &delta[ci * h * w..(ci + 1) * h * w],
            h,
            w,
            sigma,
        ));
    }
    out
}

/// Both maps from a precomputed difference image `delta[C,H,W]`.
pub fn maps_from_delta(delta: &Tensor<f32>, sigma: f64) -> (Tensor<f32>, Tensor<f32>) {
    let s = delta.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let pos: Vec<f32> = delta.data().iter().map(|&v| v.max(0.0)).collect();
    let neg: Vec<f32> = delta.data().iter().map(|&v| (-v).max(0.0)).collect();
    let abs_src: Vec<f32> = delta.data().iter().map(|&v| v.abs()).collect();
    let fp = filter_channels(&pos, c, h, w, sigma);
    let fn_ = filter_channels(&neg, c, h, w, sigma);
    let fa = filter_channels(&abs_src, c, h, w, sigma);
    let signed: Vec<f32> = fp.iter().zip(&fn_).map(|(&p, &n)| p - n).collect();
    (
        Tensor::from_vec(s, fa).expect("filtered plane keeps its shape"),
        Tensor::from_vec(s, signed).expect("filtered plane keeps its shape"),
    )
}

/// `f_g(|G(x) - x|)` for one [C,H,W] scan image.
pub fn compute_bam_abs(
    generator: &GeneratorModel,
    image: &Tensor<f32>,
    sigma: f64,
) -> Result<Tensor<f32>> {
    let out = generator.translate(image)?;
    let delta = Tensor::from_vec(
        image.shape(),
        out.data()
            .iter()
            .zip(image.data())
            .map(|(&o, &x)| o - x)
            .collect(),
    )
    .expect("difference keeps the image shape");
    Ok(maps_from_delta(&delta, sigma).0)
}

/// `f_g(relu(G(x)-x)) - f_g(relu(x-G(x)))` for one [C,H,W] scan image.
pub fn compute_bam_signed(
    generator: &GeneratorModel,
    image: &Tensor<f32>,
    sigma: f64,
) -> Result<Tensor<f32>> {
    let out = generator.translate(image)?;
    let delta = Tensor::from_vec(
        image.shape(),
        out.data()
            .iter()
            .zip(image.data())
            .map(|(&o, &x)| o - x)
            .collect(),
    )
    .expect("difference keeps the image shape");
    Ok(maps_from_delta(&delta, sigma).1)
}

/// Extracts both maps for every image, parallel across scans with a frozen
/// generator snapshot.
pub fn compute_bam_pairs(
    generator: &GeneratorModel,
    images: &[&Tensor<f32>],
    sigma: f64,
) -> Result<Vec<BamPair>> {
    let results: Vec<Result<BamPair>> = par::map_indexed(images.len(), |i| {
        let out = generator.translate(images[i])?;
        let delta = Tensor::from_vec(
            images[i].shape(),
            out.data()
                .iter()
                .zip(images[i].data())
                .map(|(&o, &x)| o - x)
                .collect(),
        )
        .expect("difference keeps the image shape");
        let (abs, signed) = maps_from_delta(&delta, sigma);
        Ok(BamPair {
            abs,
            signed,
            scan_index: i,
        })
    });
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgproc::gaussian_kernel;

    #[test]
    fn identity_generator_gives_zero_maps() {
        let gen = GeneratorModel::build(2, &[4, 8, 8], 1).unwrap();
        let x = Tensor::from_vec(
            &[2, 16, 16],
            (0..2 * 256).map(|i| (i % 7) as f32 / 7.0).collect(),
        )
        .unwrap();
        let abs = compute_bam_abs(&gen, &x, 1.0).unwrap();
        let signed = compute_bam_signed(&gen, &x, 1.0).unwrap();
        assert!(abs.data().iter().all(|&v| v == 0.0));
        assert!(signed.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_delta_reproduces_the_kernel() {
        let mut delta = Tensor::zeros(&[1, 11, 11]);
        delta.data_mut()[5 * 11 + 5] = -0.75;
        let sigma = 1.0;
        let (abs, signed) = maps_from_delta(&delta, sigma);
        let k = gaussian_kernel::<f32>(sigma);
        let r = (k.len() / 2) as i64;
        for dy in -r..=r {
            for dx in -r..=r {
                let want = 0.75 * k[(dy + r) as usize] * k[(dx + r) as usize];
                let at = ((5 + dy) * 11 + 5 + dx) as usize;
                assert!((abs.data()[at] - want).abs() < 1e-6);
                assert!((signed.data()[at] + want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn abs_map_is_sum_of_filtered_parts() {
        // f_g(|d|) = f_g(relu(d)) + f_g(relu(-d)) by linearity
        let delta = Tensor::from_vec(
            &[2, 8, 8],
            (0..128).map(|i| ((i * 37 % 19) as f32 - 9.0) / 13.0).collect(),
        )
        .unwrap();
        let (abs, _) = maps_from_delta(&delta, 0.8);
        let pos = delta.map(|v| v.max(0.0));
        let neg = delta.map(|v| (-v).max(0.0));
        let (fp, _) = maps_from_delta(&pos, 0.8);
        let (fneg, _) = maps_from_delta(&neg, 0.8);
        for ((&a, &p), &n) in abs.data().iter().zip(fp.data()).zip(fneg.data()) {
            assert!((a - (p + n)).abs() < 1e-6);
        }
    }
}
