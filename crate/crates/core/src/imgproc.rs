//! Small image-plane utilities shared by the phantom renderer, the map
//! post-processing, and the evaluation metrics: separable Gaussian blur with
//! reflect padding, bilinear upsampling, and a uniform box filter.

use crate::diffcore::Scalar;

/// Normalized 1-D Gaussian kernel truncated at 3 sigma.
pub fn gaussian_kernel<E: Scalar>(sigma: f64) -> Vec<E> {
    assert!(sigma > 0.0, "gaussian sigma must be positive");
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k.into_iter().map(E::from_f64).collect()
}

#[inline]
fn reflect(i: i64, n: i64) -> usize {
    // scipy-style "reflect": edge value is not repeated (a b c -> b a | a b c | c b)
    let mut i = i;
    let period = 2 * (n - 1).max(1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Separable Gaussian blur of a single `h` x `w` plane, reflect padding,
/// kernel truncated at 3 sigma.
pub fn gaussian_blur_plane<E: Scalar>(plane: &[E], h: usize, w: usize, sigma: f64) -> Vec<E> {
    let k = gaussian_kernel::<E>(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![E::zero(); h * w];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = E::zero();
            for (j, &kv) in k.iter().enumerate() {
                let src = reflect(x as i64 + j as i64 - r, w as i64);
                acc += kv * row[src];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![E::zero(); h * w];
    for x in 0..w {
        for y in 0..h {
            let mut acc = E::zero();
            for (j, &kv) in k.iter().enumerate() {
                let src = reflect(y as i64 + j as i64 - r, h as i64);
                acc += kv * tmp[src * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Mean filter with a `win` x `win` window, reflect padding.
pub fn uniform_filter_plane<E: Scalar>(plane: &[E], h: usize, w: usize, win: usize) -> Vec<E> {
    let r = (win / 2) as i64;
    let inv = E::from_f64(1.0 / win as f64);
    let mut tmp = vec![E::zero(); h * w];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = E::zero();
            for j in -r..=r {
                acc += row[reflect(x as i64 + j, w as i64)];
            }
            tmp[y * w + x] = acc * inv;
        }
    }
    let mut out = vec![E::zero(); h * w];
    for x in 0..w {
        for y in 0..h {
            let mut acc = E::zero();
            for j in -r..=r {
                acc += tmp[reflect(y as i64 + j, h as i64) * w + x];
            }
            out[y * w + x] = acc * inv;
        }
    }
    out
}

/// Bilinear upsampling of an `h` x `w` plane to `oh` x `ow` with
/// align-corners=false semantics.
pub fn bilinear_upsample<E: Scalar>(
    plane: &[E],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let mut out = vec![E::zero(); oh * ow];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = E::from_f64(fy - y0 as f64);
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = E::from_f64(fx - x0 as f64);
            let one = E::one();
            let v = plane[y0 * w + x0] * (one - wy) * (one - wx)
                + plane[y0 * w + x1] * (one - wy) * wx
                + plane[y1 * w + x0] * wy * (one - wx)
                + plane[y1 * w + x1] * wy * wx;
            out[y * ow + x] = v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel::<f64>(1.7);
        let sum: f64 = k.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert_eq!(k.len(), 2 * 6 + 1); // ceil(3 * 1.7) = 6
        for i in 0..k.len() / 2 {
            assert_eq!(k[i], k[k.len() - 1 - i]);
        }
    }

    #[test]
    fn blur_preserves_constant_plane() {
        let plane = vec![0.7f64; 5 * 6];
        let out = gaussian_blur_plane(&plane, 5, 6, 1.0);
        for v in out {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_of_impulse_is_separable_kernel_product() {
        let mut plane = vec![0.0f64; 9 * 9];
        plane[4 * 9 + 4] = 1.0;
        let sigma = 1.0;
        let out = gaussian_blur_plane(&plane, 9, 9, sigma);
        let k = gaussian_kernel::<f64>(sigma);
        let r = k.len() / 2;
        for dy in -(r as i64)..=(r as i64) {
            for dx in -(r as i64)..=(r as i64) {
                let want = k[(dy + r as i64) as usize] * k[(dx + r as i64) as usize];
                let got = out[((4 + dy) as usize) * 9 + (4 + dx) as usize];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let plane = vec![2.5f32; 4 * 4];
        let out = bilinear_upsample(&plane, 4, 4, 16, 16);
        assert!(out.iter().all(|&v| (v - 2.5).abs() < 1e-6));
    }
}
