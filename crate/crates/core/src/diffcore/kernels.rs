//! Raw compute kernels behind the graph ops.
//!
//! All kernels parallelize over independent output planes via [`crate::par`];
//! within a plane the accumulation order is fixed, so results are identical
//! across thread counts and with the sequential fallback.

use super::tensor::{Scalar, Tensor};
use super::{DiffError, Result};
use crate::par;

pub fn conv2d_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

pub fn conv_transpose2d_out_dim(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> usize {
    (input - 1) * stride + kernel - 2 * padding
}

fn dims4<E: Scalar>(t: &Tensor<E>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(DiffError::ShapeMismatch {
            op,
            detail: format!("expected 4-d tensor, got shape {:?}", s),
        });
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Copies each (n, c) plane of `x` into a zero-padded buffer.
fn pad_planes<E: Scalar>(
    x: &[E],
    planes: usize,
    h: usize,
    w: usize,
    padding: usize,
) -> (Vec<E>, usize, usize) {
    let hp = h + 2 * padding;
    let wp = w + 2 * padding;
    let mut out = vec![E::zero(); planes * hp * wp];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * hp * wp..(p + 1) * hp * wp];
        for row in 0..h {
            let d = (row + padding) * wp + padding;
            dst[d..d + w].copy_from_slice(&src[row * w..(row + 1) * w]);
        }
    }
    (out, hp, wp)
}

/// Polyphase view of padded planes for stride-2 kernels: plane p is stored as
/// four quarter-resolution sub-planes indexed by (row parity, col parity), so
/// every stride-2 access pattern becomes contiguous. Sub-planes carry one
/// extra row/column of zeros so kernel-offset reads stay in bounds.
struct PhaseSplit<E> {
    data: Vec<E>,
    ph: usize,
    pw: usize,
}

impl<E: Scalar> PhaseSplit<E> {
    fn build(planes: &[E], count: usize, hp: usize, wp: usize) -> Self {
        let ph = hp / 2 + 1;
        let pw = wp / 2 + 1;
        let mut data = vec![E::zero(); count * 4 * ph * pw];
        for p in 0..count {
            let src = &planes[p * hp * wp..(p + 1) * hp * wp];
            for y in 0..hp {
                let (py, sy) = (y & 1, y >> 1);
                let row = &src[y * wp..(y + 1) * wp];
                let base = ((p * 4 + py * 2) * ph + sy) * pw;
                for x in 0..wp {
                    let (px, sx) = (x & 1, x >> 1);
                    data[base + px * ph * pw + sx] = row[x];
                }
            }
        }
        PhaseSplit { data, ph, pw }
    }

    /// Sub-plane of padded plane `p` for kernel offsets (ki, kj): phase
    /// (ki&1, kj&1) shifted by (ki>>1, kj>>1).
    #[inline]
    fn slice(&self, p: usize, ki: usize, kj: usize) -> (&[E], usize) {
        let phase = (ki & 1) * 2 + (kj & 1);
        let start = (p * 4 + phase) * self.ph * self.pw + (ki >> 1) * self.pw + (kj >> 1);
        (&self.data[start..], self.pw)
    }

    fn zeroed(count: usize, hp: usize, wp: usize) -> Self {
        let ph = hp / 2 + 1;
        let pw = wp / 2 + 1;
        PhaseSplit {
            data: vec![E::zero(); count * 4 * ph * pw],
            ph,
            pw,
        }
    }

    #[inline]
    fn slice_mut(&mut self, p: usize, ki: usize, kj: usize) -> (&mut [E], usize) {
        let phase = (ki & 1) * 2 + (kj & 1);
        let start = (p * 4 + phase) * self.ph * self.pw + (ki >> 1) * self.pw + (kj >> 1);
        (&mut self.data[start..], self.pw)
    }

    /// Interleaves one plane's four phases back into `dst` (hp x wp).
    fn merge_plane(&self, p: usize, dst: &mut [E], hp: usize, wp: usize) {
        for y in 0..hp {
            let (py, sy) = (y & 1, y >> 1);
            for x in 0..wp {
                let (px, sx) = (x & 1, x >> 1);
                dst[y * wp + x] =
                    self.data[((p * 4 + py * 2 + px) * self.ph + sy) * self.pw + sx];
            }
        }
    }
}

/// Adds `scale * src` into `dst`, reading `src` with the given step.
#[inline]
fn axpy_strided<E: Scalar>(dst: &mut [E], src: &[E], scale: E, step: usize) {
    if step == 1 {
        for (d, &s) in dst.iter_mut().zip(src.iter()) {
            *d += scale * s;
        }
    } else {
        for (i, d) in dst.iter_mut().enumerate() {
            *d += scale * src[i * step];
        }
    }
}

/// Adds `scale * src` into `dst`, writing `dst` with the given step.
#[inline]
fn scatter_strided<E: Scalar>(dst: &mut [E], src: &[E], scale: E, step: usize) {
    if step == 1 {
        for (d, &s) in dst.iter_mut().zip(src.iter()) {
            *d += scale * s;
        }
    } else {
        for (i, &s) in src.iter().enumerate() {
            dst[i * step] += scale * s;
        }
    }
}

#[inline]
fn dot_strided<E: Scalar>(a: &[E], b: &[E], len: usize, step: usize) -> E {
    // Eight independent accumulator lanes, folded in a fixed order; the
    // summation order never depends on threading, so results stay bitwise
    // reproducible.
    let mut lanes = [E::zero(); 8];
    if step == 1 {
        let a = &a[..len];
        let b = &b[..len];
        let mut i = 0;
        while i + 8 <= len {
            for l in 0..8 {
                lanes[l] += a[i + l] * b[i + l];
            }
            i += 8;
        }
        while i < len {
            lanes[i % 8] += a[i] * b[i];
            i += 1;
        }
    } else {
        for i in 0..len {
            lanes[i % 8] += a[i] * b[i * step];
        }
    }
    let s01 = lanes[0] + lanes[1];
    let s23 = lanes[2] + lanes[3];
    let s45 = lanes[4] + lanes[5];
    let s67 = lanes[6] + lanes[7];
    (s01 + s23) + (s45 + s67)
}

/// Cross-correlation of `x[N,Cin,H,W]` with `weight[Cout,Cin,kh,kw]`.
pub fn conv2d_fwd<E: Scalar>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    conv2d_fwd_impl(x, weight, bias, stride, padding, false)
}

/// Sequential-path variant of [`conv2d_fwd`]; bitwise identical output.
pub fn conv2d_fwd_seq<E: Scalar>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    conv2d_fwd_impl(x, weight, bias, stride, padding, true)
}

fn conv2d_fwd_impl<E: Scalar>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    padding: usize,
    sequential: bool,
) -> Result<Tensor<E>> {
    let (n, cin, h, w) = dims4(x, "conv2d")?;
    let (cout, wcin, kh, kw) = dims4(weight, "conv2d")?;
    if wcin != cin {
        return Err(DiffError::ShapeMismatch {
            op: "conv2d",
            detail: format!("input has {cin} channels, weight expects {wcin}"),
        });
    }
    if stride == 0 {
        return Err(DiffError::ShapeMismatch {
            op: "conv2d",
            detail: "stride must be >= 1".into(),
        });
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(DiffError::ShapeMismatch {
            op: "conv2d",
            detail: format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            ),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(DiffError::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias shape {:?}, expected [{cout}]", b.shape()),
            });
        }
    }
    let oh = conv2d_out_dim(h, kh, stride, padding);
    let ow = conv2d_out_dim(w, kw, stride, padding);
    let (xp, _hp, wp) = pad_planes(x.data(), n * cin, h, w, padding);

    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    let wdat = weight.data();
    let hp = h + 2 * padding;
    let phases = if stride == 2 {
        Some(PhaseSplit::build(&xp, n * cin, hp, wp))
    } else {
        None
    };
    let plane_job = |plane: usize, dst: &mut [E]| {
        let ni = plane / cout;
        let co = plane % cout;
        if let Some(b) = bias {
            let bv = b.data()[co];
            dst.iter_mut().for_each(|v| *v = bv);
        }
        for ci in 0..cin {
            for ki in 0..kh {
                for kj in 0..kw {
                    let wv = wdat[((co * cin + ci) * kh + ki) * kw + kj];
                    if let Some(ps) = &phases {
                        let (src, spw) = ps.slice(ni * cin + ci, ki, kj);
                        for r in 0..oh {
                            axpy_strided(&mut dst[r * ow..r * ow + ow], &src[r * spw..], wv, 1);
                        }
                    } else {
                        let xplane = &xp[(ni * cin + ci) * hp * wp..];
                        for r in 0..oh {
                            let src = &xplane[(r * stride + ki) * wp + kj..];
                            axpy_strided(&mut dst[r * ow..r * ow + ow], src, wv, stride);
                        }
                    }
                }
            }
        }
    };
    if sequential {
        par::for_each_chunk_seq(out.data_mut(), oh * ow, plane_job);
    } else {
        par::for_each_chunk(out.data_mut(), oh * ow, plane_job);
    }
    Ok(out)
}

/// Gradient of conv2d with respect to its input (scatter of `gy` through the
/// kernel). Shapes follow the matching forward call.
pub fn conv2d_bwd_input<E: Scalar>(
    gy: &Tensor<E>,
    weight: &Tensor<E>,
    in_h: usize,
    in_w: usize,
    stride: usize,
    padding: usize,
) -> Tensor<E> {
    let s = gy.shape();
    let (n, cout, oh, ow) = (s[0], s[1], s[2], s[3]);
    let ws = weight.shape();
    let (cin, kh, kw) = (ws[1], ws[2], ws[3]);
    let hp = in_h + 2 * padding;
    let wp = in_w + 2 * padding;

    let mut gx = Tensor::zeros(&[n, cin, in_h, in_w]);
    let gydat = gy.data();
    let wdat = weight.data();
    par::for_each_chunk(gx.data_mut(), in_h * in_w, |plane, dst| {
        let ni = plane / cin;
        let ci = plane % cin;
        let mut pad_buf = vec![E::zero(); hp * wp];
        if stride == 2 {
            let mut ps = PhaseSplit::zeroed(1, hp, wp);
            for co in 0..cout {
                let gplane = &gydat[(ni * cout + co) * oh * ow..];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = wdat[((co * cin + ci) * kh + ki) * kw + kj];
                        let (drow, spw) = ps.slice_mut(0, ki, kj);
                        for r in 0..oh {
                            scatter_strided(
                                &mut drow[r * spw..],
                                &gplane[r * ow..r * ow + ow],
                                wv,
                                1,
                            );
                        }
                    }
                }
            }
            ps.merge_plane(0, &mut pad_buf, hp, wp);
        } else {
            for co in 0..cout {
                let gplane = &gydat[(ni * cout + co) * oh * ow..];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = wdat[((co * cin + ci) * kh + ki) * kw + kj];
                        for r in 0..oh {
                            let drow = &mut pad_buf[(r * stride + ki) * wp + kj..];
                            scatter_strided(drow, &gplane[r * ow..r * ow + ow], wv, stride);
                        }
                    }
                }
            }
        }
        for row in 0..in_h {
            let src = (row + padding) * wp + padding;
            dst[row * in_w..(row + 1) * in_w].copy_from_slice(&pad_buf[src..src + in_w]);
        }
    });
    gx
}

/// Gradient of conv2d with respect to its weight.
pub fn conv2d_bwd_weight<E: Scalar>(
    x: &Tensor<E>,
    gy: &Tensor<E>,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Tensor<E> {
    let s = x.shape();
    let (n, cin, h, _w) = (s[0], s[1], s[2], s[3]);
    let g = gy.shape();
    let (cout, oh, ow) = (g[1], g[2], g[3]);
    let (xp, _hp, wp) = pad_planes(x.data(), n * cin, h, s[3], padding);

    let mut gw = Tensor::zeros(&[cout, cin, kh, kw]);
    let gydat = gy.data();
    let phases = if stride == 2 {
        Some(PhaseSplit::build(&xp, n * cin, h + 2 * padding, wp))
    } else {
        None
    };
    // Row-major accumulation keeps the gradient-output row and the few input
    // rows it touches hot in cache while the per-channel accumulator lives in
    // registers/L1.
    par::for_each_chunk(gw.data_mut(), cin * kh * kw, |co, dst| {
        for ni in 0..n {
            let gplane = &gydat[(ni * cout + co) * oh * ow..];
            for r in 0..oh {
                let grow = &gplane[r * ow..r * ow + ow];
                for ci in 0..cin {
                    if let Some(ps) = &phases {
                        if kh == 3 && kw == 3 {
                            // 9 taps resolve to 6 phase rows; one fused pass.
                            let p = ni * cin + ci;
                            let (e0, spw) = ps.slice(p, 0, 0);
                            let (o0, _) = ps.slice(p, 0, 1);
                            let (e1, _) = ps.slice(p, 1, 0);
                            let (o1, _) = ps.slice(p, 1, 1);
                            let (e2, _) = ps.slice(p, 2, 0);
                            let (o2, _) = ps.slice(p, 2, 1);
                            let b = r * spw;
                            let e0 = &e0[b..b + ow + 1];
                            let o0 = &o0[b..b + ow];
                            let e1 = &e1[b..b + ow + 1];
                            let o1 = &o1[b..b + ow];
                            let e2 = &e2[b..b + ow + 1];
                            let o2 = &o2[b..b + ow];
                            let mut acc = [E::zero(); 9];
                            for i in 0..ow {
                                let g = grow[i];
                                acc[0] += g * e0[i];
                                acc[1] += g * o0[i];
                                acc[2] += g * e0[i + 1];
                                acc[3] += g * e1[i];
                                acc[4] += g * o1[i];
                                acc[5] += g * e1[i + 1];
                                acc[6] += g * e2[i];
                                acc[7] += g * o2[i];
                                acc[8] += g * e2[i + 1];
                            }
                            let base = ci * 9;
                            for (d, a) in dst[base..base + 9].iter_mut().zip(acc) {
                                *d += a;
                            }
                        } else if kh == 2 && kw == 2 {
                            // transposed-conv weights: 4 taps, 4 phase rows
                            let p = ni * cin + ci;
                            let (e0, spw) = ps.slice(p, 0, 0);
                            let (o0, _) = ps.slice(p, 0, 1);
                            let (e1, _) = ps.slice(p, 1, 0);
                            let (o1, _) = ps.slice(p, 1, 1);
                            let b = r * spw;
                            let e0 = &e0[b..b + ow];
                            let o0 = &o0[b..b + ow];
                            let e1 = &e1[b..b + ow];
                            let o1 = &o1[b..b + ow];
                            let mut acc = [E::zero(); 4];
                            for i in 0..ow {
                                let g = grow[i];
                                acc[0] += g * e0[i];
                                acc[1] += g * o0[i];
                                acc[2] += g * e1[i];
                                acc[3] += g * o1[i];
                            }
                            let base = ci * 4;
                            for (d, a) in dst[base..base + 4].iter_mut().zip(acc) {
                                *d += a;
                            }
                        } else {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let (src, spw) = ps.slice(ni * cin + ci, ki, kj);
                                    dst[(ci * kh + ki) * kw + kj] +=
                                        dot_strided(grow, &src[r * spw..], ow, 1);
                                }
                            }
                        }
                        continue;
                    }
                    let xplane = &xp[(ni * cin + ci) * (h + 2 * padding) * wp..];
                    if kh == 3 && kw == 3 && stride == 1 {
                        // One pass over the gradient row feeds all nine taps.
                        let xr0 = &xplane[r * wp..r * wp + ow + 2];
                        let xr1 = &xplane[(r + 1) * wp..(r + 1) * wp + ow + 2];
                        let xr2 = &xplane[(r + 2) * wp..(r + 2) * wp + ow + 2];
                        let mut acc = [E::zero(); 9];
                        for i in 0..ow {
                            let g = grow[i];
                            acc[0] += g * xr0[i];
                            acc[1] += g * xr0[i + 1];
                            acc[2] += g * xr0[i + 2];
                            acc[3] += g * xr1[i];
                            acc[4] += g * xr1[i + 1];
                            acc[5] += g * xr1[i + 2];
                            acc[6] += g * xr2[i];
                            acc[7] += g * xr2[i + 1];
                            acc[8] += g * xr2[i + 2];
                        }
                        let base = ci * 9;
                        for (d, a) in dst[base..base + 9].iter_mut().zip(acc) {
                            *d += a;
                        }
                    } else {
                        for ki in 0..kh {
                            let xrow = &xplane[(r * stride + ki) * wp..];
                            for kj in 0..kw {
                                dst[(ci * kh + ki) * kw + kj] +=
                                    dot_strided(grow, &xrow[kj..], ow, stride);
                            }
                        }
                    }
                }
            }
        }
    });
    gw
}

/// Gradient of conv-like ops with respect to bias: sum of `gy` per channel.
pub fn conv2d_bwd_bias<E: Scalar>(gy: &Tensor<E>) -> Tensor<E> {
    let s = gy.shape();
    let (n, cout, plane) = (s[0], s[1], s[2] * s[3]);
    let mut gb = Tensor::zeros(&[cout]);
    let gdat = gy.data();
    for ni in 0..n {
        for co in 0..cout {
            let mut acc = E::zero();
            for &v in &gdat[(ni * cout + co) * plane..(ni * cout + co + 1) * plane] {
                acc += v;
            }
            gb.data_mut()[co] += acc;
        }
    }
    gb
}

/// Transposed convolution of `x[N,Cin,H,W]` with `weight[Cin,Cout,kh,kw]`:
/// the adjoint of conv2d with matched stride and padding.
pub fn conv_transpose2d_fwd<E: Scalar>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    let (n, cin, h, w) = dims4(x, "conv_transpose2d")?;
    let (wcin, cout, kh, kw) = dims4(weight, "conv_transpose2d")?;
    if wcin != cin {
        return Err(DiffError::ShapeMismatch {
            op: "conv_transpose2d",
            detail: format!("input has {cin} channels, weight expects {wcin}"),
        });
    }
    if stride == 0 {
        return Err(DiffError::ShapeMismatch {
            op: "conv_transpose2d",
            detail: "stride must be >= 1".into(),
        });
    }
    let oh = conv_transpose2d_out_dim(h, kh, stride, padding);
    let ow = conv_transpose2d_out_dim(w, kw, stride, padding);
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(DiffError::ShapeMismatch {
                op: "conv_transpose2d",
                detail: format!("bias shape {:?}, expected [{cout}]", b.shape()),
            });
        }
    }
    // Scatter into the unpadded frame, then crop `padding` off each border.
    let fh = oh + 2 * padding;
    let fw = ow + 2 * padding;
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    let xdat = x.data();
    let wdat = weight.data();
    par::for_each_chunk(out.data_mut(), oh * ow, |plane, dst| {
        let ni = plane / cout;
        let co = plane % cout;
        let mut full = vec![E::zero(); fh * fw];
        if stride == 2 {
            let mut ps = PhaseSplit::zeroed(1, fh, fw);
            for ci in 0..cin {
                let xplane = &xdat[(ni * cin + ci) * h * w..];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = wdat[((ci * cout + co) * kh + ki) * kw + kj];
                        let (drow, spw) = ps.slice_mut(0, ki, kj);
                        for r in 0..h {
                            scatter_strided(&mut drow[r * spw..], &xplane[r * w..r * w + w], wv, 1);
                        }
                    }
                }
            }
            ps.merge_plane(0, &mut full, fh, fw);
        } else {
            for ci in 0..cin {
                let xplane = &xdat[(ni * cin + ci) * h * w..];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = wdat[((ci * cout + co) * kh + ki) * kw + kj];
                        for r in 0..h {
                            let drow = &mut full[(r * stride + ki) * fw + kj..];
                            scatter_strided(drow, &xplane[r * w..r * w + w], wv, stride);
                        }
                    }
                }
            }
        }
        let bv = bias.map(|b| b.data()[co]).unwrap_or_else(E::zero);
        for row in 0..oh {
            let src = (row + padding) * fw + padding;
            for (d, &s) in dst[row * ow..(row + 1) * ow].iter_mut().zip(&full[src..]) {
                *d = s + bv;
            }
        }
    });
    Ok(out)
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and flat argmax
/// indexes into the input for the backward pass.
pub fn max_pool2d_fwd<E: Scalar>(x: &Tensor<E>) -> Result<(Tensor<E>, Vec<u32>)> {
    let (n, c, h, w) = dims4(x, "max_pool2d")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(DiffError::ShapeMismatch {
            op: "max_pool2d",
            detail: format!("spatial dims {h}x{w} not divisible by the pool stride 2"),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut arg = vec![0u32; n * c * oh * ow];
    let xdat = x.data();
    for p in 0..n * c {
        let xplane = &xdat[p * h * w..];
        let oplane = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
        let aplane = &mut arg[p * oh * ow..(p + 1) * oh * ow];
        for r in 0..oh {
            for q in 0..ow {
                let base = (2 * r) * w + 2 * q;
                let cand = [base, base + 1, base + w, base + w + 1];
                let mut best = cand[0];
                for &ix in &cand[1..] {
                    if xplane[ix] > xplane[best] {
                        best = ix;
                    }
                }
                oplane[r * ow + q] = xplane[best];
                aplane[r * ow + q] = (p * h * w + best) as u32;
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool2d_bwd<E: Scalar>(gy: &Tensor<E>, arg: &[u32], in_shape: &[usize]) -> Tensor<E> {
    let mut gx = Tensor::zeros(in_shape);
    let g = gx.data_mut();
    for (i, &a) in arg.iter().enumerate() {
        g[a as usize] += gy.data()[i];
    }
    gx
}

/// Per-channel statistics saved by the batch-norm forward pass for backward.
#[derive(Debug, Clone)]
pub struct BnSaved<E: Scalar> {
    /// Normalized activations (train mode) — empty in eval mode.
    pub xhat: Vec<E>,
    /// 1/sqrt(var + eps) per channel (train) or per-channel scale (eval).
    pub inv_std: Vec<E>,
    pub train: bool,
}

/// Batch normalization over (N, H, W) per channel.
///
/// Train mode normalizes with batch statistics and updates the running stats
/// in place by exponential moving average (unbiased variance for the running
/// estimate). Eval mode normalizes with the provided running stats.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm2d_fwd<E: Scalar>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    running_mean: &mut [E],
    running_var: &mut [E],
    train: bool,
    epsilon: E,
    momentum: E,
) -> Result<(Tensor<E>, BnSaved<E>)> {
    let (n, c, h, w) = dims4(x, "batch_norm2d")?;
    if gamma.shape() != [c] || beta.shape() != [c] || running_mean.len() != c {
        return Err(DiffError::ShapeMismatch {
            op: "batch_norm2d",
            detail: format!("parameter lengths do not match {c} channels"),
        });
    }
    let m = n * h * w;
    let plane = h * w;
    let mut out = Tensor::zeros(x.shape());
    let xdat = x.data();

    if train {
        if m < 2 {
            return Err(DiffError::DegenerateBatch { elements: m });
        }
        let mut xhat = vec![E::zero(); xdat.len()];
        let mut inv_std = vec![E::zero(); c];
        let mf = E::from_f64(m as f64);
        for ci in 0..c {
            let mut mean = E::zero();
            for ni in 0..n {
                let p = &xdat[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                for &v in p {
                    mean += v;
                }
            }
            mean /= mf;
            let mut var = E::zero();
            for ni in 0..n {
                let p = &xdat[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                for &v in p {
                    let d = v - mean;
                    var += d * d;
                }
            }
            var /= mf;
            let istd = E::one() / (var + epsilon).sqrt();
            inv_std[ci] = istd;
            let (g, b) = (gamma.data()[ci], beta.data()[ci]);
            for ni in 0..n {
                let off = (ni * c + ci) * plane;
                for i in 0..plane {
                    let xh = (xdat[off + i] - mean) * istd;
                    xhat[off + i] = xh;
                    out.data_mut()[off + i] = g * xh + b;
                }
            }
            let unbiased = var * mf / E::from_f64((m - 1) as f64);
            running_mean[ci] = (E::one() - momentum) * running_mean[ci] + momentum * mean;
            running_var[ci] = (E::one() - momentum) * running_var[ci] + momentum * unbiased;
        }
        Ok((
            out,
            BnSaved {
                xhat,
                inv_std,
                train: true,
            },
        ))
    } else {
        let mut inv_std = vec![E::zero(); c];
        for ci in 0..c {
            inv_std[ci] = E::one() / (running_var[ci] + epsilon).sqrt();
        }
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * plane;
                let (g, b) = (gamma.data()[ci], beta.data()[ci]);
                let (mu, istd) = (running_mean[ci], inv_std[ci]);
                for i in 0..plane {
                    out.data_mut()[off + i] = g * (xdat[off + i] - mu) * istd + b;
                }
            }
        }
        Ok((
            out,
            BnSaved {
                xhat: Vec::new(),
                inv_std,
                train: false,
            },
        ))
    }
}

/// Backward pass of batch normalization. Returns (gx, ggamma, gbeta).
pub fn batch_norm2d_bwd<E: Scalar>(
    gy: &Tensor<E>,
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    running_mean: &[E],
    saved: &BnSaved<E>,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let s = x.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let m = n * plane;
    let mf = E::from_f64(m as f64);
    let mut gx = Tensor::zeros(s);
    let mut gg = Tensor::zeros(&[c]);
    let mut gb = Tensor::zeros(&[c]);
    let gydat = gy.data();

    for ci in 0..c {
        let mut sum_gy = E::zero();
        let mut sum_gy_xhat = E::zero();
        if saved.train {
            for ni in 0..n {
                let off = (ni * c + ci) * plane;
                for i in 0..plane {
                    sum_gy += gydat[off + i];
                    sum_gy_xhat += gydat[off + i] * saved.xhat[off + i];
                }
            }
            let g = gamma.data()[ci];
            let istd = saved.inv_std[ci];
            let k = g * istd / mf;
            for ni in 0..n {
                let off = (ni * c + ci) * plane;
                for i in 0..plane {
                    gx.data_mut()[off + i] = k
                        * (mf * gydat[off + i]
                            - sum_gy
                            - saved.xhat[off + i] * sum_gy_xhat);
                }
            }
        } else {
            let istd = saved.inv_std[ci];
            let scale = gamma.data()[ci] * istd;
            let mu = running_mean[ci];
            for ni in 0..n {
                let off = (ni * c + ci) * plane;
                for i in 0..plane {
                    sum_gy += gydat[off + i];
                    sum_gy_xhat += gydat[off + i] * (x.data()[off + i] - mu) * istd;
                    gx.data_mut()[off + i] = gydat[off + i] * scale;
                }
            }
        }
        gg.data_mut()[ci] = sum_gy_xhat;
        gb.data_mut()[ci] = sum_gy;
    }
    (gx, gg, gb)
}

/// Fully connected layer: `y[n,k] = sum_d x[n,d] * w[k,d] + b[k]`.
pub fn dense_fwd<E: Scalar>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
) -> Result<Tensor<E>> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bias.shape() != [ws[0]] {
        return Err(DiffError::ShapeMismatch {
            op: "dense",
            detail: format!(
                "input {:?}, weight {:?}, bias {:?}",
                xs,
                ws,
                bias.shape()
            ),
        });
    }
    let (n, d, k) = (xs[0], xs[1], ws[0]);
    let mut out = Tensor::zeros(&[n, k]);
    for ni in 0..n {
        let xrow = &x.data()[ni * d..(ni + 1) * d];
        for ki in 0..k {
            let wrow = &weight.data()[ki * d..(ki + 1) * d];
            let mut acc = bias.data()[ki];
            for i in 0..d {
                acc += xrow[i] * wrow[i];
            }
            out.data_mut()[ni * k + ki] = acc;
        }
    }
    Ok(out)
}

pub fn dense_bwd<E: Scalar>(
    gy: &Tensor<E>,
    x: &Tensor<E>,
    weight: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let k = weight.shape()[0];
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[k]);
    for ni in 0..n {
        for ki in 0..k {
            let g = gy.data()[ni * k + ki];
            gb.data_mut()[ki] += g;
            let wrow = &weight.data()[ki * d..(ki + 1) * d];
            let xrow = &x.data()[ni * d..(ni + 1) * d];
            let gxrow = &mut gx.data_mut()[ni * d..(ni + 1) * d];
            for i in 0..d {
                gxrow[i] += g * wrow[i];
            }
            let gwrow = &mut gw.data_mut()[ki * d..(ki + 1) * d];
            for i in 0..d {
                gwrow[i] += g * xrow[i];
            }
        }
    }
    (gx, gw, gb)
}

/// Softmax probabilities per row of a [N, K] logit tensor.
pub fn softmax_rows<E: Scalar>(logits: &Tensor<E>) -> Tensor<E> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut out = Tensor::zeros(logits.shape());
    for ni in 0..n {
        let row = &logits.data()[ni * k..(ni + 1) * k];
        let mx = row.iter().cloned().fold(E::neg_infinity(), E::max);
        let mut sum = E::zero();
        for (i, &v) in row.iter().enumerate() {
            let e = (v - mx).exp();
            out.data_mut()[ni * k + i] = e;
            sum += e;
        }
        for i in 0..k {
            out.data_mut()[ni * k + i] /= sum;
        }
    }
    out
}

/// Mean over the batch of `-log softmax(logits)[target]`.
pub fn softmax_ce_fwd<E: Scalar>(logits: &Tensor<E>, targets: &[usize]) -> Result<(E, Tensor<E>)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(DiffError::ShapeMismatch {
            op: "softmax_cross_entropy",
            detail: format!("logits {:?} vs {} targets", s, targets.len()),
        });
    }
    let (n, k) = (s[0], s[1]);
    for &t in targets {
        if t >= k {
            return Err(DiffError::TargetOutOfRange {
                target: t,
                classes: k,
            });
        }
    }
    let probs = softmax_rows(logits);
    let mut loss = E::zero();
    for ni in 0..n {
        let row = &logits.data()[ni * k..(ni + 1) * k];
        let mx = row.iter().cloned().fold(E::neg_infinity(), E::max);
        let mut lse = E::zero();
        for &v in row {
            lse += (v - mx).exp();
        }
        loss += mx + lse.ln() - row[targets[ni]];
    }
    loss /= E::from_f64(n as f64);
    Ok((loss, probs))
}

pub fn softmax_ce_bwd<E: Scalar>(g: E, probs: &Tensor<E>, targets: &[usize]) -> Tensor<E> {
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    let scale = g / E::from_f64(n as f64);
    let mut gx = probs.clone();
    for ni in 0..n {
        gx.data_mut()[ni * k + targets[ni]] -= E::one();
    }
    gx.data_mut().iter_mut().for_each(|v| *v *= scale);
    gx
}
