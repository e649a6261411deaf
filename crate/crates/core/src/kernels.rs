//! Forward and backward kernels on plain tensors.
//!
//! These functions do no tape bookkeeping. The [`Graph`](crate::graph::Graph)
//! records them and routes gradients through the `*_backward` companions.
//! Layouts are NCHW for feature maps and row-major everywhere.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{dims4, expect_rank, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
        }
    }

    /// Stride 1 with padding equal to `dilation * (k - 1) / 2`, which keeps
    /// the spatial shape for odd kernels.
    pub const fn same(kernel: usize, dilation: usize) -> Self {
        Self::new(1, dilation * (kernel - 1) / 2, dilation)
    }

    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel.max(1) - 1) + 1;
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// Output positions `o` in `0..out_len` for which `o * stride + offset`
/// lands inside `0..in_len`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, offset: isize, stride: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let room = in_len as isize - offset;
    let hi = if room <= 0 { 0 } else { (room + s - 1) / s };
    let lo = (lo as usize).min(out_len);
    let hi = (hi as usize).min(out_len);
    (lo, hi.max(lo))
}

pub(crate) struct ConvShapes {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_shapes(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    geom: ConvGeom,
) -> Result<ConvShapes> {
    expect_rank("conv2d", input, 4)?;
    expect_rank("conv2d", weight, 4)?;
    let [n, cin, h, w] = dims4(input.shape());
    let [cout, wcin, kh, kw] = dims4(weight.shape());
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels, weight expects {wcin}"),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?}, expected [{cout}]", b.shape()),
            ));
        }
    }
    if geom.stride == 0 || geom.dilation == 0 {
        return Err(Error::invalid("conv2d", "stride and dilation must be positive"));
    }
    let oh = geom.output_extent(h, kh).filter(|&e| e > 0);
    let ow = geom.output_extent(w, kw).filter(|&e| e > 0);
    match (oh, ow) {
        (Some(oh), Some(ow)) if kh > 0 && kw > 0 => Ok(ConvShapes {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh,
            ow,
        }),
        _ => Err(Error::EmptyOutput { op: "conv2d" }),
    }
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    geom: ConvGeom,
) -> Result<Tensor> {
    let s = conv_shapes(input, weight, bias, geom)?;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; s.n * s.cout * s.oh * s.ow];
    let plane = s.oh * s.ow;
    let pad = geom.padding as isize;
    for n in 0..s.n {
        for co in 0..s.cout {
            let o_base = (n * s.cout + co) * plane;
            let dst = &mut out[o_base..o_base + plane];
            if let Some(b) = bias {
                dst.fill(b.data()[co]);
            }
            for ci in 0..s.cin {
                let x_plane = &x[(n * s.cin + ci) * s.h * s.w..][..s.h * s.w];
                for ky in 0..s.kh {
                    let oy_off = (ky * geom.dilation) as isize - pad;
                    let (oy0, oy1) = valid_range(s.oh, s.h, oy_off, geom.stride);
                    for kx in 0..s.kw {
                        let wv = wt[((co * s.cin + ci) * s.kh + ky) * s.kw + kx];
                        let ox_off = (kx * geom.dilation) as isize - pad;
                        let (ox0, ox1) = valid_range(s.ow, s.w, ox_off, geom.stride);
                        if ox0 == ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = (oy * geom.stride) as isize + oy_off;
                            let x_row = &x_plane[iy as usize * s.w..][..s.w];
                            let o_row = &mut dst[oy * s.ow..][..s.ow];
                            let ix0 = ((ox0 * geom.stride) as isize + ox_off) as usize;
                            if geom.stride == 1 {
                                for (o, xi) in o_row[ox0..ox1].iter_mut().zip(&x_row[ix0..]) {
                                    *o += wv * xi;
                                }
                            } else {
                                for (o, xi) in o_row[ox0..ox1]
                                    .iter_mut()
                                    .zip(x_row[ix0..].iter().step_by(geom.stride))
                                {
                                    *o += wv * xi;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[s.n, s.cout, s.oh, s.ow], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    has_bias: bool,
    geom: ConvGeom,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let s = conv_shapes(input, weight, None, geom)?;
    let x = input.data();
    let wt = weight.data();
    let g = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; if has_bias { s.cout } else { 0 }];
    let plane = s.oh * s.ow;
    let pad = geom.padding as isize;
    for n in 0..s.n {
        for co in 0..s.cout {
            let g_plane = &g[(n * s.cout + co) * plane..][..plane];
            if has_bias {
                gb[co] += g_plane.iter().sum::<f64>();
            }
            for ci in 0..s.cin {
                let x_base = (n * s.cin + ci) * s.h * s.w;
                for ky in 0..s.kh {
                    let oy_off = (ky * geom.dilation) as isize - pad;
                    let (oy0, oy1) = valid_range(s.oh, s.h, oy_off, geom.stride);
                    for kx in 0..s.kw {
                        let w_idx = ((co * s.cin + ci) * s.kh + ky) * s.kw + kx;
                        let wv = wt[w_idx];
                        let ox_off = (kx * geom.dilation) as isize - pad;
                        let (ox0, ox1) = valid_range(s.ow, s.w, ox_off, geom.stride);
                        if ox0 == ox1 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = ((oy * geom.stride) as isize + oy_off) as usize;
                            let g_row = &g_plane[oy * s.ow..][..s.ow];
                            let row_base = x_base + iy * s.w;
                            for ox in ox0..ox1 {
                                let ix = ((ox * geom.stride) as isize + ox_off) as usize;
                                let go = g_row[ox];
                                acc += go * x[row_base + ix];
                                gx[row_base + ix] += go * wv;
                            }
                        }
                        gw[w_idx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape(), gx)?,
        Tensor::new(weight.shape(), gw)?,
        has_bias.then(|| Tensor::new(&[s.cout], gb)).transpose()?,
    ))
}

/// Replicates every cell into a `factor x factor` block.
pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor> {
    expect_rank("upsample_nearest", input, 4)?;
    if factor == 0 {
        return Err(Error::invalid("upsample_nearest", "factor must be >= 1"));
    }
    let [n, c, h, w] = dims4(input.shape());
    let (oh, ow) = (h * factor, w * factor);
    let x = input.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for oy in 0..oh {
            let row = &src[(oy / factor) * w..][..w];
            for (ox, o) in dst[oy * ow..][..ow].iter_mut().enumerate() {
                *o = row[ox / factor];
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

/// Sums the upstream gradient over each replicated block.
pub fn upsample_nearest_backward(grad_out: &Tensor, factor: usize) -> Result<Tensor> {
    let [n, c, oh, ow] = dims4(grad_out.shape());
    let (h, w) = (oh / factor, ow / factor);
    let g = grad_out.data();
    let mut gx = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let src = &g[p * oh * ow..][..oh * ow];
        let dst = &mut gx[p * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / factor) * w + ox / factor] += src[oy * ow + ox];
            }
        }
    }
    Tensor::new(&[n, c, h, w], gx)
}

/// Mean over each non-overlapping `factor x factor` block.
pub fn avgpool_down(input: &Tensor, factor: usize) -> Result<Tensor> {
    expect_rank("avgpool_down", input, 4)?;
    let [n, c, h, w] = dims4(input.shape());
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(
            "avgpool_down",
            format!("extents {h}x{w} not divisible by factor {factor}"),
        ));
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let x = input.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for y in 0..h {
            for xx in 0..w {
                dst[(y / factor) * ow + xx / factor] += src[y * w + xx];
            }
        }
        dst.iter_mut().for_each(|v| *v *= inv);
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub fn avgpool_down_backward(grad_out: &Tensor, factor: usize) -> Result<Tensor> {
    let [n, c, oh, ow] = dims4(grad_out.shape());
    let (h, w) = (oh * factor, ow * factor);
    let inv = 1.0 / (factor * factor) as f64;
    let g = grad_out.data();
    let mut gx = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let src = &g[p * oh * ow..][..oh * ow];
        let dst = &mut gx[p * h * w..][..h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[(y / factor) * ow + x / factor] * inv;
            }
        }
    }
    Tensor::new(&[n, c, h, w], gx)
}

/// Maximum of a rank-2 `[H, W]` map and its `(x, y)` location.
///
/// Ties resolve to the lowest row-major index.
pub fn global_max_argmax(map: &Tensor) -> Result<(f64, usize, usize)> {
    expect_rank("global_max_argmax", map, 2)?;
    let w = map.shape()[1];
    let idx = argmax_slice(map.data())
        .ok_or_else(|| Error::invalid("global_max_argmax", "empty map"))?;
    Ok((map.data()[idx], idx % w, idx / w))
}

/// Index of the first maximum.
pub(crate) fn argmax_slice(v: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in v.iter().enumerate() {
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

/// Per-plane max over the last two axes of an `[N, K, H, W]` tensor.
/// Returns values `[N, K]` and the flat in-plane argmax for every plane.
pub fn plane_max_argmax(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    expect_rank("plane_max_argmax", input, 4)?;
    let [n, k, h, w] = dims4(input.shape());
    if h * w == 0 {
        return Err(Error::invalid("plane_max_argmax", "empty map"));
    }
    let mut values = Vec::with_capacity(n * k);
    let mut locs = Vec::with_capacity(n * k);
    for plane in input.data().chunks_exact(h * w) {
        let i = argmax_slice(plane).expect("non-empty plane");
        values.push(plane[i]);
        locs.push(i);
    }
    Ok((Tensor::new(&[n, k], values)?, locs))
}

/// Numerically stable softmax of one vector (max subtraction).
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    softmax_into(v, &mut out);
    out
}

pub(crate) fn softmax_into(v: &[f64], out: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = math::exp(x - m);
        sum += *o;
    }
    let inv = 1.0 / sum;
    out.iter_mut().for_each(|o| *o *= inv);
}

/// Softmax over the last axis.
pub fn softmax_last(input: &Tensor) -> Result<Tensor> {
    let m = *input
        .shape()
        .last()
        .ok_or_else(|| Error::shape("softmax", "rank-0 input"))?;
    if m == 0 {
        return Err(Error::invalid("softmax", "empty axis"));
    }
    let mut out = vec![0.0; input.numel()];
    for (src, dst) in input.data().chunks_exact(m).zip(out.chunks_exact_mut(m)) {
        softmax_into(src, dst);
    }
    Tensor::new(input.shape(), out)
}

/// `dx = y * (g - <y, g>)` row-wise.
pub fn softmax_last_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let m = *output.shape().last().expect("softmax output has rank >= 1");
    let mut gx = vec![0.0; output.numel()];
    for ((y, g), dst) in output
        .data()
        .chunks_exact(m)
        .zip(grad_out.data().chunks_exact(m))
        .zip(gx.chunks_exact_mut(m))
    {
        let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
        for ((d, &yi), &gi) in dst.iter_mut().zip(y).zip(g) {
            *d = yi * (gi - dot);
        }
    }
    Tensor::new(output.shape(), gx)
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    Tensor::from_fn(input.shape(), |i| math::sigmoid(input.data()[i]))
}

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank("matmul", a, 2)?;
    expect_rank("matmul", b, 2)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner extents differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..][..n];
        for p in 0..k {
            let av = ad[i * k + p];
            for (o, bv) in row.iter_mut().zip(&bd[p * n..][..n]) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// Transposes a rank-2 tensor.
pub fn transpose(a: &Tensor) -> Result<Tensor> {
    expect_rank("transpose", a, 2)?;
    let (m, n) = (a.shape()[0], a.shape()[1]);
    Tensor::new(&[n, m], {
        let d = a.data();
        (0..n * m).map(|i| d[(i % m) * n + i / m]).collect()
    })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    Tensor::new(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
    )
}

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::invalid("concat", format!("axis {axis} >= rank {rank}")));
    }
    for p in parts {
        let ok = p.rank() == rank
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(Error::shape(
                "concat",
                format!("{:?} vs {:?} on axis {axis}", p.shape(), first.shape()),
            ));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total_axis: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..][..chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total_axis;
    Tensor::new(&shape, out)
}

/// Slice `start..start + len` along `axis`.
pub fn narrow(input: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= input.rank() || start + len > input.shape()[axis] {
        return Err(Error::invalid(
            "narrow",
            format!("{start}+{len} out of range on axis {axis} of {:?}", input.shape()),
        ));
    }
    let outer: usize = input.shape()[..axis].iter().product();
    let inner: usize = input.shape()[axis + 1..].iter().product();
    let full = input.shape()[axis] * inner;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        out.extend_from_slice(&input.data()[o * full + start * inner..][..len * inner]);
    }
    let mut shape = input.shape().to_vec();
    shape[axis] = len;
    Tensor::new(&shape, out)
}

/// Splits the channel axis (axis 1) into `n` equal parts.
pub fn split_channels(input: &Tensor, n: usize) -> Result<Vec<Tensor>> {
    if input.rank() < 2 {
        return Err(Error::shape("split_channels", "rank must be >= 2"));
    }
    let c = input.shape()[1];
    if n == 0 || c % n != 0 {
        return Err(Error::invalid(
            "split_channels",
            format!("{c} channels not divisible into {n} parts"),
        ));
    }
    let part = c / n;
    (0..n).map(|k| narrow(input, 1, k * part, part)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_all_ones_counts_taps() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, Some(&b), ConvGeom::new(1, 1, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.at4(0, 0, 1, 1), 9.0);
        assert_eq!(y.at4(0, 0, 0, 0), 4.0);
        assert_eq!(y.at4(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn conv_unit_1x1_is_identity() {
        let x = Tensor::from_fn(&[2, 1, 3, 4], |i| i as f64 * 0.37 - 1.0);
        let w = Tensor::ones(&[1, 1, 1, 1]);
        let y = conv2d(&x, &w, None, ConvGeom::new(1, 0, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor::zeros(&[1, 2, 3, 3]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(
            conv2d(&x, &w, None, ConvGeom::new(1, 1, 1)),
            Err(Error::ShapeMismatch { .. })
        ));
        let w = Tensor::zeros(&[1, 2, 5, 5]);
        assert!(matches!(
            conv2d(&x, &w, None, ConvGeom::new(1, 0, 1)),
            Err(Error::EmptyOutput { .. })
        ));
    }

    #[test]
    fn conv_stride_two_extents() {
        let g = ConvGeom::new(2, 1, 1);
        assert_eq!(g.output_extent(64, 3), Some(32));
        assert_eq!(g.output_extent(5, 3), Some(3));
        assert_eq!(ConvGeom::same(3, 2).output_extent(7, 3), Some(7));
    }

    #[test]
    fn upsample_replicates() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = upsample_nearest(&x, 2).unwrap();
        assert_eq!(
            y.data(),
            &[
                1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0
            ]
        );
        assert_eq!(upsample_nearest(&x, 1).unwrap(), x);
        assert!(upsample_nearest(&x, 0).is_err());
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let g = Tensor::ones(&[1, 2, 6, 6]);
        let gx = upsample_nearest_backward(&g, 3).unwrap();
        assert_eq!(gx.shape(), &[1, 2, 2, 2]);
        assert!(gx.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn avgpool_block_means() {
        let x = t(&[1, 1, 2, 2], &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(avgpool_down(&x, 2).unwrap().data(), &[1.0]);
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(avgpool_down(&x, 2).unwrap().data(), &[2.5]);
        assert!(avgpool_down(&Tensor::zeros(&[1, 1, 3, 4]), 2).is_err());
    }

    #[test]
    fn max_argmax_basic_and_ties() {
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(global_max_argmax(&m).unwrap(), (4.0, 1, 1));
        let m = Tensor::full(&[3, 3], 5.0);
        assert_eq!(global_max_argmax(&m).unwrap(), (5.0, 0, 0));
        assert!(global_max_argmax(&Tensor::zeros(&[0, 3])).is_err());
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0; 4]), vec![0.25; 4]);
        let s = softmax(&[1000.0, 0.0]);
        assert!((s[0] - 1.0).abs() <= 1e-12 && s[1].abs() <= 1e-12);
        assert!(s.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sigmoid_at_zero() {
        assert_eq!(sigmoid(&Tensor::scalar(0.0)).item(), Some(0.5));
    }

    #[test]
    fn split_then_concat_roundtrip() {
        let x = Tensor::from_fn(&[2, 6, 3, 2], |i| i as f64);
        let parts = split_channels(&x, 3).unwrap();
        assert_eq!(parts.len(), 3);
        assert!(parts.iter().all(|p| p.shape() == [2, 2, 3, 2]));
        let refs: Vec<&Tensor> = parts.iter().collect();
        assert_eq!(concat(&refs, 1).unwrap(), x);
        assert!(split_channels(&x, 4).is_err());
    }

    #[test]
    fn matmul_shape_check() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(matmul(&a, &b).is_err());
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let i = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&a, &i).unwrap(), a);
        assert_eq!(transpose(&a).unwrap().data(), &[1.0, 3.0, 2.0, 4.0]);
    }
}
