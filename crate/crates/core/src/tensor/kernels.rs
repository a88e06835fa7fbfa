//! Forward and backward kernels on raw NCHW buffers.
//!
//! Convolutions are lowered to GEMM over column tiles: a tile of output
//! positions is unfolded with `im2col`, multiplied, and (for gradients or the
//! transposed op) folded back with `col2im`. Tiling bounds the column buffer
//! regardless of image size.

use super::gemm::{gemm, Layout};
use super::{fmt_dims, Tensor4};
use crate::error::{Result, WbError};

/// Target number of floats in one column tile.
const TILE_ELEMS: usize = 1 << 18;
const MIN_TILE: usize = 256;

/// Sliding-window geometry shared by conv2d and its transpose.
///
/// `img_*` is the side the kernel slides over (conv input, or transposed-conv
/// output); `grid_*` is one position per window.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.grid_h * self.grid_w
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn tile(&self) -> usize {
        let p = self.positions().max(1);
        (TILE_ELEMS / self.rows().max(1)).clamp(MIN_TILE, p.max(MIN_TILE)).min(p)
    }

    fn tiles(&self) -> impl Iterator<Item = (usize, usize)> {
        let p = self.positions();
        let t = self.tile();
        (0..p).step_by(t.max(1)).map(move |p0| (p0, (p0 + t).min(p)))
    }
}

/// Unfolds grid positions `p0..p1` of `img` into `col` (`rows x (p1-p0)`).
pub(crate) fn im2col(img: &[f32], g: &Geometry, p0: usize, p1: usize, col: &mut [f32]) {
    let t = p1 - p0;
    let plane = g.img_h * g.img_w;
    for c in 0..g.channels {
        let src = &img[c * plane..(c + 1) * plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut col[((c * g.k + ky) * g.k + kx) * t..][..t];
                let mut p = p0;
                while p < p1 {
                    let oy = p / g.grid_w;
                    let ox0 = p % g.grid_w;
                    let ox1 = (ox0 + (p1 - p)).min(g.grid_w);
                    let seg = &mut row[p - p0..p - p0 + (ox1 - ox0)];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.img_h as isize {
                        seg.fill(0.0);
                    } else if g.stride == 1 {
                        // in-bounds taps form one contiguous run
                        let line = &src[iy as usize * g.img_w..][..g.img_w];
                        let shift = (ox0 + kx) as isize - g.pad as isize;
                        let lo = (-shift).clamp(0, seg.len() as isize) as usize;
                        let hi = (g.img_w as isize - shift).clamp(lo as isize, seg.len() as isize) as usize;
                        seg[..lo].fill(0.0);
                        seg[hi..].fill(0.0);
                        let from = (lo as isize + shift) as usize;
                        seg[lo..hi].copy_from_slice(&line[from..from + (hi - lo)]);
                    } else {
                        let line = &src[iy as usize * g.img_w..][..g.img_w];
                        for (i, dst) in seg.iter_mut().enumerate() {
                            let ix = ((ox0 + i) * g.stride + kx) as isize - g.pad as isize;
                            *dst = if ix >= 0 && (ix as usize) < g.img_w {
                                line[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                    p += ox1 - ox0;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `img`.
pub(crate) fn col2im_add(col: &[f32], g: &Geometry, p0: usize, p1: usize, img: &mut [f32]) {
    let t = p1 - p0;
    let plane = g.img_h * g.img_w;
    for c in 0..g.channels {
        let dst = &mut img[c * plane..(c + 1) * plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &col[((c * g.k + ky) * g.k + kx) * t..][..t];
                let mut p = p0;
                while p < p1 {
                    let oy = p / g.grid_w;
                    let ox0 = p % g.grid_w;
                    let ox1 = (ox0 + (p1 - p)).min(g.grid_w);
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy >= 0 && iy < g.img_h as isize {
                        let line = &mut dst[iy as usize * g.img_w..][..g.img_w];
                        let seg = &row[p - p0..p - p0 + (ox1 - ox0)];
                        for (i, &v) in seg.iter().enumerate() {
                            let ix = ((ox0 + i) * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.img_w {
                                line[ix as usize] += v;
                            }
                        }
                    }
                    p += ox1 - ox0;
                }
            }
        }
    }
}

fn conv_geometry(input: [usize; 4], weight: [usize; 4], bias: usize, stride: usize, pad: usize) -> Result<Geometry> {
    let [_, c, h, w] = input;
    let [oc, ic, kh, kw] = weight;
    if ic != c {
        return Err(WbError::shape(
            "conv2d",
            format!("input with {ic} channels for weight {}", fmt_dims(weight)),
            fmt_dims(input),
        ));
    }
    if kh != kw || kh == 0 {
        return Err(WbError::shape("conv2d", "square non-empty kernel", fmt_dims(weight)));
    }
    if bias != oc {
        return Err(WbError::shape("conv2d bias", oc, bias));
    }
    if stride == 0 {
        return Err(WbError::Config("conv2d stride must be >= 1".into()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(WbError::shape(
            "conv2d",
            format!("padded input at least {kh}x{kw}"),
            fmt_dims(input),
        ));
    }
    Ok(Geometry {
        channels: c,
        img_h: h,
        img_w: w,
        k: kh,
        stride,
        pad,
        grid_h: (h + 2 * pad - kh) / stride + 1,
        grid_w: (w + 2 * pad - kw) / stride + 1,
    })
}

fn tconv_geometry(input: [usize; 4], weight: [usize; 4], bias: usize, stride: usize) -> Result<Geometry> {
    let [_, c, h, w] = input;
    let [ic, oc, kh, kw] = weight;
    if ic != c {
        return Err(WbError::shape(
            "transposed_conv2d",
            format!("input with {ic} channels for weight {}", fmt_dims(weight)),
            fmt_dims(input),
        ));
    }
    if kh != kw || kh == 0 {
        return Err(WbError::shape("transposed_conv2d", "square non-empty kernel", fmt_dims(weight)));
    }
    if bias != oc {
        return Err(WbError::shape("transposed_conv2d bias", oc, bias));
    }
    if stride == 0 {
        return Err(WbError::Config("transposed_conv2d stride must be >= 1".into()));
    }
    Ok(Geometry {
        channels: oc,
        img_h: (h.max(1) - 1) * stride + kh,
        img_w: (w.max(1) - 1) * stride + kw,
        k: kh,
        stride,
        pad: 0,
        grid_h: h,
        grid_w: w,
    })
}

/// Zero-padded cross-correlation. `weight` is `[out_c, in_c, k, k]`.
pub fn conv2d_forward(input: &Tensor4, weight: &Tensor4, bias: &[f32], stride: usize, pad: usize) -> Result<Tensor4> {
    let g = conv_geometry(input.dims(), weight.dims(), bias.len(), stride, pad)?;
    let n = input.batch();
    let oc = weight.dims()[0];
    let p = g.positions();
    let mut out = Tensor4::zeros([n, oc, g.grid_h, g.grid_w]);
    let rows = g.rows();
    let in_per = g.channels * g.img_h * g.img_w;
    let mut col = vec![0.0f32; if g.is_pointwise() { 0 } else { rows * g.tile() }];
    for s in 0..n {
        let x = &input.data()[s * in_per..(s + 1) * in_per];
        let y = &mut out.data_mut()[s * oc * p..(s + 1) * oc * p];
        for (o, b) in bias.iter().enumerate() {
            y[o * p..(o + 1) * p].fill(*b);
        }
        for (p0, p1) in g.tiles() {
            let t = p1 - p0;
            let lc = Layout { rows: oc, cols: t, row_stride: p, col_stride: 1 };
            if g.is_pointwise() {
                let lb = Layout { rows, cols: t, row_stride: p, col_stride: 1 };
                gemm(weight.data(), Layout::row_major(oc, rows), &x[p0..], lb, 1.0, &mut y[p0..], lc);
            } else {
                let col = &mut col[..rows * t];
                im2col(x, &g, p0, p1, col);
                gemm(weight.data(), Layout::row_major(oc, rows), col, Layout::row_major(rows, t), 1.0, &mut y[p0..], lc);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`]. Returns `(d_input, d_weight, d_bias)`;
/// `d_input` is skipped when `want_input` is false.
pub(crate) fn conv2d_backward(
    input: &Tensor4,
    weight: &Tensor4,
    stride: usize,
    pad: usize,
    d_out: &[f32],
    want_input: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let g = conv_geometry(input.dims(), weight.dims(), weight.dims()[0], stride, pad)
        .expect("geometry validated in forward");
    let n = input.batch();
    let oc = weight.dims()[0];
    let p = g.positions();
    let rows = g.rows();
    let in_per = g.channels * g.img_h * g.img_w;
    let mut dx = want_input.then(|| vec![0.0f32; input.len()]);
    let mut dw = vec![0.0f32; weight.len()];
    let mut db = vec![0.0f32; oc];
    let tile = g.tile();
    let mut col = vec![0.0f32; rows * tile];
    let mut dcol = vec![0.0f32; if want_input { rows * tile } else { 0 }];
    for s in 0..n {
        let x = &input.data()[s * in_per..(s + 1) * in_per];
        let dy = &d_out[s * oc * p..(s + 1) * oc * p];
        for (o, acc) in db.iter_mut().enumerate() {
            *acc += dy[o * p..(o + 1) * p].iter().map(|&v| v as f64).sum::<f64>() as f32;
        }
        for (p0, p1) in g.tiles() {
            let t = p1 - p0;
            let ldy = Layout { rows: oc, cols: t, row_stride: p, col_stride: 1 };
            let col = &mut col[..rows * t];
            if g.is_pointwise() {
                for r in 0..rows {
                    col[r * t..(r + 1) * t].copy_from_slice(&x[r * p + p0..r * p + p1]);
                }
            } else {
                im2col(x, &g, p0, p1, col);
            }
            gemm(&dy[p0..], ldy, col, Layout::transposed(rows, t), 1.0, &mut dw, Layout::row_major(oc, rows));
            if let Some(dx) = dx.as_mut() {
                let dcol = &mut dcol[..rows * t];
                gemm(weight.data(), Layout::transposed(oc, rows), &dy[p0..], ldy, 0.0, dcol, Layout::row_major(rows, t));
                col2im_add(dcol, &g, p0, p1, &mut dx[s * in_per..(s + 1) * in_per]);
            }
        }
    }
    (dx, dw, db)
}

/// Transposed convolution without padding. `weight` is `[in_c, out_c, k, k]`.
pub fn conv_transpose2d_forward(input: &Tensor4, weight: &Tensor4, bias: &[f32], stride: usize) -> Result<Tensor4> {
    let g = tconv_geometry(input.dims(), weight.dims(), bias.len(), stride)?;
    let n = input.batch();
    let ic = weight.dims()[0];
    let oc = g.channels;
    let p = g.positions();
    let rows = g.rows();
    let out_plane = g.img_h * g.img_w;
    let mut out = Tensor4::zeros([n, oc, g.img_h, g.img_w]);
    let mut col = vec![0.0f32; rows * g.tile()];
    for s in 0..n {
        let x = &input.data()[s * ic * p..(s + 1) * ic * p];
        let y = &mut out.data_mut()[s * oc * out_plane..(s + 1) * oc * out_plane];
        for (o, b) in bias.iter().enumerate() {
            y[o * out_plane..(o + 1) * out_plane].fill(*b);
        }
        for (p0, p1) in g.tiles() {
            let t = p1 - p0;
            let col = &mut col[..rows * t];
            let lx = Layout { rows: ic, cols: t, row_stride: p, col_stride: 1 };
            gemm(weight.data(), Layout::transposed(ic, rows), &x[p0..], lx, 0.0, col, Layout::row_major(rows, t));
            col2im_add(col, &g, p0, p1, y);
        }
    }
    Ok(out)
}

pub(crate) fn conv_transpose2d_backward(
    input: &Tensor4,
    weight: &Tensor4,
    stride: usize,
    d_out: &[f32],
    want_input: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let g = tconv_geometry(input.dims(), weight.dims(), weight.dims()[1], stride)
        .expect("geometry validated in forward");
    let n = input.batch();
    let ic = weight.dims()[0];
    let oc = g.channels;
    let p = g.positions();
    let rows = g.rows();
    let out_plane = g.img_h * g.img_w;
    let mut dx = want_input.then(|| vec![0.0f32; input.len()]);
    let mut dw = vec![0.0f32; weight.len()];
    let mut db = vec![0.0f32; oc];
    let mut col = vec![0.0f32; rows * g.tile()];
    for s in 0..n {
        let x = &input.data()[s * ic * p..(s + 1) * ic * p];
        let dy = &d_out[s * oc * out_plane..(s + 1) * oc * out_plane];
        for (o, acc) in db.iter_mut().enumerate() {
            *acc += dy[o * out_plane..(o + 1) * out_plane]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>() as f32;
        }
        for (p0, p1) in g.tiles() {
            let t = p1 - p0;
            let col = &mut col[..rows * t];
            im2col(dy, &g, p0, p1, col);
            let lx = Layout { rows: ic, cols: t, row_stride: p, col_stride: 1 };
            gemm(&x[p0..], lx, col, Layout::transposed(rows, t), 1.0, &mut dw, Layout::row_major(ic, rows));
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx[s * ic * p..(s + 1) * ic * p];
                gemm(weight.data(), Layout::row_major(ic, rows), col, Layout::row_major(rows, t), 0.0, &mut dxs[p0..], lx);
            }
        }
    }
    (dx, dw, db)
}

/// 2x2 stride-2 max pooling. The second value holds, per output element, the
/// flat input index of the selected maximum; ties go to the first element in
/// row-major window order.
pub fn maxpool2x2_forward(input: &Tensor4) -> Result<(Tensor4, Vec<usize>)> {
    let [n, c, h, w] = input.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(WbError::NotMultiple {
            op: "maxpool2x2",
            height: h,
            width: w,
            multiple: 2,
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    let mut arg = vec![0usize; n * c * oh * ow];
    let src = input.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let i0 = base + 2 * y * w + 2 * x;
                let mut best = i0;
                for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                    if src[cand] > src[best] || src[cand].is_nan() && !src[best].is_nan() {
                        best = cand;
                    }
                }
                let o = plane * oh * ow + y * ow + x;
                dst[o] = src[best];
                arg[o] = best;
            }
        }
    }
    Ok((out, arg))
}

pub(crate) fn maxpool2x2_backward(input_len: usize, argmax: &[usize], d_out: &[f32]) -> Vec<f32> {
    let mut dx = vec![0.0f32; input_len];
    for (&i, &g) in argmax.iter().zip(d_out) {
        dx[i] += g;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: [usize; 4], seed: u64) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution in f64.
    fn conv_oracle(x: &Tensor4, w: &Tensor4, b: &[f32], stride: usize, pad: usize) -> Tensor4 {
        let [n, c, h, wd] = x.dims();
        let [oc, _, k, _] = w.dims();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        Tensor4::from_fn([n, oc, oh, ow], |[s, o, y, xo]| {
            let mut acc = b[o] as f64;
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (y * stride + ky) as isize - pad as isize;
                        let ix = (xo * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += x.at([s, ci, iy as usize, ix as usize]) as f64
                                * w.at([o, ci, ky, kx]) as f64;
                        }
                    }
                }
            }
            acc as f32
        })
    }

    /// Transposed conv via zero insertion then a full-padded conv with the
    /// flipped, channel-swapped kernel.
    fn tconv_oracle(x: &Tensor4, w: &Tensor4, b: &[f32], stride: usize) -> Tensor4 {
        let [n, ic, h, wd] = x.dims();
        let [_, oc, k, _] = w.dims();
        let sh = (h - 1) * stride + 1;
        let sw = (wd - 1) * stride + 1;
        let stuffed = Tensor4::from_fn([n, ic, sh, sw], |[s, c, y, xx]| {
            if y % stride == 0 && xx % stride == 0 {
                x.at([s, c, y / stride, xx / stride])
            } else {
                0.0
            }
        });
        let flipped = Tensor4::from_fn([oc, ic, k, k], |[o, c, ky, kx]| w.at([c, o, k - 1 - ky, k - 1 - kx]));
        conv_oracle(&stuffed, &flipped, b, 1, k - 1)
    }

    fn max_abs_diff(a: &Tensor4, b: &Tensor4) -> f32 {
        assert_eq!(a.dims(), b.dims());
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn conv_all_ones() {
        let x = Tensor4::filled([1, 1, 3, 3], 1.0);
        let w = Tensor4::filled([1, 1, 2, 2], 1.0);
        let y = conv2d_forward(&x, &w, &[0.0], 1, 0).unwrap();
        assert_eq!(y.dims(), [1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn conv_identity_kernel() {
        let x = random([1, 1, 5, 7], 3);
        let mut w = Tensor4::zeros([1, 1, 3, 3]);
        w.set([0, 0, 1, 1], 1.0);
        let y = conv2d_forward(&x, &w, &[0.0], 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_nested_loops() {
        let x = random([2, 3, 8, 8], 11);
        let w = random([4, 3, 3, 3], 12);
        let b = [0.1, -0.2, 0.3, 0.0];
        for (stride, pad) in [(1, 1), (1, 0), (2, 1), (2, 0)] {
            let got = conv2d_forward(&x, &w, &b, stride, pad).unwrap();
            let want = conv_oracle(&x, &w, &b, stride, pad);
            assert!(max_abs_diff(&got, &want) <= 1e-5, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn conv_tiles_large_planes() {
        // Forces several column tiles per sample.
        let x = random([1, 4, 70, 90], 5);
        let w = random([3, 4, 3, 3], 6);
        let got = conv2d_forward(&x, &w, &[0.0; 3], 1, 1).unwrap();
        let want = conv_oracle(&x, &w, &[0.0; 3], 1, 1);
        assert!(max_abs_diff(&got, &want) <= 1e-5);
    }

    #[test]
    fn pointwise_conv_matches_oracle() {
        let x = random([2, 5, 6, 4], 21);
        let w = random([3, 5, 1, 1], 22);
        let got = conv2d_forward(&x, &w, &[1.0, 2.0, 3.0], 1, 0).unwrap();
        let want = conv_oracle(&x, &w, &[1.0, 2.0, 3.0], 1, 0);
        assert!(max_abs_diff(&got, &want) <= 1e-5);
    }

    #[test]
    fn conv_channel_mismatch_names_both_shapes() {
        let x = Tensor4::zeros([1, 2, 4, 4]);
        let w = Tensor4::zeros([1, 3, 3, 3]);
        let err = conv2d_forward(&x, &w, &[0.0], 1, 1).unwrap_err().to_string();
        assert!(err.contains("1x2x4x4") && err.contains("1x3x3x3"), "{err}");
    }

    #[test]
    fn tconv_single_tap_spreads() {
        let x = Tensor4::filled([1, 1, 1, 1], 0.7);
        let w = Tensor4::filled([1, 1, 2, 2], 1.0);
        let y = conv_transpose2d_forward(&x, &w, &[0.0], 2).unwrap();
        assert_eq!(y.dims(), [1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn tconv_matches_zero_stuffing_oracle() {
        let x = random([2, 3, 5, 4], 31);
        let w = random([3, 2, 2, 2], 32);
        let b = [0.25, -0.5];
        for stride in [1, 2, 3] {
            let got = conv_transpose2d_forward(&x, &w, &b, stride).unwrap();
            let want = tconv_oracle(&x, &w, &b, stride);
            assert!(max_abs_diff(&got, &want) <= 1e-5, "stride {stride}");
        }
        let w3 = random([3, 2, 3, 3], 33);
        let got = conv_transpose2d_forward(&x, &w3, &b, 2).unwrap();
        assert!(max_abs_diff(&got, &tconv_oracle(&x, &w3, &b, 2)) <= 1e-5);
    }

    #[test]
    fn maxpool_picks_window_max() {
        let x = Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2x2_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn maxpool_ties_go_to_first() {
        let x = Tensor4::filled([1, 2, 4, 4], 0.5);
        let (_, arg) = maxpool2x2_forward(&x).unwrap();
        let dx = maxpool2x2_backward(x.len(), &arg, &[1.0; 8]);
        for (i, &g) in dx.iter().enumerate() {
            let (y, xx) = ((i % 16) / 4, i % 4);
            let expect = if y % 2 == 0 && xx % 2 == 0 { 1.0 } else { 0.0 };
            assert_eq!(g, expect, "index {i}");
        }
    }

    #[test]
    fn maxpool_matches_window_scan() {
        let x = random([1, 2, 8, 8], 41);
        let (y, _) = maxpool2x2_forward(&x).unwrap();
        let want = Tensor4::from_fn([1, 2, 4, 4], |[n, c, yy, xx]| {
            let mut m = f32::NEG_INFINITY;
            for dy in 0..2 {
                for dx in 0..2 {
                    m = m.max(x.at([n, c, 2 * yy + dy, 2 * xx + dx]));
                }
            }
            m
        });
        assert_eq!(y, want);
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        assert!(maxpool2x2_forward(&Tensor4::zeros([1, 1, 3, 4])).is_err());
    }
}
