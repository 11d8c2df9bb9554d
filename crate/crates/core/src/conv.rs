//! 2-D cross-correlation kernels (direct loops and im2col + GEMM).
//!
//! These are the value-level kernels; [`crate::Tape::conv2d`] records them
//! for differentiation.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, dim_err, Result};
use crate::gemm::{gemm, Op};
use crate::tensor::Tensor;

/// Stride, dilation and zero padding of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    /// `(vertical, horizontal)`
    pub dilation: (usize, usize),
    /// `(vertical, horizontal)`
    pub padding: (usize, usize),
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: (1, 1),
            padding: (0, 0),
        }
    }
}

impl Conv2dParams {
    /// Stride 1 with "same" padding for a `kh x kw` kernel at the given dilation.
    pub fn same(kh: usize, kw: usize, dilation: (usize, usize)) -> Self {
        Self {
            stride: 1,
            dilation,
            padding: (dilation.0 * (kh / 2), dilation.1 * (kw / 2)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvAlgorithm {
    /// Straightforward nested loops.
    Direct,
    /// Patch unfolding followed by a matrix product.
    #[default]
    Im2col,
}

/// Validated geometry of one convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub p: Conv2dParams,
}

impl ConvGeometry {
    pub fn new(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, p: Conv2dParams) -> Result<Self> {
        let [batch, in_c, in_h, in_w] = input.shape();
        let [out_c, w_in_c, kh, kw] = weight.shape();
        if w_in_c != in_c {
            return Err(dim_err!(
                "conv2d: weight expects {w_in_c} input channels, input has {in_c}"
            ));
        }
        if let Some(b) = bias {
            if b.len() != out_c {
                return Err(dim_err!("conv2d: bias length {} != {out_c}", b.len()));
            }
        }
        if p.stride == 0 || p.dilation.0 == 0 || p.dilation.1 == 0 {
            return Err(config_err!("conv2d: stride and dilation must be >= 1"));
        }
        let out_h = out_extent(in_h, kh, p.stride, p.dilation.0, p.padding.0);
        let out_w = out_extent(in_w, kw, p.stride, p.dilation.1, p.padding.1);
        match (out_h, out_w) {
            (Some(out_h), Some(out_w)) if out_h > 0 && out_w > 0 && kh > 0 && kw > 0 => Ok(Self {
                batch,
                in_c,
                in_h,
                in_w,
                out_c,
                kh,
                kw,
                out_h,
                out_w,
                p,
            }),
            _ => Err(config_err!(
                "conv2d: non-positive output size for input {in_h}x{in_w}, kernel {kh}x{kw}, {p:?}"
            )),
        }
    }

    fn k(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.p.stride == 1 && self.p.padding == (0, 0)
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_c, self.out_h, self.out_w]
    }
}

fn out_extent(size: usize, k: usize, stride: usize, dilation: usize, pad: usize) -> Option<usize> {
    let span = dilation * (k.max(1) - 1) + 1;
    let padded = size + 2 * pad;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// Cross-correlation of `input` (`B x Ci x H x W`) with `weight`
/// (`Co x Ci x kh x kw`) plus an optional per-output-channel bias.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    p: Conv2dParams,
    algo: ConvAlgorithm,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input, weight, bias, p)?;
    Ok(match algo {
        ConvAlgorithm::Direct => forward_direct(&g, input, weight, bias),
        ConvAlgorithm::Im2col => forward_im2col(&g, input, weight, bias),
    })
}

pub(crate) fn forward_direct(g: &ConvGeometry, input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let mut out = Tensor::zeros(g.out_shape());
    let x = input.data();
    let w = weight.data();
    let (s, (dh, dw), (ph, pw)) = (g.p.stride, g.p.dilation, g.p.padding);
    let o = out.data_mut();
    for b in 0..g.batch {
        for co in 0..g.out_c {
            let b0 = bias.map_or(0.0, |t| t.data()[co]);
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let mut acc = b0;
                    for ci in 0..g.in_c {
                        for ki in 0..g.kh {
                            let ih = (oh * s + ki * dh) as isize - ph as isize;
                            if ih < 0 || ih >= g.in_h as isize {
                                continue;
                            }
                            for kj in 0..g.kw {
                                let iw = (ow * s + kj * dw) as isize - pw as isize;
                                if iw < 0 || iw >= g.in_w as isize {
                                    continue;
                                }
                                let xi = ((b * g.in_c + ci) * g.in_h + ih as usize) * g.in_w + iw as usize;
                                let wi = ((co * g.in_c + ci) * g.kh + ki) * g.kw + kj;
                                acc += x[xi] * w[wi];
                            }
                        }
                    }
                    o[((b * g.out_c + co) * g.out_h + oh) * g.out_w + ow] = acc;
                }
            }
        }
    }
    out
}

/// Unfolds one image into columns `offset..offset + pixels` of a
/// `k x stride` patch matrix.
fn im2col(g: &ConvGeometry, x: &[f64], col: &mut [f64], stride: usize, offset: usize) {
    let (s, (dh, dw), (ph, pw)) = (g.p.stride, g.p.dilation, g.p.padding);
    let npix = g.pixels();
    for ci in 0..g.in_c {
        let plane = &x[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * stride + offset..][..npix];
                for oh in 0..g.out_h {
                    let ih = (oh * s + ki * dh) as isize - ph as isize;
                    let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    if s == 1 {
                        // Contiguous run of valid columns.
                        let shift = (kj * dw) as isize - pw as isize;
                        let lo = (-shift).clamp(0, g.out_w as isize) as usize;
                        let hi = (g.in_w as isize - shift).clamp(lo as isize, g.out_w as isize) as usize;
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        if hi > lo {
                            let from = (lo as isize + shift) as usize;
                            line[lo..hi].copy_from_slice(&src[from..from + hi - lo]);
                        }
                        continue;
                    }
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * s + kj * dw) as isize - pw as isize;
                        *v = if iw < 0 || iw >= g.in_w as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch columns back into an image.
fn col2im(g: &ConvGeometry, col: &[f64], stride: usize, offset: usize, dx: &mut [f64]) {
    let (s, (dh, dw), (ph, pw)) = (g.p.stride, g.p.dilation, g.p.padding);
    let npix = g.pixels();
    for ci in 0..g.in_c {
        let plane = &mut dx[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[row * stride + offset..][..npix];
                for oh in 0..g.out_h {
                    let ih = (oh * s + ki * dh) as isize - ph as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    for ow in 0..g.out_w {
                        let iw = (ow * s + kj * dw) as isize - pw as isize;
                        if iw >= 0 && iw < g.in_w as isize {
                            dst[iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Patch matrix of the whole batch, `k x (batch * pixels)`.
fn batch_columns(g: &ConvGeometry, input: &Tensor) -> Vec<f64> {
    let (k, npix) = (g.k(), g.pixels());
    let stride = g.batch * npix;
    let in_len = g.in_c * g.in_h * g.in_w;
    let mut col = vec![0.0; k * stride];
    for b in 0..g.batch {
        let x = &input.data()[b * in_len..(b + 1) * in_len];
        if g.is_pointwise() {
            for ci in 0..g.in_c {
                col[ci * stride + b * npix..][..npix].copy_from_slice(&x[ci * npix..(ci + 1) * npix]);
            }
        } else {
            im2col(g, x, &mut col, stride, b * npix);
        }
    }
    col
}

/// `(B, C, pixels)` to `(C, B * pixels)`.
fn to_channel_major(data: &[f64], batch: usize, c: usize, npix: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for b in 0..batch {
        for ci in 0..c {
            out[ci * batch * npix + b * npix..][..npix].copy_from_slice(&data[(b * c + ci) * npix..][..npix]);
        }
    }
    out
}

pub(crate) fn forward_im2col(g: &ConvGeometry, input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let (k, npix) = (g.k(), g.pixels());
    let n = g.batch * npix;
    let col = batch_columns(g, input);
    let mut y = vec![0.0; g.out_c * n];
    gemm(g.out_c, k, n, weight.data(), Op::N, &col, Op::N, 0.0, &mut y);
    let mut out = Tensor::zeros(g.out_shape());
    let od = out.data_mut();
    for b in 0..g.batch {
        for co in 0..g.out_c {
            let dst = &mut od[(b * g.out_c + co) * npix..][..npix];
            dst.copy_from_slice(&y[co * n + b * npix..][..npix]);
            if let Some(bias) = bias {
                let bv = bias.data()[co];
                for v in dst {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Gradients of a convolution with respect to its input, weight and bias.
pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub(crate) fn backward(
    g: &ConvGeometry,
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    need: (bool, bool, bool),
) -> ConvGrads {
    let (need_input, need_weight, need_bias) = need;
    let (k, npix) = (g.k(), g.pixels());
    let n = g.batch * npix;
    let in_len = g.in_c * g.in_h * g.in_w;
    let dy = to_channel_major(grad_out.data(), g.batch, g.out_c, npix);
    let db = need_bias.then(|| {
        let sums: Vec<f64> = dy.chunks(n).map(|r| r.iter().sum()).collect();
        Tensor::vector(&sums)
    });
    let dw = need_weight.then(|| {
        let col = batch_columns(g, input);
        let mut dw = Tensor::zeros(weight.shape());
        gemm(g.out_c, n, k, &dy, Op::N, &col, Op::T, 0.0, dw.data_mut());
        dw
    });
    let dx = need_input.then(|| {
        let mut dcol = vec![0.0; k * n];
        gemm(k, g.out_c, n, weight.data(), Op::T, &dy, Op::N, 0.0, &mut dcol);
        let mut dx = Tensor::zeros(input.shape());
        for b in 0..g.batch {
            let dxb = &mut dx.data_mut()[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                for ci in 0..g.in_c {
                    dxb[ci * npix..(ci + 1) * npix].copy_from_slice(&dcol[ci * n + b * npix..][..npix]);
                }
            } else {
                col2im(g, &dcol, n, b * npix, dxb);
            }
        }
        dx
    });
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Transposed convolution (`weight` is `Ci x Co x kh x kw`), forward only.
///
/// Used by the dense reference decoder in benchmarks.
pub fn conv_transpose2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    let [batch, in_c, in_h, in_w] = input.shape();
    let [w_in_c, out_c, kh, kw] = weight.shape();
    if w_in_c != in_c {
        return Err(dim_err!(
            "conv_transpose2d: weight expects {w_in_c} input channels, input has {in_c}"
        ));
    }
    if stride == 0 {
        return Err(config_err!("conv_transpose2d: stride must be >= 1"));
    }
    if let Some(b) = bias {
        if b.len() != out_c {
            return Err(dim_err!("conv_transpose2d: bias length {} != {out_c}", b.len()));
        }
    }
    let out_h = (in_h - 1) * stride + kh;
    let out_w = (in_w - 1) * stride + kw;
    let mut out = Tensor::zeros([batch, out_c, out_h, out_w]);
    // Per batch: cols[Co*kh*kw, H*W] = W^T[Co*kh*kw, Ci] x X[Ci, H*W], then scatter.
    let k = out_c * kh * kw;
    let npix = in_h * in_w;
    let mut cols = vec![0.0; k * npix];
    for b in 0..batch {
        let x = input.item_slice(b);
        gemm(k, in_c, npix, weight.data(), Op::T, x, Op::N, 0.0, &mut cols);
        let y = &mut out.data_mut()[b * out_c * out_h * out_w..(b + 1) * out_c * out_h * out_w];
        for co in 0..out_c {
            let plane = &mut y[co * out_h * out_w..(co + 1) * out_h * out_w];
            if let Some(bias) = bias {
                plane.fill(bias.data()[co]);
            }
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = &cols[((co * kh + ki) * kw + kj) * npix..][..npix];
                    for ih in 0..in_h {
                        let oy = ih * stride + ki;
                        for iw in 0..in_w {
                            plane[oy * out_w + iw * stride + kj] += row[ih * in_w + iw];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // Independent six-loop reference with explicit padding.
    fn naive(x: &Tensor, w: &Tensor, p: Conv2dParams) -> Tensor {
        let [n, ci, h, wd] = x.shape();
        let [co, _, kh, kw] = w.shape();
        let oh = (h + 2 * p.padding.0 - p.dilation.0 * (kh - 1) - 1) / p.stride + 1;
        let ow = (wd + 2 * p.padding.1 - p.dilation.1 * (kw - 1) - 1) / p.stride + 1;
        let mut out = Tensor::zeros([n, co, oh, ow]);
        for b in 0..n {
            for o in 0..co {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = 0.0;
                        for c in 0..ci {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (y * p.stride + i * p.dilation.0) as i64 - p.padding.0 as i64;
                                    let ix = (xx * p.stride + j * p.dilation.1) as i64 - p.padding.1 as i64;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.at(b, c, iy as usize, ix as usize) * w.at(o, c, i, j);
                                    }
                                }
                            }
                        }
                        out.set(b, o, y, xx, s);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::rand_normal([2, 1, 5, 4], 1.0, &mut rng);
        let w = Tensor::ones([1, 1, 1, 1]);
        for algo in [ConvAlgorithm::Direct, ConvAlgorithm::Im2col] {
            let y = conv2d(&x, &w, None, Conv2dParams::default(), algo).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn hand_cross_correlation() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = conv2d(&x, &w, None, Conv2dParams::default(), ConvAlgorithm::Im2col).unwrap();
        assert_eq!(y.shape(), [1, 1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn bias_only() {
        let x = Tensor::zeros([1, 2, 3, 3]);
        let w = Tensor::ones([3, 2, 3, 3]);
        let b = Tensor::full([1, 3, 1, 1], 0.5);
        let y = conv2d(&x, &w, Some(&b), Conv2dParams::same(3, 3, (1, 1)), ConvAlgorithm::Im2col).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn agrees_with_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shapes = [(1, 1), (3, 1), (1, 3), (3, 3)];
        for &(kh, kw) in &shapes {
            for &(stride, dil) in &[(1, (1, 1)), (2, (1, 1)), (1, (2, 3))] {
                let p = Conv2dParams {
                    stride,
                    dilation: dil,
                    padding: (dil.0 * (kh / 2), dil.1 * (kw / 2)),
                };
                let x = Tensor::rand_normal([2, 3, 8, 8], 1.0, &mut rng);
                let w = Tensor::rand_normal([4, 3, kh, kw], 1.0, &mut rng);
                let r = naive(&x, &w, p);
                let d = conv2d(&x, &w, None, p, ConvAlgorithm::Direct).unwrap();
                let i = conv2d(&x, &w, None, p, ConvAlgorithm::Im2col).unwrap();
                assert!(d.max_abs_diff(&r).unwrap() < 1e-12);
                assert!(i.max_abs_diff(&d).unwrap() < 1e-10);
            }
        }
    }

    #[test]
    fn shape_and_config_errors() {
        let x = Tensor::zeros([1, 2, 4, 4]);
        let w = Tensor::zeros([1, 3, 3, 3]);
        assert!(matches!(
            conv2d(&x, &w, None, Conv2dParams::default(), ConvAlgorithm::Direct),
            Err(crate::Error::Dimension(_))
        ));
        let w = Tensor::zeros([1, 2, 5, 5]);
        assert!(matches!(
            conv2d(&x, &w, None, Conv2dParams::default(), ConvAlgorithm::Direct),
            Err(crate::Error::Config(_))
        ));
        let p = Conv2dParams {
            stride: 0,
            ..Default::default()
        };
        assert!(matches!(
            conv2d(&x, &Tensor::zeros([1, 2, 1, 1]), None, p, ConvAlgorithm::Direct),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn transposed_conv_matches_scatter_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::rand_normal([1, 2, 3, 3], 1.0, &mut rng);
        let w = Tensor::rand_normal([2, 3, 2, 2], 1.0, &mut rng);
        let y = conv_transpose2d(&x, &w, None, 2).unwrap();
        assert_eq!(y.shape(), [1, 3, 6, 6]);
        let mut r = Tensor::zeros([1, 3, 6, 6]);
        for ci in 0..2 {
            for co in 0..3 {
                for ih in 0..3 {
                    for iw in 0..3 {
                        for ki in 0..2 {
                            for kj in 0..2 {
                                let (oy, ox) = (ih * 2 + ki, iw * 2 + kj);
                                let v = r.at(0, co, oy, ox) + x.at(0, ci, ih, iw) * w.at(ci, co, ki, kj);
                                r.set(0, co, oy, ox, v);
                            }
                        }
                    }
                }
            }
        }
        assert!(y.max_abs_diff(&r).unwrap() < 1e-12);
    }
}
