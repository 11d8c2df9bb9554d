//! Guided spatial sampling.
//!
//! Coordinates are normalized so that `-1` and `+1` land on the centers of
//! the first and last pixel of an axis: a coordinate `c` on an axis of size
//! `S` sits at pixel position `(c + 1) / 2 * (S - 1)`. Axes of size 1 map
//! every coordinate to pixel 0. Displaced positions are clamped to the valid
//! pixel range before rounding (nearest) or interpolation (bilinear).
//!
//! A guided sample reads the input at `grid + offsets` for every output
//! pixel, applying the same displacement to all channels. With zero offsets
//! over a [`SampleGrid::regular`] grid it reduces to plain nearest-neighbor
//! or bilinear resizing.

use crate::error::{dim_err, Result};
use crate::math;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Interpolation used when reading the input at a displaced coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SampleMode {
    /// `floor(x + 0.5)` rounding; differentiable w.r.t. values only.
    Nearest,
    /// Bilinear interpolation; differentiable w.r.t. values and offsets.
    Bilinear,
}

// Positions this close to an integer are snapped to it so that identity
// grids reproduce their input exactly despite normalization round-off.
const SNAP: f64 = 1e-9;

/// Pixel position of normalized coordinate `c` on an axis of `size` pixels.
#[inline]
pub fn denormalize(c: f64, size: usize) -> f64 {
    if size <= 1 {
        0.0
    } else {
        (c + 1.0) / 2.0 * (size - 1) as f64
    }
}

/// Normalized coordinate of pixel position `p` on an axis of `size` pixels.
#[inline]
pub fn normalize(p: f64, size: usize) -> f64 {
    if size <= 1 {
        0.0
    } else {
        2.0 * p / (size - 1) as f64 - 1.0
    }
}

/// Base sampling coordinates, shape `(1 or B, 2, H_out, W_out)`.
/// Channel 0 holds x, channel 1 holds y.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid {
    coords: Tensor,
    factor: Option<usize>,
}

impl SampleGrid {
    /// Grid that upsamples a `source_h x source_w` map by `factor`.
    ///
    /// Output pixel `j` of an axis looks at source position
    /// `(j + 0.5) / factor - 0.5`, the convention under which zero offsets
    /// give nearest-neighbor replication and half-pixel-centered bilinear
    /// upsampling. For `factor == 1` it is the identity grid.
    pub fn regular(source_h: usize, source_w: usize, factor: usize) -> Result<Self> {
        if source_h == 0 || source_w == 0 || factor == 0 {
            return Err(crate::error::config_err!(
                "regular grid needs positive sizes, got {source_h}x{source_w} factor {factor}"
            ));
        }
        let (oh, ow) = (source_h * factor, source_w * factor);
        let mut coords = Tensor::zeros([1, 2, oh, ow]);
        let pos = |j: usize| (j as f64 + 0.5) / factor as f64 - 0.5;
        for i in 0..oh {
            let y = normalize(pos(i), source_h);
            for j in 0..ow {
                coords.set(0, 0, i, j, normalize(pos(j), source_w));
                coords.set(0, 1, i, j, y);
            }
        }
        Ok(Self {
            coords,
            factor: Some(factor),
        })
    }

    /// The identity grid of an `h x w` map.
    pub fn identity(h: usize, w: usize) -> Result<Self> {
        Self::regular(h, w, 1)
    }

    /// Wraps arbitrary coordinates of shape `(B, 2, H, W)`.
    pub fn from_coords(coords: Tensor) -> Result<Self> {
        if coords.channels() != 2 {
            return Err(dim_err!("sample grid needs 2 channels, got {}", coords.channels()));
        }
        Ok(Self { coords, factor: None })
    }

    pub fn coords(&self) -> &Tensor {
        &self.coords
    }

    pub fn into_coords(self) -> Tensor {
        self.coords
    }

    /// Upsampling factor when built by [`SampleGrid::regular`].
    pub fn factor(&self) -> Option<usize> {
        self.factor
    }

    pub fn out_size(&self) -> (usize, usize) {
        (self.coords.height(), self.coords.width())
    }
}

#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
    /// d(pixel position) / d(normalized coordinate); 0 where clamped.
    slope: f64,
}

#[inline]
fn tap(c: f64, size: usize, mode: SampleMode) -> Tap {
    if size <= 1 {
        return Tap {
            lo: 0,
            hi: 0,
            frac: 0.0,
            slope: 0.0,
        };
    }
    let max = (size - 1) as f64;
    let raw = denormalize(c, size);
    let (x, slope) = if raw < 0.0 {
        (0.0, 0.0)
    } else if raw > max {
        (max, 0.0)
    } else {
        (raw, 0.5 * max)
    };
    // `x >= 0` from here on, so truncating casts are floors.
    match mode {
        SampleMode::Nearest => {
            let i = ((x + 0.5) as usize).min(size - 1);
            Tap {
                lo: i,
                hi: i,
                frac: 0.0,
                slope,
            }
        }
        SampleMode::Bilinear => {
            let r = (x + 0.5) as usize as f64;
            let x = if (x - r).abs() < SNAP { r } else { x };
            let lo = (x as usize).min(size - 2);
            Tap {
                lo,
                hi: lo + 1,
                frac: x - lo as f64,
                slope,
            }
        }
    }
}

struct Geometry {
    batch: usize,
    channels: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    grid_batched: bool,
}

fn geometry(input: &Tensor, grid: &Tensor, offsets: Option<&Tensor>) -> Result<Geometry> {
    let [b, c, h, w] = input.shape();
    let [gb, gc, oh, ow] = grid.shape();
    if gc != 2 {
        return Err(dim_err!("sample grid needs 2 channels, got {gc}"));
    }
    if gb != 1 && gb != b {
        return Err(dim_err!("grid batch {gb} incompatible with input batch {b}"));
    }
    if let Some(o) = offsets {
        if o.shape() != [b, 2, oh, ow] {
            return Err(dim_err!(
                "offset table shape {:?} does not match grid {:?} with batch {b}",
                o.shape(),
                grid.shape()
            ));
        }
    }
    if h == 0 || w == 0 {
        return Err(dim_err!("cannot sample from an empty map {:?}", input.shape()));
    }
    Ok(Geometry {
        batch: b,
        channels: c,
        in_h: h,
        in_w: w,
        out_h: oh,
        out_w: ow,
        grid_batched: gb == b && gb != 1,
    })
}

fn taps(
    g: &Geometry,
    grid: &Tensor,
    offsets: Option<&Tensor>,
    mode: SampleMode,
    b: usize,
    i: usize,
    j: usize,
) -> (Tap, Tap) {
    let gb = if g.grid_batched { b } else { 0 };
    let mut cx = grid.at(gb, 0, i, j);
    let mut cy = grid.at(gb, 1, i, j);
    if let Some(o) = offsets {
        cx += o.at(b, 0, i, j);
        cy += o.at(b, 1, i, j);
    }
    (tap(cx, g.in_w, mode), tap(cy, g.in_h, mode))
}

/// Samples `input` (`B x C x H x W`) at `grid + offsets`.
///
/// `grid` has batch 1 (shared) or `B`; `offsets`, when given, must be
/// `B x 2 x H_out x W_out`.
pub fn guided_sample(input: &Tensor, grid: &Tensor, offsets: Option<&Tensor>, mode: SampleMode) -> Result<Tensor> {
    let g = geometry(input, grid, offsets)?;
    let mut out = Tensor::zeros([g.batch, g.channels, g.out_h, g.out_w]);
    let x = input.data();
    let plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let o = out.data_mut();
    for b in 0..g.batch {
        for i in 0..g.out_h {
            for j in 0..g.out_w {
                let (tx, ty) = taps(&g, grid, offsets, mode, b, i, j);
                let dst = b * g.channels * out_plane + i * g.out_w + j;
                let src = b * g.channels * plane;
                match mode {
                    SampleMode::Nearest => {
                        let at = ty.lo * g.in_w + tx.lo;
                        for c in 0..g.channels {
                            o[dst + c * out_plane] = x[src + c * plane + at];
                        }
                    }
                    SampleMode::Bilinear => {
                        let (fx, fy) = (tx.frac, ty.frac);
                        let (a, bb) = (ty.lo * g.in_w, ty.hi * g.in_w);
                        for c in 0..g.channels {
                            let p = &x[src + c * plane..src + (c + 1) * plane];
                            let top = (1.0 - fx) * p[a + tx.lo] + fx * p[a + tx.hi];
                            let bottom = (1.0 - fx) * p[bb + tx.lo] + fx * p[bb + tx.hi];
                            o[dst + c * out_plane] = (1.0 - fy) * top + fy * bottom;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`guided_sample`] w.r.t. the input and the offsets.
/// Nearest sampling yields a zero offset gradient.
pub(crate) fn guided_sample_backward(
    input: &Tensor,
    grid: &Tensor,
    offsets: Option<&Tensor>,
    mode: SampleMode,
    grad_out: &Tensor,
    need_input: bool,
    need_offsets: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let g = match geometry(input, grid, offsets) {
        Ok(g) => g,
        Err(_) => unreachable!("geometry validated in forward"),
    };
    let mut d_in = need_input.then(|| Tensor::zeros(input.shape()));
    let mut d_off = match (need_offsets, offsets) {
        (true, Some(o)) => Some(Tensor::zeros(o.shape())),
        _ => None,
    };
    let x = input.data();
    let gy = grad_out.data();
    let plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    for b in 0..g.batch {
        for i in 0..g.out_h {
            for j in 0..g.out_w {
                let (tx, ty) = taps(&g, grid, offsets, mode, b, i, j);
                let go = b * g.channels * out_plane + i * g.out_w + j;
                let src = b * g.channels * plane;
                match mode {
                    SampleMode::Nearest => {
                        if let Some(d) = d_in.as_mut() {
                            let d = d.data_mut();
                            let at = ty.lo * g.in_w + tx.lo;
                            for c in 0..g.channels {
                                d[src + c * plane + at] += gy[go + c * out_plane];
                            }
                        }
                    }
                    SampleMode::Bilinear => {
                        let (fx, fy) = (tx.frac, ty.frac);
                        let (a, bb) = (ty.lo * g.in_w, ty.hi * g.in_w);
                        let (mut sx, mut sy) = (0.0, 0.0);
                        for c in 0..g.channels {
                            let gv = gy[go + c * out_plane];
                            if gv == 0.0 {
                                continue;
                            }
                            let base = src + c * plane;
                            let p = &x[base..base + plane];
                            let (v00, v01) = (p[a + tx.lo], p[a + tx.hi]);
                            let (v10, v11) = (p[bb + tx.lo], p[bb + tx.hi]);
                            sx += gv * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                            sy += gv * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                            if let Some(d) = d_in.as_mut() {
                                let d = &mut d.data_mut()[base..base + plane];
                                d[a + tx.lo] += gv * (1.0 - fy) * (1.0 - fx);
                                d[a + tx.hi] += gv * (1.0 - fy) * fx;
                                d[bb + tx.lo] += gv * fy * (1.0 - fx);
                                d[bb + tx.hi] += gv * fy * fx;
                            }
                        }
                        if let Some(d) = d_off.as_mut() {
                            let ox = d.index(b, 0, i, j);
                            let oy = d.index(b, 1, i, j);
                            let d = d.data_mut();
                            d[ox] += sx * tx.slope;
                            d[oy] += sy * ty.slope;
                        }
                    }
                }
            }
        }
    }
    (d_in, d_off)
}

/// Guided sampling with nearest-neighbor rounding (value gradient only).
pub fn guided_sample_nearest(tape: &mut Tape, input: Var, grid: &SampleGrid, offsets: Option<Var>) -> Result<Var> {
    tape.sample(input, grid.coords(), offsets, SampleMode::Nearest)
}

/// Guided sampling with bilinear interpolation (gradients to values and offsets).
pub fn guided_sample_bilinear(tape: &mut Tape, input: Var, grid: &SampleGrid, offsets: Option<Var>) -> Result<Var> {
    tape.sample(input, grid.coords(), offsets, SampleMode::Bilinear)
}

/// Squashes a raw two-channel prediction into a bounded offset table with `tanh`.
pub fn bound_offsets(tape: &mut Tape, raw: Var) -> Result<Var> {
    let c = tape.value(raw)?.channels();
    if c != 2 {
        return Err(dim_err!("offset table needs 2 channels, got {c}"));
    }
    tape.tanh(raw)
}

/// Plain resize of `input` by `factor` (no offsets), value level.
pub fn resize(input: &Tensor, factor: usize, mode: SampleMode) -> Result<Tensor> {
    let grid = SampleGrid::regular(input.height(), input.width(), factor)?;
    guided_sample(input, grid.coords(), None, mode)
}

/// Nearest-neighbor upsampling by pixel replication, used as an
/// independent reference for the zero-offset identities.
pub fn replicate_upsample(input: &Tensor, factor: usize) -> Tensor {
    let [b, c, h, w] = input.shape();
    let mut out = Tensor::zeros([b, c, h * factor, w * factor]);
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h * factor {
                for j in 0..w * factor {
                    out.set(bi, ci, i, j, input.at(bi, ci, i / factor, j / factor));
                }
            }
        }
    }
    out
}

/// Half-pixel-centered bilinear upsampling with edge clamping, written
/// directly in pixel space as a reference for the sampler.
pub fn bilinear_upsample(input: &Tensor, factor: usize) -> Tensor {
    let [b, c, h, w] = input.shape();
    let mut out = Tensor::zeros([b, c, h * factor, w * factor]);
    let axis = |j: usize, size: usize| -> (usize, usize, f64) {
        let p = ((j as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (size - 1) as f64);
        let lo = math::floor(p) as usize;
        let hi = (lo + 1).min(size - 1);
        (lo, hi, p - lo as f64)
    };
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h * factor {
                let (y0, y1, fy) = axis(i, h);
                for j in 0..w * factor {
                    let (x0, x1, fx) = axis(j, w);
                    let v = (1.0 - fy) * ((1.0 - fx) * input.at(bi, ci, y0, x0) + fx * input.at(bi, ci, y0, x1))
                        + fy * ((1.0 - fx) * input.at(bi, ci, y1, x0) + fx * input.at(bi, ci, y1, x1));
                    out.set(bi, ci, i, j, v);
                }
            }
        }
    }
    out
}

/// Zero offset table matching a grid for a batch of `batch`.
pub fn zero_offsets(batch: usize, grid: &SampleGrid) -> Tensor {
    let (h, w) = grid.out_size();
    Tensor::zeros([batch, 2, h, w])
}
