//! Instance segmentation by iterated guided sampling.
//!
//! A coordinate map starts as the fixed identity grid (every pixel holds its
//! own normalized position). Each step re-samples the map through the same
//! offset table, so the coordinate stored at an instance center spreads over
//! the pixels whose offsets lead to it. After `t` steps, pixels that share a
//! (rounded) coordinate form one instance; small groups are discarded.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, dim_err, Result};
use crate::igum::{igum_forward, IgumConfig};
use crate::math;
use crate::sampler::{denormalize, normalize, SampleGrid, SampleMode};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-pixel instance ids for a batch of images; 0 is background.
/// Ids of each image are dense: `1..=K` all occur.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceLabeling {
    batch: usize,
    height: usize,
    width: usize,
    ids: Vec<u32>,
}

impl InstanceLabeling {
    pub fn new(batch: usize, height: usize, width: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != batch * height * width {
            return Err(dim_err!(
                "labeling has {} ids for {batch}x{height}x{width}",
                ids.len()
            ));
        }
        let l = Self {
            batch,
            height,
            width,
            ids,
        };
        for b in 0..batch {
            let k = l.count(b);
            let mut seen = vec![false; k];
            for &id in l.image(b) {
                if id > 0 {
                    seen[id as usize - 1] = true;
                }
            }
            if let Some(missing) = seen.iter().position(|s| !s) {
                return Err(config_err!("image {b}: instance id {} is unused", missing + 1));
            }
        }
        Ok(l)
    }

    /// Relabels arbitrary ids densely (first-seen order per image).
    pub fn densify(batch: usize, height: usize, width: usize, raw: &[u32]) -> Result<Self> {
        if raw.len() != batch * height * width {
            return Err(dim_err!("labeling has {} ids for {batch}x{height}x{width}", raw.len()));
        }
        let hw = height * width;
        let mut ids = vec![0; raw.len()];
        for b in 0..batch {
            let mut map = BTreeMap::new();
            for p in 0..hw {
                let r = raw[b * hw + p];
                if r == 0 {
                    continue;
                }
                let next = map.len() as u32 + 1;
                ids[b * hw + p] = *map.entry(r).or_insert(next);
            }
        }
        Self::new(batch, height, width, ids)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// Ids of image `b`, row-major.
    pub fn image(&self, b: usize) -> &[u32] {
        let hw = self.height * self.width;
        &self.ids[b * hw..(b + 1) * hw]
    }

    /// Number of instances `K` in image `b`.
    pub fn count(&self, b: usize) -> usize {
        self.image(b).iter().copied().max().unwrap_or(0) as usize
    }

    /// Pixel area of each instance of image `b` (index `k` is id `k + 1`).
    pub fn areas(&self, b: usize) -> Vec<usize> {
        let mut a = vec![0; self.count(b)];
        for &id in self.image(b) {
            if id > 0 {
                a[id as usize - 1] += 1;
            }
        }
        a
    }

    /// Confidence of each instance of image `b`: its area over the largest area.
    /// Mean pixel position `(x, y)` of each instance of image `b`.
    pub fn centroids(&self, b: usize) -> Vec<(f64, f64)> {
        let mut sums = vec![(0.0f64, 0.0f64, 0usize); self.count(b)];
        for (p, &id) in self.image(b).iter().enumerate() {
            if id > 0 {
                let s = &mut sums[id as usize - 1];
                s.0 += (p % self.width) as f64;
                s.1 += (p / self.width) as f64;
                s.2 += 1;
            }
        }
        sums.iter().map(|&(x, y, n)| (x / n as f64, y / n as f64)).collect()
    }

    pub fn area_confidences(&self, b: usize) -> Vec<f64> {
        let areas = self.areas(b);
        let max = areas.iter().copied().max().unwrap_or(0).max(1) as f64;
        areas.iter().map(|&a| a as f64 / max).collect()
    }
}

/// Regression targets: each labeled pixel holds its instance center.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidTargets {
    /// `(B, 2, H, W)` normalized center coordinates (0 off-mask).
    pub centers: Tensor,
    /// `(B, 1, H, W)`, 1 on instance pixels.
    pub mask: Tensor,
}

/// Mean pixel position of every instance, in normalized coordinates.
pub fn centroid_targets(labels: &InstanceLabeling) -> CentroidTargets {
    let (b, h, w) = (labels.batch, labels.height, labels.width);
    let mut centers = Tensor::zeros([b, 2, h, w]);
    let mut mask = Tensor::zeros([b, 1, h, w]);
    for bi in 0..b {
        let img = labels.image(bi);
        let norm: Vec<(f64, f64)> = labels
            .centroids(bi)
            .into_iter()
            .map(|(x, y)| (normalize(x, w), normalize(y, h)))
            .collect();
        for (p, &id) in img.iter().enumerate() {
            if id > 0 {
                let (cx, cy) = norm[id as usize - 1];
                let (i, j) = (p / w, p % w);
                centers.set(bi, 0, i, j, cx);
                centers.set(bi, 1, i, j, cy);
                mask.set(bi, 0, i, j, 1.0);
            }
        }
    }
    CentroidTargets { centers, mask }
}

/// Applies `t` guided sampling steps that share one offset table to the
/// identity coordinate grid.
///
/// `offsets` is a bounded `(B, 2, H, W)` table. The initial grid is a
/// constant, so gradients reach only the offsets (accumulated over all
/// steps in bilinear mode).
pub fn diffuse(tape: &mut Tape, offsets: Var, t: usize, mode: SampleMode) -> Result<Var> {
    let s = tape.value(offsets)?.shape();
    if s[1] != 2 {
        return Err(dim_err!("offset table needs 2 channels, got {}", s[1]));
    }
    let grid = SampleGrid::identity(s[2], s[3])?;
    let mut map = tape.constant(grid.coords().repeat_batch(s[0])?);
    for _ in 0..t {
        map = tape.sample(map, grid.coords(), Some(offsets), mode)?;
    }
    Ok(map)
}

/// Groups pixels of each image by their rounded pixel coordinate.
///
/// Only pixels where `mask` is true take part (all pixels when `None`).
/// Groups smaller than `area_threshold` become background; survivors are
/// numbered by decreasing area.
pub fn extract_instances(map: &Tensor, area_threshold: usize, mask: Option<&[bool]>) -> Result<InstanceLabeling> {
    let [b, c, h, w] = map.shape();
    if c != 2 {
        return Err(dim_err!("coordinate map needs 2 channels, got {c}"));
    }
    let hw = h * w;
    if let Some(m) = mask {
        if m.len() != b * hw {
            return Err(dim_err!("mask has {} entries for {} pixels", m.len(), b * hw));
        }
    }
    let mut ids = vec![0u32; b * hw];
    for bi in 0..b {
        let mut groups: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
        for p in 0..hw {
            if mask.is_some_and(|m| !m[bi * hw + p]) {
                continue;
            }
            let (i, j) = (p / w, p % w);
            let key = (
                quantize(map.at(bi, 1, i, j), h),
                quantize(map.at(bi, 0, i, j), w),
            );
            groups.entry(key).or_default().push(p);
        }
        let mut kept: Vec<Vec<usize>> = groups
            .into_values()
            .filter(|g| g.len() >= area_threshold.max(1))
            .collect();
        // Stable sort keeps coordinate order among equal areas.
        kept.sort_by(|a, b| b.len().cmp(&a.len()));
        for (k, g) in kept.iter().enumerate() {
            for &p in g {
                ids[bi * hw + p] = k as u32 + 1;
            }
        }
    }
    InstanceLabeling::new(b, h, w, ids)
}

#[inline]
fn quantize(c: f64, size: usize) -> i64 {
    math::floor(denormalize(c, size) + 0.5) as i64
}

/// Upsamples a low-resolution coordinate map with the improved guided
/// upsampling (bilinear while training, nearest at inference).
pub fn upsample_instance_output(tape: &mut Tape, lowres_map: Var, lowres_offsets_raw: Var, cfg: IgumConfig) -> Result<Var> {
    let c = tape.value(lowres_map)?.channels();
    if c != 2 {
        return Err(dim_err!("coordinate map needs 2 channels, got {c}"));
    }
    igum_forward(tape, lowres_map, lowres_offsets_raw, cfg)
}

/// Offset table whose vectors all point at `center` (normalized), useful
/// for constructing ideal fields.
pub fn offsets_toward(h: usize, w: usize, center: (f64, f64)) -> Result<Tensor> {
    let grid = SampleGrid::identity(h, w)?;
    let mut off = Tensor::zeros([1, 2, h, w]);
    for i in 0..h {
        for j in 0..w {
            off.set(0, 0, i, j, center.0 - grid.coords().at(0, 0, i, j));
            off.set(0, 1, i, j, center.1 - grid.coords().at(0, 1, i, j));
        }
    }
    Ok(off)
}

/// Offset table where every pixel steps one pixel (per axis) toward the
/// pixel `center = (row, col)` of its instance; background pixels stay put.
/// A standard construction for checking diffusion convergence.
pub fn unit_step_offsets(labels: &InstanceLabeling, b: usize, centers: &[(usize, usize)]) -> Tensor {
    let (h, w) = (labels.height, labels.width);
    let mut off = Tensor::zeros([1, 2, h, w]);
    let step = |from: usize, to: usize, size: usize| -> f64 {
        if size <= 1 || from == to {
            0.0
        } else if to > from {
            2.0 / (size - 1) as f64
        } else {
            -2.0 / (size - 1) as f64
        }
    };
    for (p, &id) in labels.image(b).iter().enumerate() {
        if id == 0 {
            continue;
        }
        let (i, j) = (p / w, p % w);
        let (ci, cj) = centers[id as usize - 1];
        off.set(0, 0, i, j, step(j, cj, w));
        off.set(0, 1, i, j, step(i, ci, h));
    }
    off
}
