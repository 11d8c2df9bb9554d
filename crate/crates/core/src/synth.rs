//! Synthetic scenes: colored rectangles and circles on a noisy background.
//!
//! Class 0 is background, 1 rectangle, 2 circle; both shape classes are
//! thing classes. Rectangles use warm hues and circles cool hues, so the
//! semantic task is learnable from color while instance boundaries still
//! have to be resolved at full resolution. Pixel values are multiples of
//! 1/255 so that 8-bit image files reproduce them exactly.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Error, Result};
use crate::instance::InstanceLabeling;
use crate::math;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 3;
pub const THING_CLASSES: [u32; 2] = [1, 2];
pub const RECTANGLE: u32 = 1;
pub const CIRCLE: u32 = 2;

/// Minimum number of background pixels between two shapes.
pub const MIN_GAP: usize = 3;
const PLACEMENT_TRIES: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub max_shapes: usize,
    /// Rectangle side range; circle diameters fall in the same range.
    pub min_side: usize,
    pub max_side: usize,
}

impl SynthConfig {
    pub fn new(height: usize, width: usize, max_shapes: usize) -> Result<Self> {
        if height < 32 || width < 32 {
            return Err(config_err!("synthetic images must be at least 32x32, got {height}x{width}"));
        }
        if max_shapes == 0 {
            return Err(config_err!("max_shapes must be >= 1"));
        }
        let side = height.min(width);
        Ok(Self {
            height,
            width,
            max_shapes,
            min_side: (side / 4).max(8),
            max_side: side / 2,
        })
    }

    /// Overrides the shape size range.
    pub fn with_sides(mut self, min_side: usize, max_side: usize) -> Result<Self> {
        if min_side < 8 || max_side < min_side || max_side > self.height.min(self.width) / 2 {
            return Err(config_err!(
                "shape sides {min_side}..={max_side} invalid for {}x{} images",
                self.height,
                self.width
            ));
        }
        self.min_side = min_side;
        self.max_side = max_side;
        Ok(self)
    }
}

/// One image with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `(1, 3, H, W)` in `[0, 1]`.
    pub image: Tensor,
    /// Class id per pixel, row-major.
    pub semantic: Vec<u32>,
    /// Dense instance ids per pixel (0 = background).
    pub instances: Vec<u32>,
    /// Geometric center `(x, y)` in pixels of every instance, by id.
    pub centers: Vec<(f64, f64)>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn labeling(&self) -> Result<InstanceLabeling> {
        InstanceLabeling::new(1, self.height(), self.width(), self.instances.clone())
    }
}

/// Generates `count` scenes. Scene `i` depends only on `(seed, i)`.
pub fn synth_generate(seed: u64, count: usize, cfg: SynthConfig) -> Result<Vec<Sample>> {
    (0..count).map(|i| synth_sample(seed, i as u64, cfg)).collect()
}

pub fn synth_sample(seed: u64, index: u64, cfg: SynthConfig) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let (h, w) = (cfg.height, cfg.width);
    let n_shapes = rng.random_range(1..=cfg.max_shapes);

    let mut semantic = vec![0u32; h * w];
    let mut instances = vec![0u32; h * w];
    // Pixels within MIN_GAP of an existing shape.
    let mut blocked = vec![false; h * w];
    let mut centers = Vec::new();
    let mut colors = Vec::new();

    let (side_min, side_max) = (cfg.min_side, cfg.max_side);
    for id in 1..=n_shapes as u32 {
        let class = if rng.random::<bool>() { RECTANGLE } else { CIRCLE };
        let mut placed = None;
        for attempt in 0..PLACEMENT_TRIES {
            // The second half of the attempts shrinks the size range.
            let side_max = if attempt < PLACEMENT_TRIES / 2 { side_max } else { side_min };
            let pixels = match class {
                RECTANGLE => {
                    let rh = rng.random_range(side_min..=side_max);
                    let rw = rng.random_range(side_min..=side_max);
                    let top = rng.random_range(0..=h - rh);
                    let left = rng.random_range(0..=w - rw);
                    let px: Vec<usize> = (top..top + rh)
                        .flat_map(|i| (left..left + rw).map(move |j| i * w + j))
                        .collect();
                    let c = (left as f64 + (rw - 1) as f64 / 2.0, top as f64 + (rh - 1) as f64 / 2.0);
                    (px, c)
                }
                _ => {
                    let r = rng.random_range(side_min as f64 / 2.0..(side_max as f64 / 2.0).max(side_min as f64 / 2.0 + 0.5));
                    let reach = math::floor(r) as usize;
                    let cy = rng.random_range(reach..h - reach);
                    let cx = rng.random_range(reach..w - reach);
                    let mut px = Vec::new();
                    for i in cy - reach..=cy + reach {
                        for j in cx - reach..=cx + reach {
                            let (dy, dx) = (i as f64 - cy as f64, j as f64 - cx as f64);
                            if dy * dy + dx * dx <= r * r {
                                px.push(i * w + j);
                            }
                        }
                    }
                    (px, (cx as f64, cy as f64))
                }
            };
            if pixels.0.iter().all(|&p| !blocked[p]) {
                placed = Some(pixels);
                break;
            }
        }
        let Some((pixels, center)) = placed else {
            return Err(Error::Generation(alloc::format!(
                "sample {index}: no room for shape {id} after {PLACEMENT_TRIES} tries"
            )));
        };
        for &p in &pixels {
            semantic[p] = class;
            instances[p] = id;
            let (i, j) = (p / w, p % w);
            for y in i.saturating_sub(MIN_GAP)..(i + MIN_GAP + 1).min(h) {
                for x in j.saturating_sub(MIN_GAP)..(j + MIN_GAP + 1).min(w) {
                    blocked[y * w + x] = true;
                }
            }
        }
        centers.push(center);
        colors.push(shape_color(class, &mut rng));
    }

    let bg = {
        let g = rng.random_range(0.25..0.55);
        [g + rng.random_range(-0.05..0.05), g + rng.random_range(-0.05..0.05), g]
    };
    let mut image = Tensor::zeros([1, 3, h, w]);
    for p in 0..h * w {
        let base = match instances[p] {
            0 => bg,
            id => colors[id as usize - 1],
        };
        for (c, &v) in base.iter().enumerate() {
            let noisy = v + rng.random_range(-0.04..0.04);
            image.set(0, c, p / w, p % w, quantize(noisy));
        }
    }
    Ok(Sample {
        image,
        semantic,
        instances,
        centers,
    })
}

fn shape_color(class: u32, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let hi = rng.random_range(0.75..0.95);
    let mid = rng.random_range(0.2..0.6);
    let lo = rng.random_range(0.0..0.15);
    match class {
        // red-orange-yellow
        RECTANGLE => [hi, mid, lo],
        // blue-cyan-teal
        _ => [lo, mid, hi],
    }
}

fn quantize(v: f64) -> f64 {
    math::round(v.clamp(0.0, 1.0) * 255.0) / 255.0
}

/// Stacks the listed samples into a network batch.
pub struct Batch {
    /// `(B, 3, H, W)`.
    pub images: Tensor,
    /// `B * H * W` class ids.
    pub semantic: Vec<u32>,
    pub instances: InstanceLabeling,
}

pub fn make_batch(samples: &[Sample], indices: &[usize]) -> Result<Batch> {
    let first = indices
        .first()
        .map(|&i| &samples[i])
        .ok_or_else(|| config_err!("empty batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut imgs = Vec::with_capacity(indices.len());
    let mut semantic = Vec::with_capacity(indices.len() * h * w);
    let mut ids = Vec::with_capacity(indices.len() * h * w);
    for &i in indices {
        let s = &samples[i];
        imgs.push(s.image.clone());
        semantic.extend_from_slice(&s.semantic);
        ids.extend_from_slice(&s.instances);
    }
    Ok(Batch {
        images: Tensor::stack(&imgs)?,
        semantic,
        instances: InstanceLabeling::new(indices.len(), h, w, ids)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::centroid_targets;
    use crate::sampler::denormalize;

    fn cfg(max: usize) -> SynthConfig {
        SynthConfig::new(64, 64, max).unwrap().with_sides(8, 20).unwrap()
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_generate(7, 6, cfg(4)).unwrap();
        let b = synth_generate(7, 6, cfg(4)).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(8, 6, cfg(4)).unwrap();
        assert_ne!(a, c);
        // Scene i does not depend on how many were generated.
        assert_eq!(synth_sample(7, 3, cfg(4)).unwrap(), a[3]);
    }

    #[test]
    fn single_shape_scenes() {
        for s in synth_generate(1, 20, cfg(1)).unwrap() {
            assert!(s.labeling().unwrap().count(0) <= 1);
        }
    }

    #[test]
    fn centroids_match_recorded_centers() {
        for s in synth_generate(3, 20, cfg(4)).unwrap() {
            let l = s.labeling().unwrap();
            let t = centroid_targets(&l);
            for (p, &id) in s.instances.iter().enumerate() {
                if id == 0 {
                    continue;
                }
                let (i, j) = (p / 64, p % 64);
                let (cx, cy) = s.centers[id as usize - 1];
                assert!((denormalize(t.centers.at(0, 0, i, j), 64) - cx).abs() <= 0.5);
                assert!((denormalize(t.centers.at(0, 1, i, j), 64) - cy).abs() <= 0.5);
            }
        }
    }

    #[test]
    fn labels_are_consistent() {
        for s in synth_generate(5, 20, cfg(5)).unwrap() {
            for (&c, &id) in s.semantic.iter().zip(&s.instances) {
                assert_eq!(id > 0, THING_CLASSES.contains(&c));
                assert_eq!(id == 0, c == 0);
            }
            for &v in s.image.data() {
                assert!((0.0..=1.0).contains(&v));
                assert_eq!((v * 255.0).round() / 255.0, v);
            }
        }
    }

    #[test]
    fn shapes_keep_their_distance() {
        for s in synth_generate(11, 20, cfg(5)).unwrap() {
            let (h, w) = (64usize, 64usize);
            for p in 0..h * w {
                let a = s.instances[p];
                if a == 0 {
                    continue;
                }
                let (i, j) = (p / w, p % w);
                for y in i.saturating_sub(MIN_GAP)..(i + MIN_GAP + 1).min(h) {
                    for x in j.saturating_sub(MIN_GAP)..(j + MIN_GAP + 1).min(w) {
                        let b = s.instances[y * w + x];
                        assert!(b == 0 || b == a);
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_bad_config_and_reports_crowding() {
        assert!(SynthConfig::new(16, 64, 2).is_err());
        assert!(SynthConfig::new(64, 64, 0).is_err());
        let crowded = synth_generate(0, 10, SynthConfig::new(32, 32, 60).unwrap());
        assert!(matches!(crowded, Err(Error::Generation(_))));
    }

    #[test]
    fn batches_stack_in_order() {
        let s = synth_generate(2, 4, cfg(3)).unwrap();
        let b = make_batch(&s, &[2, 0]).unwrap();
        assert_eq!(b.images.shape(), [2, 3, 64, 64]);
        assert_eq!(b.images.select_batch(0), s[2].image);
        assert_eq!(&b.semantic[4096..], &s[0].semantic[..]);
        assert!(make_batch(&s, &[]).is_err());
    }
}
