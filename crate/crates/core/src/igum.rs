//! Improved guided upsampling.
//!
//! Instead of predicting a full-resolution offset table, the network
//! predicts one 2-D offset per low-resolution pixel. The table is bounded
//! with `tanh`, bilinearly interpolated to the target resolution and used to
//! guide-sample the class map. The number of predicted offsets is `2 * N * M`
//! whatever the number of classes, so the module replaces a decoder.

use alloc::vec::Vec;

use crate::error::{config_err, dim_err, Result};
use crate::model::argmax_classes;
use crate::sampler::{bound_offsets, SampleGrid, SampleMode};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Upsampling factor and interpolation of the final guided sample.
/// Offset interpolation is always bilinear.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IgumConfig {
    pub factor: usize,
    pub mode: SampleMode,
}

impl IgumConfig {
    pub fn new(factor: usize, mode: SampleMode) -> Result<Self> {
        if factor == 0 {
            return Err(config_err!("upsample factor must be >= 1"));
        }
        Ok(Self { factor, mode })
    }
}

/// Bilinearly interpolates a bounded `(B, 2, N, M)` offset table to
/// `(B, 2, fN, fM)`. Differentiable back to the low-resolution table.
pub fn upsample_offsets(tape: &mut Tape, lowres: Var, factor: usize) -> Result<Var> {
    let v = tape.value(lowres)?;
    if v.channels() != 2 {
        return Err(dim_err!("offset table needs 2 channels, got {}", v.channels()));
    }
    if factor == 1 {
        return Ok(lowres);
    }
    let grid = SampleGrid::regular(v.height(), v.width(), factor)?;
    tape.sample(lowres, grid.coords(), None, SampleMode::Bilinear)
}

/// Bound, interpolate and apply low-resolution offsets to `logits`.
///
/// `logits` is `(B, C, N, M)` and `raw_offsets` `(B, 2, N, M)`; the result
/// is `(B, C, fN, fM)`.
pub fn igum_forward(tape: &mut Tape, logits: Var, raw_offsets: Var, cfg: IgumConfig) -> Result<Var> {
    let (ls, os) = (tape.value(logits)?.shape(), tape.value(raw_offsets)?.shape());
    if os[1] != 2 {
        return Err(dim_err!("offset table needs 2 channels, got {}", os[1]));
    }
    if ls[0] != os[0] || ls[2..] != os[2..] {
        return Err(dim_err!("logits {:?} and offsets {:?} do not share batch and spatial dims", ls, os));
    }
    if cfg.factor == 0 {
        return Err(config_err!("upsample factor must be >= 1"));
    }
    let bounded = bound_offsets(tape, raw_offsets)?;
    let table = upsample_offsets(tape, bounded, cfg.factor)?;
    let grid = SampleGrid::regular(ls[2], ls[3], cfg.factor)?;
    tape.sample(logits, grid.coords(), Some(table), cfg.mode)
}

/// Full-resolution class labels of nearest-mode iGUM, `B * fN * fM` in
/// row-major order. Nearest sampling commutes with the per-pixel argmax, so
/// only a one-channel label map is sampled and the cost does not grow with
/// the number of classes past the low-resolution argmax.
pub fn igum_labels(logits: &Tensor, raw_offsets: &Tensor, factor: usize) -> Result<Vec<u32>> {
    let [b, _, n, m] = logits.shape();
    if raw_offsets.shape() != [b, 2, n, m] {
        return Err(dim_err!("offsets {:?} do not match logits {:?}", raw_offsets.shape(), logits.shape()));
    }
    if factor == 0 {
        return Err(config_err!("upsample factor must be >= 1"));
    }
    let labels: Vec<f64> = argmax_classes(logits).into_iter().map(f64::from).collect();
    let mut tape = Tape::new();
    let raw = tape.constant(raw_offsets.clone());
    let bounded = bound_offsets(&mut tape, raw)?;
    let table = upsample_offsets(&mut tape, bounded, factor)?;
    let labels = tape.constant(Tensor::from_vec([b, 1, n, m], labels)?);
    let grid = SampleGrid::regular(n, m, factor)?;
    let up = tape.sample(labels, grid.coords(), Some(table), SampleMode::Nearest)?;
    Ok(tape.value(up)?.data().iter().map(|&v| v as u32).collect())
}

/// Plain upsampling of `logits` with no offsets; the fixed-grid baseline.
pub fn fixed_upsample(tape: &mut Tape, logits: Var, cfg: IgumConfig) -> Result<Var> {
    let s = tape.value(logits)?.shape();
    let grid = SampleGrid::regular(s[2], s[3], cfg.factor)?;
    tape.sample(logits, grid.coords(), None, cfg.mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{bilinear_upsample, replicate_upsample};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_table_stays_constant() {
        let mut t = Tape::new();
        let c = t.leaf(Tensor::full([2, 2, 3, 4], 0.37));
        let up = upsample_offsets(&mut t, c, 4).unwrap();
        let v = t.value(up).unwrap();
        assert_eq!(v.shape(), [2, 2, 12, 16]);
        assert!(v.data().iter().all(|&x| (x - 0.37).abs() < 1e-15));
        assert_eq!(upsample_offsets(&mut t, c, 1).unwrap(), c);
    }

    #[test]
    fn interpolated_row() {
        let mut t = Tape::new();
        let table = Tensor::from_vec([1, 2, 1, 2], vec![0.0, 0.5, 0.0, 0.5]).unwrap();
        let c = t.leaf(table);
        let up = upsample_offsets(&mut t, c, 2).unwrap();
        let v = t.value(up).unwrap();
        for (a, b) in v.plane(0, 0).iter().zip([0.0, 0.125, 0.375, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_offsets_reduce_to_plain_upsampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = Tensor::rand_normal([2, 5, 3, 4], 1.0, &mut rng);
        for (mode, f) in [(SampleMode::Nearest, 8), (SampleMode::Bilinear, 8), (SampleMode::Nearest, 3)] {
            let mut t = Tape::new();
            let l = t.leaf(logits.clone());
            let o = t.leaf(Tensor::zeros([2, 2, 3, 4]));
            let out = igum_forward(&mut t, l, o, IgumConfig::new(f, mode).unwrap()).unwrap();
            let v = t.value(out).unwrap();
            match mode {
                SampleMode::Nearest => assert_eq!(v, &replicate_upsample(&logits, f)),
                SampleMode::Bilinear => assert!(v.max_abs_diff(&bilinear_upsample(&logits, f)).unwrap() < 1e-12),
            }
        }
    }

    #[test]
    fn output_shape_contract() {
        let mut t = Tape::new();
        let l = t.leaf(Tensor::zeros([1, 19, 3, 5]));
        let o = t.leaf(Tensor::zeros([1, 2, 3, 5]));
        let out = igum_forward(&mut t, l, o, IgumConfig::new(8, SampleMode::Bilinear).unwrap()).unwrap();
        assert_eq!(t.value(out).unwrap().shape(), [1, 19, 24, 40]);
        let bad = t.leaf(Tensor::zeros([1, 2, 3, 4]));
        assert!(matches!(
            igum_forward(&mut t, l, bad, IgumConfig::new(8, SampleMode::Bilinear).unwrap()),
            Err(crate::Error::Dimension(_))
        ));
    }

    fn transition(t: &Tape, v: Var) -> usize {
        // First output column where class 1 wins.
        let out = t.value(v).unwrap();
        (0..out.width())
            .find(|&j| out.at(0, 1, 0, j) > out.at(0, 0, 0, j))
            .unwrap()
    }

    #[test]
    fn toy_boundary_moves_with_offsets() {
        // Two low-res pixels A (left) and B (right) over two classes.
        let logits = Tensor::from_vec([1, 2, 1, 2], vec![0.8, 0.2, 0.2, 0.8]).unwrap();
        let cfg = IgumConfig::new(4, SampleMode::Nearest).unwrap();
        let run = |dx: f64| {
            let mut t = Tape::new();
            let l = t.leaf(logits.clone());
            // raw offsets are passed through tanh; atanh keeps the displacement exact.
            let raw = libm::atanh(dx);
            let o = t.leaf(Tensor::from_vec([1, 2, 1, 2], vec![raw, raw, 0.0, 0.0]).unwrap());
            let out = igum_forward(&mut t, l, o, cfg).unwrap();
            transition(&t, out)
        };
        assert_eq!(run(0.0), 4);
        // Reading further left (toward A) pushes the transition right.
        assert_eq!(run(-0.6), 5);
        // Reading right (toward B) pulls it left.
        assert_eq!(run(0.6), 3);
    }

    #[test]
    fn argmax_invariant_to_logit_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits = Tensor::rand_normal([1, 4, 3, 3], 1.0, &mut rng);
        let raw = Tensor::rand_normal([1, 2, 3, 3], 1.0, &mut rng);
        let argmax = |lambda: f64| {
            let mut t = Tape::new();
            let l = t.leaf(logits.map(|v| v * lambda));
            let o = t.leaf(raw.clone());
            let out = igum_forward(&mut t, l, o, IgumConfig::new(4, SampleMode::Bilinear).unwrap()).unwrap();
            let v = t.value(out).unwrap().clone();
            (0..12 * 12)
                .map(|p| {
                    (0..4)
                        .max_by(|&a, &b| v.data()[a * 144 + p].total_cmp(&v.data()[b * 144 + p]))
                        .unwrap()
                })
                .collect::<alloc::vec::Vec<_>>()
        };
        let base = argmax(1.0);
        for lambda in [0.01, 0.5, 3.0, 100.0] {
            assert_eq!(argmax(lambda), base);
        }
    }

    #[test]
    fn label_path_matches_full_class_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let logits = Tensor::rand_normal([2, 5, 4, 6], 1.0, &mut rng);
        let raw = Tensor::rand_normal([2, 2, 4, 6], 1.0, &mut rng);
        let mut t = Tape::new();
        let (l, o) = (t.constant(logits.clone()), t.constant(raw.clone()));
        let full = igum_forward(&mut t, l, o, IgumConfig::new(3, SampleMode::Nearest).unwrap()).unwrap();
        let expected = argmax_classes(t.value(full).unwrap());
        assert_eq!(igum_labels(&logits, &raw, 3).unwrap(), expected);
        assert!(igum_labels(&logits, &Tensor::zeros([2, 2, 4, 5]), 3).is_err());
    }
}
