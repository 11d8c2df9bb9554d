use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssnet_core::instance::{diffuse, unit_step_offsets, InstanceLabeling};
use ssnet_core::meanshift::meanshift;
use ssnet_core::metrics::{instance_ap, miou, ConfusionMatrix};
use ssnet_core::optim::poly_lr;
use ssnet_core::sampler::{guided_sample, resize, SampleGrid, SampleMode};
use ssnet_core::synth::{synth_generate, SynthConfig, THING_CLASSES};
use ssnet_core::tape::InstanceLossKind;
use ssnet_core::{Tape, Tensor};

fn mode(bilinear: bool) -> SampleMode {
    if bilinear {
        SampleMode::Bilinear
    } else {
        SampleMode::Nearest
    }
}

/// Random input, a regular grid for `factor` and offsets of up to a few
/// source pixels.
fn sampling_case(seed: u64, c: usize, h: usize, w: usize, factor: usize) -> (Tensor, SampleGrid, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = Tensor::rand_normal([2, c, h, w], 1.0, &mut rng);
    let grid = SampleGrid::regular(h, w, factor).unwrap();
    let offsets = Tensor::rand_uniform([2, 2, h * factor, w * factor], -0.6, 0.6, &mut rng);
    (input, grid, offsets)
}

fn permute_channels(t: &Tensor, perm: &[usize]) -> Tensor {
    let [b, c, h, w] = t.shape();
    let mut out = Tensor::zeros([b, c, h, w]);
    for bi in 0..b {
        for (dst, &src) in perm.iter().enumerate() {
            for i in 0..h {
                for j in 0..w {
                    out.set(bi, dst, i, j, t.at(bi, src, i, j));
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sampling_commutes_with_channel_permutation(
        seed in any::<u64>(), c in 1usize..6, h in 1usize..7, w in 1usize..7, factor in 1usize..4, bilinear: bool,
        shuffle in any::<u64>(),
    ) {
        let (input, grid, offsets) = sampling_case(seed, c, h, w, factor);
        let mut perm: Vec<usize> = (0..c).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle);
        for i in (1..c).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let m = mode(bilinear);
        let a = guided_sample(&permute_channels(&input, &perm), grid.coords(), Some(&offsets), m).unwrap();
        let b = permute_channels(&guided_sample(&input, grid.coords(), Some(&offsets), m).unwrap(), &perm);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn nearest_creates_no_new_values(seed in any::<u64>(), c in 1usize..4, h in 1usize..7, w in 1usize..7, factor in 1usize..4) {
        let (input, grid, offsets) = sampling_case(seed, c, h, w, factor);
        let out = guided_sample(&input, grid.coords(), Some(&offsets), SampleMode::Nearest).unwrap();
        for b in 0..2 {
            for ch in 0..c {
                let src = input.plane(b, ch);
                prop_assert!(out.plane(b, ch).iter().all(|v| src.contains(v)));
            }
        }
    }

    #[test]
    fn bilinear_is_continuous_in_offsets(seed in any::<u64>(), h in 2usize..7, w in 2usize..7, factor in 1usize..4) {
        let (input, grid, offsets) = sampling_case(seed, 2, h, w, factor);
        let delta = 1e-6;
        let nudged = offsets.map(|v| v + delta);
        let a = guided_sample(&input, grid.coords(), Some(&offsets), SampleMode::Bilinear).unwrap();
        let b = guided_sample(&input, grid.coords(), Some(&nudged), SampleMode::Bilinear).unwrap();
        let range = input.data().iter().fold(0.0f64, |m, v| m.max(v.abs())) * 2.0;
        // A normalized shift of delta moves at most delta * (S - 1) / 2 pixels per axis.
        let px = delta * (h.max(w) - 1) as f64 / 2.0;
        prop_assert!(a.max_abs_diff(&b).unwrap() <= 2.0 * range * px + 1e-12);
    }

    #[test]
    fn zero_offsets_match_plain_resize(seed in any::<u64>(), c in 1usize..4, h in 1usize..7, w in 1usize..7, factor in 1usize..5) {
        let (input, grid, _) = sampling_case(seed, c, h, w, factor);
        let zeros = Tensor::zeros([2, 2, h * factor, w * factor]);
        let n = guided_sample(&input, grid.coords(), Some(&zeros), SampleMode::Nearest).unwrap();
        prop_assert_eq!(n, resize(&input, factor, SampleMode::Nearest).unwrap());
        let b = guided_sample(&input, grid.coords(), Some(&zeros), SampleMode::Bilinear).unwrap();
        let r = resize(&input, factor, SampleMode::Bilinear).unwrap();
        prop_assert!(b.max_abs_diff(&r).unwrap() <= 1e-12);
    }

    #[test]
    fn smooth_l1_never_exceeds_l1(seed in any::<u64>(), scale in 0.01f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = Tensor::rand_normal([2, 2, 4, 5], scale, &mut rng);
        let target = Tensor::rand_normal([2, 2, 4, 5], scale, &mut rng);
        let mask = Tensor::rand_uniform([2, 1, 4, 5], 0.0, 1.0, &mut rng).map(|v| (v < 0.6) as u8 as f64);
        let loss = |kind| {
            let mut t = Tape::new();
            let p = t.constant(pred.clone());
            let l = t.instance_loss(p, &target, &mask, kind).unwrap();
            t.value(l).unwrap().item().unwrap()
        };
        prop_assert!(loss(InstanceLossKind::SmoothL1) <= loss(InstanceLossKind::L1));
    }

    #[test]
    fn miou_ignores_class_names(seed in any::<u64>(), classes in 2usize..6, n in 1usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt: Vec<u32> = (0..n).map(|_| rng.random_range(0..classes as u32)).collect();
        let pred: Vec<u32> = gt.iter().map(|&g| if rng.random_bool(0.7) { g } else { rng.random_range(0..classes as u32) }).collect();
        let mut perm: Vec<u32> = (0..classes as u32).collect();
        for i in (1..classes).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let score = |g: &[u32], p: &[u32]| {
            let mut m = ConfusionMatrix::new(classes);
            m.accumulate(g, p, None).unwrap();
            miou(&m).unwrap()
        };
        let a = score(&gt, &pred);
        let pg: Vec<u32> = gt.iter().map(|&v| perm[v as usize]).collect();
        let pp: Vec<u32> = pred.iter().map(|&v| perm[v as usize]).collect();
        let b = score(&pg, &pp);
        prop_assert!((a.miou - b.miou).abs() < 1e-12);
        prop_assert!((a.global_avg - b.global_avg).abs() < 1e-12);
    }

    #[test]
    fn ap_ignores_instance_ids(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (12, 12);
        // Vertical stripes as ground truth, predictions shifted by a column or two.
        let k = rng.random_range(1..5u32);
        let gt_ids: Vec<u32> = (0..h * w).map(|p| ((p % w) as u32 * k / w as u32) + 1).collect();
        let shift = rng.random_range(0..3);
        let pred_ids: Vec<u32> = (0..h * w).map(|p| gt_ids[(p / w) * w + ((p % w) + shift).min(w - 1)]).collect();
        let gt = InstanceLabeling::new(1, h, w, gt_ids).unwrap();
        let pred = InstanceLabeling::new(1, h, w, pred_ids.clone()).unwrap();
        let conf: Vec<f64> = (0..pred.count(0)).map(|_| rng.random_range(0.0..1.0)).collect();
        let a = instance_ap(&pred, &[conf.clone()], &gt).unwrap();
        // Relabel the prediction's ids and carry the confidences along.
        let n = pred.count(0);
        let perm: Vec<u32> = (0..n as u32).rev().collect();
        let relabeled: Vec<u32> = pred_ids.iter().map(|&v| if v == 0 { 0 } else { perm[v as usize - 1] + 1 }).collect();
        let mut conf2 = vec![0.0; n];
        for (old, &new) in perm.iter().enumerate() {
            conf2[new as usize] = conf[old];
        }
        let b = instance_ap(&InstanceLabeling::new(1, h, w, relabeled).unwrap(), &[conf2], &gt).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn diffusion_spreads_monotonically(
        top in 0usize..10, left in 0usize..10, rows in 1usize..10, cols in 1usize..10, ci in 0usize..10, cj in 0usize..10,
    ) {
        let (h, w) = (20, 20);
        let mut ids = vec![0u32; h * w];
        for i in top..top + rows {
            for j in left..left + cols {
                ids[i * w + j] = 1;
            }
        }
        let center = (top + ci % rows, left + cj % cols);
        let labels = InstanceLabeling::new(1, h, w, ids).unwrap();
        let grid = SampleGrid::identity(h, w).unwrap();
        let target = (grid.coords().at(0, 0, center.0, center.1), grid.coords().at(0, 1, center.0, center.1));
        let radius = (top..top + rows).map(|i| i.abs_diff(center.0)).max().unwrap()
            .max((left..left + cols).map(|j| j.abs_diff(center.1)).max().unwrap());
        let mut last = 0;
        for t in 0..=radius + 1 {
            let mut tape = Tape::new();
            let o = tape.constant(unit_step_offsets(&labels, 0, &[center]));
            let m = diffuse(&mut tape, o, t, SampleMode::Nearest).unwrap();
            let m = tape.value(m).unwrap();
            let hits = (0..h * w)
                .filter(|&p| labels.image(0)[p] == 1 && (m.at(0, 0, p / w, p % w), m.at(0, 1, p / w, p % w)) == target)
                .count();
            prop_assert!(hits >= last);
            last = hits;
        }
        prop_assert_eq!(last, rows * cols);
    }

    #[test]
    fn synthetic_labels_are_consistent(seed in any::<u64>(), shapes in 1usize..5) {
        for s in synth_generate(seed, 2, SynthConfig::new(40, 48, shapes).unwrap().with_sides(8, 12).unwrap()).unwrap() {
            for (&id, &c) in s.instances.iter().zip(&s.semantic) {
                prop_assert_eq!(id > 0, THING_CLASSES.contains(&c));
            }
        }
    }

    #[test]
    fn meanshift_work_is_bounded(seed in any::<u64>(), n in 1usize..40, max_iter in 1usize..20, bw in 0.1f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.random_range(0.0..10.0), rng.random_range(0.0..10.0))).collect();
        let r = meanshift(&pts, bw, max_iter).unwrap();
        prop_assert!(r.kernel_evals <= (max_iter * n * n) as u64);
        prop_assert_eq!(r.labels.len(), n);
    }

    #[test]
    fn poly_lr_strictly_decreases(epochs in 1usize..300, lr0 in 1e-6f64..1.0, power in 0.05f64..=1.0) {
        let lrs: Vec<f64> = (0..=epochs).map(|e| poly_lr(e, epochs, lr0, power).unwrap()).collect();
        prop_assert_eq!(lrs[0], lr0);
        prop_assert!(lrs.windows(2).all(|p| p[1] < p[0]));
    }
}
