//! Flat-kernel mean shift over 2-D points, quadratic in the number of
//! points. Used as a reference partition for the grouping in
//! [`crate::instance::extract_instances`].

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, Result};
use crate::math;

#[derive(Debug, Clone, PartialEq)]
pub struct MeanShiftResult {
    /// Cluster index of every input point, dense from 0.
    pub labels: Vec<usize>,
    /// Converged mode of every cluster.
    pub modes: Vec<(f64, f64)>,
    /// Number of point-to-point kernel evaluations performed.
    pub kernel_evals: u64,
}

/// Shifts every point to the mean of the points within `bandwidth` until
/// it stops moving (or `max_iter` rounds), then merges converged points
/// closer than `bandwidth / 2`.
pub fn meanshift(points: &[(f64, f64)], bandwidth: f64, max_iter: usize) -> Result<MeanShiftResult> {
    if !(bandwidth > 0.0) {
        return Err(config_err!("mean shift bandwidth must be positive, got {bandwidth}"));
    }
    let n = points.len();
    let bw2 = bandwidth * bandwidth;
    let mut cur = points.to_vec();
    let mut evals = 0u64;
    for _ in 0..max_iter {
        let mut next = Vec::with_capacity(n);
        let mut moved = false;
        for &(x, y) in &cur {
            let (mut sx, mut sy, mut k) = (0.0, 0.0, 0usize);
            for &(px, py) in points {
                evals += 1;
                let (dx, dy) = (px - x, py - y);
                if dx * dx + dy * dy <= bw2 {
                    sx += px;
                    sy += py;
                    k += 1;
                }
            }
            let p = if k == 0 { (x, y) } else { (sx / k as f64, sy / k as f64) };
            moved |= p != (x, y);
            next.push(p);
        }
        cur = next;
        if !moved {
            break;
        }
    }
    let merge = bandwidth / 2.0;
    let mut modes: Vec<(f64, f64)> = Vec::new();
    let mut labels = vec![0; n];
    for (i, &(x, y)) in cur.iter().enumerate() {
        let hit = modes
            .iter()
            .position(|&(mx, my)| math::sqrt((mx - x) * (mx - x) + (my - y) * (my - y)) < merge);
        labels[i] = match hit {
            Some(k) => k,
            None => {
                modes.push((x, y));
                modes.len() - 1
            }
        };
    }
    Ok(MeanShiftResult {
        labels,
        modes,
        kernel_evals: evals,
    })
}

/// True when two labelings describe the same partition.
pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut fwd = alloc::collections::BTreeMap::new();
    let mut bwd = alloc::collections::BTreeMap::new();
    a.iter().zip(b).all(|(&x, &y)| *fwd.entry(x).or_insert(y) == y && *bwd.entry(y).or_insert(x) == x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_far_clusters() {
        let mut pts = vec![(0.0, 0.0); 5];
        pts.extend([(10.0, 0.1), (10.0, -0.1), (9.9, 0.0)]);
        let r = meanshift(&pts, 1.0, 50).unwrap();
        assert_eq!(r.modes.len(), 2);
        assert!(same_partition(&r.labels, &[0, 0, 0, 0, 0, 1, 1, 1]));
    }

    #[test]
    fn identical_points() {
        let r = meanshift(&[(0.3, 0.3); 7], 0.5, 10).unwrap();
        assert_eq!(r.modes.len(), 1);
        assert_eq!(r.kernel_evals, 49);
    }

    #[test]
    fn jitter_around_three_centers() {
        let centers = [(0.0, 0.0), (5.0, 1.0), (2.0, 6.0)];
        let bw = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for _ in 0..60 {
            let k = rng.random_range(0..3);
            let (cx, cy) = centers[k];
            pts.push((cx + rng.random_range(-0.25..=0.25), cy + rng.random_range(-0.25..=0.25)));
            truth.push(k);
        }
        let r = meanshift(&pts, bw, 100).unwrap();
        assert_eq!(r.modes.len(), 3);
        assert!(same_partition(&r.labels, &truth));
    }

    #[test]
    fn kernel_evaluations_bounded() {
        let pts: Vec<(f64, f64)> = (0..30).map(|i| (i as f64 * 0.3, 0.0)).collect();
        let max_iter = 4;
        let r = meanshift(&pts, 1.0, max_iter).unwrap();
        assert!(r.kernel_evals <= (max_iter * pts.len() * pts.len()) as u64);
    }

    #[test]
    fn rejects_bad_bandwidth() {
        assert!(meanshift(&[(0.0, 0.0)], 0.0, 3).is_err());
        assert!(meanshift(&[(0.0, 0.0)], f64::NAN, 3).is_err());
    }

    #[test]
    fn partition_comparison() {
        assert!(same_partition(&[0, 0, 1], &[5, 5, 2]));
        assert!(!same_partition(&[0, 0, 1], &[5, 2, 2]));
        assert!(!same_partition(&[0, 1, 1], &[3, 3, 3]));
    }
}
