//! Semantic and instance segmentation metrics.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, dim_err, Result};
use crate::instance::InstanceLabeling;

/// `counts[gt * classes + pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, gt: u32, pred: u32) -> Result<()> {
        let (g, p) = (gt as usize, pred as usize);
        if g >= self.classes || p >= self.classes {
            return Err(dim_err!("class pair ({gt}, {pred}) out of range for {} classes", self.classes));
        }
        self.counts[g * self.classes + p] += 1;
        Ok(())
    }

    /// Accumulates every pixel (or every pixel where `keep` is true).
    pub fn accumulate(&mut self, gt: &[u32], pred: &[u32], keep: Option<&[bool]>) -> Result<()> {
        if gt.len() != pred.len() || keep.is_some_and(|k| k.len() != gt.len()) {
            return Err(dim_err!("confusion: {} gt vs {} pred labels", gt.len(), pred.len()));
        }
        for (i, (&g, &p)) in gt.iter().zip(pred).enumerate() {
            if keep.is_none_or(|k| k[i]) {
                self.add(g, p)?;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(dim_err!("merging {} and {} class matrices", self.classes, other.classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemanticScores {
    /// Mean IoU over classes that occur in the ground truth.
    pub miou: f64,
    /// Mean per-class recall over the same classes.
    pub class_avg: f64,
    /// Fraction of correctly labeled pixels.
    pub global_avg: f64,
}

pub fn miou(conf: &ConfusionMatrix) -> Result<SemanticScores> {
    let total = conf.total();
    if total == 0 {
        return Err(config_err!("miou of an empty confusion matrix"));
    }
    let c = conf.classes;
    let (mut iou_sum, mut rec_sum, mut present, mut diag) = (0.0, 0.0, 0usize, 0u64);
    for k in 0..c {
        let tp = conf.get(k, k);
        diag += tp;
        let gt: u64 = (0..c).map(|p| conf.get(k, p)).sum();
        if gt == 0 {
            continue;
        }
        let pred: u64 = (0..c).map(|g| conf.get(g, k)).sum();
        present += 1;
        iou_sum += tp as f64 / (gt + pred - tp) as f64;
        rec_sum += tp as f64 / gt as f64;
    }
    Ok(SemanticScores {
        miou: iou_sum / present as f64,
        class_avg: rec_sum / present as f64,
        global_avg: diag as f64 / total as f64,
    })
}

/// Pixels within Chebyshev distance `radius` of a label boundary. A pixel
/// lies on a boundary when one of its 4-neighbors has a different label.
pub fn boundary_band(labels: &[u32], height: usize, width: usize, radius: usize) -> Result<Vec<bool>> {
    if labels.len() != height * width {
        return Err(dim_err!("{} labels for {height}x{width}", labels.len()));
    }
    let at = |i: usize, j: usize| labels[i * width + j];
    let mut edge = vec![false; labels.len()];
    for i in 0..height {
        for j in 0..width {
            let l = at(i, j);
            edge[i * width + j] = (i > 0 && at(i - 1, j) != l)
                || (i + 1 < height && at(i + 1, j) != l)
                || (j > 0 && at(i, j - 1) != l)
                || (j + 1 < width && at(i, j + 1) != l);
        }
    }
    let mut band = vec![false; labels.len()];
    for i in 0..height {
        for j in 0..width {
            if !edge[i * width + j] {
                continue;
            }
            for y in i.saturating_sub(radius)..(i + radius + 1).min(height) {
                for x in j.saturating_sub(radius)..(j + radius + 1).min(width) {
                    band[y * width + x] = true;
                }
            }
        }
    }
    Ok(band)
}

/// IoU thresholds `0.50, 0.55, ..., 0.95`.
pub fn ap_thresholds() -> [f64; 10] {
    core::array::from_fn(|k| (50 + 5 * k) as f64 / 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceScores {
    /// Mean AP over all thresholds.
    pub ap: f64,
    /// AP at IoU 0.5.
    pub ap50: f64,
}

/// Collects ranked detections over many images, then scores them.
#[derive(Debug, Clone)]
pub struct ApAccumulator {
    thresholds: Vec<f64>,
    // Per threshold: (confidence, true positive) for every prediction.
    hits: Vec<Vec<(f64, bool)>>,
    gt_count: usize,
}

impl ApAccumulator {
    pub fn new(thresholds: &[f64]) -> Self {
        Self {
            thresholds: thresholds.to_vec(),
            hits: vec![Vec::new(); thresholds.len()],
            gt_count: 0,
        }
    }

    /// Matches the predictions of every image in `pred` against `gt`.
    ///
    /// `confidences[b][k]` scores instance `k + 1` of image `b`. Within an
    /// image, predictions are visited by decreasing confidence (ties by id)
    /// and each takes the unmatched ground-truth instance of highest IoU
    /// at or above the threshold.
    pub fn add(&mut self, pred: &InstanceLabeling, confidences: &[Vec<f64>], gt: &InstanceLabeling) -> Result<()> {
        if (pred.batch(), pred.height(), pred.width()) != (gt.batch(), gt.height(), gt.width()) {
            return Err(dim_err!("prediction and ground truth labelings differ in shape"));
        }
        if confidences.len() != pred.batch() {
            return Err(dim_err!("{} confidence lists for {} images", confidences.len(), pred.batch()));
        }
        for b in 0..pred.batch() {
            let (np, ng) = (pred.count(b), gt.count(b));
            if confidences[b].len() != np {
                return Err(dim_err!("{} confidences for {np} instances", confidences[b].len()));
            }
            self.gt_count += ng;
            let mut inter = vec![0u64; np * ng];
            for (&p, &g) in pred.image(b).iter().zip(gt.image(b)) {
                if p > 0 && g > 0 {
                    inter[(p as usize - 1) * ng + g as usize - 1] += 1;
                }
            }
            let (pa, ga) = (pred.areas(b), gt.areas(b));
            let iou = |p: usize, g: usize| {
                let i = inter[p * ng + g];
                i as f64 / (pa[p] as u64 + ga[g] as u64 - i) as f64
            };
            let mut order: Vec<usize> = (0..np).collect();
            order.sort_by(|&x, &y| confidences[b][y].total_cmp(&confidences[b][x]));
            for (t, &thr) in self.thresholds.iter().enumerate() {
                let mut taken = vec![false; ng];
                for &p in &order {
                    let best = (0..ng)
                        .filter(|&g| !taken[g] && iou(p, g) >= thr)
                        .max_by(|&x, &y| iou(p, x).total_cmp(&iou(p, y)).then(y.cmp(&x)));
                    if let Some(g) = best {
                        taken[g] = true;
                    }
                    self.hits[t].push((confidences[b][p], best.is_some()));
                }
            }
        }
        Ok(())
    }

    /// AP per threshold. With no ground truth instances the AP is 1 when
    /// there are no predictions either and 0 otherwise.
    pub fn per_threshold(&self) -> Vec<f64> {
        self.hits
            .iter()
            .map(|hits| {
                if self.gt_count == 0 {
                    return if hits.is_empty() { 1.0 } else { 0.0 };
                }
                let mut ranked = hits.clone();
                // Stable: equal confidences keep insertion order.
                ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
                average_precision(&ranked, self.gt_count)
            })
            .collect()
    }

    pub fn scores(&self) -> InstanceScores {
        let per = self.per_threshold();
        let ap = if per.is_empty() {
            0.0
        } else {
            per.iter().sum::<f64>() / per.len() as f64
        };
        let ap50 = self
            .thresholds
            .iter()
            .position(|&t| t == 0.5)
            .map_or(0.0, |i| per[i]);
        InstanceScores { ap, ap50 }
    }
}

/// Area under the precision-recall curve with precision made monotone
/// (every-point interpolation).
fn average_precision(ranked: &[(f64, bool)], gt_count: usize) -> f64 {
    let mut prec = Vec::with_capacity(ranked.len());
    let mut rec = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (i, &(_, hit)) in ranked.iter().enumerate() {
        tp += hit as usize;
        prec.push(tp as f64 / (i + 1) as f64);
        rec.push(tp as f64 / gt_count as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut last_r = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        ap += (r - last_r) * p;
        last_r = *r;
    }
    ap
}

/// AP and AP50 of one set of predictions over the standard thresholds.
pub fn instance_ap(pred: &InstanceLabeling, confidences: &[Vec<f64>], gt: &InstanceLabeling) -> Result<InstanceScores> {
    let mut acc = ApAccumulator::new(&ap_thresholds());
    acc.add(pred, confidences, gt)?;
    Ok(acc.scores())
}
