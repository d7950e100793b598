use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{hungarian, CostMatrix, MetricError};

/// Per-pixel integer labelling of an `height × width` image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segmentation {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl Segmentation {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self, MetricError> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(MetricError::Shape(format!(
                "{height}x{width} segmentation with {} labels",
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Distinct labels in ascending order.
    pub fn segment_ids(&self) -> Vec<u32> {
        let mut ids = self.labels.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn num_segments(&self) -> usize {
        self.segment_ids().len()
    }

    fn check_same_shape(&self, other: &Self) -> Result<(), MetricError> {
        if self.height != other.height || self.width != other.width {
            return Err(MetricError::Shape(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

fn comb2(n: u64) -> u128 {
    let n = n as u128;
    n * n.saturating_sub(1) / 2
}

/// ARI over paired label sequences; all sums are exact integers.
fn ari_from_pairs(pairs: impl Iterator<Item = (u32, u32)>) -> f64 {
    let mut cells: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    let mut rows: BTreeMap<u32, u64> = BTreeMap::new();
    let mut cols: BTreeMap<u32, u64> = BTreeMap::new();
    let mut n = 0u64;
    for (a, b) in pairs {
        *cells.entry((a, b)).or_default() += 1;
        *rows.entry(a).or_default() += 1;
        *cols.entry(b).or_default() += 1;
        n += 1;
    }
    let total = comb2(n);
    if total == 0 {
        return 1.0;
    }
    let index: u128 = cells.values().map(|&c| comb2(c)).sum();
    let sum_a: u128 = rows.values().map(|&c| comb2(c)).sum();
    let sum_b: u128 = cols.values().map(|&c| comb2(c)).sum();
    let expected = (sum_a as f64) * (sum_b as f64) / total as f64;
    let max_index = 0.5 * (sum_a as f64 + sum_b as f64);
    let denom = max_index - expected;
    if denom == 0.0 {
        let identical = cells.len() == rows.len() && cells.len() == cols.len();
        return if identical { 1.0 } else { 0.0 };
    }
    (index as f64 - expected) / denom
}

/// Adjusted Rand index over every pixel (background is a cluster like any
/// other).
///
/// When the adjusted denominator vanishes the result is 1 for identical
/// partitions and 0 otherwise.
pub fn ari(pred: &Segmentation, gt: &Segmentation) -> Result<f64, MetricError> {
    pred.check_same_shape(gt)?;
    Ok(ari_from_pairs(
        pred.labels.iter().copied().zip(gt.labels.iter().copied()),
    ))
}

/// ARI restricted to pixels whose ground-truth label is not 0.
pub fn fg_ari(pred: &Segmentation, gt: &Segmentation) -> Result<f64, MetricError> {
    pred.check_same_shape(gt)?;
    if gt.labels.iter().all(|&g| g == 0) {
        return Err(MetricError::NoForeground);
    }
    Ok(ari_from_pairs(
        pred.labels
            .iter()
            .copied()
            .zip(gt.labels.iter().copied())
            .filter(|&(_, g)| g != 0),
    ))
}

/// IoU between every predicted segment (rows) and every ground-truth
/// segment (columns), with the segment ids for each axis.
pub fn iou_matrix(
    pred: &Segmentation,
    gt: &Segmentation,
) -> Result<(Vec<u32>, Vec<u32>, Vec<f64>), MetricError> {
    pred.check_same_shape(gt)?;
    let pids = pred.segment_ids();
    let gids = gt.segment_ids();
    let pindex: BTreeMap<u32, usize> = pids.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    let gindex: BTreeMap<u32, usize> = gids.iter().enumerate().map(|(i, &g)| (g, i)).collect();
    let mut inter = vec![0u64; pids.len() * gids.len()];
    let mut parea = vec![0u64; pids.len()];
    let mut garea = vec![0u64; gids.len()];
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        let (pi, gi) = (pindex[&p], gindex[&g]);
        inter[pi * gids.len() + gi] += 1;
        parea[pi] += 1;
        garea[gi] += 1;
    }
    let iou = inter
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let (pi, gi) = (i / gids.len(), i % gids.len());
            n as f64 / (parea[pi] + garea[gi] - n) as f64
        })
        .collect();
    Ok((pids, gids, iou))
}

/// Mean IoU over ground-truth segments (background included) after a
/// Hungarian matching that maximizes total IoU. Unmatched ground-truth
/// segments count as 0.
pub fn miou(pred: &Segmentation, gt: &Segmentation) -> Result<f64, MetricError> {
    let (pids, gids, iou) = iou_matrix(pred, gt)?;
    let cost = CostMatrix::new(pids.len(), gids.len(), iou.iter().map(|v| 1.0 - v).collect())?;
    let assignment = hungarian(&cost)?;
    let matched: f64 = assignment
        .pairs()
        .map(|(r, c)| iou[r * gids.len() + c])
        .sum();
    Ok(matched / gids.len() as f64)
}
