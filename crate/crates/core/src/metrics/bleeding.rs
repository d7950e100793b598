use serde::{Deserialize, Serialize};

use super::{ari, fg_ari, miou, MetricError, Segmentation};

/// Side-by-side view of the background-blind and background-aware metrics.
///
/// A slot that binds an object *and* a chunk of background leaves fg-ARI
/// untouched while ARI and mIoU drop; the gap is the bleeding signal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleedingReport {
    pub ari: f64,
    pub fg_ari: f64,
    pub miou: f64,
}

impl BleedingReport {
    pub fn compute(pred: &Segmentation, gt: &Segmentation) -> Result<Self, MetricError> {
        Ok(Self {
            ari: ari(pred, gt)?,
            fg_ari: fg_ari(pred, gt)?,
            miou: miou(pred, gt)?,
        })
    }

    /// fg-ARI exceeds both background-aware metrics by at least `margin`.
    pub fn hides_bleeding(&self, margin: f64) -> bool {
        self.fg_ari - self.ari.max(self.miou) >= margin
    }
}

/// A `size × size` scene with `objects` square objects on background, and a
/// prediction in which every object's segment also swallows its own
/// vertical band of background.
///
/// Object `i` is a square centred in band `i`; the prediction labels each
/// band `i + 1`, so objects stay perfectly separated while the background
/// is carved up between them.
pub fn constructed_bleeding_case(size: usize, objects: usize) -> (Segmentation, Segmentation) {
    assert!(objects >= 1 && size >= 4 * objects, "scene too small");
    let band = size / objects;
    let side = (band / 2).max(1);
    let band_of = |x: usize| (x / band).min(objects - 1);
    let mut gt = vec![0u32; size * size];
    let mut pred = vec![0u32; size * size];
    let y0 = (size - side) / 2;
    for y in 0..size {
        for x in 0..size {
            let b = band_of(x);
            pred[y * size + x] = b as u32 + 1;
            let x0 = b * band + (band - side) / 2;
            if (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x) {
                gt[y * size + x] = b as u32 + 1;
            }
        }
    }
    (
        Segmentation::new(size, size, pred).expect("valid"),
        Segmentation::new(size, size, gt).expect("valid"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructed_case_fools_fg_ari_only() {
        let (pred, gt) = constructed_bleeding_case(16, 3);
        assert_eq!(gt.num_segments(), 4);
        let r = BleedingReport::compute(&pred, &gt).unwrap();
        assert_eq!(r.fg_ari, 1.0);
        assert!(r.ari <= 0.9, "{r:?}");
        assert!(r.miou <= 0.9, "{r:?}");
        assert!(r.hides_bleeding(0.1));
    }

    #[test]
    fn perfect_prediction_shows_no_gap() {
        let (_, gt) = constructed_bleeding_case(16, 2);
        let r = BleedingReport::compute(&gt, &gt).unwrap();
        assert!(!r.hides_bleeding(1e-9));
    }
}
