//! Segmentation metrics on a scene where every object's segment also takes
//! a band of background: foreground ARI stays perfect while ARI and mIoU
//! expose the leak.

use slash::metrics::{constructed_bleeding_case, hungarian, iou_matrix, BleedingReport, CostMatrix};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (pred, gt) = constructed_bleeding_case(24, 3);
    for y in (0..24).step_by(3) {
        let row = |s: &slash::metrics::Segmentation| (0..24).map(|x| char::from(b'0' + s.get(y, x) as u8)).collect::<String>();
        println!("{}   {}", row(&gt), row(&pred));
    }
    let r = BleedingReport::compute(&pred, &gt)?;
    println!("fg-ARI {:.4}  ARI {:.4}  mIoU {:.4}  hides bleeding: {}", r.fg_ari, r.ari, r.miou, r.hides_bleeding(0.5));

    let (pids, gids, iou) = iou_matrix(&pred, &gt)?;
    let cost = CostMatrix::new(pids.len(), gids.len(), iou.iter().map(|v| 1.0 - v).collect())?;
    let matching = hungarian(&cost)?;
    for (r, c) in matching.pairs() {
        println!("pred segment {} <-> gt segment {}: IoU {:.3}", pids[r], gids[c], iou[r * gids.len() + c]);
    }
    Ok(())
}
