use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::Serialize;

use crate::data::{Dataset, RenderedSample};
use crate::model::{MaskSource, Model, Prediction};
use crate::tensor::{Real, Tensor, TensorError};
use crate::training::eval_noise;

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];
const BACKGROUND: [u8; 3] = [32, 32, 32];
const GAP: u32 = 2;

/// Per-slot maps of one iteration, each `H·W` long in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationViz {
    pub logits_before: Vec<Vec<f64>>,
    pub logits_after: Vec<Vec<f64>>,
    pub attention: Vec<Vec<f64>>,
    pub before_max: Vec<f64>,
    pub before_min: Vec<f64>,
    pub after_max: Vec<f64>,
    pub after_min: Vec<f64>,
    /// `(x, y)` per slot, normalized.
    pub points: Option<Vec<[f64; 2]>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleViz {
    pub id: usize,
    pub height: usize,
    pub width: usize,
    pub slots: usize,
    pub iterations: Vec<IterationViz>,
    /// Decoder-mask slot index per pixel.
    pub segmentation: Vec<u32>,
}

fn slot_columns<T: Real>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let k = t.shape()[1];
    let d = t.to_f64_vec();
    (0..k).map(|j| d.iter().skip(j).step_by(k).copied().collect()).collect()
}

fn extremes(maps: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let max = maps.iter().map(|m| m.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    let min = maps.iter().map(|m| m.iter().copied().fold(f64::INFINITY, f64::min)).collect();
    (max, min)
}

/// Arrays behind the figure for one prediction.
pub fn describe<T: Real>(id: usize, pred: &Prediction<T>) -> SampleViz {
    let s = pred.mixture.shape();
    let (k, h, w) = (s[0], s[1], s[2]);
    let iterations = pred
        .iterations
        .iter()
        .map(|it| {
            let before = slot_columns(&it.logits);
            let after = slot_columns(&it.refined);
            let (before_max, before_min) = extremes(&before);
            let (after_max, after_min) = extremes(&after);
            IterationViz {
                logits_before: before,
                logits_after: after,
                attention: slot_columns(&it.attn),
                before_max,
                before_min,
                after_max,
                after_min,
                points: it.points.as_ref().map(|p| {
                    let d = p.to_f64_vec();
                    d.chunks(2).map(|c| [c[0], c[1]]).collect()
                }),
            }
        })
        .collect();
    SampleViz {
        id,
        height: h,
        width: w,
        slots: k,
        iterations,
        segmentation: pred.segmentation(MaskSource::Decoder).labels().to_vec(),
    }
}

struct Canvas {
    img: RgbImage,
    ph: u32,
    pw: u32,
    scale: u32,
}

impl Canvas {
    fn new(rows: u32, cols: u32, h: usize, w: usize) -> Self {
        let scale = (64 / h.max(w)).max(1) as u32;
        let (ph, pw) = (h as u32 * scale, w as u32 * scale);
        let img = RgbImage::from_pixel(
            cols * pw + (cols + 1) * GAP,
            rows * ph + (rows + 1) * GAP,
            Rgb(BACKGROUND),
        );
        Self { img, ph, pw, scale }
    }

    fn origin(&self, row: u32, col: u32) -> (u32, u32) {
        (GAP + col * (self.pw + GAP), GAP + row * (self.ph + GAP))
    }

    /// Fills a panel from a per-source-pixel color function.
    fn panel(&mut self, row: u32, col: u32, w: usize, color: impl Fn(usize) -> [u8; 3]) {
        let (x0, y0) = self.origin(row, col);
        for y in 0..self.ph {
            for x in 0..self.pw {
                let src = (y / self.scale) as usize * w + (x / self.scale) as usize;
                self.img.put_pixel(x0 + x, y0 + y, Rgb(color(src)));
            }
        }
    }

    fn cross(&mut self, row: u32, col: u32, p: [f64; 2], color: [u8; 3]) {
        let (x0, y0) = self.origin(row, col);
        let cx = (p[0].clamp(0.0, 1.0) * (self.pw - 1) as f64).round() as i64;
        let cy = (p[1].clamp(0.0, 1.0) * (self.ph - 1) as f64).round() as i64;
        let arm = self.scale.max(2) as i64;
        for d in -arm..=arm {
            for (x, y) in [(cx + d, cy), (cx, cy + d)] {
                if (0..self.pw as i64).contains(&x) && (0..self.ph as i64).contains(&y) {
                    self.img.put_pixel(x0 + x as u32, y0 + y as u32, Rgb(color));
                }
            }
        }
    }
}

fn gray(v: f64, lo: f64, hi: f64) -> [u8; 3] {
    let t = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
    let g = (t * 255.0).round() as u8;
    [g, g, g]
}

fn unit_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Figure for one sample.
///
/// Row 0 holds the input, the reconstruction and the decoder segmentation.
/// Rows 1 and 2 hold one panel per slot with the final iteration's
/// attention logits before and after the kernel, both mapped through the
/// range of the before-map. When points are predicted, row 3 overlays each
/// iteration's points on the input.
pub fn render_figure<T: Real>(sample: &RenderedSample, pred: &Prediction<T>, viz: &SampleViz) -> RgbImage {
    let (h, w, k) = (viz.height, viz.width, viz.slots);
    let point_iters: Vec<&Vec<[f64; 2]>> = viz.iterations.iter().filter_map(|it| it.points.as_ref()).collect();
    let rows = if point_iters.is_empty() { 3 } else { 4 };
    let cols = 3.max(k).max(point_iters.len()) as u32;
    let mut c = Canvas::new(rows, cols, h, w);

    let px = &sample.pixels;
    let input = |i: usize| [px[3 * i], px[3 * i + 1], px[3 * i + 2]];
    c.panel(0, 0, w, input);
    let recon = pred.reconstruction.to_f64_vec();
    c.panel(0, 1, w, |i| [unit_byte(recon[3 * i]), unit_byte(recon[3 * i + 1]), unit_byte(recon[3 * i + 2])]);
    c.panel(0, 2, w, |i| PALETTE[viz.segmentation[i] as usize % PALETTE.len()]);

    let last = viz.iterations.last().expect("at least one iteration");
    for j in 0..k {
        let (lo, hi) = (last.before_min[j], last.before_max[j]);
        c.panel(1, j as u32, w, |i| gray(last.logits_before[j][i], lo, hi));
        c.panel(2, j as u32, w, |i| gray(last.logits_after[j][i], lo, hi));
    }
    for (t, pts) in point_iters.iter().enumerate() {
        c.panel(3, t as u32, w, input);
        for (j, &p) in pts.iter().enumerate() {
            c.cross(3, t as u32, p, PALETTE[j % PALETTE.len()]);
        }
    }
    c.img
}

#[derive(Serialize)]
struct VizFile<'a> {
    kernel: &'a str,
    height: usize,
    width: usize,
    slots: usize,
    noise_seed: u64,
    samples: &'a [SampleViz],
}

/// Writes `sample-<id>.png` per requested sample and one `attention.json`
/// with the arrays behind them. Noise per sample matches evaluation.
pub fn export<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    ids: &[usize],
    noise_seed: u64,
    out: &Path,
) -> Result<Vec<SampleViz>, String> {
    fs::create_dir_all(out).map_err(|e| format!("{}: {e}", out.display()))?;
    let mut all = Vec::with_capacity(ids.len());
    for &id in ids {
        let sample = data
            .samples
            .get(id)
            .ok_or_else(|| format!("sample {id} is out of range (dataset has {})", data.len()))?;
        let noise = eval_noise(model, noise_seed, id);
        let pred = model.infer(&sample.image::<T>(), &noise).map_err(|e: TensorError| e.to_string())?;
        let viz = describe(id, &pred);
        let path = out.join(format!("sample-{id}.png"));
        render_figure(sample, &pred, &viz)
            .save(&path)
            .map_err(|e| format!("{}: {e}", path.display()))?;
        all.push(viz);
    }
    let file = VizFile {
        kernel: model.config.kernel.kind.name(),
        height: model.config.height,
        width: model.config.width,
        slots: model.config.slots,
        noise_seed,
        samples: &all,
    };
    let path = out.join("attention.json");
    fs::write(&path, serde_json::to_string(&file).expect("viz serializes")).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(all)
}
