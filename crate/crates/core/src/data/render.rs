use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Background, DataError, ObjectSpec, SceneSpec, Shape};
use crate::metrics::Segmentation;
use crate::tensor::{Real, Tensor};

/// A rasterized scene with its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderedSample {
    pub height: usize,
    pub width: usize,
    /// Row-major RGB bytes, `height · width · 3` of them.
    pub pixels: Vec<u8>,
    /// 0 is background; visible objects are numbered from 1 in painting
    /// order.
    pub segmentation: Segmentation,
    /// `(x, y)` center of each visible object's bounding box, normalized;
    /// entry `i` belongs to segment `i + 1`.
    pub gt_points: Vec<[f64; 2]>,
    pub annotated: bool,
    /// Segment ids (1-based) whose points are revealed to training.
    pub annotated_objects: Vec<usize>,
    /// Objects in the scene that ended up with no visible pixel.
    pub dropped_objects: usize,
}

impl RenderedSample {
    pub fn num_objects(&self) -> usize {
        self.gt_points.len()
    }

    /// Image as an `[H, W, 3]` tensor in `[0, 1]`.
    pub fn image<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.height, self.width, 3], |i| {
            T::lit(self.pixels[i] as f64 / 255.0)
        })
    }

    /// Revealed points, in the order of `annotated_objects`.
    pub fn annotated_points(&self) -> Vec<[f64; 2]> {
        self.annotated_objects
            .iter()
            .map(|&id| self.gt_points[id - 1])
            .collect()
    }

    /// Drops any annotation.
    pub fn clear_annotation(&mut self) {
        self.annotated = false;
        self.annotated_objects.clear();
    }
}

fn validate(spec: &SceneSpec) -> Result<(), DataError> {
    for (i, o) in spec.objects.iter().enumerate() {
        let ok = o.size.is_finite()
            && o.size > 0.0
            && o.center.iter().all(|c| c.is_finite() && (0.0..=1.0).contains(c));
        if !ok {
            return Err(DataError::InvalidScene(format!(
                "object {i} has size {} and center {:?}",
                o.size, o.center
            )));
        }
    }
    Ok(())
}

/// Whether the pixel offset `(dx, dy)` from the object center (in pixels,
/// y pointing down) is covered by an object of radius `r` pixels.
fn covers(shape: Shape, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= r && dy.abs() <= r,
        Shape::Triangle => {
            // apex up, circumradius r
            let h = 3f64.sqrt() / 2.0 * r;
            let v = [(0.0, -r), (h, 0.5 * r), (-h, 0.5 * r)];
            let edge = |a: (f64, f64), b: (f64, f64)| {
                (b.0 - a.0) * (dy - a.1) - (b.1 - a.1) * (dx - a.0)
            };
            let s = [edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0])];
            s.iter().all(|&e| e >= 0.0) || s.iter().all(|&e| e <= 0.0)
        }
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave value noise in `[0, 1]` at normalized `(x, y)`.
struct ValueNoise {
    octaves: Vec<(usize, Vec<f64>)>,
}

impl ValueNoise {
    fn new(cells: usize, octaves: usize, seed: u64) -> Self {
        let octaves = (0..octaves.max(1))
            .map(|o| {
                let n = cells.max(1) << o;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(o as u64);
                let lattice = (0..(n + 1) * (n + 1)).map(|_| rng.random::<f64>()).collect();
                (n, lattice)
            })
            .collect();
        Self { octaves }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (mut total, mut norm, mut amp) = (0.0, 0.0, 1.0);
        for (n, lattice) in &self.octaves {
            let (gx, gy) = (x * *n as f64, y * *n as f64);
            let (x0, y0) = ((gx.floor() as usize).min(n - 1), (gy.floor() as usize).min(n - 1));
            let (tx, ty) = (smoothstep(gx - x0 as f64), smoothstep(gy - y0 as f64));
            let v = |i: usize, j: usize| lattice[j * (n + 1) + i];
            let top = v(x0, y0) * (1.0 - tx) + v(x0 + 1, y0) * tx;
            let bottom = v(x0, y0 + 1) * (1.0 - tx) + v(x0 + 1, y0 + 1) * tx;
            total += amp * (top * (1.0 - ty) + bottom * ty);
            norm += amp;
            amp *= 0.5;
        }
        total / norm
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn lerp_color(a: [u8; 3], b: [u8; 3], t: f64) -> [u8; 3] {
    std::array::from_fn(|c| to_byte((a[c] as f64 * (1.0 - t) + b[c] as f64 * t) / 255.0))
}

fn paint_background(bg: &Background, h: usize, w: usize, pixels: &mut [u8]) {
    let mut put = |i: usize, rgb: [u8; 3]| pixels[3 * i..3 * i + 3].copy_from_slice(&rgb);
    match bg {
        Background::Flat { color } => (0..h * w).for_each(|i| put(i, *color)),
        Background::Noise {
            base,
            amplitude,
            seed,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            for i in 0..h * w {
                let jitter = rng.random_range(-1.0..=1.0) * amplitude;
                put(i, std::array::from_fn(|c| to_byte(base[c] as f64 / 255.0 + jitter)));
            }
        }
        Background::Stripes {
            colors,
            period,
            angle,
        } => {
            let (cos, sin) = (angle.cos(), angle.sin());
            for y in 0..h {
                for x in 0..w {
                    let (px, py) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
                    let t = (px * cos + py * sin) / period;
                    let band = ((2.0 * t).floor() as i64).rem_euclid(2) as usize;
                    put(y * w + x, colors[band]);
                }
            }
        }
        Background::Texture {
            colors,
            cells,
            octaves,
            seed,
        } => {
            let noise = ValueNoise::new(*cells, *octaves, *seed);
            for y in 0..h {
                for x in 0..w {
                    let (px, py) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
                    put(y * w + x, lerp_color(colors[0], colors[1], noise.at(px, py)));
                }
            }
        }
    }
}

fn paint_object(o: &ObjectSpec, id: u32, h: usize, w: usize, pixels: &mut [u8], labels: &mut [u32]) {
    let (cx, cy, r) = (o.center[0] * w as f64, o.center[1] * h as f64, o.size * w as f64);
    let y_lo = ((cy - r - 1.0).floor().max(0.0)) as usize;
    let y_hi = ((cy + r + 1.0).ceil().max(0.0) as usize).min(h);
    let x_lo = ((cx - r - 1.0).floor().max(0.0)) as usize;
    let x_hi = ((cx + r + 1.0).ceil().max(0.0) as usize).min(w);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            if covers(o.shape, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r) {
                let i = y * w + x;
                labels[i] = id;
                pixels[3 * i..3 * i + 3].copy_from_slice(&o.color);
            }
        }
    }
}

/// Rasterizes `spec` at `height × width` in painter's order.
///
/// Objects hidden entirely by later ones are left out of the ground truth
/// and counted in `dropped_objects`; the rest are renumbered `1..=n`.
pub fn render(spec: &SceneSpec, height: usize, width: usize) -> Result<RenderedSample, DataError> {
    if height == 0 || width == 0 {
        return Err(DataError::Config(format!("cannot render at {height}x{width}")));
    }
    validate(spec)?;
    let mut pixels = vec![0u8; height * width * 3];
    let mut labels = vec![0u32; height * width];
    paint_background(&spec.background, height, width, &mut pixels);
    for (k, o) in spec.objects.iter().enumerate() {
        paint_object(o, k as u32 + 1, height, width, &mut pixels, &mut labels);
    }

    // visible bounding boxes as (x_min, x_max, y_min, y_max)
    let mut boxes: Vec<Option<[usize; 4]>> = vec![None; spec.objects.len()];
    for y in 0..height {
        for x in 0..width {
            let id = labels[y * width + x];
            if id == 0 {
                continue;
            }
            let b = boxes[id as usize - 1].get_or_insert([x, x, y, y]);
            b[0] = b[0].min(x);
            b[1] = b[1].max(x);
            b[2] = b[2].min(y);
            b[3] = b[3].max(y);
        }
    }
    let mut remap = vec![0u32; spec.objects.len() + 1];
    let mut gt_points = Vec::new();
    for (k, b) in boxes.iter().enumerate() {
        if let Some([x0, x1, y0, y1]) = *b {
            gt_points.push([
                (x0 + x1 + 1) as f64 / (2 * width) as f64,
                (y0 + y1 + 1) as f64 / (2 * height) as f64,
            ]);
            remap[k + 1] = gt_points.len() as u32;
        }
    }
    let dropped_objects = spec.objects.len() - gt_points.len();
    for l in labels.iter_mut() {
        *l = remap[*l as usize];
    }
    Ok(RenderedSample {
        height,
        width,
        pixels,
        segmentation: Segmentation::new(height, width, labels).expect("dimensions checked"),
        gt_points,
        annotated: false,
        annotated_objects: Vec::new(),
        dropped_objects,
    })
}
