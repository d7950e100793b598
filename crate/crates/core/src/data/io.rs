use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AnnotationPolicy, DataError, Dataset, DatasetConfig, RenderedSample};
use crate::metrics::Segmentation;

pub const DATASET_VERSION: u32 = 1;
const FORMAT: &str = "slash-dataset";
const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: DatasetConfig,
    policy: Option<AnnotationPolicy>,
    samples: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    image: String,
    labels: String,
}

/// Per-sample sidecar; the segmentation is stored as `[label, run]` pairs
/// in row-major order.
#[derive(Serialize, Deserialize)]
struct LabelFile {
    height: usize,
    width: usize,
    segmentation: Vec<[u32; 2]>,
    gt_points: Vec<[f64; 2]>,
    annotated: bool,
    annotated_objects: Vec<usize>,
    dropped_objects: usize,
}

fn run_length_encode(labels: &[u32]) -> Vec<[u32; 2]> {
    let mut runs: Vec<[u32; 2]> = Vec::new();
    for &l in labels {
        match runs.last_mut() {
            Some(r) if r[0] == l => r[1] += 1,
            _ => runs.push([l, 1]),
        }
    }
    runs
}

fn run_length_decode(runs: &[[u32; 2]]) -> Vec<u32> {
    runs.iter()
        .flat_map(|&[l, n]| std::iter::repeat_n(l, n as usize))
        .collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `root/manifest.json`, `root/images/NNNNN.png` and
/// `root/labels/NNNNN.json`.
pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<(), DataError> {
    for sub in ["images", "labels"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let mut entries = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        let image = format!("images/{i:05}.png");
        let labels = format!("labels/{i:05}.json");
        let image_path = root.join(&image);
        let buffer = image::RgbImage::from_raw(s.width as u32, s.height as u32, s.pixels.clone())
            .ok_or_else(|| DataError::Record {
                index: i,
                path: image_path.clone(),
                reason: "pixel buffer does not match dimensions".into(),
            })?;
        buffer
            .save_with_format(&image_path, image::ImageFormat::Png)
            .map_err(|e| DataError::Record {
                index: i,
                path: image_path.clone(),
                reason: e.to_string(),
            })?;
        let label = LabelFile {
            height: s.height,
            width: s.width,
            segmentation: run_length_encode(s.segmentation.labels()),
            gt_points: s.gt_points.clone(),
            annotated: s.annotated,
            annotated_objects: s.annotated_objects.clone(),
            dropped_objects: s.dropped_objects,
        };
        let label_path = root.join(&labels);
        let text = serde_json::to_string(&label).expect("label file serializes");
        fs::write(&label_path, text).map_err(io_err(&label_path))?;
        entries.push(ManifestEntry { image, labels });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: DATASET_VERSION,
        config: dataset.config.clone(),
        policy: dataset.policy.clone(),
        samples: entries,
    };
    let path = root.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(io_err(&path))
}

fn load_sample(root: &Path, index: usize, entry: &ManifestEntry) -> Result<RenderedSample, DataError> {
    let record = |path: &PathBuf, reason: String| DataError::Record {
        index,
        path: path.clone(),
        reason,
    };
    let label_path = root.join(&entry.labels);
    let text = fs::read_to_string(&label_path).map_err(|e| record(&label_path, e.to_string()))?;
    let label: LabelFile =
        serde_json::from_str(&text).map_err(|e| record(&label_path, e.to_string()))?;

    let image_path = root.join(&entry.image);
    let file = fs::File::open(&image_path).map_err(|e| record(&image_path, e.to_string()))?;
    let decoded = image::load(BufReader::new(file), image::ImageFormat::Png)
        .map_err(|e| record(&image_path, e.to_string()))?
        .to_rgb8();
    if decoded.width() as usize != label.width || decoded.height() as usize != label.height {
        return Err(record(
            &image_path,
            format!(
                "image is {}x{}, labels say {}x{}",
                decoded.height(),
                decoded.width(),
                label.height,
                label.width
            ),
        ));
    }

    let labels = run_length_decode(&label.segmentation);
    let segmentation = Segmentation::new(label.height, label.width, labels)
        .map_err(|e| record(&label_path, e.to_string()))?;
    let n = label.gt_points.len();
    if let Some(bad) = segmentation.labels().iter().find(|&&l| l as usize > n) {
        return Err(record(&label_path, format!("segment id {bad} exceeds {n} objects")));
    }
    let ids_ok = label.annotated_objects.iter().all(|&id| (1..=n).contains(&id));
    if !ids_ok || label.annotated == label.annotated_objects.is_empty() {
        return Err(record(&label_path, "inconsistent annotation flags".into()));
    }
    Ok(RenderedSample {
        height: label.height,
        width: label.width,
        pixels: decoded.into_raw(),
        segmentation,
        gt_points: label.gt_points,
        annotated: label.annotated,
        annotated_objects: label.annotated_objects,
        dropped_objects: label.dropped_objects,
    })
}

pub fn load_dataset(root: &Path) -> Result<Dataset, DataError> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest_err = |reason: String| DataError::Manifest {
        path: path.clone(),
        reason,
    };
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| manifest_err(e.to_string()))?;
    if raw.get("format").and_then(|v| v.as_str()) != Some(FORMAT) {
        return Err(manifest_err(format!("not a {FORMAT} manifest")));
    }
    let version = raw
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| manifest_err("missing version field".into()))?;
    if version != DATASET_VERSION as u64 {
        return Err(DataError::Version {
            found: version as u32,
            expected: DATASET_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| manifest_err(e.to_string()))?;
    let samples = manifest
        .samples
        .iter()
        .enumerate()
        .map(|(i, e)| load_sample(root, i, e))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        config: manifest.config,
        policy: manifest.policy,
        samples,
    })
}
