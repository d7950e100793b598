//! Procedural multi-object scenes with ground-truth masks, center points
//! and sparse point annotations.

mod annotate;
mod io;
mod render;
mod scene;

pub use annotate::{apply_annotation_policy, AnnotationPolicy};
pub use io::{load_dataset, save_dataset, DATASET_VERSION};
pub use render::{render, RenderedSample};
pub use scene::{
    generate_scene, generate_scene_with, Background, BackgroundKind, ObjectSpec, SceneConfig,
    SceneSpec, Shape,
};

use std::path::PathBuf;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("could not place object {placed} after {attempts} attempts; spacing is unsatisfiable")]
    Spacing { placed: usize, attempts: usize },
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("record {index} ({path}): {reason}")]
    Record {
        index: usize,
        path: PathBuf,
        reason: String,
    },
    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("dataset version {found} is incompatible with this build (expects {expected})")]
    Version { found: u32, expected: u32 },
}

/// Everything needed to regenerate a dataset byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub size: usize,
    pub height: usize,
    pub width: usize,
    pub difficulty: BackgroundKind,
    pub scene: SceneConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 5000,
            height: 64,
            width: 64,
            difficulty: BackgroundKind::Stripes,
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub policy: Option<AnnotationPolicy>,
    pub samples: Vec<RenderedSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn annotated_count(&self) -> usize {
        self.samples.iter().filter(|s| s.annotated).count()
    }

    /// Objects dropped by occlusion, summed over the dataset.
    pub fn dropped_objects(&self) -> usize {
        self.samples.iter().map(|s| s.dropped_objects).sum()
    }
}

/// Scene seed of sample `index`; depends only on the dataset seed and the
/// index so samples can be generated in any order.
pub fn sample_seed(dataset_seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(dataset_seed);
    rng.set_stream(index as u64);
    rng.next_u64()
}

pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset, DataError> {
    if config.size == 0 {
        return Err(DataError::Config("dataset size must be positive".into()));
    }
    if config.height == 0 || config.width == 0 {
        return Err(DataError::Config("image dimensions must be positive".into()));
    }
    let samples = (0..config.size)
        .map(|i| {
            let spec = generate_scene_with(sample_seed(config.seed, i), config.difficulty, &config.scene)?;
            render(&spec, config.height, config.width)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        config: config.clone(),
        policy: None,
        samples,
    })
}
