use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};

/// Which images, and which objects within them, reveal their center points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationPolicy {
    pub image_fraction: f64,
    pub object_fraction: f64,
    pub seed: u64,
}

impl Default for AnnotationPolicy {
    fn default() -> Self {
        Self {
            image_fraction: 0.10,
            object_fraction: 0.75,
            seed: 0,
        }
    }
}

impl AnnotationPolicy {
    pub fn validate(&self) -> Result<(), DataError> {
        for (name, v) in [("image_fraction", self.image_fraction), ("object_fraction", self.object_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DataError::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    /// `round(image_fraction · n)`, half away from zero.
    pub fn annotated_images(&self, dataset_size: usize) -> usize {
        ((self.image_fraction * dataset_size as f64).round() as usize).min(dataset_size)
    }

    /// `max(1, round(object_fraction · n))`, capped at `n`.
    pub fn annotated_objects(&self, objects: usize) -> usize {
        ((self.object_fraction * objects as f64).round() as usize)
            .max(1)
            .min(objects)
    }
}

/// Marks a uniformly chosen subset of images as annotated and, within
/// each, a uniformly chosen subset of objects. Previous flags are cleared.
///
/// Images without any visible object cannot carry a point, so they are
/// never chosen; when fewer eligible images exist than requested, all of
/// them are annotated.
pub fn apply_annotation_policy(dataset: &mut Dataset, policy: &AnnotationPolicy) -> Result<(), DataError> {
    policy.validate()?;
    if dataset.is_empty() {
        return Err(DataError::Config("cannot annotate an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    for s in &mut dataset.samples {
        s.clear_annotation();
    }
    let eligible: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.samples[i].num_objects() > 0)
        .collect();
    let want = policy.annotated_images(dataset.len()).min(eligible.len());
    let mut chosen: Vec<usize> = index::sample(&mut rng, eligible.len(), want)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    chosen.sort_unstable();
    for i in chosen {
        let s = &mut dataset.samples[i];
        let n = s.num_objects();
        let mut objects: Vec<usize> = index::sample(&mut rng, n, policy.annotated_objects(n))
            .into_iter()
            .map(|j| j + 1)
            .collect();
        objects.sort_unstable();
        s.annotated = true;
        s.annotated_objects = objects;
    }
    dataset.policy = Some(policy.clone());
    Ok(())
}
