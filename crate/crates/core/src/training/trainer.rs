use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{total_loss, LossConfig};
use super::optim::{Adam, Schedule};
use super::TrainError;
use crate::data::{Dataset, RenderedSample};
use crate::metrics::{evaluate_samples, SampleMetrics, SeedMetrics};
use crate::model::{ForwardInput, MaskSource, Mode, Model, ModelConfig};
use crate::tensor::{Real, Tape, Tensor};

const NOISE_STREAM: u64 = 1;
const ORDER_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub schedule: Schedule,
    /// Optimizer steps in the run.
    pub steps: u64,
    pub batch_size: usize,
    /// Validation cadence in steps; 0 evaluates only at the start and end.
    pub eval_every: u64,
    /// Checkpoint cadence in steps; the final step is always saved.
    pub checkpoint_every: u64,
    /// Progress line cadence in steps; 0 is silent.
    pub log_every: u64,
    /// Validation samples used per evaluation; 0 takes all of them.
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            schedule: Schedule::default(),
            steps: 20_000,
            batch_size: 16,
            eval_every: 1000,
            checkpoint_every: 5000,
            log_every: 100,
            eval_samples: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        let s = &self.schedule;
        if !(s.base_lr.is_finite() && s.base_lr >= 0.0) {
            return Err(TrainError::Config(format!("base_lr must be non-negative, got {}", s.base_lr)));
        }
        Ok(())
    }
}

/// Audit counters over everything a run has consumed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub samples_seen: u64,
    pub annotated_seen: u64,
    /// Annotated points that entered the point loss.
    pub points_in_loss: u64,
    /// Ground-truth points routed into the point encoder.
    pub gt_points_routed: u64,
    /// Samples whose point term was skipped.
    pub point_loss_skipped: u64,
}

/// Batch means of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub recon: f64,
    pub point: f64,
}

/// State captured when a loss turns non-finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonFiniteDump {
    pub step: u64,
    pub sample: usize,
    pub loss: f64,
    pub recon: f64,
    pub point: f64,
    pub param_norm: f64,
}

impl fmt::Display for NonFiniteDump {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} sample={} loss={} recon={} point={} param_norm={}",
            self.step, self.sample, self.loss, self.recon, self.point, self.param_norm
        )
    }
}

/// A model, its optimizer, and the random state that drives training.
///
/// Batches walk through per-epoch shuffles of the dataset that depend only on
/// the seed and the epoch, so the position in the data is a function of
/// `samples_seen` alone.
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub seed: u64,
    pub model: Model<T>,
    pub adam: Adam<T>,
    pub counters: Counters,
    rng: ChaCha8Rng,
    order: Option<(u64, Vec<usize>)>,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig, seed: u64) -> Result<Self, TrainError> {
        config.validate()?;
        let model = Model::new(config.model.clone(), seed)?;
        let adam = Adam::new(&model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(NOISE_STREAM);
        Ok(Self {
            config,
            seed,
            model,
            adam,
            counters: Counters::default(),
            rng,
            order: None,
        })
    }

    /// Optimizer steps taken.
    pub fn step(&self) -> u64 {
        self.adam.step
    }

    pub fn rng_word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn set_rng_word_pos(&mut self, pos: u128) {
        self.rng.set_word_pos(pos);
    }

    fn epoch_order(&mut self, epoch: u64, n: usize) -> &[usize] {
        if self.order.as_ref().is_none_or(|(e, o)| *e != epoch || o.len() != n) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ epoch.rotate_left(32));
            rng.set_stream(ORDER_STREAM);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            self.order = Some((epoch, order));
        }
        &self.order.as_ref().expect("just set").1
    }

    /// Indices of the next batch.
    pub fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut pos = self.counters.samples_seen;
        (0..self.config.batch_size)
            .map(|_| {
                let (epoch, offset) = (pos / n as u64, (pos % n as u64) as usize);
                pos += 1;
                self.epoch_order(epoch, n)[offset]
            })
            .collect()
    }

    /// Forward and backward over one batch, averaged gradients, one Adam
    /// update.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepLog, TrainError> {
        if data.is_empty() {
            return Err(TrainError::Config("training set is empty".into()));
        }
        let batch = self.next_batch(data.len());
        let samples: Vec<&RenderedSample> = batch.iter().map(|&i| &data.samples[i]).collect();
        self.train_on(&samples, &batch)
    }

    /// Like [`Trainer::train_step`] on an explicit batch; `ids` label the
    /// samples in diagnostics.
    pub fn train_on(&mut self, samples: &[&RenderedSample], ids: &[usize]) -> Result<StepLog, TrainError> {
        if samples.is_empty() {
            return Err(TrainError::Config("batch is empty".into()));
        }
        let step = self.adam.step + 1;
        let mut grads: Vec<Tensor<T>> = self.model.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let (mut loss_sum, mut recon_sum, mut point_sum) = (0.0, 0.0, 0.0);
        for (j, sample) in samples.iter().enumerate() {
            let image = sample.image::<T>();
            let noise = self.model.sample_noise(&mut self.rng);
            let annotated = sample.annotated_points();
            let points = (sample.annotated && !annotated.is_empty()).then_some(annotated.as_slice());

            let mut tape = Tape::new();
            let p = self.model.params.bind(&mut tape);
            let input = ForwardInput {
                image: &image,
                noise: &noise,
                points,
                mode: Mode::Train,
            };
            let out = self.model.forward(&mut tape, &p, &input)?;
            let terms = total_loss(&mut tape, &image, &out, points, &self.config.loss)?;
            let loss = tape.value(terms.total).item().as_f64();
            if !loss.is_finite() {
                return Err(TrainError::NonFinite(Box::new(NonFiniteDump {
                    step,
                    sample: ids.get(j).copied().unwrap_or(j),
                    loss,
                    recon: terms.recon,
                    point: terms.point,
                    param_norm: self.model.params.norm(),
                })));
            }
            let g = tape.backward(terms.total)?;
            for (acc, &v) in grads.iter_mut().zip(p.vars()) {
                if let Some(gv) = g.get(v) {
                    for (a, &b) in acc.data_mut().iter_mut().zip(gv.data()) {
                        *a += b;
                    }
                }
            }
            loss_sum += loss;
            recon_sum += terms.recon;
            point_sum += terms.point;

            let c = &mut self.counters;
            c.samples_seen += 1;
            c.annotated_seen += sample.annotated as u64;
            c.gt_points_routed += out.gt_points_used as u64;
            if terms.point_skipped {
                c.point_loss_skipped += 1;
            } else {
                c.points_in_loss += annotated.len() as u64;
            }
        }
        let inv = T::one() / T::lit(samples.len() as f64);
        for g in &mut grads {
            for v in g.data_mut() {
                *v *= inv;
            }
        }
        let lr = self.config.schedule.lr(step);
        self.adam.update(&mut self.model.params, &grads, lr)?;
        let n = samples.len() as f64;
        Ok(StepLog {
            step,
            lr,
            loss: loss_sum / n,
            recon: recon_sum / n,
            point: point_sum / n,
        })
    }
}

/// Noise for validation sample `index`; fixed per index so that evaluation
/// depends only on the parameters.
pub(crate) fn eval_noise<T: Real>(model: &Model<T>, noise_seed: u64, index: usize) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    rng.set_stream(index as u64);
    model.sample_noise(&mut rng)
}

/// Inference over the first `limit` validation samples (all when 0),
/// segmenting with the decoder masks. Ground-truth points are never read.
pub fn evaluate<T: Real>(model: &Model<T>, val: &Dataset, seed: u64, limit: usize) -> Result<SeedMetrics, TrainError> {
    let n = if limit == 0 { val.len() } else { limit.min(val.len()) };
    let per_sample = (0..n)
        .map(|i| {
            let s = &val.samples[i];
            let pred = model.infer(&s.image::<T>(), &eval_noise(model, seed, i))?;
            Ok(SampleMetrics::compute(&pred.segmentation(MaskSource::Decoder), &s.segmentation)?)
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(evaluate_samples(seed, &per_sample)?)
}
