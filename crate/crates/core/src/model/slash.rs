use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::ark::Ark;
use super::attention::{attention_normalize, AttentionField, SlotAttention};
use super::decoder::{Decoder, DecoderOutput};
use super::encoder::Encoder;
use super::ippe::Ippe;
use super::params::{Bound, Init, Mlp, ParamStore};
use super::{IppeSchedule, ModelConfig};
use crate::metrics::Segmentation;
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

/// Whether ground-truth points may enter the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

#[derive(Clone, Debug)]
pub struct Layers {
    pub encoder: Encoder,
    pub attention: SlotAttention,
    pub ark: Ark,
    pub ippe: Option<Ippe>,
    /// Point → slot initializer of the weakly supervised baseline.
    pub ws_init: Option<Mlp>,
    pub decoder: Decoder,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub layers: Layers,
}

pub struct ForwardInput<'a, T> {
    /// `[H, W, 3]` in `[0, 1]`.
    pub image: &'a Tensor<T>,
    /// `[K, D_slot]` standard-normal draws for the slot initialization.
    pub noise: &'a Tensor<T>,
    /// Annotated `(x, y)` points; only allowed in training mode.
    pub points: Option<&'a [[f64; 2]]>,
    pub mode: Mode,
}

#[derive(Clone, Debug)]
pub struct Iteration {
    /// `[H·W, K]` logits before the kernel.
    pub logits: Var,
    /// `[H·W, K]` logits after the kernel.
    pub refined: Var,
    pub field: AttentionField,
    /// `[K, 2]` when the point modules ran this iteration.
    pub points: Option<Var>,
    pub routed: Vec<Option<usize>>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub features: Var,
    pub initial_slots: Var,
    pub slots: Var,
    pub iterations: Vec<Iteration>,
    pub decoder: DecoderOutput,
    /// Ground-truth points that reached the network.
    pub gt_points_used: usize,
}

impl ForwardOutput {
    /// Predicted points of the last iteration that produced any.
    pub fn final_points(&self) -> Option<Var> {
        self.iterations.iter().rev().find_map(|it| it.points)
    }
}

/// Concrete values of an inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationValues<T> {
    pub logits: Tensor<T>,
    pub refined: Tensor<T>,
    pub attn: Tensor<T>,
    pub weights: Tensor<T>,
    pub points: Option<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub slots: Tensor<T>,
    pub iterations: Vec<IterationValues<T>>,
    /// `[K, H, W, 3]`
    pub per_slot_rgb: Tensor<T>,
    /// `[K, H, W]`
    pub mixture: Tensor<T>,
    /// `[H, W, 3]`
    pub reconstruction: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSource {
    /// Argmax of the decoder's alpha mixture.
    Decoder,
    /// Argmax of the final iteration's attention.
    Attention,
}

impl<T: Real> Prediction<T> {
    pub fn segmentation(&self, source: MaskSource) -> Segmentation {
        match source {
            MaskSource::Decoder => masks_from_mixture(&self.mixture),
            MaskSource::Attention => {
                let s = self.mixture.shape();
                let attn = &self.iterations.last().expect("at least one iteration").attn;
                masks_from_attention(attn, s[1], s[2])
            }
        }
    }
}

/// Per-pixel argmax over slots of `mixture: [K, H, W]`; ties go to the
/// lowest slot index.
pub fn masks_from_mixture<T: Real>(mixture: &Tensor<T>) -> Segmentation {
    let s = mixture.shape();
    let (k, h, w) = (s[0], s[1], s[2]);
    let d = mixture.data();
    argmax_labels(k, h, w, |slot, pixel| d[slot * h * w + pixel])
}

/// Same for attention laid out as `[H·W, K]`.
pub fn masks_from_attention<T: Real>(attn: &Tensor<T>, height: usize, width: usize) -> Segmentation {
    let k = attn.shape()[1];
    let d = attn.data();
    argmax_labels(k, height, width, |slot, pixel| d[pixel * k + slot])
}

fn argmax_labels<T: Real>(k: usize, h: usize, w: usize, score: impl Fn(usize, usize) -> T) -> Segmentation {
    let labels = (0..h * w)
        .map(|px| {
            let mut best = 0;
            for slot in 1..k {
                if score(slot, px) > score(best, px) {
                    best = slot;
                }
            }
            best as u32
        })
        .collect();
    Segmentation::new(h, w, labels).expect("dimensions match")
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, TensorError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
        };
        let encoder = Encoder::init(&mut init, &config);
        let attention = SlotAttention::init(&mut init, &config);
        let ark = Ark::init(&mut init, config.kernel);
        let ippe = config.ippe_enabled.then(|| Ippe::init(&mut init, &config));
        let d = config.slot_dim;
        let ws_init = config
            .ws_init_enabled
            .then(|| init.mlp("ws_init", &[2, d, d]));
        let decoder = Decoder::init(&mut init, &config);
        Ok(Self {
            config,
            params,
            layers: Layers {
                encoder,
                attention,
                ark,
                ippe,
                ws_init,
                decoder,
            },
        })
    }

    /// `[K, D_slot]` standard-normal draws.
    pub fn sample_noise<R: Rng>(&self, rng: &mut R) -> Tensor<T> {
        let c = &self.config;
        Tensor::from_fn(&[c.slots, c.slot_dim], |_| T::lit(rng.sample::<f64, _>(StandardNormal)))
    }

    /// Current effective ARK kernel (`Usage` error for the temperature
    /// variant, which has none).
    pub fn ark_kernel(&self) -> Result<Tensor<T>, TensorError> {
        self.layers.ark.effective_kernel(&self.params)
    }

    fn check_inputs(&self, input: &ForwardInput<'_, T>) -> Result<(), TensorError> {
        let c = &self.config;
        let want_image = [c.height, c.width, 3];
        if input.image.shape() != want_image {
            return Err(TensorError::Shape {
                op: "forward image",
                left: input.image.shape().to_vec(),
                right: want_image.to_vec(),
            });
        }
        let want_noise = [c.slots, c.slot_dim];
        if input.noise.shape() != want_noise {
            return Err(TensorError::Shape {
                op: "forward noise",
                left: input.noise.shape().to_vec(),
                right: want_noise.to_vec(),
            });
        }
        if input.points.is_some() && input.mode == Mode::Inference {
            return Err(TensorError::Usage(
                "ground-truth points are not accepted at inference".into(),
            ));
        }
        if let Some(pts) = input.points {
            if pts.len() > c.slots {
                return Err(TensorError::Config(format!(
                    "{} annotated points cannot be matched to {} slots",
                    pts.len(),
                    c.slots
                )));
            }
        }
        Ok(())
    }

    /// Annotated points seed the first slots through the initializer MLP;
    /// the remaining slots keep their Gaussian draw.
    fn ws_initial_slots(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        mlp: &Mlp,
        gaussian: Var,
        points: &[[f64; 2]],
    ) -> Result<Var, TensorError> {
        let (k, d) = (self.config.slots, self.config.slot_dim);
        let n = points.len();
        let padded = Tensor::from_fn(&[k, 2], |i| {
            if i / 2 < n { T::lit(points[i / 2][i % 2]) } else { T::zero() }
        });
        let from_points = Tensor::from_fn(&[k, d], |i| if i / d < n { T::one() } else { T::zero() });
        let from_noise = from_points.map(|v| T::one() - v);
        let padded = tape.constant(padded);
        let encoded = mlp.apply(tape, p, padded)?;
        let (mp, mn) = (tape.constant(from_points), tape.constant(from_noise));
        let a = tape.mul(gaussian, mn)?;
        let b = tape.mul(encoded, mp)?;
        tape.add(a, b)
    }

    /// Encoder, `T` refinement iterations (logits → kernel → softmax →
    /// update → optional point step), decoder.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, input: &ForwardInput<'_, T>) -> Result<ForwardOutput, TensorError> {
        self.check_inputs(input)?;
        let c = &self.config;
        let l = &self.layers;
        let image = tape.constant(input.image.clone());
        let noise = tape.constant(input.noise.clone());
        let features = l.encoder.apply(tape, p, image)?;
        let (keys, values) = l.attention.keys_values(tape, p, features)?;

        let mut gt_points_used = 0;
        let gaussian = l.attention.initial_slots(tape, p, noise)?;
        let initial_slots = match (&l.ws_init, input.points) {
            (Some(mlp), Some(pts)) if !pts.is_empty() => {
                gt_points_used += pts.len();
                self.ws_initial_slots(tape, p, mlp, gaussian, pts)?
            }
            _ => gaussian,
        };

        let mut slots = initial_slots;
        let mut iterations = Vec::with_capacity(c.iterations);
        for t in 0..c.iterations {
            let logits = l.attention.logits(tape, p, keys, slots)?;
            let refined = l.ark.apply(tape, p, logits, c.height, c.width)?;
            let field = attention_normalize(tape, refined, c.kernel.tau)?;
            slots = l.attention.update(tape, p, slots, values, &field)?;
            let mut points = None;
            let mut routed = Vec::new();
            let due = c.ippe_schedule == IppeSchedule::Every || t + 1 == c.iterations;
            if let (Some(ippe), true) = (&l.ippe, due) {
                let step = ippe.step(tape, p, slots, input.points, input.mode)?;
                gt_points_used += step.routed.iter().flatten().count();
                slots = step.slots;
                points = Some(step.points);
                routed = step.routed;
            }
            iterations.push(Iteration {
                logits,
                refined,
                field,
                points,
                routed,
            });
        }
        let decoder = l.decoder.apply(tape, p, slots, c.height, c.width)?;
        Ok(ForwardOutput {
            features,
            initial_slots,
            slots,
            iterations,
            decoder,
            gt_points_used,
        })
    }

    /// Inference pass with parameters held constant.
    pub fn infer(&self, image: &Tensor<T>, noise: &Tensor<T>) -> Result<Prediction<T>, TensorError> {
        let mut tape = Tape::new();
        let p = self.params.bind_constants(&mut tape);
        let input = ForwardInput {
            image,
            noise,
            points: None,
            mode: Mode::Inference,
        };
        let out = self.forward(&mut tape, &p, &input)?;
        assert_eq!(out.gt_points_used, 0, "inference consumed ground truth");
        Ok(collect_prediction(&tape, &out))
    }
}

pub(crate) fn collect_prediction<T: Real>(tape: &Tape<T>, out: &ForwardOutput) -> Prediction<T> {
    let v = |x: Var| tape.value(x).clone();
    Prediction {
        slots: v(out.slots),
        iterations: out
            .iterations
            .iter()
            .map(|it| IterationValues {
                logits: v(it.logits),
                refined: v(it.refined),
                attn: v(it.field.attn),
                weights: v(it.field.weights),
                points: it.points.map(v),
            })
            .collect(),
        per_slot_rgb: v(out.decoder.per_slot_rgb),
        mixture: v(out.decoder.mixture),
        reconstruction: v(out.decoder.reconstruction),
    }
}
