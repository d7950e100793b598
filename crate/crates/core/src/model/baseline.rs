//! Plain Slot Attention forward pass, written without any of the kernel or
//! point-module branches. Used as the reference the full model must reduce
//! to.

use super::params::Bound;
use super::slash::{collect_prediction, ForwardOutput, Iteration, Model, Prediction};
use super::attention::{AttentionField, ATTN_EPS};
use crate::tensor::{gru_cell, Real, Tape, Tensor, TensorError};

/// Runs `model`'s encoder, slot attention and decoder with plain softmax
/// attention, ignoring its kernel and point settings.
pub fn plain_slot_attention_forward<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    p: &Bound,
    image: &Tensor<T>,
    noise: &Tensor<T>,
) -> Result<ForwardOutput, TensorError> {
    let c = &model.config;
    let l = &model.layers;
    let sa = &l.attention;
    let (n, k, ds) = (c.pixels(), c.slots, c.slot_dim);

    let image = tape.constant(image.clone());
    let noise = tape.constant(noise.clone());
    let features = l.encoder.apply(tape, p, image)?;
    let x = tape.layer_norm(features, 1, p[sa.norm_inputs.gain], p[sa.norm_inputs.bias])?;
    let keys = tape.matmul(x, p[sa.to_k])?;
    let values = tape.matmul(x, p[sa.to_v])?;

    let sigma = tape.reshape(p[sa.sigma], &[1, ds])?;
    let sigma = tape.expand(sigma, &[k, ds])?;
    let scaled = tape.mul(sigma, noise)?;
    let initial_slots = tape.add_row(scaled, p[sa.mu])?;

    let scale = T::one() / T::lit((c.attn_dim as f64).sqrt());
    let mut slots = initial_slots;
    let mut iterations = Vec::new();
    for _ in 0..c.iterations {
        let prev = slots;
        let s = tape.layer_norm(slots, 1, p[sa.norm_slots.gain], p[sa.norm_slots.bias])?;
        let q = tape.matmul(s, p[sa.to_q])?;
        let qt = tape.transpose(q)?;
        let dots = tape.matmul(keys, qt)?;
        let logits = tape.scale(dots, scale);

        let attn = tape.softmax(logits, 1, T::one())?;
        let mass = tape.sum_axis(attn, 0)?;
        let mass = tape.affine(mass, T::one(), T::lit(ATTN_EPS));
        let mass = tape.reshape(mass, &[1, k])?;
        let mass = tape.expand(mass, &[n, k])?;
        let weights = tape.div(attn, mass)?;

        let wt = tape.transpose(weights)?;
        let updates = tape.matmul(wt, values)?;
        let h = gru_cell(tape, prev, updates, &sa.gru.vars(p))?;
        let hn = tape.layer_norm(h, 1, p[sa.norm_mlp.gain], p[sa.norm_mlp.bias])?;
        let m = sa.mlp.apply(tape, p, hn)?;
        slots = tape.add(h, m)?;
        iterations.push(Iteration {
            logits,
            refined: logits,
            field: AttentionField { attn, weights },
            points: None,
            routed: Vec::new(),
        });
    }
    let decoder = l.decoder.apply(tape, p, slots, c.height, c.width)?;
    Ok(ForwardOutput {
        features,
        initial_slots,
        slots,
        iterations,
        decoder,
        gt_points_used: 0,
    })
}

/// Constant-parameter inference through the plain path.
pub fn plain_slot_attention_infer<T: Real>(
    model: &Model<T>,
    image: &Tensor<T>,
    noise: &Tensor<T>,
) -> Result<Prediction<T>, TensorError> {
    let mut tape = Tape::new();
    let p = model.params.bind_constants(&mut tape);
    let out = plain_slot_attention_forward(model, &mut tape, &p, image, noise)?;
    Ok(collect_prediction(&tape, &out))
}
