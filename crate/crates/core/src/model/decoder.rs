use super::encoder::PositionEmbedding;
use super::params::{Bound, Conv, Init};
use super::ModelConfig;
use crate::tensor::{Real, Tape, TensorError, Var};

/// Tape handles of a decoded slot set.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    /// `[K, H, W, 3]`
    pub per_slot_rgb: Var,
    /// `[K, H, W]`
    pub per_slot_alpha_logits: Var,
    /// `[K, H, W]`, softmax of the alpha logits over slots.
    pub mixture: Var,
    /// `[H, W, 3]`
    pub reconstruction: Var,
}

/// Spatial broadcast decoder shared by all slots.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub pos: PositionEmbedding,
    pub convs: Vec<Conv>,
}

impl Decoder {
    pub(crate) fn init<T: Real>(init: &mut Init<'_, T>, c: &ModelConfig) -> Self {
        let ch = c.conv_channels;
        let widths = [c.slot_dim, ch, ch, ch, 4];
        Self {
            pos: PositionEmbedding {
                proj: init.linear("decoder.pos", 4, c.slot_dim),
            },
            convs: widths
                .windows(2)
                .enumerate()
                .map(|(i, w)| init.conv(&format!("decoder.conv{i}"), w[0], w[1], c.conv_kernel))
                .collect(),
        }
    }

    /// `slots: [K, D_slot]` → per-slot RGB-A and their alpha-composited mix.
    pub fn apply<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        slots: Var,
        height: usize,
        width: usize,
    ) -> Result<DecoderOutput, TensorError> {
        let (k, d) = match tape.shape(slots) {
            &[k, d] => (k, d),
            s => {
                return Err(TensorError::Shape {
                    op: "decode_slots",
                    left: s.to_vec(),
                    right: vec![0, 0],
                })
            }
        };
        let (h, w) = (height, width);
        let s4 = tape.reshape(slots, &[k, d, 1, 1])?;
        let tiled = tape.expand(s4, &[k, d, h, w])?;
        let pos = self.pos.apply(tape, p, h, w)?;
        let pos = tape.transpose(pos)?;
        let pos = tape.reshape(pos, &[1, d, h, w])?;
        let pos = tape.expand(pos, &[k, d, h, w])?;
        let mut x = tape.add(tiled, pos)?;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.apply(tape, p, x)?;
            if i + 1 < self.convs.len() {
                x = tape.relu(x);
            }
        }
        let rgb = tape.slice(x, 1, 0, 3)?;
        let alpha = tape.slice(x, 1, 3, 1)?;
        let alpha = tape.reshape(alpha, &[k, h, w])?;
        let mixture = tape.softmax(alpha, 0, T::one())?;
        let m4 = tape.reshape(mixture, &[k, 1, h, w])?;
        let m4 = tape.expand(m4, &[k, 3, h, w])?;
        let weighted = tape.mul(m4, rgb)?;
        let recon = tape.sum_axis(weighted, 0)?;
        let reconstruction = tape.permute(recon, &[1, 2, 0])?;
        let per_slot_rgb = tape.permute(rgb, &[0, 2, 3, 1])?;
        Ok(DecoderOutput {
            per_slot_rgb,
            per_slot_alpha_logits: alpha,
            mixture,
            reconstruction,
        })
    }
}
