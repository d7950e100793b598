use super::params::{Bound, Conv, Init, LayerNorm, Linear, Mlp};
use super::ModelConfig;
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

/// `[H·W, 4]` grid of `(y, x, 1 − y, 1 − x)` with coordinates spanning
/// `[0, 1]` inclusive.
pub fn position_grid<T: Real>(height: usize, width: usize) -> Tensor<T> {
    let lin = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    let mut data = Vec::with_capacity(height * width * 4);
    for y in 0..height {
        for x in 0..width {
            let (fy, fx) = (lin(y, height), lin(x, width));
            data.extend([fy, fx, 1.0 - fy, 1.0 - fx].map(T::lit));
        }
    }
    Tensor::new(&[height * width, 4], data).expect("grid shape")
}

/// Additive positional embedding: a linear map of the coordinate grid.
#[derive(Clone, Copy, Debug)]
pub struct PositionEmbedding {
    pub proj: Linear,
}

impl PositionEmbedding {
    /// `[H·W, d]`.
    pub fn apply<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        height: usize,
        width: usize,
    ) -> Result<Var, TensorError> {
        let grid = tape.constant(position_grid(height, width));
        self.proj.apply(tape, p, grid)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub convs: Vec<Conv>,
    pub pos: PositionEmbedding,
    pub norm: LayerNorm,
    pub mlp: Mlp,
}

impl Encoder {
    pub(crate) fn init<T: Real>(init: &mut Init<'_, T>, c: &ModelConfig) -> Self {
        let ch = c.conv_channels;
        let widths = [3, ch, ch, ch, c.enc_dim];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| init.conv(&format!("encoder.conv{i}"), w[0], w[1], c.conv_kernel))
            .collect();
        Self {
            convs,
            pos: PositionEmbedding {
                proj: init.linear("encoder.pos", 4, c.enc_dim),
            },
            norm: init.layer_norm("encoder.norm", c.enc_dim),
            mlp: init.mlp("encoder.mlp", &[c.enc_dim, c.enc_dim, c.enc_dim]),
        }
    }

    /// `image: [H, W, 3]` → features `[H·W, D_enc]`.
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<Var, TensorError> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(TensorError::Shape {
                op: "encode_image",
                left: shape,
                right: vec![0, 0, 3],
            });
        }
        let (h, w) = (shape[0], shape[1]);
        let chw = tape.permute(image, &[2, 0, 1])?;
        let mut x = tape.reshape(chw, &[1, 3, h, w])?;
        for conv in &self.convs {
            let y = conv.apply(tape, p, x)?;
            x = tape.relu(y);
        }
        let d = tape.shape(x)[1];
        let flat = tape.reshape(x, &[d, h * w])?;
        let feats = tape.transpose(flat)?;
        let pos = self.pos.apply(tape, p, h, w)?;
        let feats = tape.add(feats, pos)?;
        let normed = self.norm.apply(tape, p, feats)?;
        self.mlp.apply(tape, p, normed)
    }
}
