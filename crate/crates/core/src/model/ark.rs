use super::params::{Bound, Init, ParamId, ParamStore};
use super::{KernelKind, KernelVariant};
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

/// Kernel applied to each slot's logit map before the softmax.
#[derive(Clone, Copy, Debug)]
pub struct Ark {
    pub variant: KernelVariant,
    /// `[s, s]`, present for the learnable kinds.
    pub raw: Option<ParamId>,
}

impl Ark {
    /// Raw weights start at zero for `wnconv` and at `1/s²` for `conv`, so
    /// both begin as the uniform averaging kernel.
    pub(crate) fn init<T: Real>(init: &mut Init<'_, T>, variant: KernelVariant) -> Self {
        let s = variant.size;
        let raw = match variant.kind {
            KernelKind::Wnconv => Some(init.fill("ark.raw".into(), &[s, s], 0.0)),
            KernelKind::Conv => Some(init.fill("ark.raw".into(), &[s, s], 1.0 / (s * s) as f64)),
            _ => None,
        };
        Self { variant, raw }
    }

    /// Current effective kernel as a plain tensor.
    pub fn effective_kernel<T: Real>(&self, params: &ParamStore<T>) -> Result<Tensor<T>, TensorError> {
        let mut tape = Tape::new();
        let raw = self.raw.map(|id| tape.constant(params.get(id).clone()));
        let k = effective_kernel_var(&mut tape, &self.variant, raw)?;
        Ok(tape.value(k).clone())
    }

    /// `M: [H·W, K]` → refined logits of the same shape.
    pub fn apply<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        logits: Var,
        height: usize,
        width: usize,
    ) -> Result<Var, TensorError> {
        if matches!(self.variant.kind, KernelKind::Identity | KernelKind::Temperature) {
            return Ok(logits);
        }
        let kernel = effective_kernel_var(tape, &self.variant, self.raw.map(|id| p[id]))?;
        ark_apply(tape, logits, kernel, height, width)
    }
}

/// Isotropic Gaussian over an `s×s` grid centred on the middle cell,
/// normalized to sum to one.
pub fn gaussian_kernel<T: Real>(size: usize, sigma: f64) -> Tensor<T> {
    let c = (size / 2) as f64;
    let raw: Vec<f64> = (0..size * size)
        .map(|i| {
            let (dy, dx) = ((i / size) as f64 - c, (i % size) as f64 - c);
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Tensor::from_fn(&[size, size], |i| T::lit(raw[i] / total))
}

pub fn delta_kernel<T: Real>(size: usize) -> Tensor<T> {
    let centre = size * size / 2;
    Tensor::from_fn(&[size, size], |i| if i == centre { T::one() } else { T::zero() })
}

/// Effective `[s, s]` kernel on the tape. `raw` must be given for the
/// learnable kinds; `wnconv` takes a softmax over all `s²` raw weights.
pub fn effective_kernel_var<T: Real>(
    tape: &mut Tape<T>,
    variant: &KernelVariant,
    raw: Option<Var>,
) -> Result<Var, TensorError> {
    let s = variant.size;
    let need_raw = || TensorError::Usage(format!("{} kernel needs raw weights", variant.kind.name()));
    match variant.kind {
        KernelKind::Temperature => Err(TensorError::Usage(
            "the temperature variant has no kernel".into(),
        )),
        KernelKind::Identity => Ok(tape.constant(delta_kernel(s))),
        KernelKind::Gaussian => Ok(tape.constant(gaussian_kernel(s, variant.gaussian_sigma))),
        KernelKind::Conv => raw.ok_or_else(need_raw),
        KernelKind::Wnconv => {
            let raw = raw.ok_or_else(need_raw)?;
            let flat = tape.reshape(raw, &[1, s * s])?;
            let soft = tape.softmax(flat, 1, T::one())?;
            tape.reshape(soft, &[s, s])
        }
    }
}

/// Convolves each slot's logit map (column of `logits: [H·W, K]`) with
/// `kernel` under replicate padding.
pub fn ark_apply<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    kernel: Var,
    height: usize,
    width: usize,
) -> Result<Var, TensorError> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != height * width {
        return Err(TensorError::Shape {
            op: "ark_apply",
            left: shape,
            right: vec![height * width, 0],
        });
    }
    let k = shape[1];
    let maps = tape.transpose(logits)?;
    let maps = tape.reshape(maps, &[k, height, width])?;
    let out = tape.conv_replicate(maps, kernel)?;
    let out = tape.reshape(out, &[k, height * width])?;
    tape.transpose(out)
}
