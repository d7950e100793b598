//! Dense tensors with a reverse-mode tape.
//!
//! Only the operations the slot-attention model needs are provided. Every
//! differentiable op lives on [`Tape`]; composite layers (`linear`, `mse`,
//! [`gru_cell`]) are built from those primitives so their gradients come for
//! free. [`finite_diff_check`] is the independent oracle used by the tests.

mod array;
mod gradcheck;
mod tape;

pub use array::{Real, Tensor};
pub use gradcheck::{finite_diff_check, finite_diff_check_with, relative_error, FdOptions, GradCheckReport};
pub use tape::{Gradients, Tape, Var};

#[cfg(test)]
use tape::sigmoid;

use thiserror::Error;

/// Variance epsilon for layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

impl<T: Real> Tape<T> {
    /// `x · w (+ b)` for `x: [m, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }
}

/// Parameters of a gated recurrent unit with input width `d_in` and hidden
/// width `d`. Input weights are `[d_in, d]`, hidden weights `[d, d]`, biases
/// `[d]`.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_xr: Var,
    pub w_xz: Var,
    pub w_xn: Var,
    pub w_hr: Var,
    pub w_hz: Var,
    pub w_hn: Var,
    pub b_r: Var,
    pub b_z: Var,
    pub b_xn: Var,
    pub b_hn: Var,
}

/// Row-wise GRU update of `state: [K, d]` driven by `input: [K, d_in]`.
///
/// ```text
/// r  = σ(x W_xr + h W_hr + b_r)
/// z  = σ(x W_xz + h W_hz + b_z)
/// n  = tanh(x W_xn + b_xn + r ⊙ (h W_hn + b_hn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
pub fn gru_cell<T: Real>(
    tape: &mut Tape<T>,
    state: Var,
    input: Var,
    p: &GruVars,
) -> Result<Var, TensorError> {
    let (ss, si) = (tape.shape(state).to_vec(), tape.shape(input).to_vec());
    if ss.len() != 2 || si.len() != 2 || ss[0] != si[0] {
        return Err(TensorError::Shape {
            op: "gru_cell",
            left: ss,
            right: si,
        });
    }
    let gate = |tape: &mut Tape<T>, wx: Var, wh: Var, b: Var| -> Result<Var, TensorError> {
        let a = tape.linear(input, wx, Some(b))?;
        let h = tape.matmul(state, wh)?;
        let s = tape.add(a, h)?;
        Ok(tape.sigmoid(s))
    };
    let r = gate(tape, p.w_xr, p.w_hr, p.b_r)?;
    let z = gate(tape, p.w_xz, p.w_hz, p.b_z)?;
    let xn = tape.linear(input, p.w_xn, Some(p.b_xn))?;
    let hn = tape.linear(state, p.w_hn, Some(p.b_hn))?;
    let rhn = tape.mul(r, hn)?;
    let pre = tape.add(xn, rhn)?;
    let n = tape.tanh(pre);
    let keep = tape.affine(z, -T::one(), T::one());
    let a = tape.mul(keep, n)?;
    let b = tape.mul(z, state)?;
    tape.add(a, b)
}

#[cfg(test)]
mod tests;
