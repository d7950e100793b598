use super::params::{Bound, Init, Mlp};
use super::{Mode, ModelConfig};
use crate::metrics::{hungarian, CostMatrix};
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

/// Point predictor (slot → `[0,1]²`) and point encoder (point → slot
/// offset).
#[derive(Clone, Debug)]
pub struct Ippe {
    pub predictor: Mlp,
    pub encoder: Mlp,
}

#[derive(Clone, Debug)]
pub struct IppeStep {
    pub slots: Var,
    /// `[K, 2]` predicted `(x, y)`.
    pub points: Var,
    /// For each slot, the annotated point index it was fed, if any.
    pub routed: Vec<Option<usize>>,
}

impl Ippe {
    pub(crate) fn init<T: Real>(init: &mut Init<'_, T>, c: &ModelConfig) -> Self {
        let d = c.slot_dim;
        Self {
            predictor: init.mlp("ippe.predictor", &[d, d, d, 2]),
            encoder: init.mlp("ippe.encoder", &[2, d, d, d]),
        }
    }

    /// `[K, 2]` points squashed into the unit square.
    pub fn predict<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, slots: Var) -> Result<Var, TensorError> {
        let raw = self.predictor.apply(tape, p, slots)?;
        Ok(tape.sigmoid(raw))
    }

    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, points: Var) -> Result<Var, TensorError> {
        self.encoder.apply(tape, p, points)
    }

    /// Predicts a point per slot, encodes it and adds the encoding to the
    /// slot. In training mode with annotated points, slots matched to an
    /// annotation (Hungarian on squared distance) encode the annotation
    /// instead of their own prediction.
    pub fn step<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        slots: Var,
        gt: Option<&[[f64; 2]]>,
        mode: Mode,
    ) -> Result<IppeStep, TensorError> {
        let k = tape.shape(slots)[0];
        let points = self.predict(tape, p, slots)?;
        let routed = match gt {
            Some(_) if mode == Mode::Inference => {
                return Err(TensorError::Usage(
                    "ground-truth points are not accepted at inference".into(),
                ))
            }
            Some(gt) if !gt.is_empty() => route(tape.value(points), gt)?,
            _ => vec![None; k],
        };
        let input = if routed.iter().any(Option::is_some) {
            let gt = gt.expect("routing implies points");
            let keep = Tensor::from_fn(&[k, 2], |i| {
                if routed[i / 2].is_some() { T::zero() } else { T::one() }
            });
            let fill = Tensor::from_fn(&[k, 2], |i| match routed[i / 2] {
                Some(j) => T::lit(gt[j][i % 2]),
                None => T::zero(),
            });
            let keep = tape.constant(keep);
            let fill = tape.constant(fill);
            let kept = tape.mul(points, keep)?;
            tape.add(kept, fill)?
        } else {
            points
        };
        let enc = self.encode(tape, p, input)?;
        let slots = tape.add(slots, enc)?;
        Ok(IppeStep {
            slots,
            points,
            routed,
        })
    }
}

/// Squared Euclidean distance between every prediction and annotation.
pub fn point_cost<T: Real>(predicted: &Tensor<T>, gt: &[[f64; 2]]) -> Result<CostMatrix, TensorError> {
    let k = predicted.shape()[0];
    let d = predicted.data();
    CostMatrix::from_fn(k, gt.len(), |r, c| {
        let dx = d[2 * r].as_f64() - gt[c][0];
        let dy = d[2 * r + 1].as_f64() - gt[c][1];
        dx * dx + dy * dy
    })
    .map_err(|e| TensorError::NonFinite(e.to_string()))
}

/// Slot → annotation index under the minimum squared-distance matching.
pub fn route<T: Real>(predicted: &Tensor<T>, gt: &[[f64; 2]]) -> Result<Vec<Option<usize>>, TensorError> {
    let k = predicted.shape()[0];
    if gt.len() > k {
        return Err(TensorError::Config(format!(
            "{} annotated points cannot be matched to {k} slots",
            gt.len()
        )));
    }
    let cost = point_cost(predicted, gt)?;
    let a = hungarian(&cost).map_err(|e| TensorError::NonFinite(e.to_string()))?;
    Ok(a.row_to_col)
}
