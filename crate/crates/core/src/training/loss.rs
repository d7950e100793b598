use serde::{Deserialize, Serialize};

use crate::metrics::Assignment;
use crate::model::{point_cost, ForwardOutput};
use crate::metrics::hungarian;
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointIterations {
    /// Predictions of the last iteration that produced any.
    Final,
    /// Mean over every iteration that produced predictions.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub recon_weight: f64,
    pub point_weight: f64,
    pub point_loss_iterations: PointIterations,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            recon_weight: 1.0,
            point_weight: 0.1,
            point_loss_iterations: PointIterations::Final,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        for (name, w) in [("recon_weight", self.recon_weight), ("point_weight", self.point_weight)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(TensorError::Config(format!("{name} must be non-negative, got {w}")));
            }
        }
        Ok(())
    }
}

/// Matched point loss on the tape, with the matching that produced it.
#[derive(Clone, Debug)]
pub struct PointLoss {
    pub loss: Var,
    pub assignment: Assignment,
}

/// Hungarian-matched point loss: the mean, over annotated points, of the
/// squared distance to the prediction they are matched with. Slots left
/// unmatched contribute nothing. `None` when there is nothing to match.
pub fn point_loss<T: Real>(
    tape: &mut Tape<T>,
    predicted: Var,
    gt: &[[f64; 2]],
) -> Result<Option<PointLoss>, TensorError> {
    if gt.is_empty() {
        return Ok(None);
    }
    let k = tape.shape(predicted)[0];
    if gt.len() > k {
        return Err(TensorError::Config(format!(
            "{} annotated points cannot be matched to {k} predictions",
            gt.len()
        )));
    }
    let cost = point_cost(tape.value(predicted), gt)?;
    let assignment = hungarian(&cost).map_err(|e| TensorError::NonFinite(e.to_string()))?;
    let cols = assignment.col_to_row(gt.len());
    let rows: Vec<usize> = cols.iter().map(|r| r.expect("every point is matched")).collect();
    let matched = tape.select_rows(predicted, &rows)?;
    let target = Tensor::from_fn(&[gt.len(), 2], |i| T::lit(gt[i / 2][i % 2]));
    let target = tape.constant(target);
    let d = tape.sub(matched, target)?;
    let sq = tape.mul(d, d)?;
    let total = tape.sum(sq);
    let loss = tape.scale(total, T::one() / T::lit(gt.len() as f64));
    Ok(Some(PointLoss { loss, assignment }))
}

/// Logged loss components (unweighted) and the weighted total on the tape.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub recon: f64,
    /// 0 when the point term was skipped.
    pub point: f64,
    pub point_skipped: bool,
}

/// `recon_weight · MSE(image, reconstruction) + point_weight · point loss`;
/// the point term only enters for annotated samples with predictions.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    image: &Tensor<T>,
    out: &ForwardOutput,
    annotated: Option<&[[f64; 2]]>,
    cfg: &LossConfig,
) -> Result<LossTerms, TensorError> {
    let target = tape.constant(image.clone());
    let recon = tape.mse(out.decoder.reconstruction, target)?;
    let recon_value = tape.value(recon).item().as_f64();
    let mut total = tape.scale(recon, T::lit(cfg.recon_weight));

    let predictions: Vec<Var> = match cfg.point_loss_iterations {
        PointIterations::Final => out.final_points().into_iter().collect(),
        PointIterations::All => out.iterations.iter().filter_map(|it| it.points).collect(),
    };
    let mut point_terms = Vec::new();
    if let Some(gt) = annotated {
        for &p in &predictions {
            if let Some(pl) = point_loss(tape, p, gt)? {
                point_terms.push(pl.loss);
            }
        }
    }
    let (point_value, skipped) = if point_terms.is_empty() {
        (0.0, true)
    } else {
        let mut acc = point_terms[0];
        for &t in &point_terms[1..] {
            acc = tape.add(acc, t)?;
        }
        let mean = tape.scale(acc, T::one() / T::lit(point_terms.len() as f64));
        let v = tape.value(mean).item().as_f64();
        let weighted = tape.scale(mean, T::lit(cfg.point_weight));
        total = tape.add(total, weighted)?;
        (v, false)
    };
    Ok(LossTerms {
        total,
        recon: recon_value,
        point: point_value,
        point_skipped: skipped,
    })
}
