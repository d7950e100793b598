use super::params::{Bound, Gru, Init, LayerNorm, Mlp, ParamId};
use super::ModelConfig;
use crate::tensor::{gru_cell, Real, Tape, TensorError, Var};

/// Added to each slot's attention mass before normalizing over pixels.
pub const ATTN_EPS: f64 = 1e-8;

/// Attention of one iteration.
#[derive(Clone, Copy, Debug)]
pub struct AttentionField {
    /// `[H·W, K]`, softmax over slots per pixel.
    pub attn: Var,
    /// `[H·W, K]`, `attn` normalized over pixels per slot.
    pub weights: Var,
}

/// Slot initialization distribution, projections, GRU and residual MLP.
#[derive(Clone, Debug)]
pub struct SlotAttention {
    pub mu: ParamId,
    pub sigma: ParamId,
    pub norm_inputs: LayerNorm,
    pub norm_slots: LayerNorm,
    pub norm_mlp: LayerNorm,
    pub to_k: ParamId,
    pub to_q: ParamId,
    pub to_v: ParamId,
    pub gru: Gru,
    pub mlp: Mlp,
}

impl SlotAttention {
    pub(crate) fn init<T: Real>(init: &mut Init<'_, T>, c: &ModelConfig) -> Self {
        let (ds, de, d) = (c.slot_dim, c.enc_dim, c.attn_dim);
        let mu = init.xavier("slots.mu".into(), &[ds], 1, ds);
        let sigma = {
            let id = init.xavier("slots.sigma".into(), &[ds], 1, ds);
            let t = init.store.get_mut(id);
            *t = t.map(|v| v.exp());
            id
        };
        Self {
            mu,
            sigma,
            norm_inputs: init.layer_norm("attention.norm_inputs", de),
            norm_slots: init.layer_norm("attention.norm_slots", ds),
            norm_mlp: init.layer_norm("attention.norm_mlp", ds),
            to_k: init.xavier("attention.to_k".into(), &[de, d], de, d),
            to_q: init.xavier("attention.to_q".into(), &[ds, d], ds, d),
            to_v: init.xavier("attention.to_v".into(), &[de, d], de, d),
            gru: init.gru("attention.gru", d, ds),
            mlp: init.mlp("attention.mlp", &[ds, c.mlp_hidden, ds]),
        }
    }

    /// `mu + sigma ⊙ noise` for `noise: [K, D_slot]`.
    pub fn initial_slots<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, noise: Var) -> Result<Var, TensorError> {
        let shape = tape.shape(noise).to_vec();
        let sigma = tape.reshape(p[self.sigma], &[1, shape[1]])?;
        let sigma = tape.expand(sigma, &shape)?;
        let scaled = tape.mul(sigma, noise)?;
        tape.add_row(scaled, p[self.mu])
    }

    /// Normalized inputs projected to keys and values, each `[H·W, D]`.
    pub fn keys_values<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, features: Var) -> Result<(Var, Var), TensorError> {
        let x = self.norm_inputs.apply(tape, p, features)?;
        let k = tape.matmul(x, p[self.to_k])?;
        let v = tape.matmul(x, p[self.to_v])?;
        Ok((k, v))
    }

    /// Logits of the current slots against precomputed keys.
    pub fn logits<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, keys: Var, slots: Var) -> Result<Var, TensorError> {
        let s = self.norm_slots.apply(tape, p, slots)?;
        let q = tape.matmul(s, p[self.to_q])?;
        attention_logits(tape, keys, q)
    }

    /// GRU step on the attention-weighted values, then the residual MLP.
    pub fn update<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        slots: Var,
        values: Var,
        field: &AttentionField,
    ) -> Result<Var, TensorError> {
        slot_update(tape, slots, values, field, |tape, prev, updates| {
            let h = gru_cell(tape, prev, updates, &self.gru.vars(p))?;
            let n = self.norm_mlp.apply(tape, p, h)?;
            let m = self.mlp.apply(tape, p, n)?;
            tape.add(h, m)
        })
    }
}

/// `M = k · qᵀ / √D` for `k: [N, D]`, `q: [K, D]`.
pub fn attention_logits<T: Real>(tape: &mut Tape<T>, k: Var, q: Var) -> Result<Var, TensorError> {
    let d = tape.shape(k)[1];
    let qt = tape.transpose(q)?;
    let m = tape.matmul(k, qt)?;
    Ok(tape.scale(m, T::one() / T::lit((d as f64).sqrt())))
}

/// Softmax over slots at temperature `tau`, then per-slot normalization
/// over pixels with an [`ATTN_EPS`] guard.
pub fn attention_normalize<T: Real>(tape: &mut Tape<T>, logits: Var, tau: f64) -> Result<AttentionField, TensorError> {
    let shape = tape.shape(logits).to_vec();
    let attn = tape.softmax(logits, 1, T::lit(tau))?;
    let mass = tape.sum_axis(attn, 0)?;
    let mass = tape.affine(mass, T::one(), T::lit(ATTN_EPS));
    let mass = tape.reshape(mass, &[1, shape[1]])?;
    let mass = tape.expand(mass, &shape)?;
    let weights = tape.div(attn, mass)?;
    Ok(AttentionField { attn, weights })
}

/// `updates = Wᵀ · v`, handed with the previous slots to `recur`.
pub fn slot_update<T: Real>(
    tape: &mut Tape<T>,
    slots: Var,
    values: Var,
    field: &AttentionField,
    recur: impl FnOnce(&mut Tape<T>, Var, Var) -> Result<Var, TensorError>,
) -> Result<Var, TensorError> {
    let wt = tape.transpose(field.weights)?;
    let updates = tape.matmul(wt, values)?;
    recur(tape, slots, updates)
}
