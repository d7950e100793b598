use std::ops::Index;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{GruVars, Real, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Euclidean norm over every entry.
    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Records every parameter on `tape` as a gradient-carrying leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.param(t.clone())).collect())
    }

    /// Records every parameter as a constant; nothing is differentiated.
    pub fn bind_constants(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.constant(t.clone())).collect())
    }

    /// Same as `bind`, but with caller-supplied values (used by finite differences).
    pub fn bind_values(&self, tape: &mut Tape<T>, values: &[Tensor<T>]) -> Bound {
        assert_eq!(values.len(), self.len());
        Bound(values.iter().map(|t| tape.param(t.clone())).collect())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps handles created elsewhere, in [`ParamStore`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Registers freshly initialized layers.
pub(crate) struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Init<'_, T> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..=bound)));
        self.store.add(name, t)
    }

    pub fn xavier(&mut self, name: String, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(name, shape, bound)
    }

    pub fn fill(&mut self, name: String, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, T::lit(value)))
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.xavier(format!("{name}.weight"), &[fan_in, fan_out], fan_in, fan_out),
            b: self.fill(format!("{name}.bias"), &[fan_out], 0.0),
        }
    }

    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> Conv {
        Conv {
            w: self.xavier(
                format!("{name}.weight"),
                &[c_out, c_in, k, k],
                c_in * k * k,
                c_out * k * k,
            ),
            b: self.fill(format!("{name}.bias"), &[c_out], 0.0),
        }
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> LayerNorm {
        LayerNorm {
            gain: self.fill(format!("{name}.gain"), &[d], 1.0),
            bias: self.fill(format!("{name}.bias"), &[d], 0.0),
        }
    }

    /// Widths `[in, h1, ..., out]`.
    pub fn mlp(&mut self, name: &str, widths: &[usize]) -> Mlp {
        Mlp {
            layers: widths
                .windows(2)
                .enumerate()
                .map(|(i, w)| self.linear(&format!("{name}.{i}"), w[0], w[1]))
                .collect(),
        }
    }

    pub fn gru(&mut self, name: &str, d_in: usize, d: usize) -> Gru {
        let mut w = |s: &str, fan_in| self.xavier(format!("{name}.{s}"), &[fan_in, d], fan_in, d);
        let (w_xr, w_xz, w_xn) = (w("w_xr", d_in), w("w_xz", d_in), w("w_xn", d_in));
        let (w_hr, w_hz, w_hn) = (w("w_hr", d), w("w_hz", d), w("w_hn", d));
        let mut b = |s: &str| self.fill(format!("{name}.{s}"), &[d], 0.0);
        Gru {
            w_xr,
            w_xz,
            w_xn,
            w_hr,
            w_hz,
            w_hn,
            b_r: b("b_r"),
            b_z: b("b_z"),
            b_xn: b("b_xn"),
            b_hn: b("b_hn"),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var, TensorError> {
        tape.linear(x, p[self.w], Some(p[self.b]))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var, TensorError> {
        tape.conv2d(x, p[self.w], p[self.b])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    /// Normalizes the last axis.
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let axis = tape.shape(x).len() - 1;
        tape.layer_norm(x, axis, p[self.gain], p[self.bias])
    }
}

/// Linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.apply(tape, p, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Gru {
    pub w_xr: ParamId,
    pub w_xz: ParamId,
    pub w_xn: ParamId,
    pub w_hr: ParamId,
    pub w_hz: ParamId,
    pub w_hn: ParamId,
    pub b_r: ParamId,
    pub b_z: ParamId,
    pub b_xn: ParamId,
    pub b_hn: ParamId,
}

impl Gru {
    pub fn vars(&self, p: &Bound) -> GruVars {
        GruVars {
            w_xr: p[self.w_xr],
            w_xz: p[self.w_xz],
            w_xn: p[self.w_xn],
            w_hr: p[self.w_hr],
            w_hz: p[self.w_hz],
            w_hn: p[self.w_hn],
            b_r: p[self.b_r],
            b_z: p[self.b_z],
            b_xn: p[self.b_xn],
            b_hn: p[self.b_hn],
        }
    }
}
