//! Reverse-mode tape.
//!
//! Operations append nodes in execution order, so node indices are already a
//! topological order and `backward` is a single reverse sweep. A tape is
//! single-use: build it, call `backward` once or more, then drop it. Training
//! rebuilds a fresh tape every step.

use super::array::{check_shape, numel, split_axis, strides, Real, Tensor};
use super::TensorError;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Affine(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax {
        x: Var,
        axis: usize,
        tau: T,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Permute {
        x: Var,
        map: Vec<usize>,
    },
    Reshape(Var),
    Expand {
        x: Var,
        map: Vec<usize>,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    ConvReplicate {
        x: Var,
        k: Var,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `like`'s shape when `v` received none.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let ng = t.requires_grad();
        self.push(t, Op::Leaf, ng)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_grad())
    }

    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::Matmul(a, b), ng))
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(shape_err("add_row", sx, sb));
        }
        let n = sx[1];
        let b = self.data(bias);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        let value = Tensor::new(sx, data)?;
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(value, Op::AddRow(x, bias), ng))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        let ng = self.ng(x);
        self.push(value, Op::Affine(x, scale), ng)
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Var {
        self.affine(x, scale, T::zero())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v < T::zero() { T::zero() } else { v });
        let ng = self.ng(x);
        self.push(value, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(value, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(T::tanh);
        let ng = self.ng(x);
        self.push(value, Op::Tanh(x), ng)
    }

    // ---- normalization -------------------------------------------------

    /// Softmax of `x / tau` along `axis`, stabilized by max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize, tau: T) -> Result<Var, TensorError> {
        if !(tau > T::zero()) {
            return Err(TensorError::Config(format!(
                "softmax temperature must be positive, got {tau}"
            )));
        }
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Usage(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let out = softmax_raw(self.data(x), &shape, axis, tau);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x, axis, tau }, ng))
    }

    /// Standardizes along `axis` (variance epsilon `LAYER_NORM_EPS`), then
    /// applies `gain` and `bias` elementwise along that axis.
    pub fn layer_norm(
        &mut self,
        x: Var,
        axis: usize,
        gain: Var,
        bias: Var,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Usage(format!(
                "layer_norm axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        for p in [gain, bias] {
            if self.shape(p) != [n] {
                return Err(shape_err("layer_norm", &shape, self.shape(p)));
            }
        }
        let eps = T::lit(super::LAYER_NORM_EPS);
        let nf = T::lit(n as f64);
        let xd = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let mut mean = T::zero();
                for i in 0..n {
                    mean += xd[idx(i)];
                }
                mean /= nf;
                let mut var = T::zero();
                for i in 0..n {
                    let d = xd[idx(i)] - mean;
                    var += d * d;
                }
                var /= nf;
                let r = T::one() / (var + eps).sqrt();
                rstd[o * inner + j] = r;
                for i in 0..n {
                    let h = (xd[idx(i)] - mean) * r;
                    xhat[idx(i)] = h;
                    out[idx(i)] = h * g[i] + b[i];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            axis,
            xhat,
            rstd,
        };
        Ok(self.push(Tensor::new(&shape, out)?, op, ng))
    }

    // ---- layout --------------------------------------------------------

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", &shape, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let in_strides = strides(&shape);
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let map = gather_map(&out_shape, &src_strides);
        let xd = self.data(x);
        let data = map.iter().map(|&i| xd[i]).collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Permute { x, map }, ng))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        if self.shape(x).len() != 2 {
            return Err(shape_err("transpose", self.shape(x), &[2]));
        }
        self.permute(x, &[1, 0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    /// Broadcasts size-1 dimensions of `x` up to `shape` (same rank).
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let src = self.shape(x).to_vec();
        check_shape(shape)?;
        if src.len() != shape.len()
            || src.iter().zip(shape).any(|(&s, &t)| s != 1 && s != t)
        {
            return Err(shape_err("expand", &src, shape));
        }
        let st = strides(&src);
        let src_strides: Vec<usize> = src
            .iter()
            .zip(&st)
            .map(|(&d, &s)| if d == 1 { 0 } else { s })
            .collect();
        let map = gather_map(shape, &src_strides);
        let xd = self.data(x);
        let data = map.iter().map(|&i| xd[i]).collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Expand { x, map }, ng))
    }

    /// Sums out `axis`; the axis is removed (a rank-1 input yields `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Usage(format!(
                "sum_axis axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let row = &xd[(o * n + i) * inner..][..inner];
                for (acc, &v) in out[o * inner..][..inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::SumAxis { x, axis }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Rows `rows` of `x` along axis 0, in the given order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if rows.is_empty() || rows.iter().any(|&r| r >= shape[0]) {
            return Err(TensorError::Usage(format!(
                "select_rows {rows:?} invalid for {shape:?}"
            )));
        }
        let width: usize = shape[1..].iter().product();
        let xd = self.data(x);
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            data.extend_from_slice(&xd[r * width..][..width]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        let ng = self.ng(x);
        let op = Op::SelectRows {
            x,
            rows: rows.to_vec(),
        };
        Ok(self.push(Tensor::new(&out_shape, data)?, op, ng))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(
        &mut self,
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::Usage(format!(
                "slice axis {axis} [{start}, {}) invalid for {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&xd[(o * n + start) * inner..][..len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::Slice { x, axis, start },
            ng,
        ))
    }

    // ---- convolution ---------------------------------------------------

    /// Stride-1 "same" convolution with zero padding.
    ///
    /// `x: [N, C_in, H, W]`, `w: [C_out, C_in, k, k]` with odd `k`,
    /// `b: [C_out]` → `[N, C_out, H, W]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || sb != [sw[0]] {
            return Err(shape_err("conv2d", sx, sw));
        }
        if sw[2] % 2 == 0 {
            return Err(TensorError::Config(format!(
                "conv2d kernel size must be odd, got {}",
                sw[2]
            )));
        }
        let geo = ConvGeom {
            n: sx[0],
            ci: sx[1],
            h: sx[2],
            w: sx[3],
            co: sw[0],
            k: sw[2],
        };
        let out = conv2d_forward(&geo, self.data(x), self.data(w), self.data(b));
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        let shape = [geo.n, geo.co, geo.h, geo.w];
        Ok(self.push(Tensor::new(&shape, out)?, Op::Conv2d { x, w, b }, ng))
    }

    /// Single-channel "same" convolution with replicate (edge) padding,
    /// applied independently to each of the `N` maps of `x: [N, H, W]`
    /// with one shared odd `s×s` kernel.
    pub fn conv_replicate(&mut self, x: Var, kernel: Var) -> Result<Var, TensorError> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 3 || sk.len() != 2 || sk[0] != sk[1] {
            return Err(shape_err("conv_replicate", &sx, &sk));
        }
        if sk[0] % 2 == 0 {
            return Err(TensorError::Config(format!(
                "kernel size must be odd, got {}",
                sk[0]
            )));
        }
        let out = conv_replicate_forward(self.data(x), &sx, self.data(kernel), sk[0]);
        let ng = self.ng(x) || self.ng(kernel);
        Ok(self.push(Tensor::new(&sx, out)?, Op::ConvReplicate { x, k: kernel }, ng))
    }

    // ---- reverse sweep -------------------------------------------------

    /// Backpropagates from a single-element `loss`.
    ///
    /// Every node that depends on a `requires_grad` leaf gets a gradient of
    /// its own shape; other nodes get none.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].needs_grad)
                    .map(|d| Tensor::new(self.nodes[i].value.shape(), d).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        let grow = &g[i * n..][..n];
                        for p in 0..k {
                            let brow = &bd[p * n..][..n];
                            let mut s = T::zero();
                            for (x, y) in grow.iter().zip(brow) {
                                s += *x * *y;
                            }
                            ga[i * k + p] += s;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..][..n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            for (dst, &gv) in gb[p * n..][..n].iter_mut().zip(grow) {
                                *dst += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (d, &v) in gb.iter_mut().zip(g) {
                        *d -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for ((d, &v), &y) in ga.iter_mut().zip(g).zip(bd) {
                        *d += v * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((d, &v), &x) in gb.iter_mut().zip(g).zip(ad) {
                        *d += v * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for ((d, &v), &y) in ga.iter_mut().zip(g).zip(bd) {
                        *d += v / y;
                    }
                });
                acc(*b, &mut |gb| {
                    for (((d, &v), &x), &y) in gb.iter_mut().zip(g).zip(ad).zip(bd) {
                        *d -= v * x / (y * y);
                    }
                });
            }
            Op::AddRow(x, b) => {
                let n = self.shape(*b)[0];
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*b, &mut |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Affine(x, s) => acc(*x, &mut |gx| {
                for (d, &v) in gx.iter_mut().zip(g) {
                    *d += v * *s;
                }
            }),
            Op::Relu(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |gx| {
                    for ((d, &v), &xv) in gx.iter_mut().zip(g).zip(xd) {
                        if xv > T::zero() {
                            *d += v;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for ((d, &v), &yv) in gx.iter_mut().zip(g).zip(y) {
                        *d += v * yv * (T::one() - yv);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for ((d, &v), &yv) in gx.iter_mut().zip(g).zip(y) {
                        *d += v * (T::one() - yv * yv);
                    }
                });
            }
            Op::Softmax { x, axis, tau } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * n + i) * inner + j;
                            let mut dot = T::zero();
                            for i in 0..n {
                                dot += g[idx(i)] * y[idx(i)];
                            }
                            for i in 0..n {
                                gx[idx(i)] += y[idx(i)] * (g[idx(i)] - dot) / *tau;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                rstd,
            } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let gd = self.data(*gain);
                let nf = T::lit(n as f64);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * n + i) * inner + j;
                            let mut s1 = T::zero();
                            let mut s2 = T::zero();
                            for i in 0..n {
                                let dh = g[idx(i)] * gd[i];
                                s1 += dh;
                                s2 += dh * xhat[idx(i)];
                            }
                            let r = rstd[o * inner + j];
                            for i in 0..n {
                                let dh = g[idx(i)] * gd[i];
                                gx[idx(i)] += r / nf * (nf * dh - s1 - xhat[idx(i)] * s2);
                            }
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for o in 0..outer {
                        for i in 0..n {
                            for j in 0..inner {
                                let at = (o * n + i) * inner + j;
                                gg[i] += g[at] * xhat[at];
                            }
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for o in 0..outer {
                        for i in 0..n {
                            for j in 0..inner {
                                gb[i] += g[(o * n + i) * inner + j];
                            }
                        }
                    }
                });
            }
            Op::Permute { x, map } | Op::Expand { x, map } => acc(*x, &mut |gx| {
                for (&src, &v) in map.iter().zip(g) {
                    gx[src] += v;
                }
            }),
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let grow = &g[o * inner..][..inner];
                        for i in 0..n {
                            add_into(&mut gx[(o * n + i) * inner..][..inner], grow);
                        }
                    }
                });
            }
            Op::SumAll(x) => acc(*x, &mut |gx| {
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::SelectRows { x, rows } => {
                let width: usize = self.shape(*x)[1..].iter().product();
                acc(*x, &mut |gx| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * width..][..width], &g[k * width..][..width]);
                    }
                });
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        add_into(
                            &mut gx[(o * n + start) * inner..][..len * inner],
                            &g[o * len * inner..][..len * inner],
                        );
                    }
                });
            }
            Op::Conv2d { x, w, b } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let geo = ConvGeom {
                    n: sx[0],
                    ci: sx[1],
                    h: sx[2],
                    w: sx[3],
                    co: sw[0],
                    k: sw[2],
                };
                let (xd, wd) = (self.data(*x), self.data(*w));
                acc(*x, &mut |gx| conv2d_backward_input(&geo, g, wd, gx));
                acc(*w, &mut |gw| conv2d_backward_weight(&geo, g, xd, gw));
                acc(*b, &mut |gb| {
                    let plane = geo.h * geo.w;
                    for nn in 0..geo.n {
                        for o in 0..geo.co {
                            let s: T = g[(nn * geo.co + o) * plane..][..plane].iter().copied().sum();
                            gb[o] += s;
                        }
                    }
                });
            }
            Op::ConvReplicate { x, k } => {
                let sx = self.shape(*x);
                let s = self.shape(*k)[0];
                let (xd, kd) = (self.data(*x), self.data(*k));
                let (n, h, w) = (sx[0], sx[1], sx[2]);
                let p = (s / 2) as isize;
                let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
                acc(*x, &mut |gx| {
                    for m in 0..n {
                        let base = m * h * w;
                        for y in 0..h {
                            for xx in 0..w {
                                let gv = g[base + y * w + xx];
                                for i in 0..s {
                                    let yy = clamp(y as isize + i as isize - p, h);
                                    for j in 0..s {
                                        let xs = clamp(xx as isize + j as isize - p, w);
                                        gx[base + yy * w + xs] += kd[i * s + j] * gv;
                                    }
                                }
                            }
                        }
                    }
                });
                acc(*k, &mut |gk| {
                    for m in 0..n {
                        let base = m * h * w;
                        for y in 0..h {
                            for xx in 0..w {
                                let gv = g[base + y * w + xx];
                                for i in 0..s {
                                    let yy = clamp(y as isize + i as isize - p, h);
                                    for j in 0..s {
                                        let xs = clamp(xx as isize + j as isize - p, w);
                                        gk[i * s + j] += xd[base + yy * w + xs] * gv;
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// For each element of an array of `out_shape`, the flat source index given
/// per-axis source strides.
fn gather_map(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let total = numel(out_shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..total {
        map.push(src);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

pub(crate) fn matmul_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..][..n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..][..n]) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn softmax_raw<T: Real>(x: &[T], shape: &[usize], axis: usize, tau: T) -> Vec<T> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    let mut terms = Vec::with_capacity(n);
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + j;
            let mut mx = T::neg_infinity();
            for i in 0..n {
                mx = mx.max(x[idx(i)] / tau);
            }
            // summing in sorted order makes the result independent of the
            // order of entries along `axis`
            terms.clear();
            for i in 0..n {
                let e = (x[idx(i)] / tau - mx).exp();
                out[idx(i)] = e;
                terms.push(e);
            }
            terms.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            let total: T = terms.iter().copied().sum();
            for i in 0..n {
                out[idx(i)] /= total;
            }
        }
    }
    out
}

struct ConvGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
}

impl ConvGeom {
    /// Valid output range `[lo, hi)` along a dimension of size `size` for
    /// kernel tap `t`, and the signed source offset.
    #[inline]
    fn range(&self, t: usize, size: usize) -> (usize, usize, isize) {
        let d = t as isize - (self.k / 2) as isize;
        let lo = (-d).max(0) as usize;
        let hi = (size as isize - d).min(size as isize).max(0) as usize;
        (lo, hi.max(lo), d)
    }
}

fn conv2d_forward<T: Real>(geo: &ConvGeom, x: &[T], wt: &[T], bias: &[T]) -> Vec<T> {
    let plane = geo.h * geo.w;
    let k = geo.k;
    let mut out = vec![T::zero(); geo.n * geo.co * plane];
    for n in 0..geo.n {
        for o in 0..geo.co {
            let oplane = &mut out[(n * geo.co + o) * plane..][..plane];
            oplane.fill(bias[o]);
            for c in 0..geo.ci {
                let iplane = &x[(n * geo.ci + c) * plane..][..plane];
                for ky in 0..k {
                    let (y0, y1, dy) = geo.range(ky, geo.h);
                    for kx in 0..k {
                        let wv = wt[((o * geo.ci + c) * k + ky) * k + kx];
                        let (x0, x1, dx) = geo.range(kx, geo.w);
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let orow = &mut oplane[y * geo.w + x0..y * geo.w + x1];
                            let start = (sy * geo.w) as isize + x0 as isize + dx;
                            let irow = &iplane[start as usize..][..x1 - x0];
                            for (a, &b) in orow.iter_mut().zip(irow) {
                                *a += wv * b;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward_input<T: Real>(geo: &ConvGeom, g: &[T], wt: &[T], gx: &mut [T]) {
    let plane = geo.h * geo.w;
    let k = geo.k;
    for n in 0..geo.n {
        for o in 0..geo.co {
            let gplane = &g[(n * geo.co + o) * plane..][..plane];
            for c in 0..geo.ci {
                let xplane = &mut gx[(n * geo.ci + c) * plane..][..plane];
                for ky in 0..k {
                    let (y0, y1, dy) = geo.range(ky, geo.h);
                    for kx in 0..k {
                        let wv = wt[((o * geo.ci + c) * k + ky) * k + kx];
                        let (x0, x1, dx) = geo.range(kx, geo.w);
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let grow = &gplane[y * geo.w + x0..y * geo.w + x1];
                            let start = ((sy * geo.w) as isize + x0 as isize + dx) as usize;
                            for (a, &b) in xplane[start..][..x1 - x0].iter_mut().zip(grow) {
                                *a += wv * b;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_weight<T: Real>(geo: &ConvGeom, g: &[T], x: &[T], gw: &mut [T]) {
    let plane = geo.h * geo.w;
    let k = geo.k;
    for n in 0..geo.n {
        for o in 0..geo.co {
            let gplane = &g[(n * geo.co + o) * plane..][..plane];
            for c in 0..geo.ci {
                let iplane = &x[(n * geo.ci + c) * plane..][..plane];
                for ky in 0..k {
                    let (y0, y1, dy) = geo.range(ky, geo.h);
                    for kx in 0..k {
                        let (x0, x1, dx) = geo.range(kx, geo.w);
                        let mut s = T::zero();
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let grow = &gplane[y * geo.w + x0..y * geo.w + x1];
                            let start = ((sy * geo.w) as isize + x0 as isize + dx) as usize;
                            for (&a, &b) in grow.iter().zip(&iplane[start..][..x1 - x0]) {
                                s += a * b;
                            }
                        }
                        gw[((o * geo.ci + c) * k + ky) * k + kx] += s;
                    }
                }
            }
        }
    }
}

fn conv_replicate_forward<T: Real>(x: &[T], shape: &[usize], kd: &[T], s: usize) -> Vec<T> {
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    let p = (s / 2) as isize;
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut out = vec![T::zero(); x.len()];
    for m in 0..n {
        let base = m * h * w;
        for y in 0..h {
            for xx in 0..w {
                let mut acc = T::zero();
                for i in 0..s {
                    let yy = clamp(y as isize + i as isize - p, h);
                    for j in 0..s {
                        let xs = clamp(xx as isize + j as isize - p, w);
                        acc += kd[i * s + j] * x[base + yy * w + xs];
                    }
                }
                out[base + y * w + xx] = acc;
            }
        }
    }
    out
}
