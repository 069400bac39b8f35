//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op evaluates eagerly and appends its output to the tape. When at
//! least one input requires a gradient (and the tape has gradients enabled)
//! the op's backward rule is recorded alongside the value. `backward` then
//! walks the tape once in reverse, which is a valid topological order since
//! a node can only read nodes recorded before it.
//!
//! Broadcasting is explicit: `add`/`sub`/`mul` require identical shapes, and
//! the `*_broadcast`, `modulate` and `gated_residual` ops name the exact
//! pattern they expand.

use std::collections::HashMap;

use crate::array::NdArray;
use crate::error::{invalid, Result, TensorError};
use crate::scalar::{gemm, MatView, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Matmul {
        a: Var,
        b: Var,
        rows: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast {
        x: Var,
        y: Var,
    },
    MulBroadcast {
        x: Var,
        y: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    AddScalar {
        x: Var,
    },
    LayerNorm {
        x: Var,
        width: usize,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
        width: usize,
    },
    Gelu {
        x: Var,
    },
    Silu {
        x: Var,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        inner: usize,
        sizes: Vec<usize>,
    },
    Narrow {
        x: Var,
        outer: usize,
        inner: usize,
        axis_len: usize,
        start: usize,
        len: usize,
    },
    Reshape {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Mse {
        a: Var,
        b: Var,
    },
    Modulate {
        x: Var,
        shift: Var,
        scale: Var,
        batch: usize,
        width: usize,
    },
    GatedResidual {
        x: Var,
        gate: Var,
        y: Var,
        batch: usize,
        width: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Matmul { a, b, .. } | Op::Mse { a, b } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddBroadcast { x, y } | Op::MulBroadcast { x, y } => vec![*x, *y],
            Op::Scale { x, .. }
            | Op::AddScalar { x }
            | Op::LayerNorm { x, .. }
            | Op::Softmax { x, .. }
            | Op::Gelu { x }
            | Op::Silu { x }
            | Op::Narrow { x, .. }
            | Op::Reshape { x }
            | Op::Sum { x }
            | Op::Mean { x } => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Modulate { x, shift, scale, .. } => vec![*x, *shift, *scale],
            Op::GatedResidual { x, gate, y, .. } => vec![*x, *gate, *y],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Gather { table, .. } => vec![*table],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: NdArray<T>,
    requires_grad: bool,
    op: Option<Op<T>>,
}

/// Ordered record of a computation.
#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    named: Vec<(String, Var)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    named: HashMap<String, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<NdArray<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        NdArray::new(self.shapes[v.0].clone(), g.clone()).ok()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0)?.take()
    }

    /// Gradient of a parameter registered through [`Tape::param`].
    pub fn take_named(&mut self, name: &str) -> Option<Vec<T>> {
        let v = *self.named.get(name)?;
        self.take(v)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.named.keys().map(String::as_str)
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a = *a + b),
        None => *slot = Some(contrib),
    }
}

#[inline]
fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let one = T::one();
    let u = c * (x + a * x * x * x);
    // tanh(u) = 1 - 2 / (exp(2u) + 1); much cheaper than libm tanh and
    // saturates correctly at both ends.
    let th = one - T::lit(2.0) / ((u + u).exp() + one);
    let value = half * x * (one + th);
    let du = c * (one + T::lit(3.0) * a * x * x);
    let deriv = half * (one + th) + half * x * (one - th * th) * du;
    (value, deriv)
}

/// `(row, sample)` index ranges for each width-`w` row of a `[B, L, w]`
/// buffer of `len` elements: the row's slice and its sample's `[B, w]` slice.
fn sample_rows(
    len: usize,
    batch: usize,
    w: usize,
) -> impl Iterator<Item = (std::ops::Range<usize>, std::ops::Range<usize>)> {
    let rows_per = if batch == 0 || w == 0 { 1 } else { len / batch / w };
    (0..len / w.max(1)).map(move |r| {
        let b = r / rows_per.max(1);
        (r * w..(r + 1) * w, b * w..(b + 1) * w)
    })
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            named: Vec::new(),
        }
    }

    /// A tape that never records backward rules; every value is a constant.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: NdArray<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            requires_grad,
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: NdArray<T>) -> Var {
        self.leaf(value, false)
    }

    /// Registers an `f32` parameter under `name`. Trainable parameters can be
    /// looked up by name in the resulting [`Gradients`].
    pub fn param(&mut self, name: &str, value: &NdArray<f32>, trainable: bool) -> Var {
        let v = self.leaf(value.cast::<T>(), trainable);
        if trainable && self.grad_enabled {
            self.named.push((name.to_string(), v));
        }
        v
    }

    pub fn value(&self, v: Var) -> &NdArray<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: NdArray<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = self.grad_enabled && op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op: requires_grad.then_some(op),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- linear algebra -------------------------------------------------

    /// `a @ b` where `a` is `[.., k]` (leading dims flattened into rows) and
    /// `b` is `[k, n]`. The result keeps `a`'s leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let rows = self.value(a).numel() / k.max(1);
        let mut out = vec![T::zero(); rows * n];
        gemm(
            rows,
            k,
            n,
            T::one(),
            self.value(a).data(),
            MatView::row_major(0, k),
            self.value(b).data(),
            MatView::row_major(0, n),
            T::zero(),
            &mut out,
            MatView::row_major(0, n),
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let value = NdArray::new(shape, out)?;
        self.push("matmul", value, Op::Matmul { a, b, rows, k, n })
    }

    // ---- elementwise ------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> NdArray<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        NdArray::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> NdArray<T> {
        let vx = self.value(x);
        NdArray::new(vx.shape().to_vec(), vx.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push("add", v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b))
    }

    fn check_trailing(&self, op: &'static str, x: Var, y: Var) -> Result<usize> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(shape_err(op, sx, sy));
        }
        Ok(self.value(y).numel())
    }

    /// `x + y` where `y`'s shape equals the trailing dims of `x` (bias, positional table).
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let w = self.check_trailing("add_broadcast", x, y)?;
        let vy = self.value(y).data();
        let vx = self.value(x);
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(w.max(1)) {
            row.iter_mut().zip(vy).for_each(|(a, &b)| *a = *a + b);
        }
        let v = NdArray::new(vx.shape().to_vec(), data)?;
        self.push("add_broadcast", v, Op::AddBroadcast { x, y })
    }

    /// `x * y` where `y`'s shape equals the trailing dims of `x`.
    pub fn mul_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let w = self.check_trailing("mul_broadcast", x, y)?;
        let vy = self.value(y).data();
        let vx = self.value(x);
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(w.max(1)) {
            row.iter_mut().zip(vy).for_each(|(a, &b)| *a = *a * b);
        }
        let v = NdArray::new(vx.shape().to_vec(), data)?;
        self.push("mul_broadcast", v, Op::MulBroadcast { x, y })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::lit(c);
        let v = self.map(x, |a| a * c);
        self.push("scale", v, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::lit(c);
        let v = self.map(x, |a| a + c);
        self.push("add_scalar", v, Op::AddScalar { x })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.map(x, |a| gelu_parts(a).0);
        self.push("gelu", v, Op::Gelu { x })
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let v = self.map(x, |a| a * sigmoid(a));
        self.push("silu", v, Op::Silu { x })
    }

    // ---- normalization ----------------------------------------------------

    /// Normalizes over the last axis to zero mean, unit variance (no affine).
    pub fn layernorm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let width = *vx.shape().last().ok_or_else(|| invalid("layernorm", "rank-0 input"))?;
        if width == 0 {
            return Err(invalid("layernorm", "empty last axis"));
        }
        let rows = vx.numel() / width;
        let eps = T::lit(eps);
        let inv_w = T::lit(1.0 / width as f64);
        let mut out = vec![T::zero(); vx.numel()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &vx.data()[r * width..(r + 1) * width];
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) * inv_w;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) * inv_w;
            let rs = T::one() / (var + eps).sqrt();
            for (o, &v) in out[r * width..(r + 1) * width].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let v = NdArray::new(vx.shape().to_vec(), out)?;
        self.push("layernorm", v, Op::LayerNorm { x, width, rstd })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let width = *vx.shape().last().ok_or_else(|| invalid("softmax", "rank-0 input"))?;
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(width.max(1)) {
            softmax_row(row);
        }
        let v = NdArray::new(vx.shape().to_vec(), out)?;
        self.push("softmax", v, Op::Softmax { x, width })
    }

    // ---- structural -------------------------------------------------------

    fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        (outer, shape[axis], inner)
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {s0:?}")));
        }
        let mut sizes = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == s0.len() && s.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", &s0, s));
            }
            sizes.push(s[axis]);
        }
        let (outer, _, inner) = Self::axis_split(&s0, axis);
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &len) in inputs.iter().zip(&sizes) {
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let value = NdArray::new(shape, out)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                inner,
                sizes,
            },
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(invalid(
                "narrow",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, axis_len, inner) = Self::axis_split(&s, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = NdArray::new(shape, out)?;
        self.push(
            "narrow",
            value,
            Op::Narrow {
                x,
                outer,
                inner,
                axis_len,
                start,
                len,
            },
        )
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || sizes.iter().sum::<usize>() != s[axis] {
            return Err(invalid("split", format!("sizes {sizes:?} on axis {axis} of {s:?}")));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.narrow(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape { x })
    }

    /// Rows of `table` (`[vocab, width]`) selected by `ids`, shaped `[out_shape.., width]`.
    pub fn gather(&mut self, table: Var, ids: &[usize], out_shape: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(invalid("gather", format!("table must be rank 2, got {st:?}")));
        }
        if out_shape.iter().product::<usize>() != ids.len() {
            return Err(invalid("gather", "out_shape does not match id count"));
        }
        let (vocab, width) = (st[0], st[1]);
        let d = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= vocab {
                return Err(invalid("gather", format!("id {id} out of range for vocab {vocab}")));
            }
            out.extend_from_slice(&d[id * width..(id + 1) * width]);
        }
        let mut shape = out_shape.to_vec();
        shape.push(width);
        let value = NdArray::new(shape, out)?;
        self.push(
            "gather",
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        self.push("sum", NdArray::scalar(s), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.numel() == 0 {
            return Err(invalid("mean", "empty tensor"));
        }
        let s = vx.data().iter().fold(T::zero(), |a, &b| a + b) / T::lit(vx.numel() as f64);
        self.push("mean", NdArray::scalar(s), Op::Mean { x })
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.numel() == 0 {
            return Err(invalid("mse", "empty tensor"));
        }
        let s = va
            .data()
            .iter()
            .zip(vb.data())
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
        let v = s / T::lit(va.numel() as f64);
        self.push("mse", NdArray::scalar(v), Op::Mse { a, b })
    }

    // ---- transformer-specific fused ops -----------------------------------

    fn per_sample(&self, op: &'static str, x: Var, v: Var) -> Result<(usize, usize)> {
        let (sx, sv) = (self.shape(x), self.shape(v));
        if sx.len() != 3 || sv.len() != 2 || sx[0] != sv[0] || sx[2] != sv[1] {
            return Err(shape_err(op, sx, sv));
        }
        Ok((sx[0], sx[2]))
    }

    /// `x * (1 + scale) + shift` with per-sample `[B, D]` vectors applied to
    /// every token of `x: [B, L, D]`.
    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let (batch, width) = self.per_sample("modulate", x, shift)?;
        self.same_shape("modulate", shift, scale)?;
        let vx = self.value(x);
        let (sh, sc) = (self.value(shift).data(), self.value(scale).data());
        let mut data = vx.data().to_vec();
        for (r, p) in sample_rows(data.len(), batch, width) {
            for ((a, &c), &h) in data[r].iter_mut().zip(&sc[p.clone()]).zip(&sh[p]) {
                *a = *a * (T::one() + c) + h;
            }
        }
        let v = NdArray::new(vx.shape().to_vec(), data)?;
        self.push(
            "modulate",
            v,
            Op::Modulate {
                x,
                shift,
                scale,
                batch,
                width,
            },
        )
    }

    /// `x + gate * y` with a per-sample `[B, D]` gate.
    pub fn gated_residual(&mut self, x: Var, gate: Var, y: Var) -> Result<Var> {
        self.same_shape("gated_residual", x, y)?;
        let (batch, width) = self.per_sample("gated_residual", x, gate)?;
        let (vx, vy) = (self.value(x), self.value(y));
        let g = self.value(gate).data();
        let mut data = vx.data().to_vec();
        let yd = vy.data();
        for (r, p) in sample_rows(data.len(), batch, width) {
            for ((a, &b), &gv) in data[r.clone()].iter_mut().zip(&yd[r]).zip(&g[p]) {
                *a = *a + gv * b;
            }
        }
        let v = NdArray::new(vx.shape().to_vec(), data)?;
        self.push(
            "gated_residual",
            v,
            Op::GatedResidual {
                x,
                gate,
                y,
                batch,
                width,
            },
        )
    }

    /// Multi-head scaled dot-product attention over `[B, L, D]` inputs, heads
    /// laid out as contiguous column blocks of width `D / heads`. No mask.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let s = self.shape(q).to_vec();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(invalid(
                "attention",
                format!("expected [B, L, D] with D divisible by {heads}, got {s:?}"),
            ));
        }
        let (batch, seq, width) = (s[0], s[1], s[2]);
        let dh = width / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let (vq, vk, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); batch * seq * width];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * width + h * dh;
                let p_off = (b * heads + h) * seq * seq;
                let qv = MatView::row_major(base, width);
                gemm(
                    seq,
                    dh,
                    seq,
                    scale,
                    vq,
                    qv,
                    vk,
                    qv.transposed(),
                    T::zero(),
                    &mut probs,
                    MatView::row_major(p_off, seq),
                );
                for row in probs[p_off..p_off + seq * seq].chunks_mut(seq) {
                    softmax_row(row);
                }
                gemm(
                    seq,
                    seq,
                    dh,
                    T::one(),
                    &probs,
                    MatView::row_major(p_off, seq),
                    vv,
                    qv,
                    T::zero(),
                    &mut out,
                    qv,
                );
            }
        }
        let value = NdArray::new(s, out)?;
        self.push(
            "attention",
            value,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
        )
    }

    // ---- backward ---------------------------------------------------------

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(op) = &self.nodes[i].op else { continue };
            let inputs = op.inputs();
            if let Some(bad) = inputs.iter().find(|v| v.0 >= i) {
                return Err(TensorError::Cycle { node: i, input: bad.0 });
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_op(i, op, g, &mut grads)?;
            // Leaves keep their gradient; intermediates are dropped above.
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            shapes,
            named: self.named.iter().cloned().collect(),
        })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_op(&self, node: usize, op: &Op<T>, g: Vec<T>, grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = self.nodes[node].value.data();
        match op {
            Op::Matmul { a, b, rows, k, n } => {
                let (rows, k, n) = (*rows, *k, *n);
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); rows * k];
                    gemm(
                        rows,
                        n,
                        k,
                        T::one(),
                        &g,
                        MatView::row_major(0, n),
                        val(*b),
                        MatView::row_major(0, n).transposed(),
                        T::zero(),
                        &mut ga,
                        MatView::row_major(0, k),
                    );
                    accumulate(&mut grads[a.0], ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(
                        k,
                        rows,
                        n,
                        T::one(),
                        val(*a),
                        MatView::row_major(0, k).transposed(),
                        &g,
                        MatView::row_major(0, n),
                        T::zero(),
                        &mut gb,
                        MatView::row_major(0, n),
                    );
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let ga = g.iter().zip(val(*b)).map(|(&x, &y)| x * y).collect();
                    accumulate(&mut grads[a.0], ga);
                }
                if self.needs(*b) {
                    let gb = g.iter().zip(val(*a)).map(|(&x, &y)| x * y).collect();
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::AddBroadcast { x, y } => {
                if self.needs(*y) {
                    let w = val(*y).len();
                    let mut gy = vec![T::zero(); w];
                    for row in g.chunks(w.max(1)) {
                        gy.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                    }
                    accumulate(&mut grads[y.0], gy);
                }
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], g);
                }
            }
            Op::MulBroadcast { x, y } => {
                let vy = val(*y);
                let w = vy.len();
                if self.needs(*y) {
                    let vx = val(*x);
                    let mut gy = vec![T::zero(); w];
                    for (row, xr) in g.chunks(w.max(1)).zip(vx.chunks(w.max(1))) {
                        for ((a, &b), &c) in gy.iter_mut().zip(row).zip(xr) {
                            *a = *a + b * c;
                        }
                    }
                    accumulate(&mut grads[y.0], gy);
                }
                if self.needs(*x) {
                    let mut gx = g.clone();
                    for row in gx.chunks_mut(w.max(1)) {
                        row.iter_mut().zip(vy).for_each(|(a, &b)| *a = *a * b);
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], g.iter().map(|&v| v * *c).collect());
                }
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], g);
                }
            }
            Op::Gelu { x } => {
                if self.needs(*x) {
                    let gx = g.iter().zip(val(*x)).map(|(&gv, &xv)| gv * gelu_parts(xv).1).collect();
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Silu { x } => {
                if self.needs(*x) {
                    let gx = g
                        .iter()
                        .zip(val(*x))
                        .map(|(&gv, &xv)| {
                            let s = sigmoid(xv);
                            gv * s * (T::one() + xv * (T::one() - s))
                        })
                        .collect();
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::LayerNorm { x, width, rstd } => {
                if self.needs(*x) {
                    let w = *width;
                    let inv_w = T::lit(1.0 / w as f64);
                    let mut gx = vec![T::zero(); g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * w..(r + 1) * w];
                        let yr = &out[r * w..(r + 1) * w];
                        let mg = gr.iter().fold(T::zero(), |s, &v| s + v) * inv_w;
                        let mgy = gr.iter().zip(yr).fold(T::zero(), |s, (&a, &b)| s + a * b) * inv_w;
                        for j in 0..w {
                            gx[r * w + j] = rs * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Softmax { x, width } => {
                if self.needs(*x) {
                    let w = (*width).max(1);
                    let mut gx = vec![T::zero(); g.len()];
                    for ((gxr, gr), yr) in gx.chunks_mut(w).zip(g.chunks(w)).zip(out.chunks(w)) {
                        let dot = gr.iter().zip(yr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                        for j in 0..gr.len() {
                            gxr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Concat {
                inputs,
                outer,
                inner,
                sizes,
            } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (&v, &len) in inputs.iter().zip(sizes) {
                    if self.needs(v) {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..*outer {
                            let base = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[base..base + len * inner]);
                        }
                        accumulate(&mut grads[v.0], gv);
                    }
                    offset += len;
                }
            }
            Op::Narrow {
                x,
                outer,
                inner,
                axis_len,
                start,
                len,
            } => {
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); outer * axis_len * inner];
                    for o in 0..*outer {
                        let dst = (o * axis_len + start) * inner;
                        let src = o * len * inner;
                        gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], vec![g[0]; val(*x).len()]);
                }
            }
            Op::Mean { x } => {
                if self.needs(*x) {
                    let n = val(*x).len();
                    accumulate(&mut grads[x.0], vec![g[0] / T::lit(n as f64); n]);
                }
            }
            Op::Mse { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                let c = g[0] * T::lit(2.0 / va.len() as f64);
                let diff: Vec<T> = va.iter().zip(vb).map(|(&x, &y)| (x - y) * c).collect();
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], diff.iter().map(|&v| -v).collect());
                }
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], diff);
                }
            }
            Op::Modulate {
                x,
                shift,
                scale,
                batch,
                width,
            } => {
                let w = *width;
                let sc = val(*scale);
                if self.needs(*shift) {
                    let mut gs = vec![T::zero(); batch * w];
                    for (r, p) in sample_rows(g.len(), *batch, w) {
                        gs[p].iter_mut().zip(&g[r]).for_each(|(a, &b)| *a = *a + b);
                    }
                    accumulate(&mut grads[shift.0], gs);
                }
                if self.needs(*scale) {
                    let vx = val(*x);
                    let mut gs = vec![T::zero(); batch * w];
                    for (r, p) in sample_rows(g.len(), *batch, w) {
                        for ((a, &b), &c) in gs[p].iter_mut().zip(&g[r.clone()]).zip(&vx[r]) {
                            *a = *a + b * c;
                        }
                    }
                    accumulate(&mut grads[scale.0], gs);
                }
                if self.needs(*x) {
                    let mut gx = g.clone();
                    for (r, p) in sample_rows(g.len(), *batch, w) {
                        gx[r]
                            .iter_mut()
                            .zip(&sc[p])
                            .for_each(|(a, &c)| *a = *a * (T::one() + c));
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::GatedResidual {
                x,
                gate,
                y,
                batch,
                width,
            } => {
                let w = *width;
                if self.needs(*gate) {
                    let vy = val(*y);
                    let mut gg = vec![T::zero(); batch * w];
                    for (r, p) in sample_rows(g.len(), *batch, w) {
                        for ((a, &b), &c) in gg[p].iter_mut().zip(&g[r.clone()]).zip(&vy[r]) {
                            *a = *a + b * c;
                        }
                    }
                    accumulate(&mut grads[gate.0], gg);
                }
                if self.needs(*y) {
                    let gv = val(*gate);
                    let mut gy = g.clone();
                    for (r, p) in sample_rows(g.len(), *batch, w) {
                        gy[r].iter_mut().zip(&gv[p]).for_each(|(a, &c)| *a = *a * c);
                    }
                    accumulate(&mut grads[y.0], gy);
                }
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], g);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                self.attention_backward(*q, *k, *v, *batch, *seq, *heads, probs, &g, grads);
            }
            Op::Gather { table, ids } => {
                if self.needs(*table) {
                    let vt = val(*table);
                    let width = self.nodes[table.0].value.shape()[1];
                    let mut gt = vec![T::zero(); vt.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..width {
                            gt[id * width + j] = gt[id * width + j] + g[r * width + j];
                        }
                    }
                    accumulate(&mut grads[table.0], gt);
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let width = self.nodes[q.0].value.shape()[2];
        let dh = width / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let (vq, vk, vv) = (
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let n = batch * seq * width;
        let mut gq = vec![T::zero(); n];
        let mut gk = vec![T::zero(); n];
        let mut gv = vec![T::zero(); n];
        let mut dp = vec![T::zero(); seq * seq];
        let pv0 = MatView::row_major(0, seq);
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * width + h * dh;
                let p_off = (b * heads + h) * seq * seq;
                let tv = MatView::row_major(base, width);
                let pv = MatView::row_major(p_off, seq);
                // dV = P^T dO
                gemm(
                    seq,
                    seq,
                    dh,
                    T::one(),
                    probs,
                    pv.transposed(),
                    g,
                    tv,
                    T::zero(),
                    &mut gv,
                    tv,
                );
                // dP = dO V^T
                gemm(
                    seq,
                    dh,
                    seq,
                    T::one(),
                    g,
                    tv,
                    vv,
                    tv.transposed(),
                    T::zero(),
                    &mut dp,
                    pv0,
                );
                // dS = P * (dP - rowsum(dP * P))
                let p = &probs[p_off..p_off + seq * seq];
                for (dr, pr) in dp.chunks_mut(seq).zip(p.chunks(seq)) {
                    let dot = dr.iter().zip(pr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for (d, &pp) in dr.iter_mut().zip(pr) {
                        *d = pp * (*d - dot);
                    }
                }
                // dQ = scale * dS K ; dK = scale * dS^T Q
                gemm(seq, seq, dh, scale, &dp, pv0, vk, tv, T::zero(), &mut gq, tv);
                gemm(
                    seq,
                    seq,
                    dh,
                    scale,
                    &dp,
                    pv0.transposed(),
                    vq,
                    tv,
                    T::zero(),
                    &mut gk,
                    tv,
                );
            }
        }
        if self.needs(q) {
            accumulate(&mut grads[q.0], gq);
        }
        if self.needs(k) {
            accumulate(&mut grads[k.0], gk);
        }
        if self.needs(v) {
            accumulate(&mut grads[v.0], gv);
        }
    }
}

fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}
