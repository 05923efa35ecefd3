use std::sync::atomic::{AtomicU32, Ordering};

use super::{strides, Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(0);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Softmax { axis: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    /// `T×h×w×c → T×c`, mean over the spatial grid.
    AvgSpatial,
    /// `T×h×w×c → T×c`, sum over the spatial grid.
    SumSpatial,
    /// `T×d → 1×d`; the gradient goes to the first maximal row.
    MaxTime,
    /// `T×d → 1×d`.
    SumTime,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combine {
    AddBroadcast,
    SubBroadcast,
    MulBroadcast,
    Concat { axis: usize },
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Conv2d { x: usize, kernel: usize },
    Act(Activation, usize),
    Reduce { kind: Reduce, x: usize, argmax: Vec<usize> },
    Combine(Combine, usize, usize),
    Reshape(usize),
    Affine { x: usize, scale: S },
    LogClamped { x: usize, floor: S },
    SumAll(usize),
    ShiftTime { x: usize, offset: isize },
    Narrow { x: usize, axis: usize, start: usize },
}

struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
}

/// Records a forward computation so that [`Tape::backward`] can replay it in
/// reverse. Nodes are appended in evaluation order, so inputs always precede
/// the nodes that consume them.
pub struct Tape<S: Scalar = f32> {
    id: u32,
    nodes: Vec<Node<S>>,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input or parameter.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        assert_eq!(v.tape, self.id, "Var used with a tape it does not belong to");
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>) -> Var {
        self.nodes.push(Node { op, value });
        Var {
            tape: self.id,
            id: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "variable {} does not belong to tape {}",
                v.id, self.id
            )));
        }
        if self.consumed {
            return Err(Error::Contract(
                "tape was consumed by backward; start a new tape".into(),
            ));
        }
        Ok(v.id)
    }

    fn val(&self, i: usize) -> &Tensor<S> {
        &self.nodes[i].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (self.val(ia), self.val(ib));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul needs m×k · k×n, got {sa:?} · {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        gemm(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(Op::MatMul(ia, ib), value))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let xv = self.val(ix);
        if xv.rank() != 2 {
            return Err(Error::Dimension(format!(
                "transpose needs a matrix, got {:?}",
                xv.shape()
            )));
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let value = Tensor::new(&[n, m], transpose_data(xv.data(), m, n))?;
        Ok(self.push(Op::Transpose(ix), value))
    }

    /// Same-padded, stride-1 cross-correlation applied independently per time
    /// index: `T×h×w×c_in` with a `k×k×c_in×c_out` kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (ix, ik) = (self.idx(x)?, self.idx(kernel)?);
        let (xv, kv) = (self.val(ix), self.val(ik));
        let (xs, ks) = (xv.shape(), kv.shape());
        if ks.len() != 4 || ks[0] != ks[1] {
            return Err(Error::Dimension(format!(
                "conv2d kernel must be k×k×c_in×c_out, got {ks:?}"
            )));
        }
        if ks[0] % 2 == 0 {
            return Err(Error::Config(format!(
                "conv2d kernel size must be odd for same padding, got {}",
                ks[0]
            )));
        }
        if xs.len() != 4 || xs[3] != ks[2] {
            return Err(Error::Dimension(format!(
                "conv2d input {xs:?} does not match kernel {ks:?}"
            )));
        }
        let geo = ConvGeometry::new(xs, ks);
        let mut out = vec![S::zero(); geo.t * geo.h * geo.w * geo.co];
        geo.forward(xv.data(), kv.data(), &mut out);
        let value = Tensor::new(&[geo.t, geo.h, geo.w, geo.co], out)?;
        Ok(self.push(Op::Conv2d { x: ix, kernel: ik }, value))
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let xv = self.val(ix);
        let value = match kind {
            Activation::Relu => xv.map(|v| if v > S::zero() { v } else { S::zero() }),
            Activation::Sigmoid => xv.map(sigmoid),
            Activation::Tanh => xv.map(|v| v.tanh()),
            Activation::Softmax { axis } => {
                if axis >= xv.rank() {
                    return Err(Error::Dimension(format!(
                        "softmax axis {axis} invalid for shape {:?}",
                        xv.shape()
                    )));
                }
                softmax(xv, axis)
            }
        };
        Ok(self.push(Op::Act(kind, ix), value))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Tanh, x)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.activation(Activation::Softmax { axis }, x)
    }

    pub fn reduce(&mut self, kind: Reduce, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let xv = self.val(ix);
        let s = xv.shape();
        let data = xv.data();
        let mut argmax = Vec::new();
        let value = match kind {
            Reduce::AvgSpatial | Reduce::SumSpatial => {
                if s.len() != 4 {
                    return Err(Error::Dimension(format!(
                        "{kind:?} needs T×h×w×c, got {s:?}"
                    )));
                }
                let (t, n, c) = (s[0], s[1] * s[2], s[3]);
                let norm = match kind {
                    Reduce::AvgSpatial => S::one() / S::from_usize(n).unwrap(),
                    _ => S::one(),
                };
                let mut out = vec![S::zero(); t * c];
                for ti in 0..t {
                    let row = &mut out[ti * c..(ti + 1) * c];
                    for p in 0..n {
                        let src = &data[(ti * n + p) * c..(ti * n + p + 1) * c];
                        for (o, &v) in row.iter_mut().zip(src) {
                            *o = *o + v;
                        }
                    }
                    for o in row.iter_mut() {
                        *o = *o * norm;
                    }
                }
                Tensor::new(&[t, c], out)?
            }
            Reduce::MaxTime | Reduce::SumTime => {
                if s.len() != 2 {
                    return Err(Error::Dimension(format!("{kind:?} needs T×d, got {s:?}")));
                }
                let (t, d) = (s[0], s[1]);
                let mut out = data[..d].to_vec();
                if kind == Reduce::MaxTime {
                    argmax = vec![0; d];
                    for ti in 1..t {
                        for j in 0..d {
                            let v = data[ti * d + j];
                            // strict comparison keeps the lowest index on ties
                            if v > out[j] {
                                out[j] = v;
                                argmax[j] = ti;
                            }
                        }
                    }
                } else {
                    for ti in 1..t {
                        for j in 0..d {
                            out[j] = out[j] + data[ti * d + j];
                        }
                    }
                }
                Tensor::new(&[1, d], out)?
            }
        };
        Ok(self.push(Op::Reduce { kind, x: ix, argmax }, value))
    }

    pub fn combine(&mut self, kind: Combine, x: Var, y: Var) -> Result<Var> {
        let (ix, iy) = (self.idx(x)?, self.idx(y)?);
        let (xv, yv) = (self.val(ix), self.val(iy));
        let value = match kind {
            Combine::Concat { axis } => concat(xv, yv, axis)?,
            _ => {
                let plan = Broadcast::new(xv.shape(), yv.shape())?;
                let f: fn(S, S) -> S = match kind {
                    Combine::AddBroadcast => |a, b| a + b,
                    Combine::SubBroadcast => |a, b| a - b,
                    _ => |a, b| a * b,
                };
                let (xd, yd) = (xv.data(), yv.data());
                let mut out = Vec::with_capacity(plan.numel());
                plan.for_each(|_, xi, yi| out.push(f(xd[xi], yd[yi])));
                Tensor::new(&plan.out_shape, out)?
            }
        };
        Ok(self.push(Op::Combine(kind, ix, iy), value))
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        self.combine(Combine::AddBroadcast, x, y)
    }

    pub fn sub(&mut self, x: Var, y: Var) -> Result<Var> {
        self.combine(Combine::SubBroadcast, x, y)
    }

    pub fn mul(&mut self, x: Var, y: Var) -> Result<Var> {
        self.combine(Combine::MulBroadcast, x, y)
    }

    pub fn concat(&mut self, x: Var, y: Var, axis: usize) -> Result<Var> {
        self.combine(Combine::Concat { axis }, x, y)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let value = self.val(ix).reshape(shape)?;
        Ok(self.push(Op::Reshape(ix), value))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: S, shift: S) -> Result<Var> {
        let ix = self.idx(x)?;
        let value = self.val(ix).map(|v| scale * v + shift);
        Ok(self.push(Op::Affine { x: ix, scale }, value))
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Result<Var> {
        self.affine(x, factor, S::zero())
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, x: Var, floor: S) -> Result<Var> {
        let ix = self.idx(x)?;
        let value = self.val(ix).map(|v| v.max(floor).ln());
        Ok(self.push(Op::LogClamped { x: ix, floor }, value))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let value = Tensor::scalar(self.val(ix).sum());
        Ok(self.push(Op::SumAll(ix), value))
    }

    /// `out[t] = x[t + offset]` along axis 0, zero outside the valid range.
    pub fn shift_time(&mut self, x: Var, offset: isize) -> Result<Var> {
        let ix = self.idx(x)?;
        let xv = self.val(ix);
        let t = xv.shape()[0] as isize;
        let row = xv.numel() / t as usize;
        let mut out = vec![S::zero(); xv.numel()];
        for ti in 0..t {
            let src = ti + offset;
            if (0..t).contains(&src) {
                let (d, s) = (ti as usize * row, src as usize * row);
                out[d..d + row].copy_from_slice(&xv.data()[s..s + row]);
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(Op::ShiftTime { x: ix, offset }, value))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let xv = self.val(ix);
        let s = xv.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::Dimension(format!(
                "narrow({axis}, {start}, {len}) out of range for {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(Op::Narrow { x: ix, axis, start }, value))
    }

    /// Applies a `c×n` matrix to the last axis of `x`, keeping all leading axes.
    pub fn linear(&mut self, x: Var, weight: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        let rows = shape.iter().product::<usize>() / c;
        if shape.len() == 2 {
            return self.matmul(x, weight);
        }
        let flat = self.reshape(x, &[rows, c])?;
        let y = self.matmul(flat, weight)?;
        let n = self.shape(y)[1];
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = n;
        self.reshape(y, &out_shape)
    }

    /// Reverse pass from a scalar `loss`. Returns one gradient per requested
    /// leaf, zero-filled when the leaf does not reach the loss. A tape can be
    /// differentiated once; gradients are plain tensors, so there is no
    /// higher-order differentiation.
    pub fn backward(&mut self, loss: Var, leaves: &[Var]) -> Result<Vec<Tensor<S>>> {
        if self.consumed {
            return Err(Error::Contract(
                "backward already ran on this tape; double-backward is not supported".into(),
            ));
        }
        let il = self.idx(loss)?;
        for &l in leaves {
            let i = self.idx(l)?;
            if !matches!(self.nodes[i].op, Op::Leaf) {
                return Err(Error::Contract(format!(
                    "gradient requested for non-leaf node {i}"
                )));
            }
        }
        if self.val(il).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(il).shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(vec![S::one()]);
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(leaves
            .iter()
            .map(|l| {
                let shape = self.nodes[l.id].value.shape();
                match &grads[l.id] {
                    Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
                    None => Tensor::zeros(shape),
                }
            })
            .collect())
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(ia, ib) => {
                let (av, bv) = (self.val(*ia), self.val(*ib));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                // dA = G·Bᵀ, dB = Aᵀ·G
                let bt = transpose_data(bv.data(), k, n);
                let mut da = vec![S::zero(); m * k];
                gemm(g, &bt, &mut da, m, n, k);
                let at = transpose_data(av.data(), m, k);
                let mut db = vec![S::zero(); k * n];
                gemm(&at, g, &mut db, k, m, n);
                accumulate(grads, *ia, da);
                accumulate(grads, *ib, db);
            }
            Op::Transpose(ix) => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                accumulate(grads, *ix, transpose_data(g, m, n));
            }
            Op::Conv2d { x, kernel } => {
                let (xv, kv) = (self.val(*x), self.val(*kernel));
                let geo = ConvGeometry::new(xv.shape(), kv.shape());
                let mut dx = vec![S::zero(); xv.numel()];
                let mut dk = vec![S::zero(); kv.numel()];
                geo.backward(xv.data(), kv.data(), g, &mut dx, &mut dk);
                accumulate(grads, *x, dx);
                accumulate(grads, *kernel, dk);
            }
            Op::Act(kind, ix) => {
                let y = out.data();
                let dx: Vec<S> = match kind {
                    Activation::Relu => self
                        .val(*ix)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&x, &g)| if x > S::zero() { g } else { S::zero() })
                        .collect(),
                    Activation::Sigmoid => y
                        .iter()
                        .zip(g)
                        .map(|(&y, &g)| g * y * (S::one() - y))
                        .collect(),
                    Activation::Tanh => y
                        .iter()
                        .zip(g)
                        .map(|(&y, &g)| g * (S::one() - y * y))
                        .collect(),
                    Activation::Softmax { axis } => softmax_backward(out, g, *axis),
                };
                accumulate(grads, *ix, dx);
            }
            Op::Reduce { kind, x, argmax } => {
                let xs = self.val(*x).shape();
                let mut dx = vec![S::zero(); self.val(*x).numel()];
                match kind {
                    Reduce::AvgSpatial | Reduce::SumSpatial => {
                        let (t, n, c) = (xs[0], xs[1] * xs[2], xs[3]);
                        let norm = match kind {
                            Reduce::AvgSpatial => S::one() / S::from_usize(n).unwrap(),
                            _ => S::one(),
                        };
                        for ti in 0..t {
                            for p in 0..n {
                                for ci in 0..c {
                                    dx[(ti * n + p) * c + ci] = g[ti * c + ci] * norm;
                                }
                            }
                        }
                    }
                    Reduce::MaxTime => {
                        let d = xs[1];
                        for (j, &ti) in argmax.iter().enumerate() {
                            dx[ti * d + j] = g[j];
                        }
                    }
                    Reduce::SumTime => {
                        let d = xs[1];
                        for (k, v) in dx.iter_mut().enumerate() {
                            *v = g[k % d];
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Combine(kind, ix, iy) => {
                let (xv, yv) = (self.val(*ix), self.val(*iy));
                match kind {
                    Combine::Concat { axis } => {
                        let (dx, dy) = split_concat(g, xv.shape(), yv.shape(), *axis);
                        accumulate(grads, *ix, dx);
                        accumulate(grads, *iy, dy);
                    }
                    _ => {
                        let plan = Broadcast::new(xv.shape(), yv.shape()).expect("checked");
                        let mut dx = vec![S::zero(); xv.numel()];
                        let mut dy = vec![S::zero(); yv.numel()];
                        let (xd, yd) = (xv.data(), yv.data());
                        plan.for_each(|o, xi, yi| {
                            let go = g[o];
                            match kind {
                                Combine::AddBroadcast => {
                                    dx[xi] = dx[xi] + go;
                                    dy[yi] = dy[yi] + go;
                                }
                                Combine::SubBroadcast => {
                                    dx[xi] = dx[xi] + go;
                                    dy[yi] = dy[yi] - go;
                                }
                                _ => {
                                    dx[xi] = dx[xi] + go * yd[yi];
                                    dy[yi] = dy[yi] + go * xd[xi];
                                }
                            }
                        });
                        accumulate(grads, *ix, dx);
                        accumulate(grads, *iy, dy);
                    }
                }
            }
            Op::Reshape(ix) => accumulate(grads, *ix, g.to_vec()),
            Op::Affine { x, scale, .. } => {
                accumulate(grads, *x, g.iter().map(|&g| g * *scale).collect())
            }
            Op::LogClamped { x, floor } => {
                let dx = self
                    .val(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| if x > *floor { g / x } else { S::zero() })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::SumAll(ix) => accumulate(grads, *ix, vec![g[0]; self.val(*ix).numel()]),
            Op::ShiftTime { x, offset } => {
                let t = out.shape()[0] as isize;
                let row = out.numel() / t as usize;
                let mut dx = vec![S::zero(); out.numel()];
                for ti in 0..t {
                    let src = ti + offset;
                    if (0..t).contains(&src) {
                        let (d, s) = (ti as usize * row, src as usize * row);
                        dx[s..s + row].copy_from_slice(&g[d..d + row]);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.val(*x).shape();
                let len = out.shape()[*axis];
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis + 1..].iter().product();
                let mut dx = vec![S::zero(); self.val(*x).numel()];
                for o in 0..outer {
                    let base = (o * xs[*axis] + start) * inner;
                    let src = o * len * inner;
                    dx[base..base + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                accumulate(grads, *x, dx);
            }
        }
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], i: usize, g: Vec<S>) {
    match &mut grads[i] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `out += a (m×k) · b (k×n)`, row-major.
fn gemm<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + av * bv;
            }
        }
    }
}

fn transpose_data<S: Scalar>(x: &[S], m: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

fn softmax<S: Scalar>(x: &Tensor<S>, axis: usize) -> Tensor<S> {
    let s = x.shape();
    let (outer, len, inner) = axis_split(s, axis);
    let d = x.data();
    let mut out = vec![S::zero(); d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| d[at(k)]).fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for k in 0..len {
                let e = (d[at(k)] - max).exp();
                out[at(k)] = e;
                total = total + e;
            }
            for k in 0..len {
                out[at(k)] = out[at(k)] / total;
            }
        }
    }
    Tensor::new(s, out).expect("same shape")
}

fn softmax_backward<S: Scalar>(y: &Tensor<S>, g: &[S], axis: usize) -> Vec<S> {
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let yd = y.data();
    let mut dx = vec![S::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let dot = (0..len).fold(S::zero(), |acc, k| acc + g[at(k)] * yd[at(k)]);
            for k in 0..len {
                dx[at(k)] = yd[at(k)] * (g[at(k)] - dot);
            }
        }
    }
    dx
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn concat<S: Scalar>(x: &Tensor<S>, y: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    let (xs, ys) = (x.shape(), y.shape());
    let compatible = xs.len() == ys.len()
        && axis < xs.len()
        && xs
            .iter()
            .zip(ys)
            .enumerate()
            .all(|(i, (a, b))| i == axis || a == b);
    if !compatible {
        return Err(Error::Dimension(format!(
            "cannot concat {xs:?} and {ys:?} along axis {axis}"
        )));
    }
    let (outer, xa, inner) = axis_split(xs, axis);
    let ya = ys[axis];
    let mut out = Vec::with_capacity(x.numel() + y.numel());
    for o in 0..outer {
        out.extend_from_slice(&x.data()[o * xa * inner..(o + 1) * xa * inner]);
        out.extend_from_slice(&y.data()[o * ya * inner..(o + 1) * ya * inner]);
    }
    let mut shape = xs.to_vec();
    shape[axis] = xa + ya;
    Tensor::new(&shape, out)
}

fn split_concat<S: Scalar>(
    g: &[S],
    xs: &[usize],
    ys: &[usize],
    axis: usize,
) -> (Vec<S>, Vec<S>) {
    let (outer, xa, inner) = axis_split(xs, axis);
    let ya = ys[axis];
    let mut dx = Vec::with_capacity(outer * xa * inner);
    let mut dy = Vec::with_capacity(outer * ya * inner);
    let stride = (xa + ya) * inner;
    for o in 0..outer {
        let row = &g[o * stride..(o + 1) * stride];
        dx.extend_from_slice(&row[..xa * inner]);
        dy.extend_from_slice(&row[xa * inner..]);
    }
    (dx, dy)
}

/// Index plan for elementwise ops between equal-rank tensors whose extents
/// either match or are 1 on the broadcast side.
struct Broadcast {
    out_shape: Vec<usize>,
    x_strides: Vec<usize>,
    y_strides: Vec<usize>,
}

impl Broadcast {
    fn new(xs: &[usize], ys: &[usize]) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(Error::Dimension(format!(
                "broadcast needs equal ranks, got {xs:?} and {ys:?}"
            )));
        }
        let mut out_shape = Vec::with_capacity(xs.len());
        for (&a, &b) in xs.iter().zip(ys) {
            if a != b && a != 1 && b != 1 {
                return Err(Error::Dimension(format!(
                    "shapes {xs:?} and {ys:?} are not broadcast-compatible"
                )));
            }
            out_shape.push(a.max(b));
        }
        let masked = |shape: &[usize]| -> Vec<usize> {
            strides(shape)
                .into_iter()
                .zip(shape)
                .map(|(s, &n)| if n == 1 { 0 } else { s })
                .collect()
        };
        Ok(Broadcast {
            x_strides: masked(xs),
            y_strides: masked(ys),
            out_shape,
        })
    }

    fn numel(&self) -> usize {
        self.out_shape.iter().product()
    }

    /// Calls `f(out_index, x_index, y_index)` in row-major output order.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let rank = self.out_shape.len();
        let mut idx = vec![0usize; rank];
        let (mut xi, mut yi) = (0usize, 0usize);
        for o in 0..self.numel() {
            f(o, xi, yi);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                xi += self.x_strides[ax];
                yi += self.y_strides[ax];
                if idx[ax] < self.out_shape[ax] {
                    break;
                }
                xi -= self.x_strides[ax] * idx[ax];
                yi -= self.y_strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
    }
}

struct ConvGeometry {
    t: usize,
    h: usize,
    w: usize,
    ci: usize,
    co: usize,
    k: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ks: &[usize]) -> Self {
        ConvGeometry {
            t: xs[0],
            h: xs[1],
            w: xs[2],
            ci: xs[3],
            co: ks[3],
            k: ks[0],
        }
    }

    /// Visits every (output pixel, kernel tap) pair that lands inside the
    /// image, passing flat offsets of the output pixel, input pixel and tap.
    fn taps(&self, mut f: impl FnMut(usize, usize, usize)) {
        let pad = (self.k / 2) as isize;
        for t in 0..self.t {
            for i in 0..self.h {
                for j in 0..self.w {
                    let out_px = ((t * self.h + i) * self.w + j) * self.co;
                    for dy in 0..self.k {
                        let y = i as isize + dy as isize - pad;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        for dx in 0..self.k {
                            let x = j as isize + dx as isize - pad;
                            if x < 0 || x >= self.w as isize {
                                continue;
                            }
                            let in_px =
                                ((t * self.h + y as usize) * self.w + x as usize) * self.ci;
                            let tap = (dy * self.k + dx) * self.ci * self.co;
                            f(out_px, in_px, tap);
                        }
                    }
                }
            }
        }
    }

    fn forward<S: Scalar>(&self, x: &[S], kernel: &[S], out: &mut [S]) {
        let (ci, co) = (self.ci, self.co);
        self.taps(|o, p, tap| {
            let row = &mut out[o..o + co];
            for c in 0..ci {
                let xv = x[p + c];
                if xv == S::zero() {
                    continue;
                }
                let kr = &kernel[tap + c * co..tap + (c + 1) * co];
                for (r, &kv) in row.iter_mut().zip(kr) {
                    *r = *r + xv * kv;
                }
            }
        });
    }

    fn backward<S: Scalar>(&self, x: &[S], kernel: &[S], g: &[S], dx: &mut [S], dk: &mut [S]) {
        let (ci, co) = (self.ci, self.co);
        self.taps(|o, p, tap| {
            let gr = &g[o..o + co];
            for c in 0..ci {
                let kr = &kernel[tap + c * co..tap + (c + 1) * co];
                let mut acc = S::zero();
                for (&gv, &kv) in gr.iter().zip(kr) {
                    acc = acc + gv * kv;
                }
                dx[p + c] = dx[p + c] + acc;
                let xv = x[p + c];
                let dkr = &mut dk[tap + c * co..tap + (c + 1) * co];
                for (d, &gv) in dkr.iter_mut().zip(gr) {
                    *d = *d + xv * gv;
                }
            }
        });
    }
}
