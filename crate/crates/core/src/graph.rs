//! Tape-based reverse-mode differentiation over [`TensorBase`].
//!
//! A [`Tape`] records primitive applications in topological order as they
//! execute; the tape is rebuilt on every forward pass because sequence
//! lengths differ across data cases. [`Tape::backward`] walks the record in
//! reverse and returns one gradient per node.

use crate::scalar::Scalar;
use crate::tensor::{broadcast_zip, matmul2, reduce_to_shape, NumericError, TensorBase};

const DIV_GUARD: f64 = 1e-12;

/// Primitive catalog. Every op the models need, nothing more.
#[derive(Debug, Clone, PartialEq)]
pub enum Op<S> {
    MatMul,
    Add,
    Mul,
    Scale(S),
    AddConst(S),
    Concat(usize),
    Slice { axis: usize, start: usize, len: usize },
    Sum,
    Mean,
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    Square,
    /// Valid-padding stride-1 1-D convolution: signal `[L, E]` (or `[L]`),
    /// kernel `[K, W, E]` (or `[W]`), output `[L-W+1, K]` (or `[L-W+1]`).
    Conv1d,
    /// Max over the time axis: `[T, K]` -> `[K]`.
    MaxPoolTime,
    /// Row-wise softmax on a matrix (a vector is one row).
    RowSoftmax,
    /// Elementwise `a / b`, with quotient 0 wherever `b < 1e-12`.
    GuardedDiv,
    Clamp { lo: S, hi: S },
    /// Same data, new shape of equal volume.
    Reshape(Vec<usize>),
}

impl<S: Scalar> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddConst(_) => "add_const",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Square => "square",
            Op::Conv1d => "conv1d",
            Op::MaxPoolTime => "max_pool_time",
            Op::RowSoftmax => "row_softmax",
            Op::GuardedDiv => "guarded_div",
            Op::Clamp { .. } => "clamp",
            Op::Reshape(_) => "reshape",
        }
    }
}

fn shape_err(op: &str, shapes: &[&[usize]]) -> NumericError {
    NumericError::ShapeMismatch {
        op: op.to_string(),
        details: shapes.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>().join(" x "),
    }
}

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

struct Node<S> {
    op: Option<Op<S>>,
    inputs: Vec<NodeId>,
    value: TensorBase<S>,
    needs_grad: bool,
}

/// Dynamic computation graph, rebuilt per forward pass.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: TensorBase<S>) -> NodeId {
        self.push(None, vec![], value, true)
    }

    /// Non-differentiable input data.
    pub fn constant(&mut self, value: TensorBase<S>) -> NodeId {
        self.push(None, vec![], value, false)
    }

    pub fn constant_scalar(&mut self, value: S) -> NodeId {
        self.constant(TensorBase::scalar(value))
    }

    pub fn value(&self, id: NodeId) -> &TensorBase<S> {
        &self.nodes[id.0].value
    }

    fn push(
        &mut self,
        op: Option<Op<S>>,
        inputs: Vec<NodeId>,
        value: TensorBase<S>,
        needs_grad: bool,
    ) -> NodeId {
        self.nodes.push(Node { op, inputs, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Record one primitive application.
    pub fn apply(&mut self, op: Op<S>, inputs: &[NodeId]) -> Result<NodeId, NumericError> {
        let vals: Vec<&TensorBase<S>> = inputs.iter().map(|&i| &self.nodes[i.0].value).collect();
        let value = forward(&op, &vals)?;
        let needs = inputs.iter().any(|&i| self.nodes[i.0].needs_grad);
        Ok(self.push(Some(op), inputs.to_vec(), value, needs))
    }

    /// Reverse pass from a scalar loss. Returns `d loss / d node` for every
    /// node that requires a gradient (`None` elsewhere).
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Option<TensorBase<S>>>, NumericError> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(NumericError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<TensorBase<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(TensorBase::full(loss_node.value.shape(), S::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || node.op.is_none() {
                continue;
            }
            let Some(g_out) = grads[idx].take() else { continue };
            let op = node.op.as_ref().unwrap();
            let in_vals: Vec<&TensorBase<S>> =
                node.inputs.iter().map(|&i| &self.nodes[i.0].value).collect();
            let in_grads = backward_op(op, &in_vals, &node.value, &g_out)?;
            for (&input, g) in node.inputs.iter().zip(in_grads) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
            grads[idx] = Some(g_out);
        }
        Ok(grads)
    }

    /// Gradient at a node after [`Tape::backward`]; zeros if unreached.
    pub fn grad_of(
        &self,
        grads: &[Option<TensorBase<S>>],
        id: NodeId,
    ) -> TensorBase<S> {
        grads[id.0]
            .clone()
            .unwrap_or_else(|| TensorBase::zeros(self.nodes[id.0].value.shape()))
    }
}

fn promote_matmul<S: Scalar>(t: &TensorBase<S>, left: bool) -> TensorBase<S> {
    if t.rank() == 1 {
        let n = t.shape()[0];
        let shape = if left { vec![1, n] } else { vec![n, 1] };
        t.clone().reshaped(shape).unwrap()
    } else {
        t.clone()
    }
}

fn forward<S: Scalar>(op: &Op<S>, inputs: &[&TensorBase<S>]) -> Result<TensorBase<S>, NumericError> {
    let arity_ok = match op {
        Op::Concat(_) => !inputs.is_empty(),
        Op::MatMul | Op::Add | Op::Mul | Op::Conv1d | Op::GuardedDiv => inputs.len() == 2,
        _ => inputs.len() == 1,
    };
    if !arity_ok {
        return Err(shape_err(op.name(), &[&[inputs.len()]]));
    }
    match op {
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() > 2 || b.rank() > 2 || a.rank() == 0 || b.rank() == 0 {
                return Err(shape_err("matmul", &[a.shape(), b.shape()]));
            }
            let a2 = promote_matmul(a, true);
            let b2 = promote_matmul(b, false);
            let r = matmul2(&a2, &b2)?;
            let out_shape: Vec<usize> = match (a.rank(), b.rank()) {
                (1, 1) => vec![],
                (2, 1) => vec![a.shape()[0]],
                (1, 2) => vec![b.shape()[1]],
                _ => return Ok(r),
            };
            r.reshaped(out_shape)
        }
        Op::Add => broadcast_zip(inputs[0], inputs[1], |x, y| x + y),
        Op::Mul => broadcast_zip(inputs[0], inputs[1], |x, y| x * y),
        Op::Scale(c) => Ok(inputs[0].scale(*c)),
        Op::AddConst(c) => Ok(inputs[0].map(|x| x + *c)),
        Op::Concat(axis) => concat(inputs, *axis),
        Op::Slice { axis, start, len } => slice(inputs[0], *axis, *start, *len),
        Op::Sum => Ok(TensorBase::scalar(inputs[0].sum_all())),
        Op::Mean => {
            let n = S::from_usize(inputs[0].len().max(1)).unwrap();
            Ok(TensorBase::scalar(inputs[0].sum_all() / n))
        }
        Op::Sigmoid => Ok(inputs[0].map(|x| S::one() / (S::one() + (-x).exp()))),
        Op::Tanh => Ok(inputs[0].map(|x| x.tanh())),
        Op::Relu => Ok(inputs[0].map(|x| if x > S::zero() { x } else { S::zero() })),
        Op::Exp => Ok(inputs[0].map(|x| x.exp())),
        Op::Log => Ok(inputs[0].map(|x| x.ln())),
        Op::Square => Ok(inputs[0].map(|x| x * x)),
        Op::Conv1d => conv1d(inputs[0], inputs[1]),
        Op::MaxPoolTime => max_pool_time(inputs[0]),
        Op::RowSoftmax => row_softmax(inputs[0]),
        Op::GuardedDiv => {
            let eps = S::from_f64_lit(DIV_GUARD);
            broadcast_zip(inputs[0], inputs[1], |a, b| {
                if b < eps {
                    S::zero()
                } else {
                    a / b
                }
            })
        }
        Op::Clamp { lo, hi } => Ok(inputs[0].map(|x| x.max(*lo).min(*hi))),
        Op::Reshape(shape) => inputs[0].clone().reshaped(shape.clone()),
    }
}

fn backward_op<S: Scalar>(
    op: &Op<S>,
    inputs: &[&TensorBase<S>],
    output: &TensorBase<S>,
    g: &TensorBase<S>,
) -> Result<Vec<TensorBase<S>>, NumericError> {
    let two = S::from_f64_lit(2.0);
    Ok(match op {
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let a2 = promote_matmul(a, true);
            let b2 = promote_matmul(b, false);
            let g2 = g.clone().reshaped(vec![a2.shape()[0], b2.shape()[1]])?;
            let ga = matmul2(&g2, &b2.transpose2()?)?.reshaped(a.shape().to_vec())?;
            let gb = matmul2(&a2.transpose2()?, &g2)?.reshaped(b.shape().to_vec())?;
            vec![ga, gb]
        }
        Op::Add => vec![
            reduce_to_shape(g, inputs[0].shape()),
            reduce_to_shape(g, inputs[1].shape()),
        ],
        Op::Mul => {
            let ga = broadcast_zip(g, inputs[1], |x, y| x * y)?;
            let gb = broadcast_zip(g, inputs[0], |x, y| x * y)?;
            vec![
                reduce_to_shape(&ga, inputs[0].shape()),
                reduce_to_shape(&gb, inputs[1].shape()),
            ]
        }
        Op::Scale(c) => vec![g.scale(*c)],
        Op::AddConst(_) => vec![g.clone()],
        Op::Concat(axis) => concat_backward(inputs, *axis, g)?,
        Op::Slice { axis, start, len } => {
            vec![slice_backward(inputs[0], *axis, *start, *len, g)?]
        }
        Op::Sum => vec![TensorBase::full(inputs[0].shape(), g.item())],
        Op::Mean => {
            let n = S::from_usize(inputs[0].len().max(1)).unwrap();
            vec![TensorBase::full(inputs[0].shape(), g.item() / n)]
        }
        Op::Sigmoid => vec![g.zip_map(output, |gi, y| gi * y * (S::one() - y))?],
        Op::Tanh => vec![g.zip_map(output, |gi, y| gi * (S::one() - y * y))?],
        Op::Relu => vec![g.zip_map(inputs[0], |gi, x| if x > S::zero() { gi } else { S::zero() })?],
        Op::Exp => vec![g.zip_map(output, |gi, y| gi * y)?],
        Op::Log => vec![g.zip_map(inputs[0], |gi, x| gi / x)?],
        Op::Square => vec![g.zip_map(inputs[0], |gi, x| two * gi * x)?],
        Op::Conv1d => conv1d_backward(inputs[0], inputs[1], g)?,
        Op::MaxPoolTime => vec![max_pool_time_backward(inputs[0], g)?],
        Op::RowSoftmax => vec![row_softmax_backward(output, g)?],
        Op::GuardedDiv => {
            let eps = S::from_f64_lit(DIV_GUARD);
            let ga = broadcast_zip(g, inputs[1], |gi, b| {
                if b < eps {
                    S::zero()
                } else {
                    gi / b
                }
            })?;
            // d(a/b)/db = -a/b^2 inside the guard
            let quo = broadcast_zip(inputs[0], inputs[1], |a, b| {
                if b < eps {
                    S::zero()
                } else {
                    -a / (b * b)
                }
            })?;
            let gb = broadcast_zip(g, &quo, |gi, q| gi * q)?;
            vec![
                reduce_to_shape(&ga, inputs[0].shape()),
                reduce_to_shape(&gb, inputs[1].shape()),
            ]
        }
        Op::Clamp { lo, hi } => {
            vec![g.zip_map(inputs[0], |gi, x| {
                if x > *lo && x < *hi {
                    gi
                } else {
                    S::zero()
                }
            })?]
        }
        Op::Reshape(_) => vec![g.clone().reshaped(inputs[0].shape().to_vec())?],
    })
}

fn concat<S: Scalar>(
    inputs: &[&TensorBase<S>],
    axis: usize,
) -> Result<TensorBase<S>, NumericError> {
    let first = inputs[0];
    let rank = first.rank();
    if axis >= rank {
        return Err(shape_err("concat", &[first.shape()]));
    }
    for t in inputs {
        if t.rank() != rank {
            return Err(shape_err("concat", &[first.shape(), t.shape()]));
        }
        for d in 0..rank {
            if d != axis && t.shape()[d] != first.shape()[d] {
                return Err(shape_err("concat", &[first.shape(), t.shape()]));
            }
        }
    }
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = inputs.iter().map(|t| t.shape()[axis]).sum();
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for t in inputs {
            let ext = t.shape()[axis];
            let chunk = ext * inner;
            data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    TensorBase::new(out_shape, data)
}

fn concat_backward<S: Scalar>(
    inputs: &[&TensorBase<S>],
    axis: usize,
    g: &TensorBase<S>,
) -> Result<Vec<TensorBase<S>>, NumericError> {
    let mut out: Vec<TensorBase<S>> = inputs.iter().map(|t| TensorBase::zeros(t.shape())).collect();
    let rank = inputs[0].rank();
    let outer: usize = inputs[0].shape()[..axis].iter().product();
    let inner: usize = inputs[0].shape()[axis + 1..].iter().product();
    let _ = rank;
    let mut cursor = 0usize;
    for o in 0..outer {
        for (t_idx, t) in inputs.iter().enumerate() {
            let chunk = t.shape()[axis] * inner;
            let dst = &mut out[t_idx];
            let dst_off = o * chunk;
            dst.data_mut()[dst_off..dst_off + chunk]
                .copy_from_slice(&g.data()[cursor..cursor + chunk]);
            cursor += chunk;
        }
    }
    Ok(out)
}

fn slice<S: Scalar>(
    t: &TensorBase<S>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<TensorBase<S>, NumericError> {
    if axis >= t.rank() || start + len > t.shape()[axis] {
        return Err(shape_err("slice", &[t.shape(), &[start, len]]));
    }
    let outer: usize = t.shape()[..axis].iter().product();
    let inner: usize = t.shape()[axis + 1..].iter().product();
    let ext = t.shape()[axis];
    let mut out_shape = t.shape().to_vec();
    out_shape[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * ext * inner + start * inner;
        data.extend_from_slice(&t.data()[base..base + len * inner]);
    }
    TensorBase::new(out_shape, data)
}

fn slice_backward<S: Scalar>(
    t: &TensorBase<S>,
    axis: usize,
    start: usize,
    len: usize,
    g: &TensorBase<S>,
) -> Result<TensorBase<S>, NumericError> {
    let outer: usize = t.shape()[..axis].iter().product();
    let inner: usize = t.shape()[axis + 1..].iter().product();
    let ext = t.shape()[axis];
    let mut out = TensorBase::zeros(t.shape());
    for o in 0..outer {
        let base = o * ext * inner + start * inner;
        let src = o * len * inner;
        out.data_mut()[base..base + len * inner]
            .copy_from_slice(&g.data()[src..src + len * inner]);
    }
    Ok(out)
}

fn conv_views<S: Scalar>(
    signal: &TensorBase<S>,
    kernel: &TensorBase<S>,
) -> Result<(TensorBase<S>, TensorBase<S>, bool), NumericError> {
    let sig = match signal.rank() {
        1 => signal.clone().reshaped(vec![signal.shape()[0], 1])?,
        2 => signal.clone(),
        _ => return Err(shape_err("conv1d", &[signal.shape(), kernel.shape()])),
    };
    let ker = match kernel.rank() {
        1 => kernel.clone().reshaped(vec![1, kernel.shape()[0], 1])?,
        3 => kernel.clone(),
        _ => return Err(shape_err("conv1d", &[signal.shape(), kernel.shape()])),
    };
    let squeeze = signal.rank() == 1 && kernel.rank() == 1;
    if ker.shape()[2] != sig.shape()[1] || ker.shape()[1] > sig.shape()[0] {
        return Err(shape_err("conv1d", &[signal.shape(), kernel.shape()]));
    }
    Ok((sig, ker, squeeze))
}

fn conv1d<S: Scalar>(
    signal: &TensorBase<S>,
    kernel: &TensorBase<S>,
) -> Result<TensorBase<S>, NumericError> {
    let (sig, ker, squeeze) = conv_views(signal, kernel)?;
    let (l, e) = (sig.shape()[0], sig.shape()[1]);
    let (k, w) = (ker.shape()[0], ker.shape()[1]);
    let out_l = l - w + 1;
    let mut data = vec![S::zero(); out_l * k];
    for i in 0..out_l {
        for kk in 0..k {
            let mut acc = S::zero();
            for ww in 0..w {
                for ee in 0..e {
                    acc += sig.data()[(i + ww) * e + ee] * ker.data()[(kk * w + ww) * e + ee];
                }
            }
            data[i * k + kk] = acc;
        }
    }
    let out = TensorBase::new(vec![out_l, k], data)?;
    if squeeze {
        out.reshaped(vec![out_l])
    } else {
        Ok(out)
    }
}

fn conv1d_backward<S: Scalar>(
    signal: &TensorBase<S>,
    kernel: &TensorBase<S>,
    g: &TensorBase<S>,
) -> Result<Vec<TensorBase<S>>, NumericError> {
    let (sig, ker, _) = conv_views(signal, kernel)?;
    let (l, e) = (sig.shape()[0], sig.shape()[1]);
    let (k, w) = (ker.shape()[0], ker.shape()[1]);
    let out_l = l - w + 1;
    let g2 = g.clone().reshaped(vec![out_l, k])?;
    let mut gsig = TensorBase::zeros(&[l, e]);
    let mut gker = TensorBase::zeros(&[k, w, e]);
    for i in 0..out_l {
        for kk in 0..k {
            let go = g2.data()[i * k + kk];
            if go == S::zero() {
                continue;
            }
            for ww in 0..w {
                for ee in 0..e {
                    gsig.data_mut()[(i + ww) * e + ee] += go * ker.data()[(kk * w + ww) * e + ee];
                    gker.data_mut()[(kk * w + ww) * e + ee] += go * sig.data()[(i + ww) * e + ee];
                }
            }
        }
    }
    Ok(vec![
        gsig.reshaped(signal.shape().to_vec())?,
        gker.reshaped(kernel.shape().to_vec())?,
    ])
}

fn max_pool_time<S: Scalar>(t: &TensorBase<S>) -> Result<TensorBase<S>, NumericError> {
    if t.rank() != 2 || t.shape()[0] == 0 {
        return Err(shape_err("max_pool_time", &[t.shape()]));
    }
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let mut data = vec![S::neg_infinity(); cols];
    for i in 0..rows {
        for j in 0..cols {
            let v = t.data()[i * cols + j];
            if v > data[j] {
                data[j] = v;
            }
        }
    }
    TensorBase::new(vec![cols], data)
}

fn max_pool_time_backward<S: Scalar>(
    t: &TensorBase<S>,
    g: &TensorBase<S>,
) -> Result<TensorBase<S>, NumericError> {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let mut out = TensorBase::zeros(t.shape());
    for j in 0..cols {
        let mut best = 0usize;
        for i in 1..rows {
            if t.data()[i * cols + j] > t.data()[best * cols + j] {
                best = i;
            }
        }
        out.data_mut()[best * cols + j] = g.data()[j];
    }
    Ok(out)
}

fn row_softmax<S: Scalar>(t: &TensorBase<S>) -> Result<TensorBase<S>, NumericError> {
    let (rows, cols) = match t.rank() {
        1 => (1, t.shape()[0]),
        2 => (t.shape()[0], t.shape()[1]),
        _ => return Err(shape_err("row_softmax", &[t.shape()])),
    };
    let mut data = t.data().to_vec();
    for r in 0..rows {
        let row = &mut data[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    TensorBase::new(t.shape().to_vec(), data)
}

fn row_softmax_backward<S: Scalar>(
    y: &TensorBase<S>,
    g: &TensorBase<S>,
) -> Result<TensorBase<S>, NumericError> {
    let (rows, cols) = match y.rank() {
        1 => (1, y.shape()[0]),
        _ => (y.shape()[0], y.shape()[1]),
    };
    let mut data = vec![S::zero(); y.len()];
    for r in 0..rows {
        let yr = &y.data()[r * cols..(r + 1) * cols];
        let gr = &g.data()[r * cols..(r + 1) * cols];
        let dot = yr.iter().zip(gr).fold(S::zero(), |a, (&yi, &gi)| a + yi * gi);
        for j in 0..cols {
            data[r * cols + j] = yr[j] * (gr[j] - dot);
        }
    }
    TensorBase::new(y.shape().to_vec(), data)
}
