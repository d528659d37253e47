//! Reverse-mode automatic differentiation over [`NdArray`] values.
//!
//! A [`Tape`] is an append-only sequence of nodes in topological order:
//! every node's parents precede it, so the backward pass is a single
//! reverse sweep. All arithmetic is in double precision; the enumeration
//! oracles elsewhere in the crate rely on ~1e-6 relative agreement, which
//! single precision cannot deliver.
//!
//! A tape is confined to one thread. Values are immutable once produced;
//! gradient buffers live outside the tape and are only touched by
//! [`Tape::backward`].

use crate::nd::NdArray;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("{prim}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { prim: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{prim}: {msg}")]
    Invalid { prim: &'static str, msg: String },
    #[error("backward root must be scalar-shaped ([] or [1]), got {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("non-finite value encountered while evaluating {context}")]
    NonFinite { context: String },
}

fn invalid(prim: &'static str, msg: impl Into<String>) -> AdError {
    AdError::Invalid { prim, msg: msg.into() }
}

/// Handle into a tape; only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) u32);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Operation tag plus its attributes. `Leaf` nodes carry externally
/// supplied values (parameters, inputs, constants).
#[derive(Debug, Clone)]
pub enum Primitive {
    Leaf,
    Matmul,
    Add,
    Mul,
    Neg,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, stop: usize },
    Transpose,
    EmbeddingGather { ids: Vec<usize> },
    Tanh,
    Sigmoid,
    Relu,
    Glu,
    LayerNorm { eps: f64 },
    Softmax,
    LogSoftmax,
    Sum,
    Mean,
    Scale { factor: f64 },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Leaf => "leaf",
            Primitive::Matmul => "matmul",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Neg => "neg",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Transpose => "transpose",
            Primitive::EmbeddingGather { .. } => "embedding_gather",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Relu => "relu",
            Primitive::Glu => "glu",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Scale { .. } => "scale",
        }
    }
}

pub(crate) struct Node {
    value: NdArray,
    parents: Vec<NodeId>,
    prim: Primitive,
}

/// Append-only computation tape. Nodes are stored in construction order,
/// which is a topological order by definition.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradient buffers produced by [`Tape::backward`]. Nodes never
/// reached from the root have no buffer and read back as zero.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<NdArray>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&NdArray> {
        self.grads[id.index()].as_ref()
    }

    /// The gradient for `id`, materializing zeros for unreachable nodes.
    pub fn dense(&self, tape: &Tape, id: NodeId) -> NdArray {
        match &self.grads[id.index()] {
            Some(g) => g.clone(),
            None => NdArray::zeros(tape.value(id).shape()),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Option<NdArray> {
        self.grads[id.index()].take()
    }
}

#[inline]
fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &NdArray {
        &self.nodes[id.index()].value
    }

    fn push(&mut self, value: NdArray, parents: Vec<NodeId>, prim: Primitive) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { value, parents, prim });
        id
    }

    /// Registers an externally supplied value (parameter, input, constant).
    pub fn leaf(&mut self, value: NdArray) -> NodeId {
        self.push(value, Vec::new(), Primitive::Leaf)
    }

    /// Applies a primitive to `inputs`, appending the result node.
    ///
    /// This is the single dispatch point: the named convenience methods
    /// below all funnel through it, so shape checking lives in one place.
    pub fn apply(&mut self, prim: Primitive, inputs: &[NodeId]) -> Result<NodeId, AdError> {
        let value = self.forward(&prim, inputs)?;
        Ok(self.push(value, inputs.to_vec(), prim))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.apply(Primitive::Matmul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.apply(Primitive::Neg, &[a])
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId, AdError> {
        self.apply(Primitive::Concat { axis }, inputs)
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, stop: usize) -> Result<NodeId, AdError> {
        self.apply(Primitive::Slice { axis, start, stop }, &[a])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.apply(Primitive::Transpose, &[a])
    }

    pub fn embedding_gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, AdError> {
        self.apply(Primitive::EmbeddingGather { ids: ids.to_vec() }, &[table])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.apply(Primitive::Tanh, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.apply(Primitive::Sigmoid, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn glu(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.apply(Primitive::Glu, &[a])
    }

    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId, AdError> {
        self.apply(Primitive::LayerNorm { eps }, &[a])
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.apply(Primitive::Softmax, &[a])
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.apply(Primitive::LogSoftmax, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.apply(Primitive::Mean, &[a])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, AdError> {
        self.apply(Primitive::Scale { factor }, &[a])
    }

    fn arity(&self, prim: &Primitive, inputs: &[NodeId], n: usize) -> Result<(), AdError> {
        if inputs.len() != n {
            return Err(invalid(prim.name(), format!("expected {} inputs, got {}", n, inputs.len())));
        }
        Ok(())
    }

    fn forward(&self, prim: &Primitive, inputs: &[NodeId]) -> Result<NdArray, AdError> {
        match prim {
            Primitive::Leaf => Err(invalid("leaf", "leaf nodes carry values, not inputs")),
            Primitive::Matmul => {
                self.arity(prim, inputs, 2)?;
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                let (sa, sb) = (a.shape(), b.shape());
                if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                    return Err(AdError::ShapeMismatch { prim: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
                }
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut out = vec![0.0; m * n];
                matmul_nn(a.data(), b.data(), &mut out, m, k, n);
                Ok(NdArray::from_vec(&[m, n], out))
            }
            Primitive::Add => {
                self.arity(prim, inputs, 2)?;
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                if a.shape() == b.shape() {
                    let data = a.iter().zip(b.iter()).map(|(x, y)| x + y).collect();
                    Ok(NdArray::from_vec(a.shape(), data))
                } else if b.shape().len() == 1 && a.last_dim() == b.shape()[0] && !a.shape().is_empty() {
                    // bias-add over the last axis
                    let n = b.shape()[0];
                    let mut data = Vec::with_capacity(a.numel());
                    for row in a.data().chunks_exact(n) {
                        for (x, y) in row.iter().zip(b.iter()) {
                            data.push(x + y);
                        }
                    }
                    Ok(NdArray::from_vec(a.shape(), data))
                } else {
                    Err(AdError::ShapeMismatch { prim: "add", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() })
                }
            }
            Primitive::Mul => {
                self.arity(prim, inputs, 2)?;
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                if a.shape() != b.shape() {
                    return Err(AdError::ShapeMismatch { prim: "mul", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
                }
                let data = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
                Ok(NdArray::from_vec(a.shape(), data))
            }
            Primitive::Neg => {
                self.arity(prim, inputs, 1)?;
                let a = self.value(inputs[0]);
                Ok(NdArray::from_vec(a.shape(), a.iter().map(|x| -x).collect()))
            }
            Primitive::Concat { axis } => {
                if inputs.is_empty() {
                    return Err(invalid("concat", "needs at least one input"));
                }
                let first = self.value(inputs[0]).shape().to_vec();
                if *axis >= first.len() {
                    return Err(invalid("concat", format!("axis {} out of rank {}", axis, first.len())));
                }
                let mut axis_total = 0;
                for &id in inputs {
                    let s = self.value(id).shape();
                    if s.len() != first.len()
                        || s.iter().enumerate().any(|(i, &d)| i != *axis && d != first[i])
                    {
                        return Err(AdError::ShapeMismatch { prim: "concat", lhs: first.clone(), rhs: s.to_vec() });
                    }
                    axis_total += s[*axis];
                }
                let mut out_shape = first.clone();
                out_shape[*axis] = axis_total;
                let outer: usize = first[..*axis].iter().product();
                let inner: usize = first[*axis + 1..].iter().product();
                let mut data = vec![0.0; out_shape.iter().product()];
                let out_stride = axis_total * inner;
                let mut offset = 0;
                for &id in inputs {
                    let v = self.value(id);
                    let d = v.shape()[*axis];
                    let src_stride = d * inner;
                    for o in 0..outer {
                        let src = &v.data()[o * src_stride..(o + 1) * src_stride];
                        let dst = &mut data[o * out_stride + offset..o * out_stride + offset + src_stride];
                        dst.copy_from_slice(src);
                    }
                    offset += src_stride;
                }
                Ok(NdArray::from_vec(&out_shape, data))
            }
            Primitive::Slice { axis, start, stop } => {
                self.arity(prim, inputs, 1)?;
                let a = self.value(inputs[0]);
                let s = a.shape();
                if *axis >= s.len() {
                    return Err(invalid("slice", format!("axis {} out of rank {}", axis, s.len())));
                }
                if start >= stop || *stop > s[*axis] {
                    return Err(invalid(
                        "slice",
                        format!("range {}..{} invalid for extent {}", start, stop, s[*axis]),
                    ));
                }
                let mut out_shape = s.to_vec();
                out_shape[*axis] = stop - start;
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                let src_stride = s[*axis] * inner;
                let dst_stride = (stop - start) * inner;
                let mut data = vec![0.0; outer * dst_stride];
                for o in 0..outer {
                    let src = &a.data()[o * src_stride + start * inner..o * src_stride + stop * inner];
                    data[o * dst_stride..(o + 1) * dst_stride].copy_from_slice(src);
                }
                Ok(NdArray::from_vec(&out_shape, data))
            }
            Primitive::Transpose => {
                self.arity(prim, inputs, 1)?;
                let a = self.value(inputs[0]);
                let s = a.shape();
                if s.len() != 2 {
                    return Err(invalid("transpose", format!("expects rank 2, got {:?}", s)));
                }
                let (m, n) = (s[0], s[1]);
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        data[j * m + i] = a.data()[i * n + j];
                    }
                }
                Ok(NdArray::from_vec(&[n, m], data))
            }
            Primitive::EmbeddingGather { ids } => {
                self.arity(prim, inputs, 1)?;
                let table = self.value(inputs[0]);
                let s = table.shape();
                if s.len() != 2 {
                    return Err(invalid("embedding_gather", format!("table must be rank 2, got {:?}", s)));
                }
                let (v, d) = (s[0], s[1]);
                let mut data = Vec::with_capacity(ids.len() * d);
                for &id in ids {
                    if id >= v {
                        return Err(invalid("embedding_gather", format!("id {} out of table size {}", id, v)));
                    }
                    data.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
                }
                Ok(NdArray::from_vec(&[ids.len(), d], data))
            }
            Primitive::Tanh => {
                self.arity(prim, inputs, 1)?;
                let a = self.value(inputs[0]);
                Ok(NdArray::from_vec(a.shape(), a.iter().map(|x| x.tanh()).collect()))
            }
            Primitive::Sigmoid => {
                self.arity(prim, inputs, 1)?;
                let a = self.value(inputs[0]);
                Ok(NdArray::from_vec(a.shape(), a.iter().map(|&x| sigmoid_scalar(x)).collect()))
            }
            Primitive::Relu => {
                self.arity(prim, inputs, 1)?;
                let a = self.value(inputs[0]);
                Ok(NdArray::from_vec(a.shape(), a.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect()))
            }
            Primitive::Glu => {
                self.arity(prim, inputs, 1)?;
                let a = self.value(inputs[0]);
                let n = a.last_dim();
                if a.shape().is_empty() || !n.is_multiple_of(2) {
                    return Err(invalid("glu", format!("last axis must be even, got {:?}", a.shape())));
                }
                let half = n / 2;
                let mut out_shape = a.shape().to_vec();
                *out_shape.last_mut().unwrap() = half;
                let mut data = Vec::with_capacity(a.numel() / 2);
                for row in a.data().chunks_exact(n) {
                    for i in 0..half {
                        data.push(row[i] * sigmoid_scalar(row[half + i]));
                    }
                }
                Ok(NdArray::from_vec(&out_shape, data))
            }
            Primitive::LayerNorm { eps } => {
                self.arity(prim, inputs, 1)?;
                let a = self.value(inputs[0]);
                let n = a.last_dim();
                if a.shape().is_empty() || n == 0 {
                    return Err(invalid("layer_norm", format!("needs a last axis, got {:?}", a.shape())));
                }
                let mut data = Vec::with_capacity(a.numel());
                for row in a.data().chunks_exact(n) {
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    data.extend(row.iter().map(|x| (x - mean) * inv));
                }
                Ok(NdArray::from_vec(a.shape(), data))
            }
            Primitive::Softmax => {
                self.arity(prim, inputs, 1)?;
                let a = self.value(inputs[0]);
                let n = a.last_dim();
                if a.shape().is_empty() || n == 0 {
                    return Err(invalid("softmax", format!("needs a last axis, got {:?}", a.shape())));
                }
                let mut data = Vec::with_capacity(a.numel());
                for row in a.data().chunks_exact(n) {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    let base = data.len();
                    for x in row {
                        let e = (x - max).exp();
                        data.push(e);
                        z += e;
                    }
                    for v in &mut data[base..] {
                        *v /= z;
                    }
                }
                Ok(NdArray::from_vec(a.shape(), data))
            }
            Primitive::LogSoftmax => {
                self.arity(prim, inputs, 1)?;
                let a = self.value(inputs[0]);
                let n = a.last_dim();
                if a.shape().is_empty() || n == 0 {
                    return Err(invalid("log_softmax", format!("needs a last axis, got {:?}", a.shape())));
                }
                let mut data = Vec::with_capacity(a.numel());
                for row in a.data().chunks_exact(n) {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
                    let log_z = z.ln() + max;
                    data.extend(row.iter().map(|x| x - log_z));
                }
                Ok(NdArray::from_vec(a.shape(), data))
            }
            Primitive::Sum => {
                self.arity(prim, inputs, 1)?;
                let a = self.value(inputs[0]);
                Ok(NdArray::scalar(a.iter().sum()))
            }
            Primitive::Mean => {
                self.arity(prim, inputs, 1)?;
                let a = self.value(inputs[0]);
                if a.numel() == 0 {
                    return Err(invalid("mean", "empty input"));
                }
                Ok(NdArray::scalar(a.iter().sum::<f64>() / a.numel() as f64))
            }
            Primitive::Scale { factor } => {
                self.arity(prim, inputs, 1)?;
                let a = self.value(inputs[0]);
                Ok(NdArray::from_vec(a.shape(), a.iter().map(|x| x * factor).collect()))
            }
        }
    }

    /// Reverse sweep from `root`, which must be scalar-shaped. The seed
    /// gradient at the root is 1.0. Nodes not reached from the root keep a
    /// zero gradient.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, AdError> {
        let root_val = self.value(root);
        if !root_val.is_scalar_like() {
            return Err(AdError::NonScalarRoot { shape: root_val.shape().to_vec() });
        }
        let mut grads: Vec<Option<NdArray>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.index()] = Some(NdArray::from_vec(root_val.shape(), vec![1.0]));

        for idx in (0..=root.index()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            {
                let node = &self.nodes[idx];
                if !node.parents.is_empty() {
                    self.vjp(node, &g, &mut grads);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Accumulates `delta` into the gradient slot for `id`.
    fn accum(&self, grads: &mut [Option<NdArray>], id: NodeId, delta: &NdArray) {
        match &mut grads[id.index()] {
            Some(g) => g.add_assign(delta),
            slot => *slot = Some(delta.clone()),
        }
    }

    fn accum_owned(&self, grads: &mut [Option<NdArray>], id: NodeId, delta: NdArray) {
        match &mut grads[id.index()] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn vjp(&self, node: &Node, g: &NdArray, grads: &mut [Option<NdArray>]) {
        let p = &node.parents;
        match &node.prim {
            Primitive::Leaf => {}
            Primitive::Matmul => {
                let a = self.value(p[0]);
                let b = self.value(p[1]);
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let mut da = vec![0.0; m * k];
                matmul_nt(g.data(), b.data(), &mut da, m, n, k);
                self.accum_owned(grads, p[0], NdArray::from_vec(&[m, k], da));
                let mut db = vec![0.0; k * n];
                matmul_tn(a.data(), g.data(), &mut db, k, m, n);
                self.accum_owned(grads, p[1], NdArray::from_vec(&[k, n], db));
            }
            Primitive::Add => {
                let a = self.value(p[0]);
                let b = self.value(p[1]);
                self.accum(grads, p[0], g);
                if a.shape() == b.shape() {
                    self.accum(grads, p[1], g);
                } else {
                    // bias-add: reduce over leading axes
                    let n = b.shape()[0];
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks_exact(n) {
                        for (acc, x) in db.iter_mut().zip(row.iter()) {
                            *acc += x;
                        }
                    }
                    self.accum_owned(grads, p[1], NdArray::from_vec(&[n], db));
                }
            }
            Primitive::Mul => {
                let a = self.value(p[0]);
                let b = self.value(p[1]);
                let da: Vec<f64> = g.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.iter().zip(a.iter()).map(|(x, y)| x * y).collect();
                self.accum_owned(grads, p[0], NdArray::from_vec(a.shape(), da));
                self.accum_owned(grads, p[1], NdArray::from_vec(b.shape(), db));
            }
            Primitive::Neg => {
                let da: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accum_owned(grads, p[0], NdArray::from_vec(g.shape(), da));
            }
            Primitive::Concat { axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let out_stride = out_shape[*axis] * inner;
                let mut offset = 0;
                for &pid in p {
                    let ps = self.value(pid).shape().to_vec();
                    let d = ps[*axis];
                    let src_stride = d * inner;
                    let mut dp = vec![0.0; self.value(pid).numel()];
                    for o in 0..outer {
                        let src = &g.data()[o * out_stride + offset..o * out_stride + offset + src_stride];
                        dp[o * src_stride..(o + 1) * src_stride].copy_from_slice(src);
                    }
                    offset += src_stride;
                    self.accum_owned(grads, pid, NdArray::from_vec(&ps, dp));
                }
            }
            Primitive::Slice { axis, start, stop } => {
                let a = self.value(p[0]);
                let s = a.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                let src_stride = s[*axis] * inner;
                let dst_stride = (stop - start) * inner;
                let mut da = vec![0.0; a.numel()];
                for o in 0..outer {
                    let dst = &mut da[o * src_stride + start * inner..o * src_stride + stop * inner];
                    dst.copy_from_slice(&g.data()[o * dst_stride..(o + 1) * dst_stride]);
                }
                self.accum_owned(grads, p[0], NdArray::from_vec(s, da));
            }
            Primitive::Transpose => {
                let s = node.value.shape();
                let (m, n) = (s[0], s[1]); // value is [n_orig, m_orig] transposed
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[j * m + i] = g.data()[i * n + j];
                    }
                }
                self.accum_owned(grads, p[0], NdArray::from_vec(&[n, m], da));
            }
            Primitive::EmbeddingGather { ids } => {
                let table = self.value(p[0]);
                let d = table.shape()[1];
                let mut dt = vec![0.0; table.numel()];
                for (row, &id) in ids.iter().enumerate() {
                    let src = &g.data()[row * d..(row + 1) * d];
                    let dst = &mut dt[id * d..(id + 1) * d];
                    for (acc, x) in dst.iter_mut().zip(src.iter()) {
                        *acc += x;
                    }
                }
                self.accum_owned(grads, p[0], NdArray::from_vec(table.shape(), dt));
            }
            Primitive::Tanh => {
                let y = &node.value;
                let da: Vec<f64> = g.iter().zip(y.iter()).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect();
                self.accum_owned(grads, p[0], NdArray::from_vec(y.shape(), da));
            }
            Primitive::Sigmoid => {
                let y = &node.value;
                let da: Vec<f64> = g.iter().zip(y.iter()).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect();
                self.accum_owned(grads, p[0], NdArray::from_vec(y.shape(), da));
            }
            Primitive::Relu => {
                let x = self.value(p[0]);
                let da: Vec<f64> = g.iter().zip(x.iter()).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect();
                self.accum_owned(grads, p[0], NdArray::from_vec(x.shape(), da));
            }
            Primitive::Glu => {
                let x = self.value(p[0]);
                let n = x.last_dim();
                let half = n / 2;
                let mut da = vec![0.0; x.numel()];
                for (r, (row, grow)) in x.data().chunks_exact(n).zip(g.data().chunks_exact(half)).enumerate() {
                    let base = r * n;
                    for i in 0..half {
                        let s = sigmoid_scalar(row[half + i]);
                        da[base + i] = grow[i] * s;
                        da[base + half + i] = grow[i] * row[i] * s * (1.0 - s);
                    }
                }
                self.accum_owned(grads, p[0], NdArray::from_vec(x.shape(), da));
            }
            Primitive::LayerNorm { eps } => {
                let x = self.value(p[0]);
                let y = &node.value;
                let n = x.last_dim();
                let nf = n as f64;
                let mut da = vec![0.0; x.numel()];
                for (r, (xrow, (yrow, grow))) in x
                    .data()
                    .chunks_exact(n)
                    .zip(y.data().chunks_exact(n).zip(g.data().chunks_exact(n)))
                    .enumerate()
                {
                    let mean = xrow.iter().sum::<f64>() / nf;
                    let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let g_mean = grow.iter().sum::<f64>() / nf;
                    let gy_mean = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>() / nf;
                    let base = r * n;
                    for i in 0..n {
                        da[base + i] = inv * (grow[i] - g_mean - yrow[i] * gy_mean);
                    }
                }
                self.accum_owned(grads, p[0], NdArray::from_vec(x.shape(), da));
            }
            Primitive::Softmax => {
                let y = &node.value;
                let n = y.last_dim();
                let mut da = vec![0.0; y.numel()];
                for (r, (yrow, grow)) in y.data().chunks_exact(n).zip(g.data().chunks_exact(n)).enumerate() {
                    let dot: f64 = yrow.iter().zip(grow.iter()).map(|(a, b)| a * b).sum();
                    let base = r * n;
                    for i in 0..n {
                        da[base + i] = yrow[i] * (grow[i] - dot);
                    }
                }
                self.accum_owned(grads, p[0], NdArray::from_vec(y.shape(), da));
            }
            Primitive::LogSoftmax => {
                let y = &node.value;
                let n = y.last_dim();
                let mut da = vec![0.0; y.numel()];
                for (r, (yrow, grow)) in y.data().chunks_exact(n).zip(g.data().chunks_exact(n)).enumerate() {
                    let gsum: f64 = grow.iter().sum();
                    let base = r * n;
                    for i in 0..n {
                        da[base + i] = grow[i] - yrow[i].exp() * gsum;
                    }
                }
                self.accum_owned(grads, p[0], NdArray::from_vec(y.shape(), da));
            }
            Primitive::Sum => {
                let x = self.value(p[0]);
                let gv = g.item();
                self.accum_owned(grads, p[0], NdArray::full(x.shape(), gv));
            }
            Primitive::Mean => {
                let x = self.value(p[0]);
                let gv = g.item() / x.numel() as f64;
                self.accum_owned(grads, p[0], NdArray::full(x.shape(), gv));
            }
            Primitive::Scale { factor } => {
                let da: Vec<f64> = g.iter().map(|x| x * factor).collect();
                self.accum_owned(grads, p[0], NdArray::from_vec(g.shape(), da));
            }
        }
    }
}

/// Relative error with an absolute floor: |a-b| / max(1, |a|, |b|).
/// The floor keeps near-zero quantities from inflating the ratio.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

/// Compares tape gradients against central finite differences.
///
/// `build` must construct the same scalar expression every call from the
/// given leaves; it is re-invoked on a fresh tape for every perturbed
/// coordinate. Returns the worst [`rel_err`] over all coordinates of all
/// parameters.
pub fn finite_diff_check<F>(params: &[NdArray], step: f64, build: F) -> Result<f64, AdError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, AdError>,
{
    let eval = |values: &[NdArray]| -> Result<(Tape, Vec<NodeId>, NodeId), AdError> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let root = build(&mut tape, &ids)?;
        if !tape.value(root).is_scalar_like() {
            return Err(AdError::NonScalarRoot { shape: tape.value(root).shape().to_vec() });
        }
        Ok((tape, ids, root))
    };

    let (tape, ids, root) = eval(params)?;
    if !tape.value(root).all_finite() {
        return Err(AdError::NonFinite { context: "finite_diff_check base evaluation".into() });
    }
    let grads = tape.backward(root)?;
    let analytic: Vec<NdArray> = ids.iter().map(|&id| grads.dense(&tape, id)).collect();

    let mut worst = 0.0_f64;
    let mut perturbed: Vec<NdArray> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for ci in 0..param.numel() {
            let orig = param.data()[ci];
            perturbed[pi].data_mut()[ci] = orig + step;
            let (tp, _, rp) = eval(&perturbed)?;
            let fp = tp.value(rp).item();
            perturbed[pi].data_mut()[ci] = orig - step;
            let (tm, _, rm) = eval(&perturbed)?;
            let fm = tm.value(rm).item();
            perturbed[pi].data_mut()[ci] = orig;
            let fd = (fp - fm) / (2.0 * step);
            if !fd.is_finite() {
                return Err(AdError::NonFinite { context: format!("finite difference at param {pi} coord {ci}") });
            }
            worst = worst.max(rel_err(analytic[pi].data()[ci], fd));
        }
    }
    Ok(worst)
}

/// Runs [`finite_diff_check`] once per differentiable primitive, each on a
/// small input that exercises its interesting structure. Relu inputs are
/// kept away from zero, where the true derivative is undefined.
pub fn primitive_grad_sweep() -> Result<Vec<(&'static str, f64)>, AdError> {
    let step = 1e-5;
    let mut out = Vec::new();

    let m23 = NdArray::from_vec(&[2, 3], vec![0.5, -1.2, 0.7, 1.1, 0.3, -0.4]);
    let m32 = NdArray::from_vec(&[3, 2], vec![0.2, -0.6, 1.4, 0.9, -1.1, 0.5]);
    let v3 = NdArray::from_vec(&[3], vec![0.25, -0.75, 1.5]);
    let m24 = NdArray::from_vec(&[2, 4], vec![0.6, -0.9, 1.2, 0.4, -1.5, 0.8, 0.05, -0.3]);

    out.push((
        "matmul",
        finite_diff_check(&[m23.clone(), m32.clone()], step, |t, p| {
            let c = t.matmul(p[0], p[1])?;
            t.sum(c)
        })?,
    ));
    out.push((
        "add",
        finite_diff_check(&[m23.clone(), v3.clone()], step, |t, p| {
            let c = t.add(p[0], p[1])?; // exercises the bias-add broadcast
            let sq = t.mul(c, c)?;
            t.sum(sq)
        })?,
    ));
    out.push((
        "mul",
        finite_diff_check(&[m23.clone(), m23.clone()], step, |t, p| {
            let c = t.mul(p[0], p[1])?;
            t.sum(c)
        })?,
    ));
    out.push((
        "neg",
        finite_diff_check(std::slice::from_ref(&v3), step, |t, p| {
            let c = t.neg(p[0])?;
            let sq = t.mul(c, c)?;
            t.sum(sq)
        })?,
    ));
    out.push((
        "concat",
        finite_diff_check(&[m23.clone(), m23.clone()], step, |t, p| {
            let c = t.concat(&[p[0], p[1]], 1)?;
            let s = t.softmax(c)?;
            let sq = t.mul(s, s)?;
            t.sum(sq)
        })?,
    ));
    out.push((
        "slice",
        finite_diff_check(std::slice::from_ref(&m23), step, |t, p| {
            let c = t.slice(p[0], 1, 1, 3)?;
            let sq = t.mul(c, c)?;
            t.sum(sq)
        })?,
    ));
    out.push((
        "transpose",
        finite_diff_check(std::slice::from_ref(&m23), step, |t, p| {
            let c = t.transpose(p[0])?;
            let d = t.matmul(c, p[0])?;
            let sm = t.tanh(d)?;
            t.sum(sm)
        })?,
    ));
    out.push((
        "embedding_gather",
        finite_diff_check(std::slice::from_ref(&m32), step, |t, p| {
            let c = t.embedding_gather(p[0], &[2, 0, 2])?; // repeated id: scatter must accumulate
            let sq = t.mul(c, c)?;
            t.sum(sq)
        })?,
    ));
    out.push((
        "tanh",
        finite_diff_check(std::slice::from_ref(&v3), step, |t, p| {
            let c = t.tanh(p[0])?;
            t.sum(c)
        })?,
    ));
    out.push((
        "sigmoid",
        finite_diff_check(std::slice::from_ref(&v3), step, |t, p| {
            let c = t.sigmoid(p[0])?;
            t.sum(c)
        })?,
    ));
    out.push((
        "relu",
        finite_diff_check(std::slice::from_ref(&v3), step, |t, p| {
            let c = t.relu(p[0])?;
            let sq = t.mul(c, c)?;
            t.sum(sq)
        })?,
    ));
    out.push((
        "glu",
        finite_diff_check(std::slice::from_ref(&m24), step, |t, p| {
            let c = t.glu(p[0])?;
            t.sum(c)
        })?,
    ));
    out.push((
        "layer_norm",
        finite_diff_check(std::slice::from_ref(&m23), step, |t, p| {
            let c = t.layer_norm(p[0], 1e-5)?;
            let sq = t.mul(c, c)?;
            let th = t.tanh(sq)?;
            t.sum(th)
        })?,
    ));
    out.push((
        "softmax",
        finite_diff_check(std::slice::from_ref(&m23), step, |t, p| {
            let c = t.softmax(p[0])?;
            let sq = t.mul(c, c)?;
            t.sum(sq)
        })?,
    ));
    out.push((
        "log_softmax",
        finite_diff_check(std::slice::from_ref(&m23), step, |t, p| {
            let c = t.log_softmax(p[0])?;
            let sq = t.mul(c, c)?;
            t.sum(sq)
        })?,
    ));
    out.push((
        "sum",
        finite_diff_check(std::slice::from_ref(&m23), step, |t, p| {
            let sq = t.mul(p[0], p[0])?;
            t.sum(sq)
        })?,
    ));
    out.push((
        "mean",
        finite_diff_check(std::slice::from_ref(&m23), step, |t, p| {
            let sq = t.mul(p[0], p[0])?;
            t.mean(sq)
        })?,
    ));
    out.push((
        "scale",
        finite_diff_check(std::slice::from_ref(&v3), step, |t, p| {
            let c = t.scale(p[0], -2.5)?;
            let sq = t.mul(c, c)?;
            t.sum(sq)
        })?,
    ));
    Ok(out)
}

/// C[m,n] += A[m,k] * B[k,n]
fn matmul_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    }
}

/// C[m,k] += A[m,n] * B[k,n]^T  (i.e. A * B-transposed)
fn matmul_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

/// C[k,n] += A[m,k]^T * B[m,n]
fn matmul_tn(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= tol, "{x} vs {y} (tol {tol})");
        }
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let eye = t.leaf(NdArray::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let a = t.leaf(NdArray::from_vec(&[2, 2], vec![3.0, -1.5, 2.0, 0.25]));
        let c = t.matmul(eye, a).unwrap();
        assert_eq!(t.value(c).data(), t.value(a).data());
    }

    #[test]
    fn matmul_shape_error_names_primitive() {
        let mut t = Tape::new();
        let a = t.leaf(NdArray::zeros(&[2, 3]));
        let b = t.leaf(NdArray::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_uniform() {
        let mut t = Tape::new();
        let z = t.leaf(NdArray::from_vec(&[3], vec![0.0, 0.0, 0.0]));
        let s = t.softmax(z).unwrap();
        assert_close(t.value(s).data(), &[1.0 / 3.0; 3], 1e-15);
    }

    #[test]
    fn log_softmax_large_logits_stay_finite() {
        let mut t = Tape::new();
        let z = t.leaf(NdArray::from_vec(&[2], vec![1000.0, 0.0]));
        let s = t.log_softmax(z).unwrap();
        let v = t.value(s).data();
        assert!(v.iter().all(|x| x.is_finite()));
        // exact: -ln(1 + e^-1000) underflows to 0
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], -1000.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let z = t.leaf(NdArray::from_vec(&[2, 3], vec![1.0, -2.0, 0.5, 10.0, 10.0, -30.0]));
        let s = t.softmax(z).unwrap();
        for row in t.value(s).data().chunks_exact(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut t = Tape::new();
        let x = t.leaf(NdArray::from_vec(&[3], vec![1.0, 2.0, 3.0]));
        let sq = t.mul(x, x).unwrap();
        let root = t.sum(sq).unwrap();
        let g = t.backward(root).unwrap();
        assert_close(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0], 1e-14);
    }

    #[test]
    fn backward_log_softmax_pick_is_onehot_minus_softmax() {
        let mut t = Tape::new();
        let z = t.leaf(NdArray::from_vec(&[4], vec![0.3, -1.2, 2.0, 0.0]));
        let ls = t.log_softmax(z).unwrap();
        let k = 2;
        let pick = t.slice(ls, 0, k, k + 1).unwrap();
        let root = t.sum(pick).unwrap();
        let g = t.backward(root).unwrap();

        let sm = {
            let mut t2 = Tape::new();
            let z2 = t2.leaf(NdArray::from_vec(&[4], vec![0.3, -1.2, 2.0, 0.0]));
            let s = t2.softmax(z2).unwrap();
            t2.value(s).clone()
        };
        let expected: Vec<f64> = (0..4)
            .map(|i| if i == k { 1.0 - sm.data()[i] } else { -sm.data()[i] })
            .collect();
        assert_close(g.get(z).unwrap().data(), &expected, 1e-12);
    }

    #[test]
    fn backward_disconnected_node_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(NdArray::from_vec(&[2], vec![1.0, 2.0]));
        let unused = t.leaf(NdArray::from_vec(&[2], vec![5.0, 6.0]));
        let root = t.sum(x).unwrap();
        let g = t.backward(root).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.dense(&t, unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let x = t.leaf(NdArray::from_vec(&[2], vec![1.0, 2.0]));
        let err = t.backward(x).unwrap_err();
        assert!(matches!(err, AdError::NonScalarRoot { .. }));
    }

    #[test]
    fn backward_linearity_of_accumulation() {
        // backward of a+b root equals sum of separate backwards
        let build = |w: f64| {
            let mut t = Tape::new();
            let x = t.leaf(NdArray::from_vec(&[3], vec![0.5, -1.0, 2.0]));
            let sq = t.mul(x, x).unwrap();
            let r1 = t.sum(sq).unwrap();
            let th = t.tanh(x).unwrap();
            let r2 = t.sum(th).unwrap();
            let r1s = t.scale(r1, w).unwrap();
            let both = t.add(r1s, r2).unwrap();
            (t, x, r1, r2, both)
        };
        let (t, x, _, _, both) = build(1.0);
        let g_joint = t.backward(both).unwrap().dense(&t, x);

        let (t1, x1, r1, _, _) = build(1.0);
        let g1 = t1.backward(r1).unwrap().dense(&t1, x1);
        let (t2, x2, _, r2, _) = build(1.0);
        let g2 = t2.backward(r2).unwrap().dense(&t2, x2);
        let combined: Vec<f64> = g1.data().iter().zip(g2.data().iter()).map(|(a, b)| a + b).collect();
        assert_close(g_joint.data(), &combined, 1e-14);
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf(NdArray::from_vec(&[2, 4], vec![0.1, 0.2, -0.3, 0.7, 1.5, -2.0, 0.0, 0.4]));
            let w = t.leaf(NdArray::from_vec(&[4, 2], vec![0.5, -0.5, 1.0, 0.25, -1.0, 0.75, 0.1, 0.2]));
            let h = t.matmul(x, w).unwrap();
            let a = t.tanh(h).unwrap();
            let ln = t.layer_norm(a, 1e-5).unwrap();
            let s = t.softmax(ln).unwrap();
            let root = t.sum(s).unwrap();
            let g = t.backward(root).unwrap();
            (t.value(root).item(), g.dense(&t, w).into_data())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(
            g1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            g2.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn bias_add_reduces_gradient_over_rows() {
        let mut t = Tape::new();
        let x = t.leaf(NdArray::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = t.leaf(NdArray::from_vec(&[3], vec![0.1, 0.2, 0.3]));
        let y = t.add(x, b).unwrap();
        assert_eq!(t.value(y).data(), &[1.1, 2.2, 3.3, 4.1, 5.2, 6.3]);
        let root = t.sum(y).unwrap();
        let g = t.backward(root).unwrap();
        assert_close(g.get(b).unwrap().data(), &[2.0, 2.0, 2.0], 1e-15);
    }

    #[test]
    fn glu_splits_last_axis() {
        let mut t = Tape::new();
        let x = t.leaf(NdArray::from_vec(&[1, 4], vec![2.0, 3.0, 0.0, 100.0]));
        let y = t.glu(x).unwrap();
        // sigmoid(0) = 0.5, sigmoid(100) ~= 1
        let v = t.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert!((v[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_zero_variance_row_stays_finite() {
        let mut t = Tape::new();
        let x = t.leaf(NdArray::from_vec(&[1, 3], vec![2.0, 2.0, 2.0]));
        let y = t.layer_norm(x, 1e-5).unwrap();
        assert!(t.value(y).all_finite());
        assert_close(t.value(y).data(), &[0.0, 0.0, 0.0], 1e-12);
    }

    #[test]
    fn finite_diff_on_sum_of_squares() {
        let x = NdArray::from_vec(&[4], vec![0.5, -1.0, 2.0, 0.1]);
        let err = finite_diff_check(&[x], 1e-5, |t, p| {
            let sq = t.mul(p[0], p[0])?;
            t.sum(sq)
        })
        .unwrap();
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn finite_diff_on_constant_expression() {
        // gradient of an expression that ignores the parameter is zero
        let x = NdArray::from_vec(&[2], vec![1.0, 2.0]);
        let err = finite_diff_check(&[x], 1e-5, |t, _p| {
            let c = t.leaf(NdArray::from_vec(&[2], vec![3.0, 4.0]));
            t.sum(c)
        })
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn primitive_sweep_under_tolerance() {
        for (name, err) in primitive_grad_sweep().unwrap() {
            assert!(err < 1e-5, "{name}: rel err {err}");
        }
    }

    #[test]
    fn rel_err_floors_at_one() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1e-9, 0.0) - 1e-9).abs() < 1e-24);
        assert!((rel_err(200.0, 100.0) - 0.5).abs() < 1e-15);
    }
}
