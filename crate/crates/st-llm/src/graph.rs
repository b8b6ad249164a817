//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Every forward op appends a node recording its inputs; `backward` sweeps
//! the tape in reverse and returns a map from parameter name to gradient.
//! Frozen parameters enter the tape as plain constants, so no gradient is
//! ever accumulated for them (the freezing contract is structural).

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use crate::error::{Error, Result};
use crate::param::ParamSet;
use crate::tensor::{strides, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Gradients keyed by parameter name. BTreeMap keeps iteration order
/// deterministic for the optimizer and for serialization.
pub type GradMap = BTreeMap<String, Tensor>;

// Constants of the tanh-form gelu: 0.5*x*(1 + tanh(K*(x + C*x^3))).
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    /// Constant input; no gradient flows into it.
    Leaf,
    /// Trainable parameter leaf; gradients accumulate under its name.
    Param(String),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    /// Batched matmul: [B,m,k] x [B,k,n] -> [B,m,n].
    Bmm(NodeId, NodeId),
    Concat(Vec<NodeId>, usize),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    /// Contiguous range along axis 0.
    SliceRows(NodeId, Range<usize>),
    /// Row gather from a 2-d table.
    Rows(NodeId, Vec<usize>),
    BroadcastTo(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    VarAll(NodeId),
    Abs(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    /// Softmax over the last axis.
    Softmax(NodeId),
    /// Layer norm over the last axis with population variance.
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    // One tape node per parameter name, so gradients and the L2 term never
    // see the same parameter twice.
    param_nodes: HashMap<String, NodeId>,
    trainable: Vec<(String, NodeId)>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Constant input (no gradient).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Insert a parameter. Frozen parameters become constants; repeated
    /// inserts of the same name return the original node.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_nodes.get(name) {
            return Ok(id);
        }
        let p = params
            .get(name)
            .ok_or_else(|| Error::invalid("param", format!("unknown parameter `{name}`")))?;
        let id = if p.frozen {
            self.push(p.tensor.clone(), Op::Leaf, false)
        } else {
            let id = self.push(p.tensor.clone(), Op::Param(name.to_string()), true);
            self.trainable.push((name.to_string(), id));
            id
        };
        self.param_nodes.insert(name.to_string(), id);
        Ok(id)
    }

    /// Non-frozen parameters inserted into this graph, in insertion order.
    pub fn trainable_params(&self) -> &[(String, NodeId)] {
        &self.trainable
    }

    // ---- elementwise / broadcasting -------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y)
    }

    fn binary(
        &mut self,
        opname: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shape(va.shape(), vb.shape()).ok_or(Error::ShapeMismatch {
            op: opname,
            lhs: va.shape().to_vec(),
            rhs: vb.shape().to_vec(),
        })?;
        let data = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            broadcast_zip(va, vb, &out_shape, &f)
        };
        let value = Tensor::new(out_shape, data)?;
        let rg = self.needs(a) || self.needs(b);
        let op = match opname {
            "add" => Op::Add(a, b),
            "sub" => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        Ok(self.push(value, op, rg))
    }

    /// Multiply by a compile-time constant scalar.
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(va.shape().to_vec(), data).unwrap();
        let rg = self.needs(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    // ---- contractions ----------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_nn(va.data(), vb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = Vec::with_capacity(bsz * m * n);
        for i in 0..bsz {
            let left = &va.data()[i * m * k..(i + 1) * m * k];
            let right = &vb.data()[i * k * n..(i + 1) * k * n];
            data.extend_from_slice(&matmul_nn(left, right, m, k, n));
        }
        let value = Tensor::new(vec![bsz, m, n], data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Bmm(a, b), rg))
    }

    // ---- shape ops ---------------------------------------------------------

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let numel: usize = shape.iter().product();
        if numel != va.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: va.shape().to_vec(),
                rhs: shape,
            });
        }
        let value = Tensor::new(shape, va.data().to_vec())?;
        let rg = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: NodeId, axes: Vec<usize>) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let rank = va.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&ax| ax >= rank || std::mem::replace(&mut seen[ax], true)) {
            return Err(Error::invalid(
                "permute",
                format!("axes {:?} is not a permutation of 0..{}", axes, rank),
            ));
        }
        let (data, out_shape) = permute_data(va.data(), va.shape(), &axes);
        let value = Tensor::new(out_shape, data)?;
        let rg = self.needs(a);
        Ok(self.push(value, Op::Permute(a, axes), rg))
    }

    /// 2-d transpose; sugar over `permute`.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        if self.shape(a).len() != 2 {
            return Err(Error::invalid(
                "transpose",
                format!("expected rank 2, got shape {:?}", self.shape(a)),
            ));
        }
        self.permute(a, vec![1, 0])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {} out of range for shape {:?}", axis, first),
            ));
        }
        let mut out_shape = first.clone();
        for &p in &parts[1..] {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .enumerate()
                    .all(|(d, &e)| d == axis || e == first[d]);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = out_shape.iter().product();
        let mut data = Vec::with_capacity(total);
        for o in 0..outer {
            for &p in parts {
                let v = &self.nodes[p.0].value;
                let ext = v.shape()[axis];
                let chunk = ext * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(out_shape, data)?;
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Contiguous slice of axis 0.
    pub fn slice_rows(&mut self, a: NodeId, range: Range<usize>) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let shape = va.shape();
        if shape.is_empty() || range.end > shape[0] || range.start > range.end {
            return Err(Error::invalid(
                "slice_rows",
                format!("range {:?} invalid for shape {:?}", range, shape),
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let data = va.data()[range.start * inner..range.end * inner].to_vec();
        let mut out_shape = shape.to_vec();
        out_shape[0] = range.end - range.start;
        let value = Tensor::new(out_shape, data)?;
        let rg = self.needs(a);
        Ok(self.push(value, Op::SliceRows(a, range), rg))
    }

    /// Gather rows of a 2-d table; the lookup form of a one-hot matmul.
    pub fn rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let vt = &self.nodes[table.0].value;
        if vt.rank() != 2 {
            return Err(Error::invalid(
                "rows",
                format!("expected 2-d table, got shape {:?}", vt.shape()),
            ));
        }
        let (r, d) = (vt.shape()[0], vt.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&ix| ix >= r) {
            return Err(Error::invalid(
                "rows",
                format!("index {} out of range for table with {} rows", bad, r),
            ));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &ix in indices {
            data.extend_from_slice(&vt.data()[ix * d..(ix + 1) * d]);
        }
        let value = Tensor::new(vec![indices.len(), d], data)?;
        let rg = self.needs(table);
        Ok(self.push(value, Op::Rows(table, indices.to_vec()), rg))
    }

    /// Expand size-1 axes (numpy semantics, right-aligned).
    pub fn broadcast_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let ok = broadcast_shape(va.shape(), shape).map(|s| s == shape) == Some(true);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: va.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = broadcast_expand(va, shape);
        let value = Tensor::new(shape.to_vec(), data)?;
        let rg = self.needs(a);
        Ok(self.push(value, Op::BroadcastTo(a), rg))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let rg = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        if v.numel() == 0 {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.needs(a);
        Ok(self.push(Tensor::scalar(m), Op::MeanAll(a), rg))
    }

    /// Population variance over all elements.
    pub fn var_all(&mut self, a: NodeId) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        if v.numel() == 0 {
            return Err(Error::invalid("variance", "empty tensor"));
        }
        let n = v.numel() as f64;
        let mean = v.data().iter().sum::<f64>() / n;
        let var = v.data().iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let rg = self.needs(a);
        Ok(self.push(Tensor::scalar(var), Op::VarAll(a), rg))
    }

    // ---- nonlinearities --------------------------------------------------

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Gelu(a), gelu_fwd)
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).unwrap();
        let rg = self.needs(a);
        self.push(value, op, rg)
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let shape = va.shape();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::invalid("softmax", "empty softmax axis"));
        }
        let mut data = Vec::with_capacity(va.numel());
        for row in va.data().chunks_exact(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / sum));
        }
        let value = Tensor::new(shape.to_vec(), data)?;
        let rg = self.needs(a);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    /// Layer norm over the last axis: gamma * (x - mu) / sqrt(var + eps) + beta,
    /// with population (biased) variance.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let vx = &self.nodes[x.0].value;
        let d = *vx.shape().last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::invalid("layer_norm", "empty normalization axis"));
        }
        let (vg, vb) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: vx.shape().to_vec(),
                rhs: vg.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(vx.numel());
        for row in vx.data().chunks_exact(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, &v) in row.iter().enumerate() {
                data.push((v - mean) * inv * vg.data()[j] + vb.data()[j]);
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, eps }, rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Consumes the tape; gradients come
    /// back keyed by parameter name. Frozen parameters never appear.
    pub fn backward(self, loss: NodeId) -> Result<GradMap> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out: GradMap = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    out.insert(name.clone(), t);
                    continue;
                }
                Op::Add(a, b) => {
                    self.acc_reduced(&mut grads, *a, &g, node.value.shape(), 1.0);
                    self.acc_reduced(&mut grads, *b, &g, node.value.shape(), 1.0);
                }
                Op::Sub(a, b) => {
                    self.acc_reduced(&mut grads, *a, &g, node.value.shape(), 1.0);
                    self.acc_reduced(&mut grads, *b, &g, node.value.shape(), -1.0);
                }
                Op::Mul(a, b) => {
                    let out_shape = node.value.shape();
                    if self.needs(*a) {
                        let vb = broadcast_expand(&self.nodes[b.0].value, out_shape);
                        let da: Vec<f64> = g.iter().zip(&vb).map(|(&gv, &bv)| gv * bv).collect();
                        self.acc_reduced(&mut grads, *a, &da, out_shape, 1.0);
                    }
                    if self.needs(*b) {
                        let va = broadcast_expand(&self.nodes[a.0].value, out_shape);
                        let db: Vec<f64> = g.iter().zip(&va).map(|(&gv, &av)| gv * av).collect();
                        self.acc_reduced(&mut grads, *b, &db, out_shape, 1.0);
                    }
                }
                Op::Scale(a, c) => {
                    let da: Vec<f64> = g.iter().map(|&gv| gv * c).collect();
                    acc(&mut grads, a.0, da, self.nodes[a.0].value.numel());
                }
                Op::MatMul(a, b) => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let (m, k) = (va.shape()[0], va.shape()[1]);
                    let n = vb.shape()[1];
                    if self.needs(*a) {
                        let da = matmul_nt(&g, vb.data(), m, n, k);
                        acc(&mut grads, a.0, da, va.numel());
                    }
                    if self.needs(*b) {
                        let db = matmul_tn(va.data(), &g, m, k, n);
                        acc(&mut grads, b.0, db, vb.numel());
                    }
                }
                Op::Bmm(a, b) => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let (bsz, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                    let n = vb.shape()[2];
                    if self.needs(*a) {
                        let mut da = Vec::with_capacity(va.numel());
                        for i in 0..bsz {
                            let gb = &g[i * m * n..(i + 1) * m * n];
                            let rb = &vb.data()[i * k * n..(i + 1) * k * n];
                            da.extend_from_slice(&matmul_nt(gb, rb, m, n, k));
                        }
                        acc(&mut grads, a.0, da, va.numel());
                    }
                    if self.needs(*b) {
                        let mut db = Vec::with_capacity(vb.numel());
                        for i in 0..bsz {
                            let gb = &g[i * m * n..(i + 1) * m * n];
                            let la = &va.data()[i * m * k..(i + 1) * m * k];
                            db.extend_from_slice(&matmul_tn(la, gb, m, k, n));
                        }
                        acc(&mut grads, b.0, db, vb.numel());
                    }
                }
                Op::Concat(parts, axis) => {
                    let out_shape = node.value.shape();
                    let outer: usize = out_shape[..*axis].iter().product();
                    let inner: usize = out_shape[*axis + 1..].iter().product();
                    let mut offset = 0;
                    for &p in parts {
                        let vp = &self.nodes[p.0].value;
                        let ext = vp.shape()[*axis];
                        if self.needs(p) {
                            let mut dp = Vec::with_capacity(vp.numel());
                            for o in 0..outer {
                                let start = o * out_shape[*axis] * inner + offset * inner;
                                dp.extend_from_slice(&g[start..start + ext * inner]);
                            }
                            acc(&mut grads, p.0, dp, vp.numel());
                        }
                        offset += ext;
                    }
                }
                Op::Reshape(a) => {
                    acc(&mut grads, a.0, g.clone(), self.nodes[a.0].value.numel());
                }
                Op::Permute(a, axes) => {
                    let mut inverse = vec![0usize; axes.len()];
                    for (d, &ax) in axes.iter().enumerate() {
                        inverse[ax] = d;
                    }
                    let (da, _) = permute_data(&g, node.value.shape(), &inverse);
                    acc(&mut grads, a.0, da, self.nodes[a.0].value.numel());
                }
                Op::SliceRows(a, range) => {
                    let va = &self.nodes[a.0].value;
                    let inner: usize = va.shape()[1..].iter().product();
                    let mut da = vec![0.0; va.numel()];
                    da[range.start * inner..range.end * inner].copy_from_slice(&g);
                    acc(&mut grads, a.0, da, va.numel());
                }
                Op::Rows(table, indices) => {
                    let vt = &self.nodes[table.0].value;
                    let d = vt.shape()[1];
                    let mut dt = vec![0.0; vt.numel()];
                    for (pos, &ix) in indices.iter().enumerate() {
                        for j in 0..d {
                            dt[ix * d + j] += g[pos * d + j];
                        }
                    }
                    acc(&mut grads, table.0, dt, vt.numel());
                }
                Op::BroadcastTo(a) => {
                    let va = &self.nodes[a.0].value;
                    let da = reduce_to_shape(&g, node.value.shape(), va.shape());
                    acc(&mut grads, a.0, da, va.numel());
                }
                Op::SumAll(a) => {
                    let da = vec![g[0]; self.nodes[a.0].value.numel()];
                    acc(&mut grads, a.0, da, self.nodes[a.0].value.numel());
                }
                Op::MeanAll(a) => {
                    let n = self.nodes[a.0].value.numel();
                    let da = vec![g[0] / n as f64; n];
                    acc(&mut grads, a.0, da, n);
                }
                Op::VarAll(a) => {
                    let va = &self.nodes[a.0].value;
                    let n = va.numel() as f64;
                    let mean = va.data().iter().sum::<f64>() / n;
                    let da: Vec<f64> = va
                        .data()
                        .iter()
                        .map(|&x| g[0] * 2.0 * (x - mean) / n)
                        .collect();
                    acc(&mut grads, a.0, da, va.numel());
                }
                Op::Abs(a) => {
                    let va = &self.nodes[a.0].value;
                    let da: Vec<f64> = g
                        .iter()
                        .zip(va.data())
                        .map(|(&gv, &x)| gv * sign0(x))
                        .collect();
                    acc(&mut grads, a.0, da, va.numel());
                }
                Op::Relu(a) => {
                    let va = &self.nodes[a.0].value;
                    let da: Vec<f64> = g
                        .iter()
                        .zip(va.data())
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect();
                    acc(&mut grads, a.0, da, va.numel());
                }
                Op::Gelu(a) => {
                    let va = &self.nodes[a.0].value;
                    let da: Vec<f64> = g
                        .iter()
                        .zip(va.data())
                        .map(|(&gv, &x)| gv * gelu_bwd(x))
                        .collect();
                    acc(&mut grads, a.0, da, va.numel());
                }
                Op::Softmax(a) => {
                    let vo = &node.value;
                    let d = *vo.shape().last().unwrap();
                    let mut da = Vec::with_capacity(vo.numel());
                    for (srow, grow) in vo.data().chunks_exact(d).zip(g.chunks_exact(d)) {
                        let dot: f64 = srow.iter().zip(grow).map(|(&s, &gv)| s * gv).sum();
                        da.extend(srow.iter().zip(grow).map(|(&s, &gv)| s * (gv - dot)));
                    }
                    acc(&mut grads, a.0, da, self.nodes[a.0].value.numel());
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let vx = &self.nodes[x.0].value;
                    let vg = &self.nodes[gamma.0].value;
                    let d = *vx.shape().last().unwrap();
                    let df = d as f64;
                    let mut dx = vec![0.0; vx.numel()];
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for (r, (row, grow)) in vx
                        .data()
                        .chunks_exact(d)
                        .zip(g.chunks_exact(d))
                        .enumerate()
                    {
                        let mean = row.iter().sum::<f64>() / df;
                        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / df;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                        let dxhat: Vec<f64> = grow
                            .iter()
                            .zip(vg.data())
                            .map(|(&gv, &ga)| gv * ga)
                            .collect();
                        for j in 0..d {
                            dgamma[j] += grow[j] * xhat[j];
                            dbeta[j] += grow[j];
                        }
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 =
                            dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] =
                                inv / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    if self.needs(*x) {
                        acc(&mut grads, x.0, dx, vx.numel());
                    }
                    if self.needs(*gamma) {
                        acc(&mut grads, gamma.0, dgamma, d);
                    }
                    if self.needs(*beta) {
                        acc(&mut grads, beta.0, dbeta, d);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Accumulate `scale * reduce(g)` into `target`, folding broadcast axes
    /// back down when the target shape is smaller than the output shape.
    fn acc_reduced(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: NodeId,
        g: &[f64],
        out_shape: &[usize],
        scale: f64,
    ) {
        if !self.needs(target) {
            return;
        }
        let vt = &self.nodes[target.0].value;
        let mut dt = if vt.shape() == out_shape {
            g.to_vec()
        } else {
            reduce_to_shape(g, out_shape, vt.shape())
        };
        if scale != 1.0 {
            for v in &mut dt {
                *v *= scale;
            }
        }
        acc(grads, target.0, dt, vt.numel());
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], idx: usize, contribution: Vec<f64>, numel: usize) {
    debug_assert_eq!(contribution.len(), numel);
    match &mut grads[idx] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let inner = GELU_K * (x + GELU_C * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let dinner = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner
}

// ---- broadcasting helpers ------------------------------------------------

/// Numpy-style broadcast result shape, or None when incompatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[i] = da.max(db);
    }
    Some(out)
}

fn pad_left(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut padded = vec![1usize; rank];
    padded[rank - shape.len()..].copy_from_slice(shape);
    padded
}

/// Expand a tensor to `out_shape` by replicating broadcast axes.
fn broadcast_expand(t: &Tensor, out_shape: &[usize]) -> Vec<f64> {
    if t.shape() == out_shape {
        return t.data().to_vec();
    }
    let rank = out_shape.len();
    let padded = pad_left(t.shape(), rank);
    let in_strides = strides(&padded);
    let numel: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut coords = vec![0usize; rank];
    for _ in 0..numel {
        let mut flat = 0;
        for d in 0..rank {
            if padded[d] != 1 {
                flat += coords[d] * in_strides[d];
            }
        }
        out.push(t.data()[flat]);
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

fn broadcast_zip(a: &Tensor, b: &Tensor, out_shape: &[usize], f: &impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let ea = broadcast_expand(a, out_shape);
    let eb = broadcast_expand(b, out_shape);
    ea.iter().zip(&eb).map(|(&x, &y)| f(x, y)).collect()
}

/// Sum gradient contributions over axes the target was broadcast along.
fn reduce_to_shape(g: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    let rank = from.len();
    let padded = pad_left(to, rank);
    let to_strides = strides(&padded);
    let to_numel: usize = to.iter().product();
    let mut out = vec![0.0; to_numel];
    let mut coords = vec![0usize; rank];
    for &gv in g {
        let mut flat = 0;
        for d in 0..rank {
            if padded[d] != 1 {
                flat += coords[d] * to_strides[d];
            }
        }
        out[flat] += gv;
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < from[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides = strides(&out_shape);
    // stride contributed by each input axis in the output layout
    let mut map = vec![0usize; rank];
    for (d, &a) in axes.iter().enumerate() {
        map[a] = out_strides[d];
    }
    let mut out = vec![0.0; data.len()];
    let mut coords = vec![0usize; rank];
    for &v in data {
        let mut of = 0;
        for d in 0..rank {
            of += coords[d] * map[d];
        }
        out[of] = v;
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    (out, out_shape)
}

// ---- matmul kernels --------------------------------------------------------

/// C[m,n] = A[m,k] B[k,n]
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
    c
}

/// C[m,k] = A[m,n] B[k,n]^T
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            c[i * k + p] = s;
        }
    }
    c
}

/// C[k,n] = A[m,k]^T B[m,n]
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
    c
}
