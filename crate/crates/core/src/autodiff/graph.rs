//! Static computation graph with eager shape inference, a seeded forward
//! pass and a reverse-mode backward pass.
//!
//! Nodes can only reference nodes created before them, so insertion order is
//! a valid topological order and the graph is acyclic by construction.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, RngCore};

use super::kernels;
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether a Gumbel node perturbs its logits with sampled noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GumbelNoise {
    Sampled,
    /// Deterministic evaluation: plain (hard) softmax of the logits.
    Disabled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LeafKind {
    Input,
    Param,
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf(LeafKind),
    Const(Tensor<S>),
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow { a: NodeId, bias: NodeId },
    Scale { a: NodeId, factor: S },
    Gelu(NodeId),
    LayerNorm { a: NodeId, gamma: NodeId, beta: NodeId, eps: S },
    Softmax(NodeId),
    LogSumExp(NodeId),
    Gumbel { logits: NodeId, temperature: S, hard: bool, noise: GumbelNoise },
    Reshape(NodeId),
    Transpose(NodeId),
    SwapAxes01(NodeId),
    Conv1d { x: NodeId, w: NodeId, stride: usize },
    DepthwiseConv { x: NodeId, w: NodeId },
    ReplaceRows { x: NodeId, rows: Vec<usize>, emb: NodeId },
    GatherRows { x: NodeId, index: Vec<usize> },
    CosineRows(NodeId, NodeId),
    Column { a: NodeId, col: usize },
    Sum(NodeId),
    Mean(NodeId),
    MeanAxis0(NodeId),
    XLogX(NodeId),
}

#[derive(Clone, Debug)]
struct Node<S> {
    name: String,
    op: Op<S>,
    shape: Vec<usize>,
    needs_grad: bool,
}

/// Values kept from the forward pass for use in backward.
#[derive(Clone, Debug)]
enum Aux<S> {
    None,
    Norm { mean: Vec<S>, rstd: Vec<S> },
    Soft(Vec<S>),
    Cosine { na: Vec<S>, nb: Vec<S>, dots: Vec<S> },
}

/// Named tensors a forward pass can bind to `input`/`param` leaves.
pub trait Bindings<S: Scalar> {
    fn lookup(&self, name: &str) -> Option<Tensor<S>>;
}

impl<S: Scalar> Bindings<S> for HashMap<String, Tensor<S>> {
    fn lookup(&self, name: &str) -> Option<Tensor<S>> {
        self.get(name).cloned()
    }
}

impl<S: Scalar> Bindings<S> for BTreeMap<String, Tensor<S>> {
    fn lookup(&self, name: &str) -> Option<Tensor<S>> {
        self.get(name).cloned()
    }
}

/// Looks up in `.0` first, then `.1`.
impl<S: Scalar, A: Bindings<S> + ?Sized, B: Bindings<S> + ?Sized> Bindings<S> for (&A, &B) {
    fn lookup(&self, name: &str) -> Option<Tensor<S>> {
        self.0.lookup(name).or_else(|| self.1.lookup(name))
    }
}

/// Gradients of one backward pass, keyed by leaf name.
#[derive(Clone, Debug, Default)]
pub struct Gradients<S> {
    pub by_name: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.by_name.iter()
    }

    pub fn global_norm(&self) -> S {
        self.by_name
            .values()
            .flat_map(|t| t.data().iter())
            .map(|&v| v * v)
            .sum::<S>()
            .sqrt()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    leaves: HashMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
    scope: String,
    values: Vec<Tensor<S>>,
    aux: Vec<Aux<S>>,
}

fn same(a: &[usize], b: &[usize]) -> bool {
    a == b
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaves: HashMap::new(),
            outputs: BTreeMap::new(),
            scope: String::new(),
            values: Vec::new(),
            aux: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Prefix for the names of nodes created from now on.
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.nodes[id.0].name
    }

    /// Names and shapes of the leaves that receive gradients.
    pub fn grad_leaves(&self) -> Vec<(String, Vec<usize>)> {
        self.leaves
            .iter()
            .filter(|(_, id)| self.nodes[id.0].needs_grad)
            .map(|(n, id)| (n.clone(), self.nodes[id.0].shape.clone()))
            .collect()
    }

    pub fn is_evaluated(&self) -> bool {
        !self.values.is_empty() && self.values.len() == self.nodes.len()
    }

    fn push(&mut self, op_name: &str, op: Op<S>, shape: Vec<usize>, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        let name = if self.scope.is_empty() {
            format!("{op_name}#{}", id.0)
        } else {
            format!("{}/{op_name}#{}", self.scope, id.0)
        };
        self.nodes.push(Node { name, op, shape, needs_grad });
        // any structural change invalidates a previous evaluation
        self.values.clear();
        self.aux.clear();
        id
    }

    fn err(&self, op_name: &str, detail: String) -> Error {
        let node = if self.scope.is_empty() {
            format!("{op_name}#{}", self.nodes.len())
        } else {
            format!("{}/{op_name}#{}", self.scope, self.nodes.len())
        };
        Error::Shape { node, detail }
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    fn leaf(&mut self, name: &str, shape: &[usize], kind: LeafKind, grad: bool) -> Result<NodeId> {
        if let Some(&id) = self.leaves.get(name) {
            if self.nodes[id.0].shape != shape {
                return Err(Error::Shape {
                    node: name.to_string(),
                    detail: format!("redeclared with shape {:?}, was {:?}", shape, self.nodes[id.0].shape),
                });
            }
            return Ok(id);
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { name: name.to_string(), op: Op::Leaf(kind), shape: shape.to_vec(), needs_grad: grad });
        self.values.clear();
        self.aux.clear();
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    /// Declares a named input without gradient. Redeclaring a name returns the
    /// existing node.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.leaf(name, shape, LeafKind::Input, false)
    }

    /// Declares a named input whose gradient is reported by backward.
    pub fn input_with_grad(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.leaf(name, shape, LeafKind::Input, true)
    }

    /// Declares a trainable parameter.
    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.leaf(name, shape, LeafKind::Param, true)
    }

    pub fn constant(&mut self, t: Tensor<S>) -> NodeId {
        let shape = t.shape().to_vec();
        self.push("const", Op::Const(t), shape, false)
    }

    pub fn set_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` (per batch for 3-D operands).
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let shape = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [r, c]) => {
                let (bk, n) = if trans_b { (*c, *r) } else { (*r, *c) };
                if *k != bk {
                    return Err(self.err("matmul", format!("{:?} x {:?} (trans_b={trans_b})", sa, sb)));
                }
                vec![*m, n]
            }
            ([ba, m, k], [bb, r, c]) => {
                let (bk, n) = if trans_b { (*c, *r) } else { (*r, *c) };
                if *k != bk || ba != bb {
                    return Err(self.err("matmul", format!("{:?} x {:?} (trans_b={trans_b})", sa, sb)));
                }
                vec![*ba, *m, n]
            }
            _ => return Err(self.err("matmul", format!("unsupported ranks {:?} x {:?}", sa, sb))),
        };
        let ng = self.ng(&[a, b]);
        Ok(self.push("matmul", Op::MatMul { a, b, trans_b }, shape, ng))
    }

    fn binary(&mut self, name: &str, a: NodeId, b: NodeId, op: Op<S>) -> Result<NodeId> {
        if !same(self.shape(a), self.shape(b)) {
            return Err(self.err(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(name, op, shape, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, Op::Mul(a, b))
    }

    /// Adds a vector to every row (broadcast over the leading dimensions).
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        let sb = self.shape(bias);
        if sb.len() != 1 || sa.last() != sb.first() {
            return Err(self.err("add_row", format!("{:?} + {:?}", sa, sb)));
        }
        let shape = sa.to_vec();
        let ng = self.ng(&[a, bias]);
        Ok(self.push("add_row", Op::AddRow { a, bias }, shape, ng))
    }

    pub fn scale(&mut self, a: NodeId, factor: S) -> NodeId {
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a]);
        self.push("scale", Op::Scale { a, factor }, shape, ng)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a]);
        self.push("gelu", Op::Gelu(a), shape, ng)
    }

    /// Layer normalization over the last dimension with affine parameters.
    pub fn layer_norm(&mut self, a: NodeId, gamma: NodeId, beta: NodeId, eps: S) -> Result<NodeId> {
        let sa = self.shape(a);
        let n = *sa.last().ok_or_else(|| self.err("layer_norm", "scalar input".into()))?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(self.err(
                "layer_norm",
                format!("input {:?}, gamma {:?}, beta {:?}", sa, self.shape(gamma), self.shape(beta)),
            ));
        }
        let shape = sa.to_vec();
        let ng = self.ng(&[a, gamma, beta]);
        Ok(self.push("layer_norm", Op::LayerNorm { a, gamma, beta, eps }, shape, ng))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        if self.shape(a).is_empty() {
            return Err(self.err("softmax", "scalar input".into()));
        }
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push("softmax", Op::Softmax(a), shape, ng))
    }

    /// Log-sum-exp over the last dimension, which is removed.
    pub fn logsumexp(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        if sa.is_empty() {
            return Err(self.err("logsumexp", "scalar input".into()));
        }
        let shape = sa[..sa.len() - 1].to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push("logsumexp", Op::LogSumExp(a), shape, ng))
    }

    /// Gumbel-softmax over the last dimension. With `hard`, the forward value
    /// is the one-hot argmax of the perturbed distribution while the gradient
    /// is that of the soft distribution (straight-through).
    pub fn gumbel_softmax(
        &mut self,
        logits: NodeId,
        temperature: S,
        hard: bool,
        noise: GumbelNoise,
    ) -> Result<NodeId> {
        if !(temperature > S::zero()) {
            return Err(Error::invalid(format!("gumbel temperature must be positive, got {temperature}")));
        }
        if self.shape(logits).is_empty() {
            return Err(self.err("gumbel_softmax", "scalar input".into()));
        }
        let shape = self.shape(logits).to_vec();
        let ng = self.ng(&[logits]);
        Ok(self.push("gumbel_softmax", Op::Gumbel { logits, temperature, hard, noise }, shape, ng))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if numel(shape) != numel(self.shape(a)) {
            return Err(self.err("reshape", format!("{:?} into {:?}", self.shape(a), shape)));
        }
        let ng = self.ng(&[a]);
        Ok(self.push("reshape", Op::Reshape(a), shape.to_vec(), ng))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        match *self.shape(a) {
            [r, c] => {
                let ng = self.ng(&[a]);
                Ok(self.push("transpose", Op::Transpose(a), vec![c, r], ng))
            }
            _ => Err(self.err("transpose", format!("expected 2-D, got {:?}", self.shape(a)))),
        }
    }

    /// `(A, B, C) -> (B, A, C)`.
    pub fn swap_axes01(&mut self, a: NodeId) -> Result<NodeId> {
        match *self.shape(a) {
            [d0, d1, d2] => {
                let ng = self.ng(&[a]);
                Ok(self.push("swap01", Op::SwapAxes01(a), vec![d1, d0, d2], ng))
            }
            _ => Err(self.err("swap01", format!("expected 3-D, got {:?}", self.shape(a)))),
        }
    }

    /// Strided valid convolution over time. `x: (L, C_in)`,
    /// `w: (K, C_in, C_out)`, output `((L - K) / stride + 1, C_out)`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, stride: usize) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        match (sx.as_slice(), sw.as_slice()) {
            ([l, cin], [k, wcin, cout]) if cin == wcin && stride > 0 => {
                if l < k {
                    return Err(self.err("conv1d", format!("input length {l} shorter than kernel {k}")));
                }
                let lout = (l - k) / stride + 1;
                let ng = self.ng(&[x, w]);
                Ok(self.push("conv1d", Op::Conv1d { x, w, stride }, vec![lout, *cout], ng))
            }
            _ => Err(self.err("conv1d", format!("x {:?}, w {:?}, stride {stride}", sx, sw))),
        }
    }

    /// Per-channel convolution with an odd kernel and zero "same" padding.
    /// `x: (T, C)`, `w: (K, C)`.
    pub fn depthwise_conv(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        match (sx.as_slice(), sw.as_slice()) {
            ([_, c], [k, wc]) if c == wc && k % 2 == 1 => {
                let ng = self.ng(&[x, w]);
                Ok(self.push("depthwise_conv", Op::DepthwiseConv { x, w }, sx.clone(), ng))
            }
            _ => Err(self.err("depthwise_conv", format!("x {:?}, w {:?}", sx, sw))),
        }
    }

    /// Replaces the listed rows of `x: (T, d)` by `emb: (d)`.
    pub fn replace_rows(&mut self, x: NodeId, rows: &[usize], emb: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let [t, d] = sx[..] else {
            return Err(self.err("replace_rows", format!("expected 2-D input, got {:?}", sx)));
        };
        if self.shape(emb) != [d] {
            return Err(self.err("replace_rows", format!("embedding {:?} for rows of {d}", self.shape(emb))));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= t) {
            return Err(Error::OutOfRange { index: bad, len: t });
        }
        let mut rows = rows.to_vec();
        rows.sort_unstable();
        rows.dedup();
        let ng = self.ng(&[x, emb]);
        Ok(self.push("replace_rows", Op::ReplaceRows { x, rows, emb }, sx, ng))
    }

    pub fn gather_rows(&mut self, x: NodeId, index: &[usize]) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let [n, d] = sx[..] else {
            return Err(self.err("gather_rows", format!("expected 2-D input, got {:?}", sx)));
        };
        if let Some(&bad) = index.iter().find(|&&r| r >= n) {
            return Err(Error::OutOfRange { index: bad, len: n });
        }
        let ng = self.ng(&[x]);
        Ok(self.push("gather_rows", Op::GatherRows { x, index: index.to_vec() }, vec![index.len(), d], ng))
    }

    /// Row-wise cosine similarity of two `(N, d)` tensors.
    pub fn cosine_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || sa != self.shape(b) {
            return Err(self.err("cosine_rows", format!("{:?} vs {:?}", sa, self.shape(b))));
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push("cosine_rows", Op::CosineRows(a, b), vec![sa[0]], ng))
    }

    pub fn column(&mut self, a: NodeId, col: usize) -> Result<NodeId> {
        match *self.shape(a) {
            [n, m] if col < m => {
                let ng = self.ng(&[a]);
                Ok(self.push("column", Op::Column { a, col }, vec![n], ng))
            }
            _ => Err(self.err("column", format!("column {col} of {:?}", self.shape(a)))),
        }
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let ng = self.ng(&[a]);
        self.push("sum", Op::Sum(a), Vec::new(), ng)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let ng = self.ng(&[a]);
        self.push("mean", Op::Mean(a), Vec::new(), ng)
    }

    /// Mean over the first dimension.
    pub fn mean_axis0(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.is_empty() || sa[0] == 0 {
            return Err(self.err("mean_axis0", format!("input {:?}", sa)));
        }
        let ng = self.ng(&[a]);
        Ok(self.push("mean_axis0", Op::MeanAxis0(a), sa[1..].to_vec(), ng))
    }

    /// Element-wise `x ln x`, with value and slope 0 at `x = 0`.
    pub fn xlogx(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a]);
        self.push("xlogx", Op::XLogX(a), shape, ng)
    }

    /// Value of a node after [`Graph::forward`].
    pub fn value(&self, id: NodeId) -> Result<&Tensor<S>> {
        if !self.is_evaluated() {
            return Err(Error::NotEvaluated);
        }
        Ok(&self.values[id.0])
    }

    /// Evaluates every node. Leaves are bound by name; stochastic nodes
    /// draw from `rng` in node order. Returns the named outputs.
    pub fn forward(
        &mut self,
        bindings: &dyn Bindings<S>,
        rng: &mut dyn RngCore,
    ) -> Result<BTreeMap<String, Tensor<S>>> {
        let mut values: Vec<Tensor<S>> = Vec::with_capacity(self.nodes.len());
        let mut aux: Vec<Aux<S>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let (value, saved) = eval_node(node, &values, bindings, rng)?;
            if !value.is_finite() {
                return Err(Error::NonFinite { node: node.name.clone() });
            }
            values.push(value);
            aux.push(saved);
        }
        self.values = values;
        self.aux = aux;
        Ok(self.outputs.iter().map(|(k, id)| (k.clone(), self.values[id.0].clone())).collect())
    }

    /// Reverse pass from `output` seeded with `seed` (same shape as the
    /// output). Returns gradients for every leaf that requires one; leaves
    /// the output does not depend on get zeros.
    pub fn backward(&self, output: NodeId, seed: &Tensor<S>) -> Result<Gradients<S>> {
        if !self.is_evaluated() {
            return Err(Error::NotEvaluated);
        }
        if seed.shape() != self.shape(output) {
            return Err(Error::Shape {
                node: self.nodes[output.0].name.clone(),
                detail: format!("seed gradient {:?} for output {:?}", seed.shape(), self.shape(output)),
            });
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.data().to_vec());
        let mut out = Gradients::default();
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf(_) = node.op {
                let t = Tensor::new(node.shape.clone(), g)?;
                out.by_name.insert(node.name.clone(), t);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        for node in &self.nodes {
            if matches!(node.op, Op::Leaf(_)) && node.needs_grad && !out.by_name.contains_key(&node.name) {
                out.by_name.insert(node.name.clone(), Tensor::zeros(node.shape.clone()));
            }
        }
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let vals = &self.values;
        let y = vals[i].data();
        // Accumulates into the gradient buffer of `id` if it needs one.
        macro_rules! acc {
            ($id:expr, |$buf:ident| $body:block) => {{
                let id: NodeId = $id;
                if self.nodes[id.0].needs_grad {
                    let n = numel(&self.nodes[id.0].shape);
                    let $buf = grads[id.0].get_or_insert_with(|| vec![S::zero(); n]);
                    $body
                }
            }};
        }
        match &node.op {
            Op::Leaf(_) | Op::Const(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let sa = &self.nodes[a.0].shape;
                let (batch, m, k) = if sa.len() == 3 { (sa[0], sa[1], sa[2]) } else { (1, sa[0], sa[1]) };
                let n = *node.shape.last().unwrap();
                let av = vals[a.0].data();
                let bv = vals[b.0].data();
                for bi in 0..batch {
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    let asl = &av[bi * m * k..(bi + 1) * m * k];
                    let bsl = &bv[bi * k * n..(bi + 1) * k * n];
                    acc!(*a, |buf| {
                        let da = if *trans_b {
                            // C = A Bᵀ, B: (n, k) -> dA = dC B
                            kernels::matmul(gs, bsl, m, n, k)
                        } else {
                            kernels::matmul_nt(gs, bsl, m, n, k)
                        };
                        for (d, v) in buf[bi * m * k..(bi + 1) * m * k].iter_mut().zip(da) {
                            *d += v;
                        }
                    });
                    acc!(*b, |buf| {
                        let db = if *trans_b {
                            // dB = dCᵀ A: (n, k)
                            kernels::matmul_tn(gs, asl, m, n, k)
                        } else {
                            kernels::matmul_tn(asl, gs, m, k, n)
                        };
                        for (d, v) in buf[bi * k * n..(bi + 1) * k * n].iter_mut().zip(db) {
                            *d += v;
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc!(*a, |buf| {
                    for (d, &v) in buf.iter_mut().zip(g) {
                        *d += v;
                    }
                });
                acc!(*b, |buf| {
                    for (d, &v) in buf.iter_mut().zip(g) {
                        *d += v;
                    }
                });
            }
            Op::Sub(a, b) => {
                acc!(*a, |buf| {
                    for (d, &v) in buf.iter_mut().zip(g) {
                        *d += v;
                    }
                });
                acc!(*b, |buf| {
                    for (d, &v) in buf.iter_mut().zip(g) {
                        *d -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (vals[a.0].data(), vals[b.0].data());
                acc!(*a, |buf| {
                    for ((d, &v), &o) in buf.iter_mut().zip(g).zip(bv) {
                        *d += v * o;
                    }
                });
                acc!(*b, |buf| {
                    for ((d, &v), &o) in buf.iter_mut().zip(g).zip(av) {
                        *d += v * o;
                    }
                });
            }
            Op::AddRow { a, bias } => {
                acc!(*a, |buf| {
                    for (d, &v) in buf.iter_mut().zip(g) {
                        *d += v;
                    }
                });
                acc!(*bias, |buf| {
                    let n = buf.len();
                    for row in g.chunks(n) {
                        for (d, &v) in buf.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                });
            }
            Op::Scale { a, factor } => acc!(*a, |buf| {
                for (d, &v) in buf.iter_mut().zip(g) {
                    *d += *factor * v;
                }
            }),
            Op::Gelu(a) => {
                let x = vals[a.0].data();
                acc!(*a, |buf| {
                    for ((d, &v), &xv) in buf.iter_mut().zip(g).zip(x) {
                        *d += v * kernels::gelu_grad(xv);
                    }
                });
            }
            Op::LayerNorm { a, gamma, beta, .. } => {
                let Aux::Norm { mean, rstd } = &self.aux[i] else { unreachable!() };
                let x = vals[a.0].data();
                let gm = vals[gamma.0].data();
                let n = gm.len();
                let rows = x.len() / n;
                let nf = S::from_usize_lossy(n);
                acc!(*gamma, |buf| {
                    for r in 0..rows {
                        for j in 0..n {
                            let xh = (x[r * n + j] - mean[r]) * rstd[r];
                            buf[j] += g[r * n + j] * xh;
                        }
                    }
                });
                acc!(*beta, |buf| {
                    for row in g.chunks(n) {
                        for (d, &v) in buf.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                });
                acc!(*a, |buf| {
                    for r in 0..rows {
                        let xs = &x[r * n..(r + 1) * n];
                        let gs = &g[r * n..(r + 1) * n];
                        let mut sum_d = S::zero();
                        let mut sum_dx = S::zero();
                        for j in 0..n {
                            let dxh = gs[j] * gm[j];
                            let xh = (xs[j] - mean[r]) * rstd[r];
                            sum_d += dxh;
                            sum_dx += dxh * xh;
                        }
                        let md = sum_d / nf;
                        let mdx = sum_dx / nf;
                        for j in 0..n {
                            let dxh = gs[j] * gm[j];
                            let xh = (xs[j] - mean[r]) * rstd[r];
                            buf[r * n + j] += rstd[r] * (dxh - md - xh * mdx);
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let n = *node.shape.last().unwrap();
                acc!(*a, |buf| {
                    for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(buf.chunks_mut(n)) {
                        kernels::softmax_row_backward_acc(yr, gr, S::one(), dr);
                    }
                });
            }
            Op::LogSumExp(a) => {
                let x = vals[a.0].data();
                let n = *self.nodes[a.0].shape.last().unwrap();
                acc!(*a, |buf| {
                    for (r, (xr, dr)) in x.chunks(n).zip(buf.chunks_mut(n)).enumerate() {
                        for (d, &xv) in dr.iter_mut().zip(xr) {
                            *d += g[r] * (xv - y[r]).exp();
                        }
                    }
                });
            }
            Op::Gumbel { logits, temperature, .. } => {
                let Aux::Soft(soft) = &self.aux[i] else { unreachable!() };
                let n = *node.shape.last().unwrap();
                let inv_t = S::one() / *temperature;
                acc!(*logits, |buf| {
                    for ((yr, gr), dr) in soft.chunks(n).zip(g.chunks(n)).zip(buf.chunks_mut(n)) {
                        kernels::softmax_row_backward_acc(yr, gr, inv_t, dr);
                    }
                });
            }
            Op::Reshape(a) => acc!(*a, |buf| {
                for (d, &v) in buf.iter_mut().zip(g) {
                    *d += v;
                }
            }),
            Op::Transpose(a) => {
                let (r, c) = (node.shape[1], node.shape[0]);
                let gt = kernels::transpose(g, c, r);
                acc!(*a, |buf| {
                    for (d, v) in buf.iter_mut().zip(gt) {
                        *d += v;
                    }
                });
            }
            Op::SwapAxes01(a) => {
                let (d1, d0, d2) = (node.shape[0], node.shape[1], node.shape[2]);
                acc!(*a, |buf| {
                    // output (d1, d0, d2) -> input (d0, d1, d2)
                    for i1 in 0..d1 {
                        for i0 in 0..d0 {
                            let src = &g[(i1 * d0 + i0) * d2..(i1 * d0 + i0 + 1) * d2];
                            let dst = &mut buf[(i0 * d1 + i1) * d2..(i0 * d1 + i1 + 1) * d2];
                            for (d, &v) in dst.iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    }
                });
            }
            Op::Conv1d { x, w, stride } => {
                let sw = &self.nodes[w.0].shape;
                let (k, cin, cout) = (sw[0], sw[1], sw[2]);
                let lout = node.shape[0];
                let span = k * cin;
                let xv = vals[x.0].data();
                let wv = vals[w.0].data();
                acc!(*w, |buf| {
                    let cols = im2col(xv, lout, span, *stride * cin);
                    let dw = kernels::matmul_tn(&cols, g, lout, span, cout);
                    for (d, v) in buf.iter_mut().zip(dw) {
                        *d += v;
                    }
                });
                acc!(*x, |buf| {
                    let dcols = kernels::matmul_nt(g, wv, lout, cout, span);
                    for t in 0..lout {
                        let off = t * stride * cin;
                        for (d, &v) in buf[off..off + span].iter_mut().zip(&dcols[t * span..(t + 1) * span]) {
                            *d += v;
                        }
                    }
                });
            }
            Op::DepthwiseConv { x, w } => {
                let (t, c) = (node.shape[0], node.shape[1]);
                let k = self.nodes[w.0].shape[0];
                let pad = k / 2;
                let xv = vals[x.0].data();
                let wv = vals[w.0].data();
                acc!(*w, |buf| {
                    for ti in 0..t {
                        for kk in 0..k {
                            let src = ti + kk;
                            if src < pad || src - pad >= t {
                                continue;
                            }
                            let s = src - pad;
                            for ch in 0..c {
                                buf[kk * c + ch] += g[ti * c + ch] * xv[s * c + ch];
                            }
                        }
                    }
                });
                acc!(*x, |buf| {
                    for ti in 0..t {
                        for kk in 0..k {
                            let src = ti + kk;
                            if src < pad || src - pad >= t {
                                continue;
                            }
                            let s = src - pad;
                            for ch in 0..c {
                                buf[s * c + ch] += g[ti * c + ch] * wv[kk * c + ch];
                            }
                        }
                    }
                });
            }
            Op::ReplaceRows { x, rows, emb } => {
                let d = node.shape[1];
                acc!(*x, |buf| {
                    let mut masked = rows.iter().peekable();
                    for (r, (dr, gr)) in buf.chunks_mut(d).zip(g.chunks(d)).enumerate() {
                        if masked.peek() == Some(&&r) {
                            masked.next();
                            continue;
                        }
                        for (dv, &gv) in dr.iter_mut().zip(gr) {
                            *dv += gv;
                        }
                    }
                });
                acc!(*emb, |buf| {
                    for &r in rows {
                        for (dv, &gv) in buf.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let d = node.shape[1];
                acc!(*x, |buf| {
                    for (o, &r) in index.iter().enumerate() {
                        for (dv, &gv) in buf[r * d..(r + 1) * d].iter_mut().zip(&g[o * d..(o + 1) * d]) {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::CosineRows(a, b) => {
                let Aux::Cosine { na, nb, dots } = &self.aux[i] else { unreachable!() };
                let d = self.nodes[a.0].shape[1];
                let (av, bv) = (vals[a.0].data(), vals[b.0].data());
                acc!(*a, |buf| {
                    for r in 0..g.len() {
                        let inv = S::one() / (na[r] * nb[r]);
                        let s = dots[r] * inv;
                        for j in 0..d {
                            let (x, z) = (av[r * d + j], bv[r * d + j]);
                            buf[r * d + j] += g[r] * (z * inv - s * x / (na[r] * na[r]));
                        }
                    }
                });
                acc!(*b, |buf| {
                    for r in 0..g.len() {
                        let inv = S::one() / (na[r] * nb[r]);
                        let s = dots[r] * inv;
                        for j in 0..d {
                            let (x, z) = (av[r * d + j], bv[r * d + j]);
                            buf[r * d + j] += g[r] * (x * inv - s * z / (nb[r] * nb[r]));
                        }
                    }
                });
            }
            Op::Column { a, col } => {
                let m = self.nodes[a.0].shape[1];
                acc!(*a, |buf| {
                    for (r, &v) in g.iter().enumerate() {
                        buf[r * m + col] += v;
                    }
                });
            }
            Op::Sum(a) => acc!(*a, |buf| {
                for d in buf.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Mean(a) => acc!(*a, |buf| {
                let share = g[0] / S::from_usize_lossy(buf.len());
                for d in buf.iter_mut() {
                    *d += share;
                }
            }),
            Op::MeanAxis0(a) => {
                let n0 = self.nodes[a.0].shape[0];
                let inv = S::one() / S::from_usize_lossy(n0);
                acc!(*a, |buf| {
                    for chunk in buf.chunks_mut(g.len()) {
                        for (d, &v) in chunk.iter_mut().zip(g) {
                            *d += v * inv;
                        }
                    }
                });
            }
            Op::XLogX(a) => {
                let x = vals[a.0].data();
                acc!(*a, |buf| {
                    for ((d, &v), &xv) in buf.iter_mut().zip(g).zip(x) {
                        if xv > S::zero() {
                            *d += v * (xv.ln() + S::one());
                        }
                    }
                });
            }
        }
    }
}

fn im2col<S: Scalar>(x: &[S], lout: usize, span: usize, step: usize) -> Vec<S> {
    let mut cols = Vec::with_capacity(lout * span);
    for t in 0..lout {
        cols.extend_from_slice(&x[t * step..t * step + span]);
    }
    cols
}

fn eval_node<S: Scalar>(
    node: &Node<S>,
    vals: &[Tensor<S>],
    bindings: &dyn Bindings<S>,
    rng: &mut dyn RngCore,
) -> Result<(Tensor<S>, Aux<S>)> {
    let shape = node.shape.clone();
    let v = |id: &NodeId| vals[id.0].data();
    let out = |data: Vec<S>| Tensor::new(shape.clone(), data);
    let plain = |data: Vec<S>| -> Result<(Tensor<S>, Aux<S>)> { Ok((out(data)?, Aux::None)) };
    match &node.op {
        Op::Leaf(kind) => {
            let t = bindings.lookup(&node.name).ok_or_else(|| Error::Unbound(node.name.clone()))?;
            if t.shape() != node.shape.as_slice() {
                return Err(Error::Shape {
                    node: node.name.clone(),
                    detail: format!(
                        "bound {} has shape {:?}, declared {:?}",
                        if *kind == LeafKind::Param { "parameter" } else { "input" },
                        t.shape(),
                        node.shape
                    ),
                });
            }
            Ok((t, Aux::None))
        }
        Op::Const(t) => Ok((t.clone(), Aux::None)),
        Op::MatMul { a, b, trans_b } => {
            let sa = &vals[a.0].shape();
            let (batch, m, k) = if sa.len() == 3 { (sa[0], sa[1], sa[2]) } else { (1, sa[0], sa[1]) };
            let n = *shape.last().unwrap();
            let (av, bv) = (v(a), v(b));
            let mut data = Vec::with_capacity(batch * m * n);
            for bi in 0..batch {
                let asl = &av[bi * m * k..(bi + 1) * m * k];
                let bsl = &bv[bi * k * n..(bi + 1) * k * n];
                if *trans_b {
                    data.extend(kernels::matmul_nt(asl, bsl, m, k, n));
                } else {
                    data.extend(kernels::matmul(asl, bsl, m, k, n));
                }
            }
            plain(data)
        }
        Op::Add(a, b) => plain(v(a).iter().zip(v(b)).map(|(&x, &y)| x + y).collect()),
        Op::Sub(a, b) => plain(v(a).iter().zip(v(b)).map(|(&x, &y)| x - y).collect()),
        Op::Mul(a, b) => plain(v(a).iter().zip(v(b)).map(|(&x, &y)| x * y).collect()),
        Op::AddRow { a, bias } => {
            let bv = v(bias);
            let mut data = v(a).to_vec();
            for row in data.chunks_mut(bv.len()) {
                for (d, &b) in row.iter_mut().zip(bv) {
                    *d += b;
                }
            }
            plain(data)
        }
        Op::Scale { a, factor } => plain(v(a).iter().map(|&x| x * *factor).collect()),
        Op::Gelu(a) => plain(v(a).iter().map(|&x| kernels::gelu(x)).collect()),
        Op::LayerNorm { a, gamma, beta, eps } => {
            let (x, gm, bt) = (v(a), v(gamma), v(beta));
            let n = gm.len();
            let rows = x.len() / n;
            let nf = S::from_usize_lossy(n);
            let mut mean = Vec::with_capacity(rows);
            let mut rstd = Vec::with_capacity(rows);
            let mut data = Vec::with_capacity(x.len());
            for row in x.chunks(n) {
                let mu = row.iter().copied().sum::<S>() / nf;
                let var = row.iter().map(|&xv| (xv - mu) * (xv - mu)).sum::<S>() / nf;
                let rs = S::one() / (var + *eps).sqrt();
                for j in 0..n {
                    data.push((row[j] - mu) * rs * gm[j] + bt[j]);
                }
                mean.push(mu);
                rstd.push(rs);
            }
            Ok((out(data)?, Aux::Norm { mean, rstd }))
        }
        Op::Softmax(a) => {
            let n = *shape.last().unwrap();
            let x = v(a);
            let mut data = vec![S::zero(); x.len()];
            for (xr, orow) in x.chunks(n).zip(data.chunks_mut(n)) {
                kernels::softmax_row(xr, orow);
            }
            plain(data)
        }
        Op::LogSumExp(a) => {
            let n = *vals[a.0].shape().last().unwrap();
            plain(v(a).chunks(n).map(kernels::logsumexp_row).collect())
        }
        Op::Gumbel { logits, temperature, hard, noise } => {
            let n = *shape.last().unwrap();
            let x = v(logits);
            let mut perturbed = Vec::with_capacity(x.len());
            for &xv in x {
                let g = match noise {
                    GumbelNoise::Sampled => S::lit(sample_gumbel(rng)),
                    GumbelNoise::Disabled => S::zero(),
                };
                perturbed.push((xv + g) / *temperature);
            }
            let mut soft = vec![S::zero(); x.len()];
            for (pr, sr) in perturbed.chunks(n).zip(soft.chunks_mut(n)) {
                kernels::softmax_row(pr, sr);
            }
            let data = if *hard {
                let mut onehot = vec![S::zero(); x.len()];
                for (sr, or) in soft.chunks(n).zip(onehot.chunks_mut(n)) {
                    or[kernels::argmax(sr)] = S::one();
                }
                onehot
            } else {
                soft.clone()
            };
            Ok((out(data)?, Aux::Soft(soft)))
        }
        Op::Reshape(a) => plain(v(a).to_vec()),
        Op::Transpose(a) => {
            let s = vals[a.0].shape();
            plain(kernels::transpose(v(a), s[0], s[1]))
        }
        Op::SwapAxes01(a) => {
            let s = vals[a.0].shape();
            let (d0, d1, d2) = (s[0], s[1], s[2]);
            let x = v(a);
            let mut data = Vec::with_capacity(x.len());
            for i1 in 0..d1 {
                for i0 in 0..d0 {
                    data.extend_from_slice(&x[(i0 * d1 + i1) * d2..(i0 * d1 + i1 + 1) * d2]);
                }
            }
            plain(data)
        }
        Op::Conv1d { x, w, stride } => {
            let sw = vals[w.0].shape();
            let (k, cin, cout) = (sw[0], sw[1], sw[2]);
            let lout = shape[0];
            let cols = im2col(v(x), lout, k * cin, stride * cin);
            plain(kernels::matmul(&cols, v(w), lout, k * cin, cout))
        }
        Op::DepthwiseConv { x, w } => {
            let (t, c) = (shape[0], shape[1]);
            let k = vals[w.0].shape()[0];
            let pad = k / 2;
            let (xv, wv) = (v(x), v(w));
            let mut data = vec![S::zero(); t * c];
            for ti in 0..t {
                for kk in 0..k {
                    let src = ti + kk;
                    if src < pad || src - pad >= t {
                        continue;
                    }
                    let s = src - pad;
                    for ch in 0..c {
                        data[ti * c + ch] += wv[kk * c + ch] * xv[s * c + ch];
                    }
                }
            }
            plain(data)
        }
        Op::ReplaceRows { x, rows, emb } => {
            let d = shape[1];
            let mut data = v(x).to_vec();
            let e = v(emb);
            for &r in rows {
                data[r * d..(r + 1) * d].copy_from_slice(e);
            }
            plain(data)
        }
        Op::GatherRows { x, index } => {
            let d = shape[1];
            let xv = v(x);
            let mut data = Vec::with_capacity(index.len() * d);
            for &r in index {
                data.extend_from_slice(&xv[r * d..(r + 1) * d]);
            }
            plain(data)
        }
        Op::CosineRows(a, b) => {
            let d = vals[a.0].shape()[1];
            let (av, bv) = (v(a), v(b));
            let rows = shape[0];
            let (mut na, mut nb, mut dots, mut data) =
                (Vec::with_capacity(rows), Vec::with_capacity(rows), Vec::with_capacity(rows), Vec::with_capacity(rows));
            for r in 0..rows {
                let (x, z) = (&av[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d]);
                let (nx, nz) = (kernels::dot(x, x).sqrt(), kernels::dot(z, z).sqrt());
                if nx == S::zero() || nz == S::zero() {
                    return Err(Error::ZeroNorm { node: node.name.clone(), row: r });
                }
                let dt = kernels::dot(x, z);
                data.push(dt / (nx * nz));
                na.push(nx);
                nb.push(nz);
                dots.push(dt);
            }
            Ok((out(data)?, Aux::Cosine { na, nb, dots }))
        }
        Op::Column { a, col } => {
            let m = vals[a.0].shape()[1];
            plain(v(a).chunks(m).map(|r| r[*col]).collect())
        }
        Op::Sum(a) => plain(vec![v(a).iter().copied().sum()]),
        Op::Mean(a) => {
            let x = v(a);
            plain(vec![x.iter().copied().sum::<S>() / S::from_usize_lossy(x.len())])
        }
        Op::MeanAxis0(a) => {
            let x = v(a);
            let inner = numel(&shape);
            let n0 = x.len() / inner;
            let mut data = vec![S::zero(); inner];
            for chunk in x.chunks(inner) {
                for (d, &xv) in data.iter_mut().zip(chunk) {
                    *d += xv;
                }
            }
            let inv = S::from_usize_lossy(n0);
            plain(data.into_iter().map(|d| d / inv).collect())
        }
        Op::XLogX(a) => plain(
            v(a).iter()
                .map(|&x| if x == S::zero() { S::zero() } else { x * x.ln() })
                .collect(),
        ),
    }
}

/// Standard Gumbel draw `-ln(-ln u)` with `u` kept strictly inside (0, 1).
pub fn sample_gumbel(rng: &mut dyn RngCore) -> f64 {
    let u: f64 = rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
    -(-u.ln()).ln()
}
