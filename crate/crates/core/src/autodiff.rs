//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each call such as
//! [`Graph::affine`] computes its value eagerly and appends a node; node
//! ids are indices into the tape, so recording order is a topological
//! order and [`Graph::backward`] simply walks the tape in reverse.
//!
//! ```
//! use certood::autodiff::Graph;
//! use certood::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::from_vec(vec![-1.0, 2.0, 3.0]).unwrap());
//! let y = g.relu(x);
//! let loss = g.sum(y);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 1.0]);
//! ```

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
    },
    Relu(NodeId),
    Abs(NodeId),
    PosPart(NodeId),
    NegPart(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f32),
    MulConst(NodeId, Tensor),
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    LogSumExp(NodeId),
    MaxLast {
        input: NodeId,
        argmax: Vec<usize>,
    },
    MeanLast(NodeId),
    Pick {
        input: NodeId,
        index: Vec<usize>,
    },
    PairDiff(NodeId),
    Log1pHalfSquare(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    fn unary(&mut self, x: NodeId, op: Op, f: impl Fn(f32) -> f32) -> NodeId {
        let value = self.value(x).map(f);
        let rg = self.any_grad(&[x]);
        self.push(value, op, rg)
    }

    pub fn affine(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    ) -> Result<NodeId> {
        let value = kernels::affine(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        )?;
        let mut ids = vec![input, weight];
        ids.extend(bias);
        let rg = self.any_grad(&ids);
        Ok(self.push(
            value,
            Op::Affine {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
    ) -> Result<NodeId> {
        let value = kernels::conv2d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
        )?;
        let mut ids = vec![input, kernel];
        ids.extend(bias);
        let rg = self.any_grad(&ids);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
            },
            rg,
        ))
    }

    /// `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    /// `|x|`; the subgradient at exactly 0 is 0.
    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Abs(x), f32::abs)
    }

    /// `max(x, 0)` elementwise.
    pub fn pos_part(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::PosPart(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    /// `min(x, 0)` elementwise.
    pub fn neg_part(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::NegPart(x), |v| if v < 0.0 { v } else { 0.0 })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, x: NodeId, factor: f32) -> NodeId {
        self.unary(x, Op::Scale(x, factor), |v| v * factor)
    }

    /// Elementwise product with a constant tensor (e.g. a selection mask).
    pub fn mul_const(&mut self, x: NodeId, factor: Tensor) -> Result<NodeId> {
        let value = self.value(x).zip_map(&factor, |a, b| a * b)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::MulConst(x, factor), rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Flattens everything after the batch dimension.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let shape = [v.batch(), v.item_len()];
        self.reshape(x, &shape)
    }

    /// Sum of all entries (accumulated in `f64`), as a scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum_f64() as f32);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    /// Mean of all entries (accumulated in `f64`), as a scalar.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let value = Tensor::scalar((v.sum_f64() / v.len() as f64) as f32);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// Row-wise stable log-sum-exp, `[B, K] -> [B]`.
    pub fn log_sum_exp(&mut self, x: NodeId) -> Result<NodeId> {
        let value = kernels::log_sum_exp(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::LogSumExp(x), rg))
    }

    /// Row-wise maximum, `[B, K] -> [B]`; ties go to the first index.
    pub fn max_last(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(Error::dim("max_last", v.shape(), &[0, 0]));
        }
        let (batch, k) = (v.shape()[0], v.shape()[1]);
        let mut argmax = Vec::with_capacity(batch);
        let mut out = Vec::with_capacity(batch);
        for b in 0..batch {
            let (i, m) = first_argmax(&v.data()[b * k..(b + 1) * k]);
            argmax.push(i);
            out.push(m);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![batch], out),
            Op::MaxLast { input: x, argmax },
            rg,
        ))
    }

    /// Row-wise mean, `[B, K] -> [B]`.
    pub fn mean_last(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(Error::dim("mean_last", v.shape(), &[0, 0]));
        }
        let k = v.shape()[1];
        let out = v
            .data()
            .chunks_exact(k)
            .map(|r| (r.iter().map(|&a| a as f64).sum::<f64>() / k as f64) as f32)
            .collect();
        let value = Tensor::from_parts(vec![v.shape()[0]], out);
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::MeanLast(x), rg))
    }

    /// Picks `x[b, index[b]]`, `[B, K] -> [B]`.
    pub fn pick(&mut self, x: NodeId, index: &[usize]) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() != 2 || v.shape()[0] != index.len() {
            return Err(Error::dim("pick", v.shape(), &[index.len()]));
        }
        let k = v.shape()[1];
        if let Some(&bad) = index.iter().find(|&&i| i >= k) {
            return Err(Error::Contract(format!(
                "index {bad} out of range for {k} columns"
            )));
        }
        let out = index
            .iter()
            .enumerate()
            .map(|(b, &i)| v.data()[b * k + i])
            .collect();
        let value = Tensor::from_parts(vec![index.len()], out);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            value,
            Op::Pick {
                input: x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Pairwise row differences: `[K, ...] -> [K·K, ...]` with row
    /// `k·K + l` equal to `x[k] − x[l]`.
    pub fn pair_diff(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let k = v.shape()[0];
        let n = v.item_len();
        let mut out = Vec::with_capacity(k * k * n);
        for a in 0..k {
            for b in 0..k {
                let (ra, rb) = (&v.data()[a * n..(a + 1) * n], &v.data()[b * n..(b + 1) * n]);
                out.extend(ra.iter().zip(rb).map(|(p, q)| p - q));
            }
        }
        let mut shape = v.shape().to_vec();
        shape[0] = k * k;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::PairDiff(x), rg)
    }

    /// `ln(x²/2 + 1)` elementwise.
    pub fn log1p_half_square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Log1pHalfSquare(x), |v| (0.5 * v * v).ln_1p())
    }

    /// Reverse pass from a scalar root. Returns gradients for every node
    /// that requires them; fan-out contributions are summed.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(root_value.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            // Interior gradients are dropped as soon as they are consumed.
            if matches!(node.op, Op::Leaf) || idx == root.0 {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let rg = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Affine {
                input,
                weight,
                bias,
            } => {
                let (gi, gw) = kernels::affine_backward(
                    self.value(*input),
                    self.value(*weight),
                    g,
                    rg(*input),
                    rg(*weight),
                );
                accumulate(grads, *input, gi);
                accumulate(grads, *weight, gw);
                if let Some(b) = bias.filter(|&b| rg(b)) {
                    accumulate(grads, b, Some(kernels::sum_rows(g.data(), g.shape()[1])));
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
            } => {
                let (gi, gk) = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    *stride,
                    g,
                    rg(*input),
                    rg(*kernel),
                );
                accumulate(grads, *input, gi);
                accumulate(grads, *kernel, gk);
                if let Some(b) = bias.filter(|&b| rg(b)) {
                    accumulate(grads, b, Some(kernels::conv_bias_grad(g)));
                }
            }
            Op::Relu(x) | Op::PosPart(x) => {
                let gx = masked(g, self.value(*x), |v| if v > 0.0 { 1.0 } else { 0.0 });
                accumulate(grads, *x, Some(gx));
            }
            Op::NegPart(x) => {
                let gx = masked(g, self.value(*x), |v| if v < 0.0 { 1.0 } else { 0.0 });
                accumulate(grads, *x, Some(gx));
            }
            Op::Abs(x) => {
                let gx = masked(g, self.value(*x), |v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                accumulate(grads, *x, Some(gx));
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, Some(g.clone()));
                }
                if rg(*b) {
                    accumulate(grads, *b, Some(g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, Some(g.clone()));
                }
                if rg(*b) {
                    accumulate(grads, *b, Some(g.map(|v| -v)));
                }
            }
            Op::Scale(x, f) => accumulate(grads, *x, Some(g.map(|v| v * f))),
            Op::MulConst(x, c) => accumulate(
                grads,
                *x,
                Some(g.zip_map(c, |a, b| a * b).expect("same shape")),
            ),
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(
                    grads,
                    *x,
                    Some(Tensor::from_parts(shape, g.data().to_vec())),
                );
            }
            Op::Sum(x) => {
                let v = self.value(*x);
                accumulate(grads, *x, Some(Tensor::full(v.shape(), g.data()[0])));
            }
            Op::Mean(x) => {
                let v = self.value(*x);
                let each = g.data()[0] / v.len() as f32;
                accumulate(grads, *x, Some(Tensor::full(v.shape(), each)));
            }
            Op::LogSumExp(x) => {
                // d/dx_j LSE(x) = softmax(x)_j
                let v = self.value(*x);
                let k = v.shape()[1];
                let mut out = vec![0.0f32; v.len()];
                for (b, (row, dst)) in v
                    .data()
                    .chunks_exact(k)
                    .zip(out.chunks_exact_mut(k))
                    .enumerate()
                {
                    let lse = node.value.data()[b] as f64;
                    for (d, &r) in dst.iter_mut().zip(row) {
                        *d = (g.data()[b] as f64 * (r as f64 - lse).exp()) as f32;
                    }
                }
                accumulate(grads, *x, Some(Tensor::from_parts(v.shape().to_vec(), out)));
            }
            Op::MaxLast { input, argmax } => {
                let v = self.value(*input);
                let k = v.shape()[1];
                let mut out = vec![0.0f32; v.len()];
                for (b, &i) in argmax.iter().enumerate() {
                    out[b * k + i] = g.data()[b];
                }
                accumulate(
                    grads,
                    *input,
                    Some(Tensor::from_parts(v.shape().to_vec(), out)),
                );
            }
            Op::MeanLast(x) => {
                let v = self.value(*x);
                let k = v.shape()[1];
                let mut out = vec![0.0f32; v.len()];
                for (b, dst) in out.chunks_exact_mut(k).enumerate() {
                    dst.fill(g.data()[b] / k as f32);
                }
                accumulate(grads, *x, Some(Tensor::from_parts(v.shape().to_vec(), out)));
            }
            Op::Pick { input, index } => {
                let v = self.value(*input);
                let k = v.shape()[1];
                let mut out = vec![0.0f32; v.len()];
                for (b, &i) in index.iter().enumerate() {
                    out[b * k + i] = g.data()[b];
                }
                accumulate(
                    grads,
                    *input,
                    Some(Tensor::from_parts(v.shape().to_vec(), out)),
                );
            }
            Op::PairDiff(x) => {
                let v = self.value(*x);
                let k = v.shape()[0];
                let n = v.item_len();
                let mut out = vec![0.0f32; v.len()];
                for a in 0..k {
                    for b in 0..k {
                        let row = &g.data()[(a * k + b) * n..(a * k + b + 1) * n];
                        for (j, &gv) in row.iter().enumerate() {
                            out[a * n + j] += gv;
                            out[b * n + j] -= gv;
                        }
                    }
                }
                accumulate(grads, *x, Some(Tensor::from_parts(v.shape().to_vec(), out)));
            }
            Op::Log1pHalfSquare(x) => {
                let gx = g
                    .zip_map(self.value(*x), |gv, a| gv * a / (1.0 + 0.5 * a * a))
                    .expect("same shape");
                accumulate(grads, *x, Some(gx));
            }
        }
    }
}

fn masked(g: &Tensor, x: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    g.zip_map(x, |gv, xv| gv * f(xv)).expect("same shape")
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Option<Tensor>) {
    let Some(g) = g else { return };
    match &mut grads[id.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Index and value of the first maximum of a non-empty slice.
pub(crate) fn first_argmax(row: &[f32]) -> (usize, f32) {
    let mut best = (0, row[0]);
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}
