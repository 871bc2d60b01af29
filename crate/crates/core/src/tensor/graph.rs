//! The autodiff tape: nodes, operation records, and the backward pass.

use super::element::Element;
use super::{numel, shape_error, TensorError};

/// Handle to a tensor stored in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct TensorId(pub(crate) u32);

impl TensorId {
    pub(crate) fn index(self) -> usize {
        self.0 as usize
    }
}

/// One recorded tensor plus the operation that produced it.
pub(crate) struct Node<E> {
    pub data: Vec<E>,
    pub shape: Vec<usize>,
    pub grad: Option<Vec<E>>,
    pub requires_grad: bool,
    pub op: Op<E>,
}

impl<E: Element> Node<E> {
    /// Gradient buffer for accumulation, allocated as zeros on first touch.
    pub fn grad_make(&mut self) -> &mut [E] {
        if self.grad.is_none() {
            self.grad = Some(vec![E::zero(); self.data.len()]);
        }
        self.grad.as_mut().unwrap()
    }
}

/// Operation records. Inputs are stored as ids; extra fields hold whatever
/// the backward pass needs beyond the saved node data.
pub(crate) enum Op<E> {
    Leaf,
    Reshape {
        input: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    /// `base + gate * branch`, with `gate` a learned scalar.
    AddScaled {
        base: TensorId,
        branch: TensorId,
        gate: TensorId,
    },
    Relu {
        input: TensorId,
    },
    Sum {
        input: TensorId,
    },
    GlobalAvgPool {
        input: TensorId,
    },
    Linear {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
    },
    Conv2d {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
    },
    BatchNorm2d {
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        /// Per-channel mean used in the forward pass.
        mean: Vec<E>,
        /// Per-channel `1 / sqrt(var + eps)` used in the forward pass.
        inv_std: Vec<E>,
        training: bool,
    },
    SoftmaxAxis {
        input: TensorId,
        axis: usize,
    },
    SigmoidBce {
        logits: TensorId,
        targets: TensorId,
    },
    NearestUpsample {
        input: TensorId,
        factor: usize,
    },
    NearestDownsample {
        input: TensorId,
        factor: usize,
    },
    SpaceToDepth {
        input: TensorId,
        ratio: usize,
    },
    DepthToSpace {
        input: TensorId,
        ratio: usize,
    },
    ConcatTokens {
        inputs: Vec<TensorId>,
    },
    ChannelProject {
        input: TensorId,
        weight: TensorId,
    },
    TokenProject {
        input: TensorId,
        weight: TensorId,
    },
    AttentionLogits {
        query: TensorId,
        keys: TensorId,
        heads: usize,
        /// Divisor applied to every dot product.
        scale: E,
    },
    TopkSoftmax {
        input: TensorId,
        axis: usize,
        /// Effective k = min(k, axis length).
        keep: usize,
        /// Kept indices per fiber, `keep` entries each, fibers in
        /// (outer, inner) iteration order.
        selected: Vec<u32>,
    },
    AttentionMix {
        weights: TensorId,
        values: TensorId,
        heads: usize,
    },
}

/// Tape of tensors. Operations append nodes; ids index the tape in
/// topological order, which is what the backward sweep relies on.
pub struct Graph<E: Element> {
    pub(crate) nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Rewind the tape to its first `len` nodes, discarding everything
    /// appended after that point. Ids for discarded nodes become invalid;
    /// ids below `len` keep their meaning, so a caller can reuse one set of
    /// leaves across many forward evaluations.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Insert a tensor with explicit data.
    pub fn leaf(
        &mut self,
        data: Vec<E>,
        shape: &[usize],
        requires_grad: bool,
    ) -> Result<TensorId, TensorError> {
        if data.len() != numel(shape) {
            return Err(shape_error(
                "leaf",
                format!("data length {} does not match shape {shape:?}", data.len()),
            ));
        }
        Ok(self.push(data, shape.to_vec(), requires_grad, Op::Leaf))
    }

    /// Insert an all-zero tensor.
    pub fn zeros(&mut self, shape: &[usize], requires_grad: bool) -> TensorId {
        self.push(
            vec![E::zero(); numel(shape)],
            shape.to_vec(),
            requires_grad,
            Op::Leaf,
        )
    }

    /// Insert a single-element tensor of shape `[1]`.
    pub fn scalar_leaf(&mut self, value: E, requires_grad: bool) -> TensorId {
        self.push(vec![value], vec![1], requires_grad, Op::Leaf)
    }

    pub(crate) fn push(
        &mut self,
        data: Vec<E>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Op<E>,
    ) -> TensorId {
        debug_assert_eq!(data.len(), numel(&shape));
        let id = TensorId(self.nodes.len() as u32);
        self.nodes.push(Node {
            data,
            shape,
            grad: None,
            requires_grad,
            op,
        });
        id
    }

    pub fn data(&self, id: TensorId) -> &[E] {
        &self.nodes[id.index()].data
    }

    /// Overwrite a leaf's values in place (shape is fixed at creation).
    pub fn set_data(&mut self, id: TensorId, data: &[E]) -> Result<(), TensorError> {
        let node = &mut self.nodes[id.index()];
        if data.len() != node.data.len() {
            return Err(shape_error(
                "set_data",
                format!(
                    "data length {} does not match tensor length {}",
                    data.len(),
                    node.data.len()
                ),
            ));
        }
        node.data.copy_from_slice(data);
        Ok(())
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.index()].shape
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.index()].data.len()
    }

    /// Accumulated gradient, if the backward pass reached this tensor.
    pub fn grad(&self, id: TensorId) -> Option<&[E]> {
        self.nodes[id.index()].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.index()].requires_grad
    }

    /// Kept-index record of a top-k softmax node: `(indices, keep)` with
    /// `keep` indices per fiber. `None` for any other operation.
    pub fn topk_selected(&self, id: TensorId) -> Option<(&[u32], usize)> {
        match &self.nodes[id.index()].op {
            Op::TopkSoftmax { selected, keep, .. } => Some((selected, *keep)),
            _ => None,
        }
    }

    pub(crate) fn any_requires_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.index()].requires_grad)
    }

    /// View the same shape with a different arrangement; element count must
    /// be unchanged.
    pub fn reshape(&mut self, input: TensorId, shape: &[usize]) -> Result<TensorId, TensorError> {
        let node = &self.nodes[input.index()];
        if numel(shape) != node.data.len() {
            return Err(shape_error(
                "reshape",
                format!(
                    "cannot view {} elements as shape {shape:?}",
                    node.data.len()
                ),
            ));
        }
        let data = node.data.clone();
        let rg = node.requires_grad;
        Ok(self.push(data, shape.to_vec(), rg, Op::Reshape { input }))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_error(
                "add",
                format!(
                    "shape mismatch: {:?} vs {:?}",
                    self.shape(a),
                    self.shape(b)
                ),
            ));
        }
        let data: Vec<E> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.any_requires_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(data, shape, rg, Op::Add { a, b }))
    }

    /// `base + gate * branch` with a scalar `gate` of shape `[1]`.
    ///
    /// When the gate is exactly zero the output is a bit-for-bit copy of
    /// `base`; the branch still receives gradient through the gate so the
    /// gate can move off zero.
    pub fn add_scaled(
        &mut self,
        base: TensorId,
        branch: TensorId,
        gate: TensorId,
    ) -> Result<TensorId, TensorError> {
        if self.shape(base) != self.shape(branch) {
            return Err(shape_error(
                "add_scaled",
                format!(
                    "shape mismatch: {:?} vs {:?}",
                    self.shape(base),
                    self.shape(branch)
                ),
            ));
        }
        if self.numel(gate) != 1 {
            return Err(shape_error(
                "add_scaled",
                format!("gate must be a scalar, got shape {:?}", self.shape(gate)),
            ));
        }
        let g = self.data(gate)[0];
        let data: Vec<E> = if g == E::zero() {
            self.data(base).to_vec()
        } else {
            self.data(base)
                .iter()
                .zip(self.data(branch))
                .map(|(&x, &y)| x + g * y)
                .collect()
        };
        let rg = self.any_requires_grad(&[base, branch, gate]);
        let shape = self.shape(base).to_vec();
        Ok(self.push(data, shape, rg, Op::AddScaled { base, branch, gate }))
    }

    /// Elementwise `max(0, x)`.
    pub fn relu(&mut self, input: TensorId) -> TensorId {
        let data: Vec<E> = self
            .data(input)
            .iter()
            .map(|&x| if x > E::zero() { x } else { E::zero() })
            .collect();
        let rg = self.requires_grad(input);
        let shape = self.shape(input).to_vec();
        self.push(data, shape, rg, Op::Relu { input })
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, input: TensorId) -> TensorId {
        let mut total = E::zero();
        for &x in self.data(input) {
            total = total + x;
        }
        let rg = self.requires_grad(input);
        self.push(vec![total], vec![1], rg, Op::Sum { input })
    }

    /// Mean over the spatial axes: `B x C x H x W -> B x C`.
    pub fn global_avg_pool(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        let (b, c, h, w) = super::dims4("global_avg_pool", self.shape(input))?;
        let hw = h * w;
        if hw == 0 {
            return Err(shape_error("global_avg_pool", "empty spatial extent"));
        }
        let inv = E::from_f64(1.0 / hw as f64);
        let src = self.data(input);
        let mut data = vec![E::zero(); b * c];
        for (i, slot) in data.iter_mut().enumerate() {
            let plane = &src[i * hw..(i + 1) * hw];
            let mut acc = E::zero();
            for &x in plane {
                acc = acc + x;
            }
            *slot = acc * inv;
        }
        let rg = self.requires_grad(input);
        Ok(self.push(data, vec![b, c], rg, Op::GlobalAvgPool { input }))
    }

    /// Run reverse-mode accumulation from a scalar output back to the leaves.
    ///
    /// Gradients accumulate into every leaf with `requires_grad`; leaves the
    /// sweep never reaches keep `grad() == None` (read as zero). Interior
    /// gradients are released as soon as the sweep has pushed them to their
    /// inputs — a training step only ever reads leaf gradients, and dropping
    /// the interior buffers early caps the sweep's memory high-water mark at
    /// the live frontier instead of the whole tape.
    pub fn backward(&mut self, output: TensorId) -> Result<(), TensorError> {
        let out_node = &mut self.nodes[output.index()];
        if out_node.data.len() != 1 {
            return Err(TensorError::NonScalarOutput {
                shape: out_node.shape.clone(),
            });
        }
        out_node.grad = Some(vec![E::one()]);
        for i in (0..=output.index()).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            // Tape order is topological order: every input of node `i` lives
            // strictly before it, so `ins` covers all of them.
            let (ins, rest) = self.nodes.split_at_mut(i);
            let out = &rest[0];
            match &out.op {
                Op::Leaf => {}
                Op::Reshape { input } => backward_passthrough(ins, out, *input),
                Op::Add { a, b } => {
                    backward_add_into(ins, out, *a, E::one());
                    backward_add_into(ins, out, *b, E::one());
                }
                Op::AddScaled { base, branch, gate } => {
                    backward_add_scaled(ins, out, *base, *branch, *gate)
                }
                Op::Relu { input } => backward_relu(ins, out, *input),
                Op::Sum { input } => backward_sum(ins, out, *input),
                Op::GlobalAvgPool { input } => backward_gap(ins, out, *input),
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => super::linalg::backward_linear(ins, out, *input, *weight, *bias),
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                } => super::conv::backward_conv2d(ins, out, *input, *weight, *bias, *stride, *pad),
                Op::BatchNorm2d {
                    input,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    training,
                } => super::norm::backward_batchnorm2d(
                    ins, out, *input, *gamma, *beta, mean, inv_std, *training,
                ),
                Op::SoftmaxAxis { input, axis } => {
                    super::softmax::backward_softmax_axis(ins, out, *input, *axis)
                }
                Op::SigmoidBce { logits, targets } => {
                    super::softmax::backward_sigmoid_bce(ins, out, *logits, *targets)
                }
                Op::NearestUpsample { input, factor } => {
                    super::resample::backward_nearest_upsample(ins, out, *input, *factor)
                }
                Op::NearestDownsample { input, factor } => {
                    super::resample::backward_nearest_downsample(ins, out, *input, *factor)
                }
                Op::SpaceToDepth { input, ratio } => {
                    super::resample::backward_space_to_depth(ins, out, *input, *ratio)
                }
                Op::DepthToSpace { input, ratio } => {
                    super::resample::backward_depth_to_space(ins, out, *input, *ratio)
                }
                Op::ConcatTokens { inputs } => {
                    super::resample::backward_concat_tokens(ins, out, inputs)
                }
                Op::ChannelProject { input, weight } => {
                    super::linalg::backward_channel_project(ins, out, *input, *weight)
                }
                Op::TokenProject { input, weight } => {
                    super::linalg::backward_token_project(ins, out, *input, *weight)
                }
                Op::AttentionLogits {
                    query,
                    keys,
                    heads,
                    scale,
                } => super::attention_ops::backward_attention_logits(
                    ins, out, *query, *keys, *heads, *scale,
                ),
                Op::TopkSoftmax {
                    input,
                    axis,
                    keep,
                    selected,
                } => super::attention_ops::backward_topk_softmax(
                    ins, out, *input, *axis, *keep, selected,
                ),
                Op::AttentionMix {
                    weights,
                    values,
                    heads,
                } => super::attention_ops::backward_attention_mix(
                    ins, out, *weights, *values, *heads,
                ),
            }
            let node = &mut self.nodes[i];
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        Ok(())
    }
}

/// Borrow two distinct nodes mutably.
pub(crate) fn pair_mut<E>(
    nodes: &mut [Node<E>],
    a: usize,
    b: usize,
) -> (&mut Node<E>, &mut Node<E>) {
    assert_ne!(a, b, "pair_mut needs distinct nodes");
    if a < b {
        let (left, right) = nodes.split_at_mut(b);
        (&mut left[a], &mut right[0])
    } else {
        let (left, right) = nodes.split_at_mut(a);
        (&mut right[0], &mut left[b])
    }
}

fn backward_passthrough<E: Element>(ins: &mut [Node<E>], out: &Node<E>, input: TensorId) {
    let node = &mut ins[input.index()];
    if !node.requires_grad {
        return;
    }
    let dy = out.grad.as_deref().unwrap();
    let dx = node.grad_make();
    for (g, &d) in dx.iter_mut().zip(dy) {
        *g = *g + d;
    }
}

fn backward_add_into<E: Element>(ins: &mut [Node<E>], out: &Node<E>, input: TensorId, scale: E) {
    let node = &mut ins[input.index()];
    if !node.requires_grad {
        return;
    }
    let dy = out.grad.as_deref().unwrap();
    let dx = node.grad_make();
    for (g, &d) in dx.iter_mut().zip(dy) {
        *g = *g + scale * d;
    }
}

fn backward_add_scaled<E: Element>(
    ins: &mut [Node<E>],
    out: &Node<E>,
    base: TensorId,
    branch: TensorId,
    gate: TensorId,
) {
    let dy = out.grad.as_deref().unwrap();
    let g = ins[gate.index()].data[0];
    backward_add_into(ins, out, base, E::one());
    backward_add_into(ins, out, branch, g);
    let branch_data = std::mem::take(&mut ins[branch.index()].data);
    let gate_node = &mut ins[gate.index()];
    if gate_node.requires_grad {
        let mut acc = E::zero();
        for (&d, &v) in dy.iter().zip(&branch_data) {
            acc = acc + d * v;
        }
        let slot = &mut gate_node.grad_make()[0];
        *slot = *slot + acc;
    }
    ins[branch.index()].data = branch_data;
}

fn backward_relu<E: Element>(ins: &mut [Node<E>], out: &Node<E>, input: TensorId) {
    let node = &mut ins[input.index()];
    if !node.requires_grad {
        return;
    }
    let dy = out.grad.as_deref().unwrap();
    // Subgradient at exactly zero is taken as zero.
    let mask: Vec<bool> = node.data.iter().map(|&x| x > E::zero()).collect();
    let dx = node.grad_make();
    for ((g, &d), keep) in dx.iter_mut().zip(dy).zip(mask) {
        if keep {
            *g = *g + d;
        }
    }
}

fn backward_sum<E: Element>(ins: &mut [Node<E>], out: &Node<E>, input: TensorId) {
    let node = &mut ins[input.index()];
    if !node.requires_grad {
        return;
    }
    let d = out.grad.as_deref().unwrap()[0];
    let dx = node.grad_make();
    for g in dx.iter_mut() {
        *g = *g + d;
    }
}

fn backward_gap<E: Element>(ins: &mut [Node<E>], out: &Node<E>, input: TensorId) {
    let node = &mut ins[input.index()];
    if !node.requires_grad {
        return;
    }
    let (h, w) = (node.shape[2], node.shape[3]);
    let hw = h * w;
    let inv = E::from_f64(1.0 / hw as f64);
    let dy = out.grad.as_deref().unwrap();
    let dx = node.grad_make();
    for (i, &d) in dy.iter().enumerate() {
        let scaled = d * inv;
        for g in &mut dx[i * hw..(i + 1) * hw] {
            *g = *g + scaled;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_rejects_mismatched_length() {
        let mut g: Graph<f32> = Graph::new();
        assert!(g.leaf(vec![1.0, 2.0], &[3], false).is_err());
    }

    #[test]
    fn add_and_backward_accumulate() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(vec![1.0, 2.0, 3.0], &[3], true).unwrap();
        let b = g.leaf(vec![10.0, 20.0, 30.0], &[3], true).unwrap();
        let s = g.add(a, b).unwrap();
        let total = g.sum(s);
        g.backward(total).unwrap();
        assert_eq!(g.data(s), &[11.0, 22.0, 33.0]);
        assert_eq!(g.grad(a).unwrap(), &[1.0, 1.0, 1.0]);
        assert_eq!(g.grad(b).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn relu_zeroes_negatives_and_gates_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![-1.0, 0.0, 2.0], &[3], true).unwrap();
        let y = g.relu(x);
        let total = g.sum(y);
        g.backward(total).unwrap();
        assert_eq!(g.data(y), &[0.0, 0.0, 2.0]);
        // Gradient at exactly zero is zero.
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn add_scaled_zero_gate_is_bitwise_identity() {
        let mut g: Graph<f32> = Graph::new();
        let base = g
            .leaf(vec![0.1_f32, -2.5, 3.25, 7.0e-3], &[4], true)
            .unwrap();
        let branch = g.leaf(vec![5.0, 6.0, 7.0, 8.0], &[4], true).unwrap();
        let gate = g.scalar_leaf(0.0, true);
        let out = g.add_scaled(base, branch, gate).unwrap();
        assert_eq!(g.data(out), g.data(base));
        let total = g.sum(out);
        g.backward(total).unwrap();
        // The gate still sees the branch even though the output ignored it.
        assert_eq!(g.grad(gate).unwrap(), &[5.0 + 6.0 + 7.0 + 8.0]);
        assert_eq!(g.grad(branch).unwrap(), &[0.0; 4]);
        assert_eq!(g.grad(base).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn add_scaled_nonzero_gate_mixes() {
        let mut g: Graph<f64> = Graph::new();
        let base = g.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        let branch = g.leaf(vec![10.0, 100.0], &[2], true).unwrap();
        let gate = g.scalar_leaf(0.5, true);
        let out = g.add_scaled(base, branch, gate).unwrap();
        assert_eq!(g.data(out), &[6.0, 52.0]);
        let total = g.sum(out);
        g.backward(total).unwrap();
        assert_eq!(g.grad(branch).unwrap(), &[0.5, 0.5]);
        assert_eq!(g.grad(gate).unwrap(), &[110.0]);
    }

    #[test]
    fn global_avg_pool_means_each_plane() {
        let mut g: Graph<f64> = Graph::new();
        let x = g
            .leaf(
                vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0],
                &[1, 2, 2, 2],
                true,
            )
            .unwrap();
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.shape(y), &[1, 2]);
        assert_eq!(g.data(y), &[2.5, 25.0]);
        let total = g.sum(y);
        g.backward(total).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.25; 8]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        let y = g.relu(x);
        assert!(matches!(
            g.backward(y),
            Err(TensorError::NonScalarOutput { .. })
        ));
    }

    #[test]
    fn reshape_preserves_data_and_routes_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2], true).unwrap();
        let y = g.reshape(x, &[4]).unwrap();
        assert_eq!(g.data(y), g.data(x));
        assert!(g.reshape(x, &[3]).is_err());
        let total = g.sum(y);
        g.backward(total).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn grads_absent_until_backward_reaches_them() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0], &[1], true).unwrap();
        let unused = g.leaf(vec![2.0], &[1], true).unwrap();
        let y = g.relu(x);
        g.backward(y).unwrap();
        assert!(g.grad(x).is_some());
        assert!(g.grad(unused).is_none());
    }
}
