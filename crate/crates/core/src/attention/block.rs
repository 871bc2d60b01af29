//! The attention block: projections, sparse attention, gated residual.

use super::memory::LayerMemory;
use super::tokens::{build_token_set, TokenGroup, TokenSet};
use super::{AttentionMode, NFMConfig, NfmError};
use crate::init::fan_in_uniform;
use crate::tensor::{BatchNormState, Element, Graph, TensorId};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

/// Key/value projections registered for one possible memory source.
#[derive(Clone, Debug)]
pub struct SourceProjection<E> {
    pub channels: usize,
    /// `channels x (heads * key_dim)`.
    pub w_k: Vec<E>,
    /// `channels x (heads * value_dim)`.
    pub w_v: Vec<E>,
}

/// Feature batchnorm of the output MLP, present iff configured.
#[derive(Clone, Debug)]
pub struct BlockNorm<E> {
    pub gamma: Vec<E>,
    pub beta: Vec<E>,
    pub state: BatchNormState<E>,
}

/// Parameters of one attention insertion. The number of source projections
/// is fixed at construction to the statically known memory length at this
/// block's position in the schedule.
#[derive(Clone, Debug)]
pub struct AttentionBlock<E> {
    pub name: String,
    pub target_channels: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    /// `target_channels x (heads * key_dim)`.
    pub w_q: Vec<E>,
    pub sources: Vec<SourceProjection<E>>,
    /// `(heads * value_dim) x d_ff`.
    pub w_o1: Vec<E>,
    /// `d_ff x target_channels`.
    pub w_o2: Vec<E>,
    /// The residual gate, single element.
    pub gamma: Vec<E>,
    pub norm: Option<BlockNorm<E>>,
}

/// Graph leaves for one block's parameters within a step.
pub struct AttentionBlockNodes {
    pub w_q: TensorId,
    /// `(w_k, w_v)` per source, in registration order.
    pub sources: Vec<(TensorId, TensorId)>,
    pub w_o1: TensorId,
    pub w_o2: TensorId,
    pub gamma: TensorId,
    pub norm: Option<(TensorId, TensorId)>,
}

/// Sparse attention choices of one insertion: per (sample, head, position)
/// fiber, the `keep` strongest token indices (strongest first) and their
/// weights.
#[derive(Clone, Debug, Serialize)]
pub struct AttentionRecord {
    pub block: String,
    pub batch: usize,
    pub heads: usize,
    pub height: usize,
    pub width: usize,
    pub total_tokens: usize,
    pub keep: usize,
    pub token_ids: Vec<u32>,
    pub weights: Vec<f64>,
}

impl AttentionRecord {
    /// Kept token ids and weights for one (sample, head, y, x) fiber.
    pub fn fiber(&self, b: usize, head: usize, y: usize, x: usize) -> (&[u32], &[f64]) {
        let fiber = ((b * self.heads + head) * self.height + y) * self.width + x;
        let span = fiber * self.keep..(fiber + 1) * self.keep;
        (&self.token_ids[span.clone()], &self.weights[span])
    }

    /// One JSON object per fiber, streamed as JSON lines.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for b in 0..self.batch {
            for head in 0..self.heads {
                for y in 0..self.height {
                    for x in 0..self.width {
                        let (ids, ws) = self.fiber(b, head, y, x);
                        let line = serde_json::json!({
                            "block": self.block,
                            "sample": b,
                            "head": head,
                            "position": [y, x],
                            "token_ids": ids,
                            "weights": ws,
                        });
                        out.push_str(&line.to_string());
                        out.push('\n');
                    }
                }
            }
        }
        out
    }
}

impl<E: Element> AttentionBlock<E> {
    /// Build a block with fan-in-scaled uniform weights and the gate at
    /// `cfg.gamma_init`. `source_channels` lists the channel width of every
    /// memory entry this block can ever see, in memory order.
    pub fn new<R: Rng>(
        name: impl Into<String>,
        target_channels: usize,
        source_channels: &[usize],
        d_ff: usize,
        cfg: &NFMConfig,
        rng: &mut R,
    ) -> Self {
        let dk = cfg.num_heads * cfg.key_dim;
        let dv = cfg.num_heads * cfg.value_dim;
        let w_q = fan_in_uniform(rng, target_channels, target_channels * dk);
        let sources = source_channels
            .iter()
            .map(|&c| SourceProjection {
                channels: c,
                w_k: fan_in_uniform(rng, c, c * dk),
                w_v: fan_in_uniform(rng, c, c * dv),
            })
            .collect();
        let w_o1 = fan_in_uniform(rng, dv, dv * d_ff);
        let w_o2 = fan_in_uniform(rng, d_ff, d_ff * target_channels);
        let norm = cfg.use_batchnorm.then(|| BlockNorm {
            gamma: vec![E::one(); d_ff],
            beta: vec![E::zero(); d_ff],
            state: BatchNormState::new(d_ff),
        });
        AttentionBlock {
            name: name.into(),
            target_channels,
            d_ff,
            heads: cfg.num_heads,
            key_dim: cfg.key_dim,
            value_dim: cfg.value_dim,
            w_q,
            sources,
            w_o1,
            w_o2,
            gamma: vec![E::from_f64(cfg.gamma_init)],
            norm,
        }
    }

    /// Learnable tensors as `(name, shape, data)`, in a fixed order shared
    /// with [`AttentionBlock::params_mut`] and [`AttentionBlock::instantiate`].
    pub fn params(&self) -> Vec<(String, Vec<usize>, &[E])> {
        let dk = self.heads * self.key_dim;
        let dv = self.heads * self.value_dim;
        let mut out: Vec<(String, Vec<usize>, &[E])> = vec![(
            format!("{}.w_q", self.name),
            vec![self.target_channels, dk],
            &self.w_q,
        )];
        for (i, s) in self.sources.iter().enumerate() {
            out.push((
                format!("{}.src{i}.w_k", self.name),
                vec![s.channels, dk],
                &s.w_k,
            ));
            out.push((
                format!("{}.src{i}.w_v", self.name),
                vec![s.channels, dv],
                &s.w_v,
            ));
        }
        out.push((format!("{}.w_o1", self.name), vec![dv, self.d_ff], &self.w_o1));
        out.push((
            format!("{}.w_o2", self.name),
            vec![self.d_ff, self.target_channels],
            &self.w_o2,
        ));
        out.push((format!("{}.gamma", self.name), vec![1], &self.gamma));
        if let Some(norm) = &self.norm {
            out.push((
                format!("{}.bn.gamma", self.name),
                vec![self.d_ff],
                &norm.gamma,
            ));
            out.push((
                format!("{}.bn.beta", self.name),
                vec![self.d_ff],
                &norm.beta,
            ));
        }
        out
    }

    /// Mutable view of the same tensors, same order as
    /// [`AttentionBlock::params`].
    pub fn params_mut(&mut self) -> Vec<(String, &mut Vec<E>)> {
        let mut out: Vec<(String, &mut Vec<E>)> =
            vec![(format!("{}.w_q", self.name), &mut self.w_q)];
        for (i, s) in self.sources.iter_mut().enumerate() {
            out.push((format!("{}.src{i}.w_k", self.name), &mut s.w_k));
            out.push((format!("{}.src{i}.w_v", self.name), &mut s.w_v));
        }
        out.push((format!("{}.w_o1", self.name), &mut self.w_o1));
        out.push((format!("{}.w_o2", self.name), &mut self.w_o2));
        out.push((format!("{}.gamma", self.name), &mut self.gamma));
        if let Some(norm) = &mut self.norm {
            out.push((format!("{}.bn.gamma", self.name), &mut norm.gamma));
            out.push((format!("{}.bn.beta", self.name), &mut norm.beta));
        }
        out
    }

    /// Non-learnable running statistics (batchnorm), as `(name, shape, data)`.
    pub fn stats(&self) -> Vec<(String, Vec<usize>, &[E])> {
        let Some(norm) = &self.norm else {
            return Vec::new();
        };
        vec![
            (
                format!("{}.bn.running_mean", self.name),
                vec![self.d_ff],
                norm.state.running_mean.as_slice(),
            ),
            (
                format!("{}.bn.running_var", self.name),
                vec![self.d_ff],
                norm.state.running_var.as_slice(),
            ),
        ]
    }

    /// Mutable view of the running statistics, same order as
    /// [`AttentionBlock::stats`].
    pub fn stats_mut(&mut self) -> Vec<(String, &mut Vec<E>)> {
        let Some(norm) = &mut self.norm else {
            return Vec::new();
        };
        vec![
            (
                format!("{}.bn.running_mean", self.name),
                &mut norm.state.running_mean,
            ),
            (
                format!("{}.bn.running_var", self.name),
                &mut norm.state.running_var,
            ),
        ]
    }

    /// Load every parameter into the graph as a leaf, appending
    /// `(name, id)` pairs to `binding` in [`AttentionBlock::params`] order.
    pub fn instantiate(
        &self,
        graph: &mut Graph<E>,
        trainable: bool,
        binding: &mut Vec<(String, TensorId)>,
    ) -> AttentionBlockNodes {
        let mut load = |graph: &mut Graph<E>, name: String, shape: &[usize], data: &[E]| {
            let id = graph
                .leaf(data.to_vec(), shape, trainable)
                .expect("parameter shape matches its data");
            binding.push((name, id));
            id
        };
        let dk = self.heads * self.key_dim;
        let dv = self.heads * self.value_dim;
        let w_q = load(
            graph,
            format!("{}.w_q", self.name),
            &[self.target_channels, dk],
            &self.w_q,
        );
        let sources = self
            .sources
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let k = load(
                    graph,
                    format!("{}.src{i}.w_k", self.name),
                    &[s.channels, dk],
                    &s.w_k,
                );
                let v = load(
                    graph,
                    format!("{}.src{i}.w_v", self.name),
                    &[s.channels, dv],
                    &s.w_v,
                );
                (k, v)
            })
            .collect();
        let w_o1 = load(
            graph,
            format!("{}.w_o1", self.name),
            &[dv, self.d_ff],
            &self.w_o1,
        );
        let w_o2 = load(
            graph,
            format!("{}.w_o2", self.name),
            &[self.d_ff, self.target_channels],
            &self.w_o2,
        );
        let gamma = load(graph, format!("{}.gamma", self.name), &[1], &self.gamma);
        let norm = self.norm.as_ref().map(|n| {
            let g = load(
                graph,
                format!("{}.bn.gamma", self.name),
                &[self.d_ff],
                &n.gamma,
            );
            let b = load(
                graph,
                format!("{}.bn.beta", self.name),
                &[self.d_ff],
                &n.beta,
            );
            (g, b)
        });
        AttentionBlockNodes {
            w_q,
            sources,
            w_o1,
            w_o2,
            gamma,
            norm,
        }
    }

    /// Instantiate and run this block on `query_map` against `memory`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng>(
        &mut self,
        graph: &mut Graph<E>,
        query_map: TensorId,
        memory: &LayerMemory,
        cfg: &NFMConfig,
        rng: &mut R,
        training: bool,
        want_record: bool,
        binding: &mut Vec<(String, TensorId)>,
    ) -> Result<(TensorId, Option<AttentionRecord>), NfmError> {
        let nodes = self.instantiate(graph, training, binding);
        let bn_state = self.norm.as_mut().map(|n| &mut n.state);
        nfm_block_forward(
            graph,
            &self.name,
            &nodes,
            bn_state,
            query_map,
            memory,
            cfg,
            rng,
            training,
            want_record,
        )
    }
}

/// Multi-head top-k attention of `query_map` over a token set.
///
/// Per head: queries, keys, and values come from per-source linear
/// projections; the zero default slot occupies token index 0 with an exactly
/// zero key and value; logits are scaled dot products (or fresh standard
/// normal draws in random mode); weights are top-k sparse softmax; the
/// output concatenates the per-head value mixes.
#[allow(clippy::too_many_arguments)]
pub fn attend_heads<E: Element, R: Rng>(
    graph: &mut Graph<E>,
    name: &str,
    nodes: &AttentionBlockNodes,
    query_map: TensorId,
    tokens: &TokenSet,
    cfg: &NFMConfig,
    rng: &mut R,
    want_record: bool,
) -> Result<(TensorId, Option<AttentionRecord>), NfmError> {
    cfg.validate()?;
    if tokens.groups.len() != nodes.sources.len() {
        return Err(NfmError::UnregisteredSource {
            name: name.to_string(),
            got: tokens.groups.len(),
            registered: nodes.sources.len(),
        });
    }
    for (i, group) in tokens.groups.iter().enumerate() {
        let expected = graph.shape(nodes.sources[i].0)[0];
        if group.channels != expected {
            return Err(NfmError::SourceChannelMismatch {
                name: name.to_string(),
                index: i,
                got: group.channels,
                expected,
            });
        }
    }
    let (batch, _, h, w) = match graph.shape(query_map) {
        [b, c, h, w] => (*b, *c, *h, *w),
        other => {
            return Err(NfmError::Tensor(crate::tensor::TensorError::Shape {
                op: "attend_heads",
                message: format!("query must be rank 4, got {other:?}"),
            }))
        }
    };
    let dk = cfg.num_heads * cfg.key_dim;
    let dv = cfg.num_heads * cfg.value_dim;
    let learned = cfg.attention_mode == AttentionMode::Learned;

    // Values always flow; keys/queries only exist in learned mode.
    let zero_v = graph.zeros(&[batch, 1, dv, h, w], false);
    let mut value_stacks = vec![zero_v];
    for (group, &(_, w_v)) in tokens.groups.iter().zip(&nodes.sources) {
        value_stacks.push(graph.token_project(group.stack, w_v)?);
    }
    let values = graph.concat_tokens(&value_stacks)?;

    let logits = if learned {
        let q = graph.channel_project(query_map, nodes.w_q)?;
        let zero_k = graph.zeros(&[batch, 1, dk, h, w], false);
        let mut key_stacks = vec![zero_k];
        for (group, &(w_k, _)) in tokens.groups.iter().zip(&nodes.sources) {
            key_stacks.push(graph.token_project(group.stack, w_k)?);
        }
        let keys = graph.concat_tokens(&key_stacks)?;
        graph.attention_logits(q, keys, cfg.num_heads, E::from_f64(cfg.scale_value()))?
    } else {
        let len = batch * cfg.num_heads * tokens.total_tokens * h * w;
        let draws: Vec<E> = (0..len)
            .map(|_| E::from_f64(rng.sample(StandardNormal)))
            .collect();
        graph.leaf(
            draws,
            &[batch, cfg.num_heads, tokens.total_tokens, h, w],
            false,
        )?
    };
    let weights = graph.topk_softmax(logits, 2, cfg.top_k)?;
    let mixed = graph.attention_mix(weights, values, cfg.num_heads)?;

    let record = want_record.then(|| {
        let (selected, keep) = graph
            .topk_selected(weights)
            .expect("weights node is a top-k softmax");
        let t = tokens.total_tokens;
        let p = h * w;
        let wdata = graph.data(weights);
        let mut rec_weights = Vec::with_capacity(selected.len());
        for (fiber_idx, chunk) in selected.chunks_exact(keep).enumerate() {
            let o = fiber_idx / p;
            let r = fiber_idx % p;
            for &tok in chunk {
                rec_weights.push(wdata[(o * t + tok as usize) * p + r].to_f64());
            }
        }
        AttentionRecord {
            block: name.to_string(),
            batch,
            heads: cfg.num_heads,
            height: h,
            width: w,
            total_tokens: t,
            keep,
            token_ids: selected.to_vec(),
            weights: rec_weights,
        }
    });
    Ok((mixed, record))
}

/// Full block update: attend over memory, squeeze through the positionwise
/// two-layer MLP (optional feature batchnorm, relu), and add the result
/// through the scalar gate: `out = query + gamma * h1`.
#[allow(clippy::too_many_arguments)]
pub fn nfm_block_forward<E: Element, R: Rng>(
    graph: &mut Graph<E>,
    name: &str,
    nodes: &AttentionBlockNodes,
    bn_state: Option<&mut BatchNormState<E>>,
    query_map: TensorId,
    memory: &LayerMemory,
    cfg: &NFMConfig,
    rng: &mut R,
    training: bool,
    want_record: bool,
) -> Result<(TensorId, Option<AttentionRecord>), NfmError> {
    let (batch, channels, h, w) = match graph.shape(query_map) {
        [b, c, h, w] if h == w => (*b, *c, *h, *w),
        other => {
            return Err(NfmError::Tensor(crate::tensor::TensorError::Shape {
                op: "nfm_block_forward",
                message: format!("query must be a square rank-4 map, got {other:?}"),
            }))
        }
    };
    let _ = w;
    let mut tokens = build_token_set(graph, memory, h, cfg.rescale_mode)?;
    if cfg.include_current_state {
        let stack = graph.reshape(query_map, &[batch, 1, channels, h, h])?;
        tokens.push_group(TokenGroup {
            entry_index: usize::MAX,
            channels,
            tokens: 1,
            stack,
        });
    }
    let (mixed, record) =
        attend_heads(graph, name, nodes, query_map, &tokens, cfg, rng, want_record)?;
    let pre = graph.channel_project(mixed, nodes.w_o1)?;
    let normed = match (nodes.norm, bn_state) {
        (Some((gamma_bn, beta_bn)), Some(state)) => {
            graph.batchnorm2d(pre, gamma_bn, beta_bn, state, training)?
        }
        (None, _) => pre,
        (Some(_), None) => {
            return Err(NfmError::Tensor(crate::tensor::TensorError::Shape {
                op: "nfm_block_forward",
                message: "batchnorm parameters present but no running state supplied".into(),
            }))
        }
    };
    let act = graph.relu(normed);
    let h1 = graph.channel_project(act, nodes.w_o2)?;
    let out = graph.add_scaled(query_map, h1, nodes.gamma)?;
    Ok((out, record))
}
