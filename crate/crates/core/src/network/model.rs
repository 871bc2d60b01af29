//! Multi-pass network orchestration: block scheduling, layer memory, and
//! parameter bookkeeping.

use super::backbone::{BackboneParams, BackboneSpec, HeadParams};
use super::NetworkError;
use crate::attention::{AttentionBlock, AttentionRecord, LayerMemory, NFMConfig};
use crate::tensor::{Element, Graph, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Whether a network carries attention blocks at all.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Single plain forward pass, no attention; `num_passes` is ignored.
    Baseline,
    /// Multi-pass network with one attention insertion before every block
    /// except the first, in every pass.
    Nfm,
}

/// A convolutional network whose blocks attend over all previously computed
/// block outputs, within and across forward passes.
#[derive(Clone, Debug)]
pub struct NFMNetwork<E> {
    pub spec: BackboneSpec,
    pub cfg: NFMConfig,
    pub kind: ModelKind,
    /// One entry when the backbone is shared across passes, else one per pass.
    pub backbones: Vec<BackboneParams<E>>,
    pub head: HeadParams<E>,
    /// Attention insertions ordered pass-major: `(pass, before-block)` for
    /// block indices `2..=num_blocks`.
    pub attention: Vec<AttentionBlock<E>>,
}

/// What one multi-pass forward leaves behind, beyond the logits: ids of every
/// block output in the step's graph, the memory growth per pass, and any
/// collected attention records.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `block_outputs[pass][block]` in the forward's graph.
    pub block_outputs: Vec<Vec<TensorId>>,
    /// Memory length after each pass.
    pub memory_lengths: Vec<usize>,
    pub logits: TensorId,
    pub records: Vec<AttentionRecord>,
}

impl ForwardTrace {
    /// Shape-and-norm summary for export, one object per block output.
    pub fn summary<E: Element>(&self, graph: &Graph<E>) -> serde_json::Value {
        let outputs: Vec<serde_json::Value> = self
            .block_outputs
            .iter()
            .enumerate()
            .flat_map(|(p, pass)| {
                pass.iter().enumerate().map(move |(b, &id)| (p, b, id))
            })
            .map(|(p, b, id)| {
                let data = graph.data(id);
                let norm = data
                    .iter()
                    .map(|&v| {
                        let x = Element::to_f64(v);
                        x * x
                    })
                    .sum::<f64>()
                    .sqrt();
                serde_json::json!({
                    "pass": p + 1,
                    "block": b + 1,
                    "shape": graph.shape(id),
                    "l2_norm": norm,
                })
            })
            .collect();
        serde_json::json!({
            "block_outputs": outputs,
            "memory_lengths": self.memory_lengths,
            "logits": graph.data(self.logits).iter().map(|&v| Element::to_f64(v)).collect::<Vec<_>>(),
            "attention_records": self.records,
        })
    }
}

/// Exact parameter accounting for one network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub backbone: usize,
    pub head: usize,
    pub attention: usize,
    pub total: usize,
}

impl<E: Element> NFMNetwork<E> {
    /// Deterministically initialize a network: backbone conv stacks first,
    /// then the head, then attention blocks in schedule order, all from one
    /// seeded stream, so a baseline and an attention network built from the
    /// same seed share bitwise-identical backbone weights.
    pub fn build(
        spec: BackboneSpec,
        cfg: NFMConfig,
        kind: ModelKind,
        seed: u64,
    ) -> Result<Self, NetworkError> {
        spec.validate()?;
        cfg.validate().map_err(super::NetworkError::from)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let passes = match kind {
            ModelKind::Baseline => 1,
            ModelKind::Nfm => cfg.num_passes,
        };
        let copies = if cfg.share_backbone_across_passes || kind == ModelKind::Baseline {
            1
        } else {
            passes
        };
        let backbones = (0..copies)
            .map(|_| BackboneParams::new(&spec, &mut rng))
            .collect();
        let channels = spec.block_channels();
        let head = HeadParams::new(*channels.last().expect("validated"), spec.classes, &mut rng);
        let mut attention = Vec::new();
        if kind == ModelKind::Nfm {
            for pass in 0..passes {
                for before in 1..spec.num_blocks() {
                    let target = channels[before - 1];
                    let mut sources = Vec::new();
                    for _ in 0..pass {
                        sources.extend_from_slice(&channels);
                    }
                    sources.extend_from_slice(&channels[..before]);
                    if cfg.include_current_state {
                        sources.push(target);
                    }
                    attention.push(AttentionBlock::new(
                        format!("nfm.p{}.b{}", pass + 1, before + 1),
                        target,
                        &sources,
                        target,
                        &cfg,
                        &mut rng,
                    ));
                }
            }
        }
        Ok(NFMNetwork {
            spec,
            cfg,
            kind,
            backbones,
            head,
            attention,
        })
    }

    /// Forward passes actually executed: 1 for a baseline, else the
    /// configured pass count.
    pub fn num_passes(&self) -> usize {
        match self.kind {
            ModelKind::Baseline => 1,
            ModelKind::Nfm => self.cfg.num_passes,
        }
    }

    /// The attention block inserted before `block` (2-based block index) in
    /// `pass` (1-based).
    pub fn attention_at(&self, pass: usize, block: usize) -> &AttentionBlock<E> {
        let per_pass = self.spec.num_blocks() - 1;
        &self.attention[(pass - 1) * per_pass + (block - 2)]
    }

    fn backbone_prefix(&self, copy: usize) -> String {
        if self.backbones.len() == 1 {
            "backbone".to_string()
        } else {
            format!("backbone.p{}", copy + 1)
        }
    }

    /// Every learnable tensor as `(name, shape, data)`: backbone copies,
    /// head, then attention blocks in schedule order.
    pub fn params(&self) -> Vec<(String, Vec<usize>, &[E])> {
        let mut out = Vec::new();
        for (i, bb) in self.backbones.iter().enumerate() {
            out.extend(bb.params(&self.backbone_prefix(i)));
        }
        out.extend(self.head.params());
        for block in &self.attention {
            out.extend(block.params());
        }
        out
    }

    /// Mutable view of [`NFMNetwork::params`], same names and order.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Vec<E>)> {
        let prefixes: Vec<String> = (0..self.backbones.len())
            .map(|i| self.backbone_prefix(i))
            .collect();
        let mut out = Vec::new();
        for (bb, prefix) in self.backbones.iter_mut().zip(&prefixes) {
            out.extend(bb.params_mut(prefix));
        }
        out.extend(self.head.params_mut());
        for block in &mut self.attention {
            out.extend(block.params_mut());
        }
        out
    }

    /// Non-learnable running statistics (attention batchnorm, if enabled).
    pub fn stats(&self) -> Vec<(String, Vec<usize>, &[E])> {
        self.attention.iter().flat_map(|b| b.stats()).collect()
    }

    /// Mutable view of [`NFMNetwork::stats`], same names and order.
    pub fn stats_mut(&mut self) -> Vec<(String, &mut Vec<E>)> {
        self.attention
            .iter_mut()
            .flat_map(|b| b.stats_mut())
            .collect()
    }

    /// Run the full multi-pass schedule on `input` (`B x C x S x S`, values
    /// in `[0,1]`): each pass restarts from the input, inserts attention
    /// before every block but the first (attention networks only), and
    /// appends every block output to the shared layer memory; the logits come
    /// from the final pass's head. Appends every instantiated parameter to
    /// `binding` as `(name, leaf id)`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_multipass<R: Rng>(
        &mut self,
        graph: &mut Graph<E>,
        input: TensorId,
        training: bool,
        rng: &mut R,
        want_records: bool,
        binding: &mut Vec<(String, TensorId)>,
    ) -> Result<(TensorId, ForwardTrace), NetworkError> {
        let spec = self.spec.clone();
        let cfg = self.cfg.clone();
        match graph.shape(input) {
            [_, c, h, w] if *c == spec.in_channels && h == w && *h == spec.input_size => {}
            other => {
                return Err(NetworkError::BadSpec(format!(
                    "input shape {other:?} does not match {} channels at {}x{}",
                    spec.in_channels, spec.input_size, spec.input_size
                )))
            }
        }
        let passes = self.num_passes();
        let num_blocks = spec.num_blocks();
        if self.kind == ModelKind::Nfm {
            let needed = passes * (num_blocks - 1);
            if self.attention.len() < needed {
                return Err(NetworkError::BadSpec(format!(
                    "{} passes need {} attention blocks, network has {}",
                    passes,
                    needed,
                    self.attention.len()
                )));
            }
        }
        let backbone_nodes: Vec<Vec<Vec<(TensorId, TensorId)>>> = (0..self.backbones.len())
            .map(|i| {
                let prefix = self.backbone_prefix(i);
                self.backbones[i].instantiate(graph, training, &prefix, binding)
            })
            .collect();
        let head_nodes = self.head.instantiate(graph, training, binding);

        let mut memory = LayerMemory::new();
        let mut trace_outputs = Vec::with_capacity(passes);
        let mut memory_lengths = Vec::with_capacity(passes);
        let mut records = Vec::new();
        let mut logits = None;
        for pass in 0..passes {
            let nodes = &backbone_nodes[if backbone_nodes.len() == 1 { 0 } else { pass }];
            let mut h = input;
            let mut pass_outputs = Vec::with_capacity(num_blocks);
            for block in 0..num_blocks {
                if block >= 1 && self.kind == ModelKind::Nfm {
                    let idx = pass * (num_blocks - 1) + (block - 1);
                    let (mixed, record) = self.attention[idx].forward(
                        graph,
                        h,
                        &memory,
                        &cfg,
                        rng,
                        training,
                        want_records,
                        binding,
                    )?;
                    h = mixed;
                    if let Some(r) = record {
                        records.push(r);
                    }
                }
                for (layer, &(w, b)) in spec.blocks[block].iter().zip(&nodes[block]) {
                    h = graph.conv2d(h, w, b, layer.stride, layer.kernel / 2)?;
                    h = graph.relu(h);
                }
                memory.append(graph, pass, block, h)?;
                pass_outputs.push(h);
            }
            trace_outputs.push(pass_outputs);
            memory_lengths.push(memory.len());
            if pass + 1 == passes {
                let pooled = graph.global_avg_pool(h)?;
                logits = Some(graph.linear(pooled, head_nodes.0, head_nodes.1)?);
            }
        }
        let logits = logits.expect("at least one pass");
        Ok((
            logits,
            ForwardTrace {
                block_outputs: trace_outputs,
                memory_lengths,
                logits,
                records,
            },
        ))
    }

    /// Exact parameter counts by summation over the stored tensors.
    pub fn count_parameters(&self) -> ParamCounts {
        let backbone: usize = self
            .backbones
            .iter()
            .flat_map(|bb| bb.blocks.iter().flatten())
            .map(|c| c.weight.len() + c.bias.len())
            .sum();
        let head = self.head.weight.len() + self.head.bias.len();
        let attention: usize = self
            .attention
            .iter()
            .map(|b| b.params().iter().map(|(_, _, d)| d.len()).sum::<usize>())
            .sum();
        ParamCounts {
            backbone,
            head,
            attention,
            total: backbone + head + attention,
        }
    }

    /// Closed-form count of the attention parameters this network adds over
    /// the gate-free baseline: per block,
    /// `C_t*A*d_k + sum_e C_e*A*(d_k+d_v) + A*d_v*d_ff + d_ff*C_t + 1`,
    /// plus `2*d_ff` when batchnorm is on.
    pub fn attention_delta_formula(&self) -> usize {
        self.attention
            .iter()
            .map(|b| {
                attention_block_formula(
                    b.target_channels,
                    b.heads,
                    b.key_dim,
                    b.value_dim,
                    b.d_ff,
                    &b.sources.iter().map(|s| s.channels).collect::<Vec<_>>(),
                    b.norm.is_some(),
                )
            })
            .sum()
    }
}

/// The per-block closed form behind [`NFMNetwork::attention_delta_formula`].
pub fn attention_block_formula(
    c_t: usize,
    heads: usize,
    d_k: usize,
    d_v: usize,
    d_ff: usize,
    source_channels: &[usize],
    batchnorm: bool,
) -> usize {
    let per_source: usize = source_channels
        .iter()
        .map(|c| c * heads * (d_k + d_v))
        .sum();
    c_t * heads * d_k
        + per_source
        + heads * d_v * d_ff
        + d_ff * c_t
        + 1
        + if batchnorm { 2 * d_ff } else { 0 }
}
