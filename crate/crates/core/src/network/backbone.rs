//! Convolutional backbone description and parameter storage.

use super::NetworkError;
use crate::init::fan_in_uniform;
use crate::tensor::{Element, Graph, TensorId};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// One convolution: square odd kernel, zero padding `kernel/2`, relu after.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// A backbone as an ordered list of conv layers grouped into blocks, plus a
/// global-average-pool + linear head. Block outputs are what the attention
/// memory stores, so the grouping fixes the attention granularity: the
/// standard stacked-digit backbone groups layer pairs into five blocks, while
/// [`BackboneSpec::with_per_layer_memory`] re-groups every layer into its own
/// block for finer-grained memory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub in_channels: usize,
    /// Square input extent; every map stays square.
    pub input_size: usize,
    pub blocks: Vec<Vec<ConvSpec>>,
    pub classes: usize,
}

impl BackboneSpec {
    /// The stacked-digit backbone: nine 3x3 conv layers with strides
    /// `[1,2,1,2,1,2,1,2,1]` and channels `[32,64,64,128,128,256,256,512,512]`
    /// divided by `width_divisor` (floored at 4), grouped into the five
    /// blocks `(L1,L2) (L3,L4) (L5,L6) (L7,L8) (L9)`, on 64x64 inputs with a
    /// 10-way head. `width_divisor = 1` is the full-width network.
    pub fn stacked_digit(width_divisor: usize) -> Self {
        let full = [32, 64, 64, 128, 128, 256, 256, 512, 512];
        let strides = [1, 2, 1, 2, 1, 2, 1, 2, 1];
        let layer = |i: usize| ConvSpec {
            out_channels: (full[i] / width_divisor.max(1)).max(4),
            kernel: 3,
            stride: strides[i],
        };
        BackboneSpec {
            in_channels: 1,
            input_size: 64,
            blocks: vec![
                vec![layer(0), layer(1)],
                vec![layer(2), layer(3)],
                vec![layer(4), layer(5)],
                vec![layer(6), layer(7)],
                vec![layer(8)],
            ],
            classes: 10,
        }
    }

    /// A three-block miniature on 8x8 single-channel inputs, for tests and
    /// gradient checks.
    pub fn tiny() -> Self {
        let conv = |c, s| ConvSpec {
            out_channels: c,
            kernel: 3,
            stride: s,
        };
        BackboneSpec {
            in_channels: 1,
            input_size: 8,
            blocks: vec![vec![conv(3, 1)], vec![conv(4, 2)], vec![conv(4, 2)]],
            classes: 10,
        }
    }

    /// The same layers with every conv in its own block, so the attention
    /// memory records each layer's output instead of each block's.
    pub fn with_per_layer_memory(&self) -> Self {
        BackboneSpec {
            in_channels: self.in_channels,
            input_size: self.input_size,
            blocks: self
                .blocks
                .iter()
                .flatten()
                .map(|&layer| vec![layer])
                .collect(),
            classes: self.classes,
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.in_channels == 0
            || self.input_size == 0
            || self.classes == 0
            || self.blocks.is_empty()
            || self.blocks.iter().any(|b| b.is_empty())
        {
            return Err(NetworkError::BadSpec(
                "channels, input size, classes, and every block must be nonzero".into(),
            ));
        }
        let mut size = self.input_size;
        for layer in self.blocks.iter().flatten() {
            if layer.kernel % 2 == 0 || layer.kernel == 0 {
                return Err(NetworkError::BadSpec(format!(
                    "kernel {} must be odd",
                    layer.kernel
                )));
            }
            if layer.stride == 0 || layer.out_channels == 0 {
                return Err(NetworkError::BadSpec(
                    "stride and out_channels must be nonzero".into(),
                ));
            }
            size = (size - 1) / layer.stride + 1;
            if size == 0 {
                return Err(NetworkError::BadSpec("a layer shrank the map to nothing".into()));
            }
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Output channel width of each block, in order.
    pub fn block_channels(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .map(|b| b.last().expect("validated nonempty").out_channels)
            .collect()
    }

    /// Output spatial extent of each block, in order (padding `k/2` keeps
    /// every stride-1 layer size-preserving).
    pub fn block_sizes(&self) -> Vec<usize> {
        let mut size = self.input_size;
        self.blocks
            .iter()
            .map(|b| {
                for layer in b {
                    size = (size - 1) / layer.stride + 1;
                }
                size
            })
            .collect()
    }

    /// Input channel width of each conv layer, parallel to the flattened
    /// layer order.
    fn layer_in_channels(&self) -> Vec<usize> {
        let mut c = self.in_channels;
        self.blocks
            .iter()
            .flatten()
            .map(|layer| {
                let input = c;
                c = layer.out_channels;
                input
            })
            .collect()
    }
}

/// One conv layer's learnable tensors.
#[derive(Clone, Debug)]
pub struct ConvParams<E> {
    pub in_channels: usize,
    pub spec: ConvSpec,
    /// `out x in x k x k`.
    pub weight: Vec<E>,
    pub bias: Vec<E>,
}

/// All conv parameters of one backbone copy, grouped like the spec's blocks.
#[derive(Clone, Debug)]
pub struct BackboneParams<E> {
    pub blocks: Vec<Vec<ConvParams<E>>>,
}

/// The classifier head: global average pool feeding one linear layer.
#[derive(Clone, Debug)]
pub struct HeadParams<E> {
    pub in_features: usize,
    pub classes: usize,
    /// `in_features x classes`.
    pub weight: Vec<E>,
    pub bias: Vec<E>,
}

impl<E: Element> BackboneParams<E> {
    /// Fan-in-scaled uniform initialization, layers drawn in order.
    pub fn new<R: Rng>(spec: &BackboneSpec, rng: &mut R) -> Self {
        let mut in_iter = spec.layer_in_channels().into_iter();
        let blocks = spec
            .blocks
            .iter()
            .map(|block| {
                block
                    .iter()
                    .map(|&layer| {
                        let cin = in_iter.next().expect("one input width per layer");
                        let fan_in = cin * layer.kernel * layer.kernel;
                        ConvParams {
                            in_channels: cin,
                            spec: layer,
                            weight: fan_in_uniform(rng, fan_in, layer.out_channels * fan_in),
                            bias: vec![E::zero(); layer.out_channels],
                        }
                    })
                    .collect()
            })
            .collect();
        BackboneParams { blocks }
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Vec<usize>, &[E])> {
        let mut out = Vec::new();
        for (bi, block) in self.blocks.iter().enumerate() {
            for (li, conv) in block.iter().enumerate() {
                let base = format!("{prefix}.b{}.conv{}", bi + 1, li + 1);
                out.push((
                    format!("{base}.weight"),
                    vec![
                        conv.spec.out_channels,
                        conv.in_channels,
                        conv.spec.kernel,
                        conv.spec.kernel,
                    ],
                    conv.weight.as_slice(),
                ));
                out.push((
                    format!("{base}.bias"),
                    vec![conv.spec.out_channels],
                    conv.bias.as_slice(),
                ));
            }
        }
        out
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Vec<E>)> {
        let mut out = Vec::new();
        for (bi, block) in self.blocks.iter_mut().enumerate() {
            for (li, conv) in block.iter_mut().enumerate() {
                let base = format!("{prefix}.b{}.conv{}", bi + 1, li + 1);
                out.push((format!("{base}.weight"), &mut conv.weight));
                out.push((format!("{base}.bias"), &mut conv.bias));
            }
        }
        out
    }

    /// Load every conv's weight and bias as graph leaves, appending to
    /// `binding` in [`BackboneParams::params`] order. Returns `(weight, bias)`
    /// ids grouped by block.
    pub fn instantiate(
        &self,
        graph: &mut Graph<E>,
        trainable: bool,
        prefix: &str,
        binding: &mut Vec<(String, TensorId)>,
    ) -> Vec<Vec<(TensorId, TensorId)>> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(bi, block)| {
                block
                    .iter()
                    .enumerate()
                    .map(|(li, conv)| {
                        let base = format!("{prefix}.b{}.conv{}", bi + 1, li + 1);
                        let w = graph
                            .leaf(
                                conv.weight.clone(),
                                &[
                                    conv.spec.out_channels,
                                    conv.in_channels,
                                    conv.spec.kernel,
                                    conv.spec.kernel,
                                ],
                                trainable,
                            )
                            .expect("weight length matches its spec");
                        binding.push((format!("{base}.weight"), w));
                        let b = graph
                            .leaf(conv.bias.clone(), &[conv.spec.out_channels], trainable)
                            .expect("bias length matches its spec");
                        binding.push((format!("{base}.bias"), b));
                        (w, b)
                    })
                    .collect()
            })
            .collect()
    }
}

impl<E: Element> HeadParams<E> {
    pub fn new<R: Rng>(in_features: usize, classes: usize, rng: &mut R) -> Self {
        HeadParams {
            in_features,
            classes,
            weight: fan_in_uniform(rng, in_features, in_features * classes),
            bias: vec![E::zero(); classes],
        }
    }

    pub fn params(&self) -> Vec<(String, Vec<usize>, &[E])> {
        vec![
            (
                "head.weight".into(),
                vec![self.in_features, self.classes],
                self.weight.as_slice(),
            ),
            ("head.bias".into(), vec![self.classes], self.bias.as_slice()),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Vec<E>)> {
        vec![
            ("head.weight".into(), &mut self.weight),
            ("head.bias".into(), &mut self.bias),
        ]
    }

    pub fn instantiate(
        &self,
        graph: &mut Graph<E>,
        trainable: bool,
        binding: &mut Vec<(String, TensorId)>,
    ) -> (TensorId, TensorId) {
        let w = graph
            .leaf(
                self.weight.clone(),
                &[self.in_features, self.classes],
                trainable,
            )
            .expect("head weight length matches its dims");
        binding.push(("head.weight".into(), w));
        let b = graph
            .leaf(self.bias.clone(), &[self.classes], trainable)
            .expect("head bias length matches its dims");
        binding.push(("head.bias".into(), b));
        (w, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stacked_digit_matches_published_layout() {
        let spec = BackboneSpec::stacked_digit(1);
        spec.validate().unwrap();
        assert_eq!(spec.num_blocks(), 5);
        let layers: Vec<_> = spec.blocks.iter().flatten().collect();
        assert_eq!(layers.len(), 9);
        assert_eq!(
            layers.iter().map(|l| l.out_channels).collect::<Vec<_>>(),
            [32, 64, 64, 128, 128, 256, 256, 512, 512]
        );
        assert_eq!(
            layers.iter().map(|l| l.stride).collect::<Vec<_>>(),
            [1, 2, 1, 2, 1, 2, 1, 2, 1]
        );
        assert!(layers.iter().all(|l| l.kernel == 3));
        assert_eq!(spec.block_sizes(), [32, 16, 8, 4, 4]);
        assert_eq!(spec.block_channels(), [64, 128, 256, 512, 512]);
    }

    #[test]
    fn width_divisor_scales_channels_with_a_floor() {
        let spec = BackboneSpec::stacked_digit(8);
        let layers: Vec<_> = spec.blocks.iter().flatten().collect();
        assert_eq!(
            layers.iter().map(|l| l.out_channels).collect::<Vec<_>>(),
            [4, 8, 8, 16, 16, 32, 32, 64, 64]
        );
        let floor = BackboneSpec::stacked_digit(1000);
        assert!(floor.blocks.iter().flatten().all(|l| l.out_channels == 4));
    }

    #[test]
    fn per_layer_memory_regroups_without_changing_layers() {
        let spec = BackboneSpec::stacked_digit(8);
        let fine = spec.with_per_layer_memory();
        assert_eq!(fine.num_blocks(), 9);
        assert_eq!(
            fine.blocks.iter().flatten().collect::<Vec<_>>(),
            spec.blocks.iter().flatten().collect::<Vec<_>>()
        );
        assert_eq!(fine.block_sizes(), [64, 32, 32, 16, 16, 8, 8, 4, 4]);
    }

    #[test]
    fn parameter_names_enumerate_every_conv_once() {
        let spec = BackboneSpec::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params: BackboneParams<f32> = BackboneParams::new(&spec, &mut rng);
        let listed = params.params("backbone");
        assert_eq!(listed.len(), 6); // 3 convs x (weight, bias)
        assert_eq!(listed[0].0, "backbone.b1.conv1.weight");
        assert_eq!(listed[0].1, vec![3, 1, 3, 3]);
        assert_eq!(listed[5].0, "backbone.b3.conv1.bias");
        for (_, shape, data) in &listed {
            assert_eq!(shape.iter().product::<usize>(), data.len());
        }
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        let mut spec = BackboneSpec::tiny();
        spec.blocks[0][0].kernel = 4;
        assert!(spec.validate().is_err());
        let mut spec = BackboneSpec::tiny();
        spec.blocks.push(vec![]);
        assert!(spec.validate().is_err());
    }
}
