//! Rescaling stored maps to a common spatial size and counting tokens.

use super::memory::LayerMemory;
use super::{NfmError, RescaleMode};
use crate::tensor::{Element, Graph, TensorId};

/// Tokens contributed by one memory entry, rescaled to the target size:
/// a `B x tokens x channels x H x W` stack in the step's graph.
#[derive(Clone, Copy, Debug)]
pub struct TokenGroup {
    /// Position of the source entry in the memory (usize::MAX for the
    /// current hidden state when it is offered as a token).
    pub entry_index: usize,
    pub channels: usize,
    pub tokens: usize,
    pub stack: TensorId,
}

/// All attention tokens for one insertion: the implicit zero slot at index 0
/// followed by each memory entry's group, in memory order.
#[derive(Debug)]
pub struct TokenSet {
    pub groups: Vec<TokenGroup>,
    /// Total token count T = 1 + sum of group sizes.
    pub total_tokens: usize,
    pub target_size: usize,
}

impl TokenSet {
    /// Append one more group (used for the optional current-state token).
    pub fn push_group(&mut self, group: TokenGroup) {
        self.total_tokens += group.tokens;
        self.groups.push(group);
    }
}

/// Bring every memory entry to the target spatial size.
///
/// Same-size maps pass through as a single token. Smaller maps are
/// nearest-upsampled to one token. Larger maps either fan out into r^2
/// tokens (space-to-depth) or collapse to one token by keeping the top-left
/// element of each window (nearest mode). Every size ratio must be a power
/// of two.
pub fn build_token_set<E: Element>(
    graph: &mut Graph<E>,
    memory: &LayerMemory,
    target_size: usize,
    mode: RescaleMode,
) -> Result<TokenSet, NfmError> {
    let mut groups = Vec::with_capacity(memory.len());
    let mut total = 1; // the zero default slot
    for (entry_index, entry) in memory.entries().iter().enumerate() {
        let bad_ratio = || NfmError::BadRescaleRatio {
            entry: entry_index,
            pass: entry.pass_index,
            block: entry.block_index,
            size: entry.size,
            target: target_size,
        };
        let batch = graph.shape(entry.features)[0];
        let group = if entry.size == target_size {
            let stack = graph.reshape(
                entry.features,
                &[batch, 1, entry.channels, target_size, target_size],
            )?;
            TokenGroup {
                entry_index,
                channels: entry.channels,
                tokens: 1,
                stack,
            }
        } else if entry.size < target_size {
            let ratio = exact_pow2_ratio(target_size, entry.size).ok_or_else(bad_ratio)?;
            let up = graph.nearest_upsample(entry.features, ratio)?;
            let stack = graph.reshape(
                up,
                &[batch, 1, entry.channels, target_size, target_size],
            )?;
            TokenGroup {
                entry_index,
                channels: entry.channels,
                tokens: 1,
                stack,
            }
        } else {
            let ratio = exact_pow2_ratio(entry.size, target_size).ok_or_else(bad_ratio)?;
            match mode {
                RescaleMode::SpaceToDepth => {
                    let stack = graph.space_to_depth_tokens(entry.features, ratio)?;
                    TokenGroup {
                        entry_index,
                        channels: entry.channels,
                        tokens: ratio * ratio,
                        stack,
                    }
                }
                RescaleMode::Nearest => {
                    let down = graph.nearest_downsample(entry.features, ratio)?;
                    let stack = graph.reshape(
                        down,
                        &[batch, 1, entry.channels, target_size, target_size],
                    )?;
                    TokenGroup {
                        entry_index,
                        channels: entry.channels,
                        tokens: 1,
                        stack,
                    }
                }
            }
        };
        total += group.tokens;
        groups.push(group);
    }
    Ok(TokenSet {
        groups,
        total_tokens: total,
        target_size,
    })
}

/// `large / small` when it divides exactly and is a power of two.
fn exact_pow2_ratio(large: usize, small: usize) -> Option<usize> {
    if small == 0 || large % small != 0 {
        return None;
    }
    let ratio = large / small;
    ratio.is_power_of_two().then_some(ratio)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::LayerMemory;

    fn push_entry(
        g: &mut Graph<f64>,
        mem: &mut LayerMemory,
        pass: usize,
        block: usize,
        channels: usize,
        size: usize,
    ) {
        let id = g.zeros(&[1, channels, size, size], false);
        mem.append(g, pass, block, id).unwrap();
    }

    #[test]
    fn empty_memory_has_only_the_zero_slot() {
        let mut g: Graph<f64> = Graph::new();
        let mem = LayerMemory::new();
        let set = build_token_set(&mut g, &mem, 8, RescaleMode::SpaceToDepth).unwrap();
        assert_eq!(set.total_tokens, 1);
        assert!(set.groups.is_empty());
    }

    #[test]
    fn same_size_entry_contributes_one_token() {
        let mut g: Graph<f64> = Graph::new();
        let mut mem = LayerMemory::new();
        push_entry(&mut g, &mut mem, 0, 0, 3, 8);
        let set = build_token_set(&mut g, &mem, 8, RescaleMode::SpaceToDepth).unwrap();
        assert_eq!(set.total_tokens, 2);
        assert_eq!(set.groups[0].tokens, 1);
        assert_eq!(g.shape(set.groups[0].stack), &[1, 1, 3, 8, 8]);
    }

    #[test]
    fn final_insertion_of_a_two_pass_run_sees_172_tokens() {
        // Pass-1 block outputs at sizes 32,16,8,4,4 plus pass-2 outputs at
        // 32,16,8,4; the query runs at 4x4.
        let mut g: Graph<f64> = Graph::new();
        let mut mem = LayerMemory::new();
        for (i, size) in [32, 16, 8, 4, 4].iter().enumerate() {
            push_entry(&mut g, &mut mem, 0, i, 1, *size);
        }
        for (i, size) in [32, 16, 8, 4].iter().enumerate() {
            push_entry(&mut g, &mut mem, 1, i, 1, *size);
        }
        let set = build_token_set(&mut g, &mem, 4, RescaleMode::SpaceToDepth).unwrap();
        let token_counts: Vec<usize> = set.groups.iter().map(|e| e.tokens).collect();
        assert_eq!(token_counts, vec![64, 16, 4, 1, 1, 64, 16, 4, 1]);
        assert_eq!(set.total_tokens, 172);
    }

    #[test]
    fn nearest_mode_collapses_large_entries_to_single_tokens() {
        let mut g: Graph<f64> = Graph::new();
        let mut mem = LayerMemory::new();
        for (i, size) in [32, 16, 8, 4, 4].iter().enumerate() {
            push_entry(&mut g, &mut mem, 0, i, 1, *size);
        }
        let set = build_token_set(&mut g, &mem, 4, RescaleMode::Nearest).unwrap();
        assert_eq!(set.total_tokens, 6);
        assert!(set.groups.iter().all(|e| e.tokens == 1));
    }

    #[test]
    fn smaller_entries_upsample_to_one_token() {
        let mut g: Graph<f64> = Graph::new();
        let mut mem = LayerMemory::new();
        push_entry(&mut g, &mut mem, 0, 0, 2, 4);
        let set = build_token_set(&mut g, &mem, 16, RescaleMode::SpaceToDepth).unwrap();
        assert_eq!(set.total_tokens, 2);
        assert_eq!(g.shape(set.groups[0].stack), &[1, 1, 2, 16, 16]);
    }

    #[test]
    fn non_power_of_two_ratio_names_the_entry() {
        let mut g: Graph<f64> = Graph::new();
        let mut mem = LayerMemory::new();
        push_entry(&mut g, &mut mem, 0, 0, 1, 4);
        push_entry(&mut g, &mut mem, 0, 1, 1, 12);
        let err = build_token_set(&mut g, &mem, 4, RescaleMode::SpaceToDepth).unwrap_err();
        match err {
            NfmError::BadRescaleRatio {
                entry,
                pass,
                block,
                size,
                target,
            } => {
                assert_eq!((entry, pass, block, size, target), (1, 0, 1, 12, 4));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn indivisible_sizes_are_also_rejected() {
        let mut g: Graph<f64> = Graph::new();
        let mut mem = LayerMemory::new();
        push_entry(&mut g, &mut mem, 0, 0, 1, 6);
        assert!(build_token_set(&mut g, &mem, 4, RescaleMode::SpaceToDepth).is_err());
    }
}
