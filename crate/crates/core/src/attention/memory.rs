//! The cross-pass layer memory: every block output seen so far.

use super::NfmError;
use crate::tensor::{Element, Graph, TensorId};

/// One stored block output. The features stay live in the step's graph, so
/// attention reads differentiate back into the block that produced them.
#[derive(Clone, Copy, Debug)]
pub struct MemoryEntry {
    pub pass_index: usize,
    pub block_index: usize,
    pub features: TensorId,
    pub channels: usize,
    /// Spatial extent; stored maps are square.
    pub size: usize,
}

/// Ordered list of [`MemoryEntry`], appended to as blocks run and persisting
/// across passes within one forward.
#[derive(Default, Debug)]
pub struct LayerMemory {
    entries: Vec<MemoryEntry>,
}

impl LayerMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    /// Record a block output. Entries must arrive in (pass, block)
    /// lexicographic order and be square `B x C x H x H` maps.
    pub fn append<E: Element>(
        &mut self,
        graph: &Graph<E>,
        pass_index: usize,
        block_index: usize,
        features: TensorId,
    ) -> Result<(), NfmError> {
        let shape = graph.shape(features);
        let (c, h, w) = match shape {
            [_, c, h, w] => (*c, *h, *w),
            _ => {
                return Err(NfmError::NonSquareEntry {
                    pass: pass_index,
                    block: block_index,
                    height: 0,
                    width: 0,
                })
            }
        };
        if h != w {
            return Err(NfmError::NonSquareEntry {
                pass: pass_index,
                block: block_index,
                height: h,
                width: w,
            });
        }
        if let Some(last) = self.entries.last() {
            if (pass_index, block_index) <= (last.pass_index, last.block_index) {
                return Err(NfmError::OutOfOrderEntry {
                    pass: pass_index,
                    block: block_index,
                    prev_pass: last.pass_index,
                    prev_block: last.block_index,
                });
            }
        }
        self.entries.push(MemoryEntry {
            pass_index,
            block_index,
            features,
            channels: c,
            size: h,
        });
        Ok(())
    }
}
