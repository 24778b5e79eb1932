//! Flattening multiscale blocks into one training sequence and the blockwise
//! causal attention mask over it.
//!
//! Flat slot 0 is the class token; every grid cell of every scale follows,
//! ordered by (scale, block, within-block scan order). The mask lets a query
//! attend to every token whose global block id is ≤ its own, where the class
//! token forms its own (first) singleton block — so the visible set of any
//! query is a contiguous prefix of flat indices.

use std::ops::Range;
use std::sync::Arc;

use crate::error::Result;
use crate::order::{cached_order, Position, ScanOrder};
use crate::schedule::BlockPartition;

/// One grid cell in the flattened sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayoutEntry {
    /// Scale index (ascending, 0 = coarsest).
    pub scale: usize,
    /// Block index within the scale.
    pub block: usize,
    /// Cell coordinates on the scale's grid.
    pub pos: Position,
    /// Rank of the cell in the scale's scan order.
    pub rank: usize,
    /// Flat sequence index (≥ 1; slot 0 is the class token).
    pub flat: usize,
}

/// The flattened multiscale sequence.
#[derive(Debug, Clone)]
pub struct SequenceLayout {
    /// The block partition the layout was built from.
    pub partition: BlockPartition,
    /// Scale sides, coarse to fine.
    pub sizes: Vec<usize>,
    /// Grid-cell entries in flat order (length `seq_len - 1`).
    pub entries: Vec<LayoutEntry>,
    /// Total sequence length T including the class slot.
    pub seq_len: usize,
    /// Global block id per flat index; the class token is block 0.
    pub block_ids: Vec<usize>,
    /// Flat range of each global block, in block order.
    pub block_ranges: Vec<Range<usize>>,
    /// Flat range of each scale's tokens.
    pub scale_ranges: Vec<Range<usize>>,
    /// Range of global block ids belonging to each scale.
    pub scale_blocks: Vec<Range<usize>>,
    /// Scan order of each scale's grid (shared, cached per side).
    pub orders: Vec<Arc<ScanOrder>>,
}

impl SequenceLayout {
    /// Entry for flat index `t` (panics for the class slot 0).
    pub fn entry(&self, t: usize) -> &LayoutEntry {
        &self.entries[t - 1]
    }
}

/// Flatten a block partition into a sequence layout.
pub fn build_layout(partition: &BlockPartition) -> Result<SequenceLayout> {
    let mut entries = Vec::new();
    let mut block_ids = vec![0usize];
    let mut block_ranges = vec![0..1];
    let mut scale_ranges = Vec::with_capacity(partition.sizes.len());
    let mut scale_blocks = Vec::with_capacity(partition.sizes.len());
    let mut orders = Vec::with_capacity(partition.sizes.len());

    let mut flat = 1usize;
    let mut global_block = 1usize;
    for (s, &side) in partition.sizes.iter().enumerate() {
        let order = cached_order(side, side)?;
        let scale_start = flat;
        let block_start = global_block;
        for (i, range) in partition.blocks[s].iter().enumerate() {
            let flat_start = flat;
            for rank in range.clone() {
                entries.push(LayoutEntry {
                    scale: s,
                    block: i,
                    pos: order.positions[rank],
                    rank,
                    flat,
                });
                block_ids.push(global_block);
                flat += 1;
            }
            block_ranges.push(flat_start..flat);
            global_block += 1;
        }
        scale_ranges.push(scale_start..flat);
        scale_blocks.push(block_start..global_block);
        orders.push(order);
    }

    Ok(SequenceLayout {
        partition: partition.clone(),
        sizes: partition.sizes.clone(),
        entries,
        seq_len: flat,
        block_ids,
        block_ranges,
        scale_ranges,
        scale_blocks,
        orders,
    })
}

/// Blockwise causal visibility relation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockCausalMask {
    /// Total sequence length T.
    pub size: usize,
    /// Global block id per flat index.
    pub block_ids: Vec<usize>,
    /// Per block id, the end (exclusive) of the visible flat-index prefix.
    pub block_ends: Vec<usize>,
}

impl BlockCausalMask {
    /// Whether query `q` may attend to key `k`.
    #[inline]
    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.block_ids[k] <= self.block_ids[q]
    }

    /// End (exclusive) of the visible key prefix for query `q`.
    #[inline]
    pub fn visible_end(&self, q: usize) -> usize {
        self.block_ends[self.block_ids[q]]
    }

    /// Pack the relation into per-row u64 bitsets.
    pub fn to_bitrows(&self) -> BitRows {
        let words_per_row = self.size.div_ceil(64);
        let mut words = vec![0u64; self.size * words_per_row];
        for q in 0..self.size {
            let end = self.visible_end(q);
            let row = &mut words[q * words_per_row..(q + 1) * words_per_row];
            let full_words = end / 64;
            row[..full_words].fill(u64::MAX);
            let rem = end % 64;
            if rem != 0 {
                row[full_words] = (1u64 << rem) - 1;
            }
        }
        BitRows { size: self.size, words_per_row, words }
    }
}

/// Dense bitset rows of a mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitRows {
    pub size: usize,
    pub words_per_row: usize,
    pub words: Vec<u64>,
}

impl BitRows {
    #[inline]
    pub fn row(&self, q: usize) -> &[u64] {
        &self.words[q * self.words_per_row..(q + 1) * self.words_per_row]
    }

    #[inline]
    pub fn get(&self, q: usize, k: usize) -> bool {
        self.row(q)[k / 64] >> (k % 64) & 1 == 1
    }
}

/// Build the blockwise causal mask of a layout.
pub fn build_mask(layout: &SequenceLayout) -> BlockCausalMask {
    let block_ends = layout.block_ranges.iter().map(|r| r.end).collect();
    BlockCausalMask { size: layout.seq_len, block_ids: layout.block_ids.clone(), block_ends }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{make_schedule, partition_blocks, RatioTag};

    fn layout_for(tag: RatioTag, side: usize, parallelism: usize) -> SequenceLayout {
        let schedule = make_schedule(tag, side).unwrap();
        let partition = partition_blocks(&schedule, parallelism).unwrap();
        build_layout(&partition).unwrap()
    }

    #[test]
    fn sequence_lengths() {
        assert_eq!(layout_for(RatioTag::X2, 16, 4).seq_len, 342);
        assert_eq!(layout_for(RatioTag::Single, 1, 1).seq_len, 2);
    }

    #[test]
    fn entries_ordered_and_contiguous() {
        let layout = layout_for(RatioTag::X2, 8, 4);
        assert_eq!(layout.seq_len, 1 + 1 + 4 + 16 + 64);
        for (i, entry) in layout.entries.iter().enumerate() {
            assert_eq!(entry.flat, i + 1);
        }
        // Ordered by (scale, block, within-block scan rank).
        let keys: Vec<(usize, usize, usize)> = layout
            .entries
            .iter()
            .map(|e| (e.scale, e.block, layout.orders[e.scale].order_index(e.pos).unwrap()))
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn eight_by_eight_scale_starts_at_origin() {
        let layout = layout_for(RatioTag::X2, 16, 4);
        let scale_of_side_8 = layout.sizes.iter().position(|&s| s == 8).unwrap();
        let first = layout.scale_ranges[scale_of_side_8].start;
        assert_eq!(layout.entry(first).pos, Position::new(0, 0));
        assert_eq!(layout.entry(first).block, 0);
    }

    #[test]
    fn two_block_mask_example() {
        // Class token plus two blocks of two tokens each.
        let schedule =
            crate::schedule::ScaleSchedule { ratio_tag: RatioTag::Single, sizes: vec![2] };
        let partition = partition_blocks(&schedule, 2).unwrap();
        let layout = build_layout(&partition).unwrap();
        let mask = build_mask(&layout);
        assert_eq!(mask.size, 5);
        for q in [1, 2] {
            for k in 0..=2 {
                assert!(mask.allowed(q, k));
            }
            for k in 3..5 {
                assert!(!mask.allowed(q, k));
            }
        }
        for q in [3, 4] {
            for k in 0..5 {
                assert!(mask.allowed(q, k));
            }
        }
        // The class token sees only itself.
        assert!(mask.allowed(0, 0));
        for k in 1..5 {
            assert!(!mask.allowed(0, k));
        }
    }

    #[test]
    fn mask_is_reflexive_transitive_and_prefix_shaped() {
        let layout = layout_for(RatioTag::X2, 4, 2);
        let mask = build_mask(&layout);
        let t = mask.size;
        for q in 0..t {
            assert!(mask.allowed(q, q));
            let end = mask.visible_end(q);
            for k in 0..t {
                assert_eq!(mask.allowed(q, k), k < end, "q={} k={}", q, k);
            }
            // Transitivity: anything in an earlier block than a visible key
            // is visible too — immediate from the prefix shape checked above.
        }
    }

    #[test]
    fn allowed_pair_count_matches_closed_form() {
        let layout = layout_for(RatioTag::X2, 4, 3);
        let mask = build_mask(&layout);
        let brute: usize =
            (0..mask.size).map(|q| (0..mask.size).filter(|&k| mask.allowed(q, k)).count()).sum();
        // Σ_b m_b · (m_0 + … + m_b) over blocks including the class block.
        let mut closed = 0usize;
        let mut prefix = 0usize;
        for r in &layout.block_ranges {
            let m = r.len();
            prefix += m;
            closed += m * prefix;
        }
        assert_eq!(brute, closed);
    }

    #[test]
    fn bitrows_match_relation() {
        for (tag, side, parallelism) in
            [(RatioTag::X2, 8, 4), (RatioTag::Sqrt2, 4, 3), (RatioTag::X4, 16, 8)]
        {
            let layout = layout_for(tag, side, parallelism);
            let mask = build_mask(&layout);
            assert!(mask.size <= 512);
            let bits = mask.to_bitrows();
            for q in 0..mask.size {
                for k in 0..mask.size {
                    assert_eq!(bits.get(q, k), mask.allowed(q, k), "q={} k={}", q, k);
                }
            }
            // First-block queries see exactly the class token and their block.
            let first_block = &layout.block_ranges[1];
            for q in first_block.clone() {
                assert_eq!(mask.visible_end(q), first_block.end);
            }
            // The last row sees everything.
            assert_eq!(mask.visible_end(mask.size - 1), mask.size);
        }
    }
}
