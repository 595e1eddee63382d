//! Spatial block partitioning of sparse token sets.
//!
//! Tokens are grouped by the coordinate subgrid `floor(coord / m)` they fall
//! in. Blocks are ordered lexicographically by block coordinate; within a
//! block, tokens keep ascending lexicographic coordinate order. Empty blocks
//! are never materialized. The per-block start offsets `C` delimit each
//! block's token range in the sorted permutation.

use std::ops::Range;

use thiserror::Error;

use crate::Coord;

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("block size must be positive")]
    BadBlockSize,
    #[error("duplicate coordinate {0:?}")]
    DuplicateCoord(Coord),
    #[error("selection block size {m_slc} must be greater than and divisible by {m_cmp}")]
    IncompatibleBlockSizes { m_cmp: u32, m_slc: u32 },
}

/// Componentwise floor division of a coordinate by the block size.
#[inline]
pub fn block_of(coord: Coord, m: u32) -> Coord {
    coord.map(|c| c / m)
}

/// Token-to-block assignment at one block size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    block_size: u32,
    block_coords: Vec<Coord>,
    token_perm: Vec<usize>,
    offsets: Vec<usize>,
}

impl BlockPartition {
    pub fn block_size(&self) -> u32 {
        self.block_size
    }

    pub fn num_blocks(&self) -> usize {
        self.block_coords.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.token_perm.len()
    }

    pub fn block_coords(&self) -> &[Coord] {
        &self.block_coords
    }

    pub fn block_coord(&self, b: usize) -> Coord {
        self.block_coords[b]
    }

    /// Start offsets `C`: length `num_blocks() + 1`, `C[0] = 0`, `C[N_b] = N`.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Sorted token order: `token_perm()[p]` is the original index of the
    /// token at sorted position `p`.
    pub fn token_perm(&self) -> &[usize] {
        &self.token_perm
    }

    /// Range of sorted positions covered by block `b`.
    pub fn block_range(&self, b: usize) -> Range<usize> {
        self.offsets[b]..self.offsets[b + 1]
    }

    /// Original token indices of block `b`.
    pub fn block_tokens(&self, b: usize) -> &[usize] {
        &self.token_perm[self.block_range(b)]
    }

    /// Index of the block with the given block coordinate, if present.
    pub fn find_block(&self, block_coord: Coord) -> Option<usize> {
        self.block_coords.binary_search(&block_coord).ok()
    }
}

/// Group `coords` into subgrid blocks of size `m`.
pub fn partition_blocks(coords: &[Coord], m: u32) -> Result<BlockPartition, PartitionError> {
    if m == 0 {
        return Err(PartitionError::BadBlockSize);
    }
    let n = coords.len();
    let mut perm: Vec<usize> = (0..n).collect();
    // Coordinates are unique, so (block, coord) sorts totally.
    perm.sort_unstable_by_key(|&t| (block_of(coords[t], m), coords[t]));
    for w in perm.windows(2) {
        if coords[w[0]] == coords[w[1]] {
            return Err(PartitionError::DuplicateCoord(coords[w[0]]));
        }
    }
    let mut block_coords = Vec::new();
    let mut offsets = vec![0usize];
    for (pos, &t) in perm.iter().enumerate() {
        let bc = block_of(coords[t], m);
        if block_coords.last() != Some(&bc) {
            if pos > 0 {
                offsets.push(pos);
            }
            block_coords.push(bc);
        }
    }
    offsets.push(n);
    if n == 0 {
        offsets = vec![0];
    }
    Ok(BlockPartition {
        block_size: m,
        block_coords,
        token_perm: perm,
        offsets,
    })
}

/// Compression blocks nested inside selection blocks.
#[derive(Debug, Clone)]
pub struct BlockHierarchy {
    pub cmp: BlockPartition,
    pub slc: BlockPartition,
    /// For each compression block, the index of its enclosing selection block.
    pub cmp_to_slc: Vec<usize>,
}

pub fn build_hierarchy(
    coords: &[Coord],
    m_cmp: u32,
    m_slc: u32,
) -> Result<BlockHierarchy, PartitionError> {
    if m_slc <= m_cmp || m_slc % m_cmp != 0 {
        return Err(PartitionError::IncompatibleBlockSizes { m_cmp, m_slc });
    }
    let cmp = partition_blocks(coords, m_cmp)?;
    let slc = partition_blocks(coords, m_slc)?;
    let ratio = m_slc / m_cmp;
    let cmp_to_slc = cmp
        .block_coords()
        .iter()
        .map(|&bc| {
            slc.find_block(bc.map(|c| c / ratio))
                .expect("every compression block lies in some selection block")
        })
        .collect();
    Ok(BlockHierarchy {
        cmp,
        slc,
        cmp_to_slc,
    })
}
