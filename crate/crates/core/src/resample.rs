//! Token grids and the deterministic resampling between scales: nearest-
//! neighbor index maps for upsampling (applied to embedded vectors by the
//! model) and majority-vote downsampling used to build ground-truth codes
//! for every scale from the finest grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::order::Position;

/// A square grid of token ids, row-major (`y · side + x`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub side: usize,
    pub tokens: Vec<usize>,
}

impl TokenGrid {
    pub fn new(side: usize, tokens: Vec<usize>) -> Result<Self> {
        if tokens.len() != side * side {
            return Err(Error::invalid_argument(format!(
                "grid of side {} needs {} tokens, got {}",
                side,
                side * side,
                tokens.len()
            )));
        }
        Ok(TokenGrid { side, tokens })
    }

    pub fn filled(side: usize, token: usize) -> Self {
        TokenGrid { side, tokens: vec![token; side * side] }
    }

    #[inline]
    pub fn get(&self, pos: Position) -> usize {
        self.tokens[pos.y * self.side + pos.x]
    }

    #[inline]
    pub fn set(&mut self, pos: Position, token: usize) {
        self.tokens[pos.y * self.side + pos.x] = token;
    }
}

/// Nearest-neighbor source index for each destination cell when resizing a
/// `src_side` grid to `dst_side`: per axis, `src = floor(dst · src_side /
/// dst_side)`. Returned row-major over destination cells.
pub fn upsample_index_map(src_side: usize, dst_side: usize) -> Vec<usize> {
    let axis: Vec<usize> = (0..dst_side).map(|d| d * src_side / dst_side).collect();
    let mut map = Vec::with_capacity(dst_side * dst_side);
    for y in 0..dst_side {
        for x in 0..dst_side {
            map.push(axis[y] * src_side + axis[x]);
        }
    }
    map
}

/// Downsample `fine` to `coarse_side` by majority vote over each coarse
/// cell's region `[floor(c·n/m), floor((c+1)·n/m))` per axis; ties go to the
/// smallest token id.
pub fn downsample_majority(
    fine: &TokenGrid,
    coarse_side: usize,
    vocab: usize,
) -> Result<TokenGrid> {
    if coarse_side == 0 || coarse_side > fine.side {
        return Err(Error::invalid_argument(format!(
            "coarse side {} must be in 1..={}",
            coarse_side, fine.side
        )));
    }
    let n = fine.side;
    let m = coarse_side;
    let bound = |c: usize| c * n / m;
    let mut tokens = Vec::with_capacity(m * m);
    let mut counts = vec![0usize; vocab];
    for cy in 0..m {
        for cx in 0..m {
            counts.iter_mut().for_each(|c| *c = 0);
            for y in bound(cy)..bound(cy + 1) {
                for x in bound(cx)..bound(cx + 1) {
                    let t = fine.tokens[y * n + x];
                    if t >= vocab {
                        return Err(Error::invalid_argument(format!(
                            "token {} out of vocabulary {}",
                            t, vocab
                        )));
                    }
                    counts[t] += 1;
                }
            }
            // max_by_key returns the last maximum; iterate reversed so ties
            // resolve to the smallest token id.
            let winner = (0..vocab).rev().max_by_key(|&t| counts[t]).unwrap();
            tokens.push(winner);
        }
    }
    TokenGrid::new(m, tokens)
}

/// Ground-truth codes for every scale: the finest grid itself at the last
/// scale, majority-vote downsamples at all coarser ones.
pub fn multiscale_codes(fine: &TokenGrid, sizes: &[usize], vocab: usize) -> Result<Vec<TokenGrid>> {
    let final_side = *sizes
        .last()
        .ok_or_else(|| Error::invalid_argument("empty scale list"))?;
    if final_side != fine.side {
        return Err(Error::invalid_argument(format!(
            "finest scale {} does not match grid side {}",
            final_side, fine.side
        )));
    }
    sizes
        .iter()
        .map(|&side| {
            if side == fine.side {
                Ok(fine.clone())
            } else {
                downsample_majority(fine, side, vocab)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_map_integer_ratio() {
        // 2 → 4: each source cell covers a 2×2 destination block.
        let map = upsample_index_map(2, 4);
        let want = vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3];
        assert_eq!(map, want);
    }

    #[test]
    fn index_map_non_integer_ratio() {
        // 2 → 3 per axis: destinations 0,1 read source 0; destination 2 reads 1.
        let map = upsample_index_map(2, 3);
        let want = vec![0, 0, 1, 0, 0, 1, 2, 2, 3];
        assert_eq!(map, want);
    }

    #[test]
    fn index_map_identity() {
        let map = upsample_index_map(3, 3);
        assert_eq!(map, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn index_map_covers_every_source_when_upsampling() {
        for (src, dst) in [(2usize, 3usize), (3, 4), (4, 6), (8, 11), (11, 16)] {
            let map = upsample_index_map(src, dst);
            let mut hit = vec![false; src * src];
            for &s in &map {
                hit[s] = true;
            }
            assert!(hit.iter().all(|&h| h), "{} -> {}", src, dst);
        }
    }

    #[test]
    fn majority_vote_hand_example() {
        // 4×4 grid; top-left region has three 1s and one 0 → 1;
        // top-right is an even 0/2 split → tie resolves to 0.
        let fine = TokenGrid::new(
            4,
            vec![
                1, 1, 0, 2, //
                0, 1, 2, 0, //
                3, 3, 2, 2, //
                3, 0, 2, 1,
            ],
        )
        .unwrap();
        let coarse = downsample_majority(&fine, 2, 4).unwrap();
        assert_eq!(coarse.tokens, vec![1, 0, 3, 2]);
    }

    #[test]
    fn downsample_to_single_cell_is_global_majority() {
        let fine = TokenGrid::new(3, vec![2, 2, 1, 1, 2, 0, 0, 1, 2]).unwrap();
        let one = downsample_majority(&fine, 1, 3).unwrap();
        assert_eq!(one.tokens, vec![2]);
    }

    #[test]
    fn constant_grid_survives_round_trip() {
        let fine = TokenGrid::filled(6, 5);
        for m in 1..=6 {
            let coarse = downsample_majority(&fine, m, 8).unwrap();
            assert_eq!(coarse.tokens, vec![5; m * m]);
        }
    }

    #[test]
    fn regions_partition_fine_grid() {
        // Every fine cell belongs to exactly one coarse region.
        for (n, m) in [(16usize, 11usize), (16, 6), (5, 2), (7, 3)] {
            let bound = |c: usize| c * n / m;
            let mut covered = vec![0usize; n];
            for c in 0..m {
                for v in bound(c)..bound(c + 1) {
                    covered[v] += 1;
                }
            }
            assert!(covered.iter().all(|&k| k == 1), "n={} m={}", n, m);
        }
    }

    #[test]
    fn multiscale_codes_match_schedule() {
        let fine = TokenGrid::new(4, (0..16).map(|i| i % 3).collect()).unwrap();
        let codes = multiscale_codes(&fine, &[1, 2, 4], 3).unwrap();
        assert_eq!(codes.len(), 3);
        assert_eq!(codes[0].side, 1);
        assert_eq!(codes[1].side, 2);
        assert_eq!(codes[2], fine);
        assert!(multiscale_codes(&fine, &[1, 2, 8], 3).is_err());
    }

    #[test]
    fn rejects_bad_arguments() {
        let fine = TokenGrid::filled(4, 0);
        assert!(downsample_majority(&fine, 0, 2).is_err());
        assert!(downsample_majority(&fine, 5, 2).is_err());
        assert!(TokenGrid::new(3, vec![0; 8]).is_err());
        let bad = TokenGrid::filled(2, 9);
        assert!(downsample_majority(&bad, 1, 4).is_err());
    }
}
