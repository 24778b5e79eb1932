//! Rotary position encodings factored over (x, y, scale), and the learned
//! key-side mixing between a token's own rotation and its predecessor
//! block's rotation.
//!
//! Each attention head's dimension is split into rotation pairs: 7/8 of the
//! pairs encode the spatial coordinates (split evenly between x and y) and
//! 1/8 the scale index. Frequencies are learned parameters, initialized as a
//! geometric progression per axis, and shared across heads and layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::order::Position;
use crate::scalar::Scalar;
use crate::schedule::BlockPartition;
use crate::tensor::Mat;

/// Partition of a head's rotation pairs among the x, y, and scale axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RopeSplit {
    pub head_dim: usize,
    pub x_pairs: usize,
    pub y_pairs: usize,
    pub scale_pairs: usize,
}

impl RopeSplit {
    /// Split `head_dim / 2` pairs as 7/8 spatial : 1/8 scale, keeping x and y
    /// equal; rounding surplus goes to the spatial axes (a scale pair is
    /// dropped when needed to keep the spatial count even, or — for an odd
    /// pair total with no scale pair to drop — the odd pair becomes a scale
    /// pair).
    pub fn new(head_dim: usize) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::invalid_argument(format!(
                "head dimension must be positive and even, got {}",
                head_dim
            )));
        }
        let n_pairs = head_dim / 2;
        let mut scale_pairs = n_pairs / 8;
        let mut spatial = n_pairs - scale_pairs;
        if spatial % 2 != 0 {
            if scale_pairs > 0 {
                scale_pairs -= 1;
            } else {
                scale_pairs += 1;
            }
            spatial = n_pairs - scale_pairs;
        }
        Ok(RopeSplit { head_dim, x_pairs: spatial / 2, y_pairs: spatial / 2, scale_pairs })
    }

    pub fn n_pairs(&self) -> usize {
        self.x_pairs + self.y_pairs + self.scale_pairs
    }
}

/// Coordinates a rotation is evaluated at. The class token uses all zeros,
/// which makes its rotation the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RopeCoord {
    pub x: usize,
    pub y: usize,
    pub scale: usize,
}

impl RopeCoord {
    pub const ZERO: RopeCoord = RopeCoord { x: 0, y: 0, scale: 0 };

    pub fn new(pos: Position, scale: usize) -> Self {
        RopeCoord { x: pos.x, y: pos.y, scale }
    }
}

/// Geometric initial frequencies per pair, axis by axis (x pairs, then y,
/// then scale). Each axis runs from π/2 down to π/(M+1) where M is the
/// axis's largest coordinate (clamped to ≥ 1), so the longest rotation
/// period covers twice the coordinate range; a single-pair axis uses the
/// low frequency, whose period is the one that must cover the range.
pub fn init_frequencies<F: Scalar>(
    split: &RopeSplit,
    max_x: usize,
    max_y: usize,
    max_scale: usize,
) -> Vec<F> {
    let mut freqs = Vec::with_capacity(split.n_pairs());
    for (pairs, max_coord) in
        [(split.x_pairs, max_x), (split.y_pairs, max_y), (split.scale_pairs, max_scale)]
    {
        let m = max_coord.max(1) as f64;
        let hi = std::f64::consts::FRAC_PI_2;
        let lo = std::f64::consts::PI / (m + 1.0);
        for j in 0..pairs {
            let f = if pairs == 1 {
                lo
            } else {
                hi * (lo / hi).powf(j as f64 / (pairs as f64 - 1.0))
            };
            freqs.push(F::from_f64(f));
        }
    }
    freqs
}

/// Coordinate component pair `j` rotates by (x, y, or scale per the split).
#[inline]
pub(crate) fn pair_coord(split: &RopeSplit, coord: RopeCoord, j: usize) -> usize {
    if j < split.x_pairs {
        coord.x
    } else if j < split.x_pairs + split.y_pairs {
        coord.y
    } else {
        coord.scale
    }
}

#[inline]
fn pair_angle<F: Scalar>(split: &RopeSplit, freqs: &[F], coord: RopeCoord, j: usize) -> F {
    freqs[j] * F::from_usize(pair_coord(split, coord, j))
}

/// Rotate `v` in place by the factored rotation field at `coord`.
pub fn rotate<F: Scalar>(split: &RopeSplit, freqs: &[F], coord: RopeCoord, v: &mut [F]) {
    debug_assert_eq!(v.len(), split.head_dim);
    debug_assert_eq!(freqs.len(), split.n_pairs());
    for j in 0..split.n_pairs() {
        let theta = pair_angle(split, freqs, coord, j);
        let (sin, cos) = (theta.sin(), theta.cos());
        let a = v[2 * j];
        let b = v[2 * j + 1];
        v[2 * j] = cos * a - sin * b;
        v[2 * j + 1] = sin * a + cos * b;
    }
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Key-side mixed rotation: `α·R(cur)·v + (1−α)·R(prev)·v` with
/// `α = sigmoid(alpha_logit)`. Queries must never go through this path.
pub fn rotate_mixed<F: Scalar>(
    split: &RopeSplit,
    freqs: &[F],
    cur: RopeCoord,
    prev: RopeCoord,
    alpha_logit: F,
    v: &[F],
    out: &mut [F],
) {
    debug_assert_eq!(v.len(), split.head_dim);
    debug_assert_eq!(out.len(), split.head_dim);
    let alpha = sigmoid(alpha_logit);
    let beta = F::one() - alpha;
    for j in 0..split.n_pairs() {
        let tc = pair_angle(split, freqs, cur, j);
        let tp = pair_angle(split, freqs, prev, j);
        let (sc, cc) = (tc.sin(), tc.cos());
        let (sp, cp) = (tp.sin(), tp.cos());
        let a = v[2 * j];
        let b = v[2 * j + 1];
        out[2 * j] = alpha * (cc * a - sc * b) + beta * (cp * a - sp * b);
        out[2 * j + 1] = alpha * (sc * a + cc * b) + beta * (sp * a + cp * b);
    }
}

/// Pair every position of block `i` at scale `s` with its rank-mate in block
/// `i−1`. The first block has no predecessor: `prev` is `None` and callers
/// substitute the learned start constants. If block `i` is longer than block
/// `i−1` (hand-built partitions only; generated ones are non-increasing),
/// the unmatched tail reuses the predecessor's last position.
pub fn pair_positions(
    partition: &BlockPartition,
    scale: usize,
    block: usize,
) -> Result<Vec<(Position, Option<Position>)>> {
    let side = *partition
        .sizes
        .get(scale)
        .ok_or_else(|| Error::invalid_argument(format!("scale {} out of range", scale)))?;
    let blocks = &partition.blocks[scale];
    let range = blocks
        .get(block)
        .ok_or_else(|| {
            Error::invalid_argument(format!("block {} out of range at scale {}", block, scale))
        })?
        .clone();
    let order = crate::order::cached_order(side, side)?;
    if block == 0 {
        return Ok(range.map(|r| (order.positions[r], None)).collect());
    }
    let prev = blocks[block - 1].clone();
    Ok(range
        .enumerate()
        .map(|(rank, r)| {
            let prev_rank = rank.min(prev.len() - 1);
            (order.positions[r], Some(order.positions[prev.start + prev_rank]))
        })
        .collect())
}

/// Learned position embeddings indexed by (scale, x, y).
#[derive(Debug, Clone, PartialEq)]
pub struct PosEmbedTable<F> {
    pub dim: usize,
    pub sizes: Vec<usize>,
    /// One `(side·side) × dim` table per scale, row index `y·side + x`.
    pub tables: Vec<Mat<F>>,
}

impl<F: Scalar> PosEmbedTable<F> {
    pub fn zeros(sizes: &[usize], dim: usize) -> Self {
        let tables = sizes.iter().map(|&s| Mat::zeros(s * s, dim)).collect();
        PosEmbedTable { dim, sizes: sizes.to_vec(), tables }
    }

    #[inline]
    pub fn vector(&self, scale: usize, pos: Position) -> &[F] {
        let side = self.sizes[scale];
        self.tables[scale].row(pos.y * side + pos.x)
    }

    #[inline]
    pub fn vector_mut(&mut self, scale: usize, pos: Position) -> &mut [F] {
        let side = self.sizes[scale];
        self.tables[scale].row_mut(pos.y * side + pos.x)
    }
}

/// Per-(layer, head) mixing logits for the key-side rotation. Only the first
/// `layers` transformer layers mix; deeper layers rotate keys at their own
/// coordinates only.
#[derive(Debug, Clone, PartialEq)]
pub struct MixLogits<F> {
    pub layers: usize,
    pub heads: usize,
    /// `layers × heads` logits α′.
    pub logits: Mat<F>,
}

impl<F: Scalar> MixLogits<F> {
    pub fn zeros(layers: usize, heads: usize) -> Self {
        MixLogits { layers, heads, logits: Mat::zeros(layers, heads) }
    }

    #[inline]
    pub fn logit(&self, layer: usize, head: usize) -> F {
        self.logits.get(layer, head)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{make_schedule, partition_blocks, RatioTag, ScaleSchedule};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn pair_split_examples() {
        let s32 = RopeSplit::new(32).unwrap();
        assert_eq!((s32.x_pairs, s32.y_pairs, s32.scale_pairs), (7, 7, 2));
        let s16 = RopeSplit::new(16).unwrap();
        assert_eq!((s16.x_pairs, s16.y_pairs, s16.scale_pairs), (4, 4, 0));
        let s48 = RopeSplit::new(48).unwrap();
        assert_eq!((s48.x_pairs, s48.y_pairs, s48.scale_pairs), (11, 11, 2));
        let s64 = RopeSplit::new(64).unwrap();
        assert_eq!((s64.x_pairs, s64.y_pairs, s64.scale_pairs), (14, 14, 4));
        for head_dim in (2..=64).step_by(2) {
            let s = RopeSplit::new(head_dim).unwrap();
            assert_eq!(s.n_pairs(), head_dim / 2);
            assert_eq!(s.x_pairs, s.y_pairs);
        }
        assert!(RopeSplit::new(0).is_err());
        assert!(RopeSplit::new(7).is_err());
    }

    #[test]
    fn frequency_init_geometric() {
        let split = RopeSplit::new(32).unwrap();
        let freqs: Vec<f64> = init_frequencies(&split, 15, 15, 4);
        assert_eq!(freqs.len(), 16);
        let x = &freqs[..7];
        assert!((x[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert!((x[6] - std::f64::consts::PI / 16.0).abs() < 1e-12);
        for w in x.windows(2) {
            assert!(w[1] < w[0]);
            // Geometric: constant ratio.
            assert!((w[1] / w[0] - x[1] / x[0]).abs() < 1e-9);
        }
        // Longest period covers twice the coordinate range.
        let max_period = 2.0 * std::f64::consts::PI / x[6];
        assert!(max_period >= 2.0 * 15.0);
        // Scale axis: 2 pairs from π/2 to π/5.
        let s = &freqs[14..];
        assert!((s[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert!((s[1] - std::f64::consts::PI / 5.0).abs() < 1e-12);
    }

    #[test]
    fn zero_coordinates_are_identity() {
        let split = RopeSplit::new(32).unwrap();
        let freqs: Vec<f64> = init_frequencies(&split, 7, 7, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_vec(&mut rng, 32);
        let mut rotated = v.clone();
        rotate(&split, &freqs, RopeCoord::ZERO, &mut rotated);
        assert_eq!(rotated, v);
    }

    #[test]
    fn rotation_preserves_norm() {
        let split = RopeSplit::new(32).unwrap();
        let freqs: Vec<f64> = init_frequencies(&split, 15, 15, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..64 {
            let v = random_vec(&mut rng, 32);
            let coord = RopeCoord {
                x: rng.random_range(0..16),
                y: rng.random_range(0..16),
                scale: rng.random_range(0..8),
            };
            let mut rotated = v.clone();
            rotate(&split, &freqs, coord, &mut rotated);
            let norm = |u: &[f64]| u.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm(&rotated) - norm(&v)).abs() / norm(&v) < 1e-6);
        }
    }

    #[test]
    fn inner_products_depend_only_on_offsets() {
        let split = RopeSplit::new(16).unwrap();
        let freqs: Vec<f64> = init_frequencies(&split, 31, 31, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..32 {
            let q = random_vec(&mut rng, 16);
            let k = random_vec(&mut rng, 16);
            let c1 = RopeCoord {
                x: rng.random_range(0..8),
                y: rng.random_range(0..8),
                scale: rng.random_range(0..4),
            };
            let c2 = RopeCoord {
                x: rng.random_range(0..8),
                y: rng.random_range(0..8),
                scale: rng.random_range(0..4),
            };
            let (dx, dy, ds) =
                (rng.random_range(0..8), rng.random_range(0..8), rng.random_range(0..4));
            let shift = |c: RopeCoord| RopeCoord { x: c.x + dx, y: c.y + dy, scale: c.scale + ds };
            let product = |a: RopeCoord, b: RopeCoord| {
                let mut qa = q.clone();
                let mut kb = k.clone();
                rotate(&split, &freqs, a, &mut qa);
                rotate(&split, &freqs, b, &mut kb);
                crate::tensor::dot(&qa, &kb)
            };
            let base = product(c1, c2);
            let shifted = product(shift(c1), shift(c2));
            assert!((base - shifted).abs() < 1e-9, "base {} shifted {}", base, shifted);
        }
    }

    #[test]
    fn mixed_rotation_limits() {
        let split = RopeSplit::new(32).unwrap();
        let freqs: Vec<f64> = init_frequencies(&split, 15, 15, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = random_vec(&mut rng, 32);
        let cur = RopeCoord { x: 3, y: 9, scale: 2 };
        let prev = RopeCoord { x: 12, y: 1, scale: 2 };

        // α′ → +∞ saturates to the pure current rotation.
        let mut saturated = vec![0.0; 32];
        rotate_mixed(&split, &freqs, cur, prev, 40.0, &v, &mut saturated);
        let mut pure = v.clone();
        rotate(&split, &freqs, cur, &mut pure);
        for (a, b) in saturated.iter().zip(&pure) {
            assert!((a - b).abs() < 1e-9);
        }

        // α′ = 0 gives the equal-weight average of the two rotations.
        let mut mixed = vec![0.0; 32];
        rotate_mixed(&split, &freqs, cur, prev, 0.0, &v, &mut mixed);
        let mut prev_rot = v.clone();
        rotate(&split, &freqs, prev, &mut prev_rot);
        for i in 0..32 {
            assert!((mixed[i] - 0.5 * (pure[i] + prev_rot[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn mixed_rotation_gradient_matches_finite_differences() {
        let split = RopeSplit::new(16).unwrap();
        let freqs: Vec<f64> = init_frequencies(&split, 7, 7, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = random_vec(&mut rng, 16);
        let cur = RopeCoord { x: 5, y: 2, scale: 1 };
        let prev = RopeCoord { x: 1, y: 6, scale: 1 };
        let logit = 0.37;

        // Analytic: d out / d α′ = σ′(α′) · (R(cur)v − R(prev)v).
        let mut cur_rot = v.clone();
        rotate(&split, &freqs, cur, &mut cur_rot);
        let mut prev_rot = v.clone();
        rotate(&split, &freqs, prev, &mut prev_rot);
        let a = sigmoid(logit);
        let dsig = a * (1.0 - a);

        let eps = 1e-5;
        let mut hi = vec![0.0; 16];
        let mut lo = vec![0.0; 16];
        rotate_mixed(&split, &freqs, cur, prev, logit + eps, &v, &mut hi);
        rotate_mixed(&split, &freqs, cur, prev, logit - eps, &v, &mut lo);
        for i in 0..16 {
            let analytic = dsig * (cur_rot[i] - prev_rot[i]);
            let numeric = (hi[i] - lo[i]) / (2.0 * eps);
            // Floor the denominator above central-difference noise so
            // coincidentally tiny components don't produce spurious ratios.
            let denom = analytic.abs().max(1e-5);
            assert!(
                (analytic - numeric).abs() / denom < 1e-4,
                "component {}: analytic {} numeric {}",
                i,
                analytic,
                numeric
            );
        }
    }

    #[test]
    fn pairing_at_scale_two() {
        let schedule = make_schedule(RatioTag::X2, 16).unwrap();
        let partition = partition_blocks(&schedule, 4).unwrap();
        // Scale index 1 is the 2×2 grid; with P=4 every block holds one cell.
        let p0 = pair_positions(&partition, 1, 0).unwrap();
        assert_eq!(p0, vec![(Position::new(0, 0), None)]);
        let p1 = pair_positions(&partition, 1, 1).unwrap();
        assert_eq!(p1, vec![(Position::new(1, 1), Some(Position::new(0, 0)))]);
        let p2 = pair_positions(&partition, 1, 2).unwrap();
        assert_eq!(p2, vec![(Position::new(1, 0), Some(Position::new(1, 1)))]);
        let p3 = pair_positions(&partition, 1, 3).unwrap();
        assert_eq!(p3, vec![(Position::new(0, 1), Some(Position::new(1, 0)))]);
    }

    #[test]
    fn equal_sized_blocks_pair_bijectively() {
        let schedule = make_schedule(RatioTag::X2, 8).unwrap();
        let partition = partition_blocks(&schedule, 4).unwrap();
        let scale = 3; // 8×8, blocks of 16
        for block in 1..4 {
            let pairs = pair_positions(&partition, scale, block).unwrap();
            assert_eq!(pairs.len(), 16);
            let mut prevs: Vec<Position> = pairs.iter().map(|p| p.1.unwrap()).collect();
            prevs.sort();
            prevs.dedup();
            assert_eq!(prevs.len(), 16, "previous positions must be distinct");
        }
    }

    #[test]
    fn oversized_block_reuses_last_predecessor() {
        // Hand-built partition with a longer second block.
        let partition = crate::schedule::BlockPartition {
            sizes: vec![2],
            blocks: vec![vec![0..1, 1..4]],
            steps_per_scale: vec![2],
        };
        let pairs = pair_positions(&partition, 0, 1).unwrap();
        assert_eq!(pairs.len(), 3);
        for (_, prev) in &pairs {
            assert_eq!(*prev, Some(Position::new(0, 0)));
        }
        let _ = ScaleSchedule { ratio_tag: RatioTag::Single, sizes: vec![2] };
    }

    #[test]
    fn pos_table_indexing() {
        let mut table: PosEmbedTable<f64> = PosEmbedTable::zeros(&[2, 4], 3);
        table.vector_mut(1, Position::new(3, 2))[0] = 7.0;
        assert_eq!(table.vector(1, Position::new(3, 2))[0], 7.0);
        assert_eq!(table.vector(0, Position::new(1, 1))[0], 0.0);
        assert_eq!(table.tables[1].rows, 16);
    }
}
