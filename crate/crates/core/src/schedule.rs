//! Scale schedules and block partitions.
//!
//! A schedule lists the grid sides used from coarse to fine (e.g. `[1, 2, 4,
//! 8, 16]` for a per-step scale factor of 2). Each scale's cells, taken in
//! progressive checkerboard order, are then split into at most `P` contiguous
//! blocks of near-equal size; each block is one parallel sampling step.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Upsampling ratio between consecutive scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioTag {
    /// ×√2 per scale: the densest schedule.
    Sqrt2,
    /// ×2 per scale.
    X2,
    /// ×3 per scale.
    X3,
    /// ×4 per scale.
    X4,
    /// No intermediate scales: the final grid only.
    Single,
}

impl RatioTag {
    pub const ALL: [RatioTag; 5] =
        [RatioTag::Sqrt2, RatioTag::X2, RatioTag::X3, RatioTag::X4, RatioTag::Single];

    fn ratio(self) -> Option<f64> {
        match self {
            RatioTag::Sqrt2 => Some(std::f64::consts::SQRT_2),
            RatioTag::X2 => Some(2.0),
            RatioTag::X3 => Some(3.0),
            RatioTag::X4 => Some(4.0),
            RatioTag::Single => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RatioTag::Sqrt2 => "sqrt2",
            RatioTag::X2 => "x2",
            RatioTag::X3 => "x3",
            RatioTag::X4 => "x4",
            RatioTag::Single => "single",
        }
    }
}

impl fmt::Display for RatioTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RatioTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqrt2" => Ok(RatioTag::Sqrt2),
            "x2" => Ok(RatioTag::X2),
            "x3" => Ok(RatioTag::X3),
            "x4" => Ok(RatioTag::X4),
            "single" => Ok(RatioTag::Single),
            other => Err(Error::invalid_argument(format!(
                "unknown ratio tag '{}', expected one of sqrt2|x2|x3|x4|single",
                other
            ))),
        }
    }
}

/// Ordered list of scale sides, coarse to fine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    pub ratio_tag: RatioTag,
    /// Strictly increasing sides; starts at 1 for multiscale tags and ends at
    /// the final grid side.
    pub sizes: Vec<usize>,
}

impl ScaleSchedule {
    pub fn final_side(&self) -> usize {
        *self.sizes.last().expect("schedule has at least one scale")
    }

    /// Total token count across scales (class slot not included).
    pub fn total_cells(&self) -> usize {
        self.sizes.iter().map(|s| s * s).sum()
    }
}

/// Build the scale-size list for `ratio_tag` ending at `final_side`.
///
/// Sizes are produced by walking down from the final side, dividing by the
/// ratio and rounding to the nearest integer at each step until reaching 1,
/// then reversing; this reproduces the canonical side-16 lists for every tag.
pub fn make_schedule(ratio_tag: RatioTag, final_side: usize) -> Result<ScaleSchedule> {
    if final_side == 0 {
        return Err(Error::invalid_argument("final side must be positive"));
    }
    let sizes = match ratio_tag.ratio() {
        None => vec![final_side],
        Some(ratio) => {
            let mut descending = vec![final_side];
            let mut cur = final_side;
            while cur > 1 {
                let next = ((cur as f64) / ratio).round().max(1.0) as usize;
                descending.push(next);
                cur = next;
            }
            descending.reverse();
            descending.dedup();
            descending
        }
    };
    debug_assert!(sizes.windows(2).all(|w| w[0] < w[1]));
    Ok(ScaleSchedule { ratio_tag, sizes })
}

/// Per-scale partition of scan-order positions into contiguous blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPartition {
    /// Scale sides, mirroring the schedule.
    pub sizes: Vec<usize>,
    /// `blocks[s]` lists the contiguous scan-order ranges of scale `s`.
    pub blocks: Vec<Vec<Range<usize>>>,
    /// Number of blocks per scale: `min(P, cells at that scale)`.
    pub steps_per_scale: Vec<usize>,
}

impl BlockPartition {
    /// Total number of parallel sampling steps across all scales.
    pub fn total_steps(&self) -> usize {
        self.steps_per_scale.iter().sum()
    }
}

/// Split every scale of `schedule` into at most `parallelism` contiguous
/// blocks. When the cell count is not divisible, earlier blocks receive the
/// extra cells, so block sizes within a scale differ by at most one and never
/// increase along the scale.
pub fn partition_blocks(schedule: &ScaleSchedule, parallelism: usize) -> Result<BlockPartition> {
    if parallelism == 0 {
        return Err(Error::invalid_argument("parallelism must be at least 1"));
    }
    let mut blocks = Vec::with_capacity(schedule.sizes.len());
    let mut steps_per_scale = Vec::with_capacity(schedule.sizes.len());
    for &side in &schedule.sizes {
        let cells = side * side;
        let p_s = parallelism.min(cells);
        let base = cells / p_s;
        let remainder = cells % p_s;
        let mut scale_blocks = Vec::with_capacity(p_s);
        let mut start = 0usize;
        for i in 0..p_s {
            let len = base + usize::from(i < remainder);
            scale_blocks.push(start..start + len);
            start += len;
        }
        debug_assert_eq!(start, cells);
        blocks.push(scale_blocks);
        steps_per_scale.push(p_s);
    }
    Ok(BlockPartition { sizes: schedule.sizes.clone(), blocks, steps_per_scale })
}

/// Draw a parallelism value uniformly from `candidates`.
pub fn sample_training_parallelism<R: rand::Rng>(
    rng: &mut R,
    candidates: &[usize],
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::invalid_argument("parallelism candidate set is empty"));
    }
    let idx = rng.random_range(0..candidates.len());
    Ok(candidates[idx])
}
