//! Progressive checkerboard scan order.
//!
//! A grid is subdivided recursively into quadrants and the per-quadrant
//! orders are merged round-robin in the fixed diagonal pattern TL, BR, TR,
//! BL. The resulting permutation is balanced: any prefix of length `k`
//! places either `floor(k/4^d)` or `ceil(k/4^d)` cells inside every quadtree
//! cell at depth `d`, and the first half of the order covers exactly one
//! checkerboard colour class.
//!
//! Quadrant ids are fixed as TL→0, BR→1, TR→2, BL→3 throughout the crate.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};

/// A single grid cell; `x` is the column, `y` the row (both 0-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Position {
    pub x: usize,
    pub y: usize,
}

impl Position {
    pub fn new(x: usize, y: usize) -> Self {
        Position { x, y }
    }
}

/// A scan order over an `height × width` grid, generated on a power-of-two
/// `side` and possibly restricted to a smaller extent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanOrder {
    /// Side of the power-of-two grid the order was generated on.
    pub side: usize,
    /// Rows of the covered grid (= `side` unless restricted).
    pub height: usize,
    /// Columns of the covered grid (= `side` unless restricted).
    pub width: usize,
    /// The permutation: `positions[i]` is the cell generated at step `i`.
    pub positions: Vec<Position>,
    /// Inverse permutation: rank of cell `(x, y)` at `y * width + x`.
    inverse: Vec<usize>,
}

fn is_power_of_two(n: usize) -> bool {
    n > 0 && n & (n - 1) == 0
}

fn build_inverse(height: usize, width: usize, positions: &[Position]) -> Result<Vec<usize>> {
    let mut inverse = vec![usize::MAX; height * width];
    for (rank, p) in positions.iter().enumerate() {
        if p.x >= width || p.y >= height {
            return Err(Error::invalid_argument(format!(
                "position ({}, {}) outside {}x{} grid",
                p.x, p.y, height, width
            )));
        }
        let slot = &mut inverse[p.y * width + p.x];
        if *slot != usize::MAX {
            return Err(Error::invalid_argument(format!(
                "position ({}, {}) appears twice",
                p.x, p.y
            )));
        }
        *slot = rank;
    }
    if positions.len() != height * width {
        return Err(Error::invalid_argument(format!(
            "expected {} positions for a {}x{} grid, got {}",
            height * width,
            height,
            width,
            positions.len()
        )));
    }
    Ok(inverse)
}

impl ScanOrder {
    /// Build a `ScanOrder` from explicit positions, validating that they form
    /// a permutation of the `height × width` grid. `side` records the
    /// generating grid side and must cover the extent.
    pub fn from_positions(
        side: usize,
        height: usize,
        width: usize,
        positions: Vec<Position>,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid_argument("grid extent must be positive"));
        }
        if side < height.max(width) {
            return Err(Error::invalid_argument(format!(
                "side {} does not cover a {}x{} grid",
                side, height, width
            )));
        }
        let inverse = build_inverse(height, width, &positions)?;
        Ok(ScanOrder { side, height, width, positions, inverse })
    }

    /// Number of cells in the order.
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Rank of position `p` in the order.
    pub fn order_index(&self, p: Position) -> Result<usize> {
        if p.x >= self.width || p.y >= self.height {
            return Err(Error::invalid_argument(format!(
                "position ({}, {}) outside {}x{} grid",
                p.x, p.y, self.height, self.width
            )));
        }
        Ok(self.inverse[p.y * self.width + p.x])
    }

    /// True iff every quadtree cell at every depth holds `floor(prefix_len/4^d)`
    /// or `ceil(prefix_len/4^d)` members of the length-`prefix_len` prefix.
    /// Only meaningful on unrestricted power-of-two orders.
    pub fn check_balance(&self, prefix_len: usize) -> Result<bool> {
        if !is_power_of_two(self.side) || self.height != self.side || self.width != self.side {
            return Err(Error::invalid_argument(
                "balance is defined on unrestricted power-of-two orders",
            ));
        }
        if prefix_len > self.positions.len() {
            return Err(Error::invalid_argument(format!(
                "prefix length {} exceeds {} cells",
                prefix_len,
                self.positions.len()
            )));
        }
        let mut depth = 0usize;
        loop {
            let cell_side = self.side >> depth;
            if cell_side == 0 {
                break;
            }
            let cells_per_axis = self.side / cell_side;
            let mut counts = vec![0usize; cells_per_axis * cells_per_axis];
            for p in &self.positions[..prefix_len] {
                let cx = p.x / cell_side;
                let cy = p.y / cell_side;
                counts[cy * cells_per_axis + cx] += 1;
            }
            let total_cells = cells_per_axis * cells_per_axis;
            let floor = prefix_len / total_cells;
            let ceil = floor + usize::from(prefix_len % total_cells != 0);
            if counts.iter().any(|&c| c != floor && c != ceil) {
                return Ok(false);
            }
            if cell_side == 1 {
                break;
            }
            depth += 1;
        }
        Ok(true)
    }

    /// Check all structural invariants: the permutation property (already
    /// enforced on construction), plus — for unrestricted power-of-two grids —
    /// balance at every prefix length and the checkerboard-half property.
    pub fn validate(&self) -> Result<()> {
        if is_power_of_two(self.side) && self.height == self.side && self.width == self.side {
            for k in 0..=self.positions.len() {
                if !self.check_balance(k)? {
                    return Err(Error::invalid_state(format!(
                        "prefix of length {} is not quadtree-balanced",
                        k
                    )));
                }
            }
            if self.side >= 2 {
                let half = self.positions.len() / 2;
                for p in &self.positions[..half] {
                    if (p.x + p.y) % 2 != 0 {
                        return Err(Error::invalid_state(format!(
                            "cell ({}, {}) in the first half has odd parity",
                            p.x, p.y
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn progressive(size: usize, x: usize, y: usize, out: &mut Vec<Position>) {
    if size == 1 {
        out.push(Position::new(x, y));
        return;
    }
    let d = size / 2;
    let offsets = [(x, y), (x + d, y + d), (x + d, y), (x, y + d)];
    let mut sublists: [Vec<Position>; 4] = Default::default();
    for (sub, &(xi, yi)) in sublists.iter_mut().zip(&offsets) {
        progressive(d, xi, yi, sub);
    }
    for i in 0..d * d {
        for sub in &sublists {
            out.push(sub[i]);
        }
    }
}

/// Generate the progressive checkerboard order for a power-of-two `side`.
pub fn generate_order(side: usize) -> Result<ScanOrder> {
    if !is_power_of_two(side) {
        return Err(Error::invalid_argument(format!(
            "side must be a positive power of two, got {}",
            side
        )));
    }
    let mut positions = Vec::with_capacity(side * side);
    progressive(side, 0, 0, &mut positions);
    let inverse = build_inverse(side, side, &positions).expect("generated order is a permutation");
    Ok(ScanOrder { side, height: side, width: side, positions, inverse })
}

/// Restrict `order` to the cells of an `height × width` grid, preserving
/// relative order.
pub fn restrict_order(order: &ScanOrder, height: usize, width: usize) -> Result<ScanOrder> {
    if height == 0 || width == 0 {
        return Err(Error::invalid_argument("grid extent must be positive"));
    }
    if height > order.side || width > order.side {
        return Err(Error::invalid_argument(format!(
            "extent {}x{} exceeds order side {}",
            height, width, order.side
        )));
    }
    let positions: Vec<Position> = order
        .positions
        .iter()
        .copied()
        .filter(|p| p.x < width && p.y < height)
        .collect();
    let inverse = build_inverse(height, width, &positions)?;
    Ok(ScanOrder { side: order.side, height, width, positions, inverse })
}

/// Scan order for an arbitrary `height × width` grid: generate on the next
/// power of two covering the extent, then restrict.
pub fn scan_order(height: usize, width: usize) -> Result<ScanOrder> {
    if height == 0 || width == 0 {
        return Err(Error::invalid_argument("grid extent must be positive"));
    }
    let side = height.max(width).next_power_of_two();
    let full = generate_order(side)?;
    if height == side && width == side {
        Ok(full)
    } else {
        restrict_order(&full, height, width)
    }
}

/// Shared cache of generated square orders: the order is a pure function of
/// the grid extent, so layouts and samplers reuse one copy per size.
pub fn cached_order(height: usize, width: usize) -> Result<Arc<ScanOrder>> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<ScanOrder>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("order cache poisoned");
    if let Some(order) = guard.get(&(height, width)) {
        return Ok(Arc::clone(order));
    }
    let order = Arc::new(scan_order(height, width)?);
    guard.insert((height, width), Arc::clone(&order));
    Ok(order)
}
