//! Synthetic grid distributions with exact enumeration oracles and
//! total-variation evaluation.
//!
//! Three families stand in for image statistics at desk scale: independent
//! per-cell categoricals, a nearest-neighbour coupled (Potts/Ising-style)
//! energy with a class-dependent external field, and quadrant-constant
//! "patchwork" colourings with class-dependent colour preferences. Small
//! state spaces are enumerated exactly (with an independently computed
//! partition function as a cross-check); larger coupled grids fall back to
//! Gibbs sampling with documented burn-in, while independent and patchwork
//! grids admit exact direct sampling at any side.
//!
//! Fidelity is measured by total variation — over full grids where the
//! state space is enumerable, and over exhaustive overlapping 2×2 patch
//! marginals otherwise.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample::TokenGrid;

/// Hard ceiling on exact enumeration: `vocab^(side²)` states.
pub const MAX_EXACT_STATES: u64 = 1 << 24;

/// Quadrant of a cell, using the same fixed ids as the scan order:
/// TL→0, BR→1, TR→2, BL→3. The split line is at `ceil(side/2)`, so every
/// quadrant is non-empty for side ≥ 2.
pub fn quadrant_of(side: usize, x: usize, y: usize) -> usize {
    let half = side.div_ceil(2);
    match (x >= half, y >= half) {
        (false, false) => 0,
        (true, true) => 1,
        (true, false) => 2,
        (false, true) => 3,
    }
}

/// A class-conditional distribution over `side × side` grids of tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridDistribution {
    /// Every cell i.i.d. from `softmax(field[class])`.
    Independent { side: usize, vocab: usize, field: Vec<Vec<f64>> },
    /// Nearest-neighbour coupling: `log p(z | c) ∝ coupling · #{adjacent
    /// equal pairs} + Σ_cells field[c][z_cell]`.
    Coupled { side: usize, vocab: usize, coupling: f64, field: Vec<Vec<f64>> },
    /// Each quadrant filled with one constant token drawn from
    /// `softmax(tilt[class][quadrant])`; grids that are not
    /// quadrant-constant have probability zero.
    Patchwork { side: usize, vocab: usize, tilt: Vec<Vec<Vec<f64>>> },
}

impl GridDistribution {
    pub fn side(&self) -> usize {
        match self {
            GridDistribution::Independent { side, .. }
            | GridDistribution::Coupled { side, .. }
            | GridDistribution::Patchwork { side, .. } => *side,
        }
    }

    pub fn vocab(&self) -> usize {
        match self {
            GridDistribution::Independent { vocab, .. }
            | GridDistribution::Coupled { vocab, .. }
            | GridDistribution::Patchwork { vocab, .. } => *vocab,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            GridDistribution::Independent { field, .. }
            | GridDistribution::Coupled { field, .. } => field.len(),
            GridDistribution::Patchwork { tilt, .. } => tilt.len(),
        }
    }

    pub fn cells(&self) -> usize {
        self.side() * self.side()
    }

    pub fn validate(&self) -> Result<()> {
        let (side, vocab) = (self.side(), self.vocab());
        if side == 0 || vocab < 2 {
            return Err(Error::invalid_argument(
                "grid side must be positive and vocabulary at least 2",
            ));
        }
        if self.classes() == 0 {
            return Err(Error::invalid_argument("at least one class is required"));
        }
        let finite = |v: &[f64]| v.len() == vocab && v.iter().all(|x| x.is_finite());
        match self {
            GridDistribution::Independent { field, .. } => {
                if !field.iter().all(|f| finite(f)) {
                    return Err(Error::invalid_argument(
                        "each class field needs one finite log-weight per token",
                    ));
                }
            }
            GridDistribution::Coupled { coupling, field, .. } => {
                if !coupling.is_finite() {
                    return Err(Error::invalid_argument("coupling must be finite"));
                }
                if !field.iter().all(|f| finite(f)) {
                    return Err(Error::invalid_argument(
                        "each class field needs one finite log-weight per token",
                    ));
                }
            }
            GridDistribution::Patchwork { side, tilt, .. } => {
                if *side < 2 {
                    return Err(Error::invalid_argument(
                        "patchwork needs side ≥ 2 so every quadrant is non-empty",
                    ));
                }
                if !tilt.iter().all(|q| q.len() == 4 && q.iter().all(|t| finite(t))) {
                    return Err(Error::invalid_argument(
                        "each class needs four quadrant tilt rows of one finite log-weight per token",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Number of full-grid states, when it fits the exact-enumeration limit.
    pub fn state_count(&self) -> Option<u64> {
        let mut n: u64 = 1;
        for _ in 0..self.cells() {
            n = n.checked_mul(self.vocab() as u64)?;
            if n > MAX_EXACT_STATES {
                return None;
            }
        }
        Some(n)
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.classes() {
            return Err(Error::invalid_argument(format!(
                "class {class} out of range ({} classes)",
                self.classes()
            )));
        }
        Ok(())
    }

    /// Unnormalized log-weight of one grid (−∞ marks zero probability).
    pub fn log_weight(&self, class: usize, tokens: &[usize]) -> Result<f64> {
        self.check_class(class)?;
        let side = self.side();
        if tokens.len() != self.cells() {
            return Err(Error::invalid_argument(format!(
                "grid of side {side} needs {} tokens, got {}",
                self.cells(),
                tokens.len()
            )));
        }
        Ok(match self {
            GridDistribution::Independent { field, .. } => {
                tokens.iter().map(|&t| field[class][t]).sum()
            }
            GridDistribution::Coupled { coupling, field, .. } => {
                let mut lw: f64 = tokens.iter().map(|&t| field[class][t]).sum();
                for y in 0..side {
                    for x in 0..side {
                        let t = tokens[y * side + x];
                        if x + 1 < side && tokens[y * side + x + 1] == t {
                            lw += coupling;
                        }
                        if y + 1 < side && tokens[(y + 1) * side + x] == t {
                            lw += coupling;
                        }
                    }
                }
                lw
            }
            GridDistribution::Patchwork { tilt, .. } => {
                let mut quad_token = [usize::MAX; 4];
                for y in 0..side {
                    for x in 0..side {
                        let q = quadrant_of(side, x, y);
                        let t = tokens[y * side + x];
                        if quad_token[q] == usize::MAX {
                            quad_token[q] = t;
                        } else if quad_token[q] != t {
                            return Ok(f64::NEG_INFINITY);
                        }
                    }
                }
                (0..4).map(|q| tilt[class][q][quad_token[q]]).sum()
            }
        })
    }
}

/// Ready-made class-conditional tasks used by experiments and tests. Classes
/// alternate which token the external field favours and scale its strength,
/// so labels carry real signal for guidance to exploit.
impl GridDistribution {
    fn signed_fields(vocab: usize, h: f64, classes: usize) -> Vec<Vec<f64>> {
        (0..classes)
            .map(|c| {
                let strength = h * (1.0 + (c / 2) as f64);
                let favored = c % vocab;
                (0..vocab)
                    .map(|t| if t == favored { strength } else { -strength })
                    .collect()
            })
            .collect()
    }

    /// Independent binary task: class c favours token `c mod 2` with field
    /// strength `h`.
    pub fn independent_binary(side: usize, h: f64, classes: usize) -> Self {
        GridDistribution::Independent {
            side,
            vocab: 2,
            field: Self::signed_fields(2, h, classes),
        }
    }

    /// Coupled binary task with nearest-neighbour coupling `j` and the same
    /// class-dependent field as [`Self::independent_binary`].
    pub fn coupled_binary(side: usize, j: f64, h: f64, classes: usize) -> Self {
        GridDistribution::Coupled {
            side,
            vocab: 2,
            coupling: j,
            field: Self::signed_fields(2, h, classes),
        }
    }

    /// Patchwork task: class c tilts quadrant q towards token `(c + q) mod
    /// vocab` with log-weight `strength`, so every class prefers a distinct
    /// colour rotation.
    pub fn patchwork_rotations(side: usize, vocab: usize, strength: f64, classes: usize) -> Self {
        let tilt = (0..classes)
            .map(|c| {
                (0..4)
                    .map(|q| {
                        (0..vocab)
                            .map(|t| if t == (c + q) % vocab { strength } else { 0.0 })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        GridDistribution::Patchwork { side, vocab, tilt }
    }
}

/// Exact probability table over all `vocab^(side²)` grids of one class.
/// State index is the base-`vocab` number whose digit at weight `vocab^i`
/// is the token of flat cell `i` (row-major; cell 0 least significant).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbTable {
    pub side: usize,
    pub vocab: usize,
    pub class: usize,
    /// Log partition function from the enumeration pass.
    pub log_z: f64,
    pub probs: Vec<f64>,
}

impl ProbTable {
    pub fn state_of(&self, tokens: &[usize]) -> usize {
        debug_assert_eq!(tokens.len(), self.side * self.side);
        tokens.iter().rev().fold(0, |acc, &t| acc * self.vocab + t)
    }

    pub fn tokens_of(&self, state: usize) -> Vec<usize> {
        let mut s = state;
        (0..self.side * self.side)
            .map(|_| {
                let t = s % self.vocab;
                s /= self.vocab;
                t
            })
            .collect()
    }
}

/// Advance a base-`vocab` odometer over token vectors; returns false after
/// the last state.
fn next_state(tokens: &mut [usize], vocab: usize) -> bool {
    for t in tokens.iter_mut() {
        *t += 1;
        if *t < vocab {
            return true;
        }
        *t = 0;
    }
    false
}

/// Compensated (Kahan) running sum.
#[derive(Debug, Clone, Copy, Default)]
struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    fn add(&mut self, x: f64) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }
}

/// Enumerate every grid state and return the normalized probability table.
/// Refuses state spaces beyond [`MAX_EXACT_STATES`] with a size report.
pub fn enumerate_exact(dist: &GridDistribution, class: usize) -> Result<ProbTable> {
    dist.validate()?;
    dist.check_class(class)?;
    let n_states = dist.state_count().ok_or_else(|| {
        let bits = (dist.cells() as f64) * (dist.vocab() as f64).log2();
        Error::invalid_argument(format!(
            "state space too large for exact enumeration: vocab {} over {} cells ≈ 2^{:.1} states (limit {})",
            dist.vocab(),
            dist.cells(),
            bits,
            MAX_EXACT_STATES
        ))
    })? as usize;

    // Pass 1: log-weights per state and their maximum.
    let mut table = vec![0.0f64; n_states];
    let mut tokens = vec![0usize; dist.cells()];
    let mut max_lw = f64::NEG_INFINITY;
    let mut s = 0usize;
    loop {
        let lw = dist.log_weight(class, &tokens)?;
        table[s] = lw;
        if lw > max_lw {
            max_lw = lw;
        }
        s += 1;
        if !next_state(&mut tokens, dist.vocab()) {
            break;
        }
    }
    debug_assert_eq!(s, n_states);
    if !max_lw.is_finite() {
        return Err(Error::invalid_state("distribution has no support"));
    }

    // Pass 2: partition function with compensated summation, then normalize.
    let mut z = KahanSum::default();
    for &lw in &table {
        z.add((lw - max_lw).exp());
    }
    let log_z = max_lw + z.sum.ln();
    for lw in &mut table {
        *lw = (*lw - log_z).exp();
    }

    let mut check = KahanSum::default();
    for &p in &table {
        check.add(p);
    }
    if (check.sum - 1.0).abs() > 1e-12 {
        return Err(Error::invalid_state(format!(
            "enumerated probabilities sum to {} (off by {:e})",
            check.sum,
            check.sum - 1.0
        )));
    }

    Ok(ProbTable { side: dist.side(), vocab: dist.vocab(), class, log_z, probs: table })
}

/// Log partition function by brute-force log-sum-exp over all states, in
/// ascending state order — an accumulation deliberately different from the
/// enumeration pass above.
pub fn log_partition_enumerated(dist: &GridDistribution, class: usize) -> Result<f64> {
    dist.validate()?;
    dist.check_class(class)?;
    if dist.state_count().is_none() {
        return Err(Error::invalid_argument("state space too large to enumerate"));
    }
    let mut lws = Vec::new();
    let mut tokens = vec![0usize; dist.cells()];
    loop {
        lws.push(dist.log_weight(class, &tokens)?);
        if !next_state(&mut tokens, dist.vocab()) {
            break;
        }
    }
    Ok(logsumexp(&lws))
}

fn logsumexp(vals: &[f64]) -> f64 {
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = vals.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Log partition function by a structure-aware factorization that never
/// visits full-grid states: a per-cell closed form for independent grids, a
/// per-quadrant closed form for patchwork, and a row transfer-matrix scan
/// for coupled grids. Serves as the independent cross-check for
/// enumeration.
pub fn log_partition_factored(dist: &GridDistribution, class: usize) -> Result<f64> {
    dist.validate()?;
    dist.check_class(class)?;
    match dist {
        GridDistribution::Independent { side, field, .. } => {
            Ok((side * side) as f64 * logsumexp(&field[class]))
        }
        GridDistribution::Patchwork { tilt, .. } => {
            Ok((0..4).map(|q| logsumexp(&tilt[class][q])).sum())
        }
        GridDistribution::Coupled { side, vocab, coupling, field } => {
            let row_states = vocab
                .checked_pow(*side as u32)
                .filter(|&n| n <= 1 << 16)
                .ok_or_else(|| {
                    Error::invalid_argument(format!(
                        "transfer-matrix scan needs vocab^side ≤ 2^16; got {vocab}^{side}"
                    ))
                })?;
            // Decode every row state once.
            let rows: Vec<Vec<usize>> = (0..row_states)
                .map(|r| {
                    let mut s = r;
                    (0..*side)
                        .map(|_| {
                            let t = s % vocab;
                            s /= vocab;
                            t
                        })
                        .collect()
                })
                .collect();
            // Within-row energy: horizontal bonds plus field terms.
            let row_lw: Vec<f64> = rows
                .iter()
                .map(|row| {
                    let mut lw: f64 = row.iter().map(|&t| field[class][t]).sum();
                    for x in 0..side - 1 {
                        if row[x] == row[x + 1] {
                            lw += coupling;
                        }
                    }
                    lw
                })
                .collect();
            // Scan rows top to bottom, accumulating log α over row states.
            let mut alpha = row_lw.clone();
            let mut scratch = vec![0.0f64; row_states];
            for _ in 1..*side {
                let mut next = vec![0.0f64; row_states];
                for (s2, next_v) in next.iter_mut().enumerate() {
                    for (s1, sc) in scratch.iter_mut().enumerate() {
                        let mut vert = 0.0;
                        for x in 0..*side {
                            if rows[s1][x] == rows[s2][x] {
                                vert += coupling;
                            }
                        }
                        *sc = alpha[s1] + vert;
                    }
                    *next_v = logsumexp(&scratch) + row_lw[s2];
                }
                alpha = next;
            }
            Ok(logsumexp(&alpha))
        }
    }
}

/// Inverse-CDF categorical draw.
fn draw_categorical(probs: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Draw `n` i.i.d. grids from an exact table by inverse CDF over the
/// cumulative state probabilities.
pub fn sample_exact(table: &ProbTable, rng: &mut ChaCha8Rng, n: usize) -> Vec<TokenGrid> {
    let mut cum = Vec::with_capacity(table.probs.len());
    let mut acc = KahanSum::default();
    for &p in &table.probs {
        acc.add(p);
        cum.push(acc.sum);
    }
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let state = cum.partition_point(|&c| c <= u).min(table.probs.len() - 1);
            TokenGrid { side: table.side, tokens: table.tokens_of(state) }
        })
        .collect()
}

/// Exact direct sampling for the factorizable kinds (independent cells,
/// patchwork quadrants) at any side. Coupled grids need [`sample_exact`]
/// or [`sample_gibbs`].
pub fn sample_direct(
    dist: &GridDistribution,
    class: usize,
    rng: &mut ChaCha8Rng,
    n: usize,
) -> Result<Vec<TokenGrid>> {
    dist.validate()?;
    dist.check_class(class)?;
    let side = dist.side();
    match dist {
        GridDistribution::Independent { field, .. } => {
            let probs = softmax(&field[class]);
            Ok((0..n)
                .map(|_| {
                    let tokens =
                        (0..side * side).map(|_| draw_categorical(&probs, rng.random())).collect();
                    TokenGrid { side, tokens }
                })
                .collect())
        }
        GridDistribution::Patchwork { tilt, .. } => {
            let probs: Vec<Vec<f64>> = (0..4).map(|q| softmax(&tilt[class][q])).collect();
            Ok((0..n)
                .map(|_| {
                    let colors: Vec<usize> =
                        probs.iter().map(|p| draw_categorical(p, rng.random())).collect();
                    let tokens = (0..side * side)
                        .map(|i| colors[quadrant_of(side, i % side, i / side)])
                        .collect();
                    TokenGrid { side, tokens }
                })
                .collect())
        }
        GridDistribution::Coupled { .. } => Err(Error::invalid_argument(
            "coupled grids have no direct sampler; use exact enumeration or Gibbs",
        )),
    }
}

/// Gibbs-sweep settings. The defaults (300 burn-in sweeps, one kept grid
/// every 5 sweeps) were chosen for nearest-neighbour couplings up to |J| ≈ 1
/// on sides up to 16; stronger couplings mix slower and need more.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GibbsConfig {
    pub burn_sweeps: usize,
    pub thin_sweeps: usize,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        GibbsConfig { burn_sweeps: 300, thin_sweeps: 5 }
    }
}

/// Single-site Gibbs sampler for the coupled (or independent) kinds: raster
/// sweeps drawing each cell from its exact conditional. Returns `n` grids
/// taken every `thin_sweeps` sweeps after `burn_sweeps` sweeps from a
/// uniform random start.
pub fn sample_gibbs(
    dist: &GridDistribution,
    class: usize,
    rng: &mut ChaCha8Rng,
    n: usize,
    config: GibbsConfig,
) -> Result<Vec<TokenGrid>> {
    dist.validate()?;
    dist.check_class(class)?;
    if config.thin_sweeps == 0 {
        return Err(Error::invalid_argument("thinning interval must be positive"));
    }
    let (side, vocab) = (dist.side(), dist.vocab());
    let (coupling, field) = match dist {
        GridDistribution::Coupled { coupling, field, .. } => (*coupling, &field[class]),
        GridDistribution::Independent { field, .. } => (0.0, &field[class]),
        GridDistribution::Patchwork { .. } => {
            return Err(Error::invalid_argument(
                "patchwork grids have an exact direct sampler; Gibbs is not supported",
            ))
        }
    };

    let mut state: Vec<usize> = (0..side * side).map(|_| rng.random_range(0..vocab)).collect();
    let mut logits = vec![0.0f64; vocab];
    let mut sweep = |state: &mut Vec<usize>, rng: &mut ChaCha8Rng| {
        for y in 0..side {
            for x in 0..side {
                for (t, l) in logits.iter_mut().enumerate() {
                    let mut bonds = 0usize;
                    if x > 0 && state[y * side + x - 1] == t {
                        bonds += 1;
                    }
                    if x + 1 < side && state[y * side + x + 1] == t {
                        bonds += 1;
                    }
                    if y > 0 && state[(y - 1) * side + x] == t {
                        bonds += 1;
                    }
                    if y + 1 < side && state[(y + 1) * side + x] == t {
                        bonds += 1;
                    }
                    *l = coupling * bonds as f64 + field[t];
                }
                let probs = softmax(&logits);
                state[y * side + x] = draw_categorical(&probs, rng.random());
            }
        }
    };

    for _ in 0..config.burn_sweeps {
        sweep(&mut state, rng);
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        for _ in 0..config.thin_sweeps {
            sweep(&mut state, rng);
        }
        out.push(TokenGrid { side, tokens: state.clone() });
    }
    Ok(out)
}

/// Empirical counts over full-grid states.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistributionEstimate {
    pub side: usize,
    pub vocab: usize,
    pub counts: Vec<u64>,
    pub n: u64,
}

impl DistributionEstimate {
    pub fn from_grids(grids: &[TokenGrid], side: usize, vocab: usize) -> Result<Self> {
        let mut n_states: u64 = 1;
        for _ in 0..side * side {
            n_states = n_states
                .checked_mul(vocab as u64)
                .filter(|&n| n <= MAX_EXACT_STATES)
                .ok_or_else(|| {
                    Error::invalid_argument("state space too large for full-grid counting")
                })?;
        }
        let mut counts = vec![0u64; n_states as usize];
        for grid in grids {
            if grid.side != side {
                return Err(Error::invalid_argument(format!(
                    "expected side {side}, got a grid of side {}",
                    grid.side
                )));
            }
            let mut state = 0usize;
            for &t in grid.tokens.iter().rev() {
                if t >= vocab {
                    return Err(Error::invalid_argument(format!(
                        "token {t} outside vocabulary of {vocab}"
                    )));
                }
                state = state * vocab + t;
            }
            counts[state] += 1;
        }
        Ok(DistributionEstimate { side, vocab, counts, n: grids.len() as u64 })
    }

    pub fn probs(&self) -> Vec<f64> {
        let n = self.n.max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }
}

/// Total variation distance ½·Σ|p − q| between two distributions given as
/// probability vectors over the same state space.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid_argument(format!(
            "state spaces differ: {} vs {} states",
            p.len(),
            q.len()
        )));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// TV between an empirical estimate and an exact table.
pub fn tv_estimate(est: &DistributionEstimate, table: &ProbTable) -> Result<f64> {
    if est.side != table.side || est.vocab != table.vocab {
        return Err(Error::invalid_argument("estimate and table shapes differ"));
    }
    tv_distance(&est.probs(), &table.probs)
}

/// Conservative 95% half-width for a proportion estimated from `n` draws:
/// 1.96·√(p(1−p)/n) maximized at p = ½, i.e. 1.96/(2√n).
pub fn binomial_ci_half_width(n: usize) -> f64 {
    if n == 0 {
        return f64::INFINITY;
    }
    1.96 / (2.0 * (n as f64).sqrt())
}

/// Marginal distributions of every overlapping 2×2 patch. Anchors (top-left
/// corners) are row-major over `(side−1)²` positions; a patch state packs
/// its four tokens as `t(x,y) + V·t(x+1,y) + V²·t(x,y+1) + V³·t(x+1,y+1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMarginals {
    pub side: usize,
    pub vocab: usize,
    pub dists: Vec<Vec<f64>>,
}

fn patch_cells(side: usize, anchor: usize) -> [usize; 4] {
    let (ax, ay) = (anchor % (side - 1), anchor / (side - 1));
    [
        ay * side + ax,
        ay * side + ax + 1,
        (ay + 1) * side + ax,
        (ay + 1) * side + ax + 1,
    ]
}

impl PatchMarginals {
    fn anchors(side: usize) -> usize {
        (side - 1) * (side - 1)
    }

    /// Empirical patch marginals from sampled grids.
    pub fn from_samples(grids: &[TokenGrid], side: usize, vocab: usize) -> Result<Self> {
        if side < 2 {
            return Err(Error::invalid_argument("patch marginals need side ≥ 2"));
        }
        if grids.is_empty() {
            return Err(Error::invalid_argument("no grids to aggregate"));
        }
        let states = vocab.pow(4);
        let mut dists = vec![vec![0.0f64; states]; Self::anchors(side)];
        for grid in grids {
            if grid.side != side {
                return Err(Error::invalid_argument(format!(
                    "expected side {side}, got a grid of side {}",
                    grid.side
                )));
            }
            for (a, dist) in dists.iter_mut().enumerate() {
                let cells = patch_cells(side, a);
                let mut state = 0usize;
                for (k, &cell) in cells.iter().enumerate() {
                    let t = grid.tokens[cell];
                    if t >= vocab {
                        return Err(Error::invalid_argument(format!(
                            "token {t} outside vocabulary of {vocab}"
                        )));
                    }
                    state += t * vocab.pow(k as u32);
                }
                dist[state] += 1.0;
            }
        }
        let n = grids.len() as f64;
        for dist in &mut dists {
            for p in dist.iter_mut() {
                *p /= n;
            }
        }
        Ok(PatchMarginals { side, vocab, dists })
    }

    /// Exact patch marginals by summing an enumerated table.
    pub fn from_table(table: &ProbTable) -> Result<Self> {
        if table.side < 2 {
            return Err(Error::invalid_argument("patch marginals need side ≥ 2"));
        }
        let (side, vocab) = (table.side, table.vocab);
        let states = vocab.pow(4);
        let mut dists = vec![vec![0.0f64; states]; Self::anchors(side)];
        let mut tokens = vec![0usize; side * side];
        let mut s = 0usize;
        loop {
            let p = table.probs[s];
            if p > 0.0 {
                for (a, dist) in dists.iter_mut().enumerate() {
                    let cells = patch_cells(side, a);
                    let mut state = 0usize;
                    for (k, &cell) in cells.iter().enumerate() {
                        state += tokens[cell] * vocab.pow(k as u32);
                    }
                    dist[state] += p;
                }
            }
            s += 1;
            if !next_state(&mut tokens, vocab) {
                break;
            }
        }
        Ok(PatchMarginals { side, vocab, dists })
    }

    /// Exact patch marginals at any side for the kinds that factor over
    /// independent choices: per-cell categoricals (independent) and
    /// per-quadrant colour categoricals (patchwork). Coupled grids need an
    /// enumerated table or sampled reference.
    pub fn from_factored(dist: &GridDistribution, class: usize) -> Result<Self> {
        dist.validate()?;
        dist.check_class(class)?;
        let (side, vocab) = (dist.side(), dist.vocab());
        if side < 2 {
            return Err(Error::invalid_argument("patch marginals need side ≥ 2"));
        }
        let states = vocab.pow(4);
        match dist {
            GridDistribution::Independent { field, .. } => {
                // Every anchor shares the same product-of-cells marginal.
                let cell = softmax(&field[class]);
                let mut marginal = vec![0.0f64; states];
                let mut choice = vec![0usize; 4];
                loop {
                    let prob: f64 = choice.iter().map(|&t| cell[t]).product();
                    let mut state = 0usize;
                    for (k, &t) in choice.iter().enumerate() {
                        state += t * vocab.pow(k as u32);
                    }
                    marginal[state] += prob;
                    if !next_state(&mut choice, vocab) {
                        break;
                    }
                }
                Ok(PatchMarginals {
                    side,
                    vocab,
                    dists: vec![marginal; Self::anchors(side)],
                })
            }
            GridDistribution::Patchwork { tilt, .. } => {
                let quad_probs: Vec<Vec<f64>> = (0..4).map(|q| softmax(&tilt[class][q])).collect();
                let mut dists = Vec::with_capacity(Self::anchors(side));
                for a in 0..Self::anchors(side) {
                    let cells = patch_cells(side, a);
                    let quads: Vec<usize> = cells
                        .iter()
                        .map(|&cell| quadrant_of(side, cell % side, cell / side))
                        .collect();
                    let mut distinct: Vec<usize> = quads.clone();
                    distinct.sort_unstable();
                    distinct.dedup();
                    let mut marginal = vec![0.0f64; states];
                    // Enumerate colour choices of the quadrants this patch
                    // touches.
                    let mut choice = vec![0usize; distinct.len()];
                    loop {
                        let mut prob = 1.0;
                        for (i, &q) in distinct.iter().enumerate() {
                            prob *= quad_probs[q][choice[i]];
                        }
                        let mut state = 0usize;
                        for (k, &q) in quads.iter().enumerate() {
                            let idx = distinct.iter().position(|&d| d == q).unwrap();
                            state += choice[idx] * vocab.pow(k as u32);
                        }
                        marginal[state] += prob;
                        if !next_state(&mut choice, vocab) {
                            break;
                        }
                    }
                    dists.push(marginal);
                }
                Ok(PatchMarginals { side, vocab, dists })
            }
            GridDistribution::Coupled { .. } => Err(Error::invalid_argument(
                "coupled grids do not factor; use an enumerated table or a sampled reference",
            )),
        }
    }
}

/// Mean over anchors of the per-patch TV distance.
pub fn mean_patch_tv(a: &PatchMarginals, b: &PatchMarginals) -> Result<f64> {
    if a.side != b.side || a.vocab != b.vocab {
        return Err(Error::invalid_argument("patch marginal shapes differ"));
    }
    let mut total = 0.0;
    for (pa, pb) in a.dists.iter().zip(&b.dists) {
        total += tv_distance(pa, pb)?;
    }
    Ok(total / a.dists.len() as f64)
}
