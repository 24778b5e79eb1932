//! Blockwise-parallel generation with staged classifier-free guidance.
//!
//! Scales are generated coarse to fine; within a scale, blocks run
//! sequentially; within a block, every token is drawn independently from its
//! own softmax. Guidance runs a second, null-class chain over the same
//! sampled tokens and extrapolates its logits; the leading warmup steps
//! sample from the unconditional chain outright so guidance cannot collapse
//! the global layout.
//!
//! Two samplers share all probability handling: the production path keeps
//! per-layer rotated-key/value caches and touches only the new block's rows,
//! while the reference path re-runs the full teacher-forced forward pass per
//! block. Every per-row operation matches the training forward pass exactly,
//! so the two paths — and training itself — agree bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{BlockCausalMask, SequenceLayout};
use crate::model::{
    embed_token_row, forward_train, gelu, layer_norm_row, linear, modulate_row, softmax_row,
    ModelParams, SequenceMeta, Source, TrainingBatch,
};
use crate::resample::TokenGrid;
use crate::scalar::Scalar;
use crate::schedule::BlockPartition;
use crate::tensor::{dot, matmul, Mat};
use crate::train::layout_bundle;

/// Sampling-run settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Blocks per scale (capped at each scale's cell count).
    pub parallelism: usize,
    /// Guidance strength s in `uncond + s·(cond − uncond)`.
    #[serde(default = "default_cfg_scale")]
    pub cfg_scale: f64,
    /// Leading steps sampled unconditionally (guidance off). `None` uses the
    /// schedule's default: every block of the scales with side ≤ 2.
    #[serde(default)]
    pub cfg_warmup_steps: Option<usize>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    pub seed: u64,
}

fn default_cfg_scale() -> f64 {
    1.0
}

fn default_temperature() -> f64 {
    1.0
}

/// Default guidance warmup: one step per block of the coarse scales
/// (side ≤ 2). For the ×2 schedule at parallelism 4 this is 5 steps.
pub fn default_warmup_steps(partition: &BlockPartition) -> usize {
    partition
        .sizes
        .iter()
        .zip(&partition.steps_per_scale)
        .filter(|(&side, _)| side <= 2)
        .map(|(_, &steps)| steps)
        .sum()
}

/// `out = uncond + s·(cond − uncond)`; during warmup the scale is treated as
/// zero, which reduces to the unconditional logits.
pub fn apply_cfg<F: Scalar>(
    cond: &[F],
    uncond: &[F],
    scale: F,
    in_warmup: bool,
    out: &mut [F],
) -> Result<()> {
    if cond.len() != uncond.len() || out.len() != cond.len() {
        return Err(Error::invalid_argument("guidance logit rows differ in shape"));
    }
    let s = if in_warmup { F::zero() } else { scale };
    for i in 0..cond.len() {
        out[i] = uncond[i] + s * (cond[i] - uncond[i]);
    }
    Ok(())
}

/// One sampled token with the entropy of the multinomial it was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    /// Global generation step (0-based; the class slot is not a step).
    pub step: usize,
    pub scale: usize,
    pub block: usize,
    pub x: usize,
    pub y: usize,
    pub token: usize,
    /// Entropy of the sampling distribution, in nats.
    pub entropy: f64,
}

/// Per-token record of one generation run, in generation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub records: Vec<TokenRecord>,
}

impl SampleTrace {
    pub fn total_steps(&self) -> usize {
        self.records.iter().map(|r| r.step + 1).max().unwrap_or(0)
    }
}

/// Aggregated entropy of one generation step over many traces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepAggregate {
    pub step: usize,
    pub mean: f64,
    pub p25: f64,
    pub p75: f64,
}

/// Nearest-rank percentile: the smallest element whose cumulative share
/// reaches `q`.
fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let idx = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
    sorted[idx]
}

/// Per-step mean and quartiles of token entropy across traces.
pub fn entropy_trace(traces: &[SampleTrace]) -> Result<Vec<StepAggregate>> {
    if traces.is_empty() {
        return Err(Error::invalid_argument("no traces to aggregate"));
    }
    let steps = traces.iter().map(|t| t.total_steps()).max().unwrap_or(0);
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); steps];
    for trace in traces {
        for r in &trace.records {
            buckets[r.step].push(r.entropy);
        }
    }
    Ok(buckets
        .into_iter()
        .enumerate()
        .map(|(step, mut vals)| {
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
            StepAggregate {
                step,
                mean,
                p25: nearest_rank(&vals, 0.25),
                p75: nearest_rank(&vals, 0.75),
            }
        })
        .collect())
}

/// Mean entropy per grid position at one scale, averaged across traces.
/// Returned row-major as `side × side` values.
pub fn entropy_map(traces: &[SampleTrace], scale: usize, side: usize) -> Result<Vec<f64>> {
    if traces.is_empty() {
        return Err(Error::invalid_argument("no traces to aggregate"));
    }
    let mut sums = vec![0.0f64; side * side];
    let mut counts = vec![0usize; side * side];
    for trace in traces {
        for r in trace.records.iter().filter(|r| r.scale == scale) {
            if r.x >= side || r.y >= side {
                return Err(Error::invalid_argument("record outside the requested grid"));
            }
            sums[r.y * side + r.x] += r.entropy;
            counts[r.y * side + r.x] += 1;
        }
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::invalid_argument(format!(
            "scale {scale} is not fully covered by the traces"
        )));
    }
    Ok(sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect())
}

/// Render aggregates as the entropy CSV emitted by the CLI.
pub fn entropy_csv(rows: &[StepAggregate]) -> String {
    let mut out = String::from("step,mean,p25,p75\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.mean, r.p25, r.p75));
    }
    out
}

/// Guided sampling distribution for one token: CFG combine, then
/// temperature, then softmax. Returns the probabilities and their entropy.
fn sampling_probs<F: Scalar>(
    cond: &[F],
    uncond: &[F],
    cfg_scale: F,
    in_warmup: bool,
    temperature: F,
) -> Result<(Vec<F>, F)> {
    let mut row = vec![F::zero(); cond.len()];
    apply_cfg(cond, uncond, cfg_scale, in_warmup, &mut row)?;
    if temperature != F::one() {
        for v in &mut row {
            *v /= temperature;
        }
    }
    softmax_row(&mut row);
    let mut entropy = F::zero();
    for &p in &row {
        if p > F::zero() {
            entropy -= p * p.ln();
        }
    }
    Ok((row, entropy))
}

/// Inverse-CDF draw from a probability row.
fn draw_token<F: Scalar>(probs: &[F], u: F) -> usize {
    let mut cum = F::zero();
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}

/// The uniform used for one token: an independent stream per (grid, slot),
/// so tokens inside a block can be drawn in any order — or concurrently —
/// without changing the result.
fn token_uniform<F: Scalar>(seed: u64, grid_index: u64, flat: usize) -> F {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((grid_index << 32) | flat as u64);
    F::from_f64(rng.random::<f64>())
}

/// Incremental per-chain transformer state: conditioned-norm vectors and the
/// rotated-key/value cache of every layer.
struct Chain<F> {
    label: usize,
    ada: Vec<Mat<F>>,
    final_ada: Mat<F>,
    k_cache: Vec<Mat<F>>,
    v_cache: Vec<Mat<F>>,
}

impl<F: Scalar> Chain<F> {
    fn new(params: &ModelParams<F>, label: usize, seq_len: usize) -> Self {
        let d = params.config.dim;
        let cls = Mat::from_vec(1, d, params.class_embed.row(label).to_vec());
        let ada = params
            .layers
            .iter()
            .map(|layer| {
                let mut m = Mat::zeros(1, 4 * d);
                linear(&mut m, &cls, &layer.w_ada, Some(&layer.b_ada));
                m
            })
            .collect();
        let mut final_ada = Mat::zeros(1, 2 * d);
        linear(&mut final_ada, &cls, &params.final_ada_w, Some(&params.final_ada_b));
        let layers = params.config.layers;
        Chain {
            label,
            ada,
            final_ada,
            k_cache: (0..layers).map(|_| Mat::zeros(seq_len, d)).collect(),
            v_cache: (0..layers).map(|_| Mat::zeros(seq_len, d)).collect(),
        }
    }
}

/// Blockwise sampler over a fixed parameter snapshot.
pub struct Sampler<'p, F: Scalar> {
    params: &'p ModelParams<F>,
    layout: SequenceLayout,
    mask: BlockCausalMask,
    meta: SequenceMeta,
    config: SamplerConfig,
    warmup: usize,
}

impl<'p, F: Scalar> Sampler<'p, F> {
    pub fn new(params: &'p ModelParams<F>, config: SamplerConfig) -> Result<Self> {
        if config.parallelism == 0 {
            return Err(Error::invalid_argument("parallelism must be positive"));
        }
        if !(config.cfg_scale.is_finite() && config.cfg_scale >= 0.0) {
            return Err(Error::invalid_argument("cfg scale must be finite and ≥ 0"));
        }
        if !(config.temperature.is_finite() && config.temperature > 0.0) {
            return Err(Error::invalid_argument("temperature must be positive"));
        }
        let bundle = layout_bundle(&params.config, config.parallelism)?;
        let total = bundle.layout.partition.total_steps();
        let warmup = config
            .cfg_warmup_steps
            .unwrap_or_else(|| default_warmup_steps(&bundle.layout.partition));
        if warmup > total {
            return Err(Error::invalid_argument(format!(
                "warmup {warmup} exceeds the {total} total steps"
            )));
        }
        Ok(Sampler {
            params,
            layout: bundle.layout,
            mask: bundle.mask,
            meta: bundle.meta,
            config,
            warmup,
        })
    }

    pub fn layout(&self) -> &SequenceLayout {
        &self.layout
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn total_steps(&self) -> usize {
        self.layout.partition.total_steps()
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup
    }

    fn check_label(&self, label: usize) -> Result<bool> {
        let null = self.params.config.null_class();
        if label > null {
            return Err(Error::invalid_argument(format!(
                "label {label} out of range (null class is {null})"
            )));
        }
        // A second chain is pointless when the guided logits always equal the
        // conditional ones (s = 1, no warmup) or the two chains coincide.
        Ok(label != null && !(self.config.cfg_scale == 1.0 && self.warmup == 0))
    }

    /// Empty per-scale grids and embedded-code buffers.
    fn fresh_state(&self) -> (Vec<TokenGrid>, Vec<Mat<F>>) {
        let d = self.params.config.dim;
        let grids: Vec<TokenGrid> =
            self.layout.sizes.iter().map(|&side| TokenGrid::filled(side, 0)).collect();
        let embeds: Vec<Mat<F>> =
            self.layout.sizes.iter().map(|&side| Mat::zeros(side * side, d)).collect();
        (grids, embeds)
    }

    /// Conditioning channels for the grid slots `range`, identical to the
    /// training-time input builder but reading the sampled grids.
    fn input_rows(
        &self,
        range: std::ops::Range<usize>,
        embeds: &[Mat<F>],
        chain_label: usize,
    ) -> Mat<F> {
        let params = self.params;
        let d = params.config.dim;
        let mut concat = Mat::zeros(range.len(), 4 * d);
        for (i, t) in range.clone().enumerate() {
            if t == 0 {
                continue; // the class slot is overwritten below
            }
            let tok = &self.meta.tokens[t - 1];
            let row = concat.row_mut(i);
            match tok.zup {
                Source::Start => row[..d].copy_from_slice(&params.z0.data),
                Source::Cell { scale, cell } => {
                    row[..d].copy_from_slice(embeds[scale].row(cell))
                }
            }
            match tok.zprev {
                Source::Start => row[d..2 * d].copy_from_slice(&params.z0.data),
                Source::Cell { scale, cell } => {
                    row[d..2 * d].copy_from_slice(embeds[scale].row(cell))
                }
            }
            let (s, cell) = tok.pos_cur;
            row[2 * d..3 * d].copy_from_slice(params.pos.tables[s].row(cell));
            match tok.pos_prev {
                Source::Start => row[3 * d..].copy_from_slice(&params.pos0.data),
                Source::Cell { scale, cell } => {
                    row[3 * d..].copy_from_slice(params.pos.tables[scale].row(cell))
                }
            }
        }
        let mut x = Mat::zeros(range.len(), d);
        linear(&mut x, &concat, &params.w_proj, Some(&params.b_proj));
        if range.start == 0 {
            x.row_mut(0).copy_from_slice(params.class_embed.row(chain_label));
        }
        x
    }

    /// Run the new rows `range` through every layer, extending the chain's
    /// caches, and return their logits. Row operations replicate the
    /// training forward pass exactly.
    fn advance_chain(&self, chain: &mut Chain<F>, range: std::ops::Range<usize>, x0: Mat<F>) -> Mat<F> {
        let params = self.params;
        let config = &params.config;
        let d = config.dim;
        let heads = config.heads;
        let hd = config.head_dim();
        let rows = range.len();
        let inv_sqrt_hd = F::from_f64(1.0 / (hd as f64).sqrt());
        let split = &params.rope_split;
        let freqs = &params.rope_freqs.data;

        let mut x = x0;
        for (l, layer) in params.layers.iter().enumerate() {
            let mut y1 = Mat::zeros(rows, d);
            for i in 0..rows {
                layer_norm_row(x.row(i), y1.row_mut(i));
            }
            let ada_l = &chain.ada[l].data;
            let (g1, s1) = (&ada_l[..d], &ada_l[d..2 * d]);
            let mut xt1 = Mat::zeros(rows, d);
            for i in 0..rows {
                modulate_row(y1.row(i), g1, s1, xt1.row_mut(i));
            }

            let mut q = Mat::zeros(rows, d);
            let mut k = Mat::zeros(rows, d);
            let mut v = Mat::zeros(rows, d);
            matmul(&mut q, &xt1, &layer.wq);
            matmul(&mut k, &xt1, &layer.wk);
            matmul(&mut v, &xt1, &layer.wv);

            // Fill the caches for the whole block before any query reads
            // them: tokens of one block see each other.
            let mut q_rot = q.clone();
            for i in 0..rows {
                let t = range.start + i;
                let (cur, prev) = self.meta.coords[t];
                for h in 0..heads {
                    let span = h * hd..(h + 1) * hd;
                    crate::rope::rotate(split, freqs, cur, &mut q_rot.row_mut(i)[span.clone()]);
                    let dst = &mut chain.k_cache[l].row_mut(t)[span.clone()];
                    if l < config.mix_layers {
                        let logit = params.mix.logit(l, h);
                        crate::rope::rotate_mixed(
                            split,
                            freqs,
                            cur,
                            prev,
                            logit,
                            &k.row(i)[span.clone()],
                            dst,
                        );
                    } else {
                        dst.copy_from_slice(&k.row(i)[span.clone()]);
                        crate::rope::rotate(split, freqs, cur, dst);
                    }
                }
                chain.v_cache[l].row_mut(t).copy_from_slice(v.row(i));
            }

            let mut att_cat = Mat::zeros(rows, d);
            let mut scores: Vec<F> = Vec::new();
            for h in 0..heads {
                let span = h * hd..(h + 1) * hd;
                for i in 0..rows {
                    let t = range.start + i;
                    let end = self.mask.visible_end(t);
                    scores.clear();
                    scores.resize(end, F::zero());
                    let qrow = &q_rot.row(i)[span.clone()];
                    for (kk, sc) in scores.iter_mut().enumerate() {
                        *sc = dot(qrow, &chain.k_cache[l].row(kk)[span.clone()]) * inv_sqrt_hd;
                    }
                    softmax_row(&mut scores);
                    let out = &mut att_cat.row_mut(i)[span.clone()];
                    for (kk, &w) in scores.iter().enumerate() {
                        let vrow = &chain.v_cache[l].row(kk)[span.clone()];
                        for (o, &vv) in out.iter_mut().zip(vrow) {
                            *o += w * vv;
                        }
                    }
                }
            }

            let mut x_mid = Mat::zeros(rows, d);
            matmul(&mut x_mid, &att_cat, &layer.wo);
            x_mid.add_assign(&x);

            let mut y2 = Mat::zeros(rows, d);
            for i in 0..rows {
                layer_norm_row(x_mid.row(i), y2.row_mut(i));
            }
            let (g2, s2) = (&ada_l[2 * d..3 * d], &ada_l[3 * d..]);
            let mut xt2 = Mat::zeros(rows, d);
            for i in 0..rows {
                modulate_row(y2.row(i), g2, s2, xt2.row_mut(i));
            }
            let mut m1 = Mat::zeros(rows, config.mlp_dim());
            linear(&mut m1, &xt2, &layer.fc1, Some(&layer.b_fc1));
            let mut g = m1;
            g.data.iter_mut().for_each(|z| *z = gelu(*z));
            let mut mlp_out = Mat::zeros(rows, d);
            linear(&mut mlp_out, &g, &layer.fc2, Some(&layer.b_fc2));
            let mut x_out = x_mid;
            x_out.add_assign(&mlp_out);
            x = x_out;
        }

        let mut yf = Mat::zeros(rows, d);
        for i in 0..rows {
            layer_norm_row(x.row(i), yf.row_mut(i));
        }
        let (gf, sf) = (&chain.final_ada.data[..d], &chain.final_ada.data[d..]);
        let mut xtf = Mat::zeros(rows, d);
        for i in 0..rows {
            modulate_row(yf.row(i), gf, sf, xtf.row_mut(i));
        }
        let mut logits = Mat::zeros(rows, config.vocab);
        matmul(&mut logits, &xtf, &params.head);
        logits
    }

    /// Draw one grid (finest scale) and its trace using the cached path.
    pub fn sample(&self, label: usize, grid_index: u64) -> Result<(TokenGrid, SampleTrace)> {
        let needs_uncond = self.check_label(label)?;
        let params = self.params;
        let null = params.config.null_class();
        let seq_len = self.layout.seq_len;
        let (mut grids, mut embeds) = self.fresh_state();
        let mut cond = Chain::new(params, label, seq_len);
        let mut uncond = needs_uncond.then(|| Chain::new(params, null, seq_len));
        let mut records = Vec::with_capacity(seq_len - 1);

        for (b, block) in self.layout.block_ranges.clone().iter().enumerate() {
            let x_cond = self.input_rows(block.clone(), &embeds, cond.label);
            let cond_logits = self.advance_chain(&mut cond, block.clone(), x_cond);
            let uncond_logits = uncond.as_mut().map(|chain| {
                let x_un = self.input_rows(block.clone(), &embeds, chain.label);
                self.advance_chain(chain, block.clone(), x_un)
            });
            if b == 0 {
                continue; // class slot: nothing to sample
            }
            let step = b - 1;
            self.sample_block(
                step,
                block.clone(),
                &cond_logits,
                uncond_logits.as_ref(),
                grid_index,
                &mut grids,
                &mut embeds,
                &mut records,
            )?;
        }

        Ok((grids.pop().unwrap(), SampleTrace { records }))
    }

    /// Reference implementation: no caches — every block re-runs the full
    /// teacher-forced forward pass on the grids sampled so far (placeholder
    /// zeros beyond the frontier never influence earlier logits; that is the
    /// block-causality property). Used to pin the cached path bit-for-bit.
    pub fn sample_reference(&self, label: usize, grid_index: u64) -> Result<(TokenGrid, SampleTrace)> {
        let needs_uncond = self.check_label(label)?;
        let params = self.params;
        let null = params.config.null_class();
        let (mut grids, mut embeds) = self.fresh_state();
        let mut records = Vec::with_capacity(self.layout.seq_len - 1);

        for (b, block) in self.layout.block_ranges.clone().iter().enumerate() {
            if b == 0 {
                continue;
            }
            let batch = TrainingBatch { label, grids: grids.clone() };
            let trace =
                forward_train(params, &self.layout, &self.mask, &self.meta, &batch)?;
            let cond_rows = rows_of(&trace.logits, block.clone());
            let uncond_rows = if needs_uncond {
                let batch = TrainingBatch { label: null, grids: grids.clone() };
                let trace =
                    forward_train(params, &self.layout, &self.mask, &self.meta, &batch)?;
                Some(rows_of(&trace.logits, block.clone()))
            } else {
                None
            };
            self.sample_block(
                b - 1,
                block.clone(),
                &cond_rows,
                uncond_rows.as_ref(),
                grid_index,
                &mut grids,
                &mut embeds,
                &mut records,
            )?;
        }

        Ok((grids.pop().unwrap(), SampleTrace { records }))
    }

    #[allow(clippy::too_many_arguments)]
    fn sample_block(
        &self,
        step: usize,
        block: std::ops::Range<usize>,
        cond_logits: &Mat<F>,
        uncond_logits: Option<&Mat<F>>,
        grid_index: u64,
        grids: &mut [TokenGrid],
        embeds: &mut [Mat<F>],
        records: &mut Vec<TokenRecord>,
    ) -> Result<()> {
        let in_warmup = step < self.warmup;
        let cfg = F::from_f64(self.config.cfg_scale);
        let temp = F::from_f64(self.config.temperature);
        for (i, t) in block.enumerate() {
            let cond_row = cond_logits.row(i);
            let uncond_row = uncond_logits.map_or(cond_row, |m| m.row(i));
            let (probs, entropy) = sampling_probs(cond_row, uncond_row, cfg, in_warmup, temp)?;
            let u: F = token_uniform(self.config.seed, grid_index, t);
            let token = draw_token(&probs, u);

            let entry = self.layout.entry(t);
            let (scale, cell) = self.meta.tokens[t - 1].target;
            grids[scale].tokens[cell] = token;
            embed_token_row(self.params, token, embeds[scale].row_mut(cell));
            records.push(TokenRecord {
                step,
                scale,
                block: entry.block,
                x: entry.pos.x,
                y: entry.pos.y,
                token,
                entropy: entropy.into_f64(),
            });
        }
        Ok(())
    }

    /// Sample `count` grids with grid indices `0..count`.
    pub fn sample_many(
        &self,
        label: usize,
        count: usize,
    ) -> Result<(Vec<TokenGrid>, Vec<SampleTrace>)> {
        let mut grids = Vec::with_capacity(count);
        let mut traces = Vec::with_capacity(count);
        for g in 0..count {
            let (grid, trace) = self.sample(label, g as u64)?;
            grids.push(grid);
            traces.push(trace);
        }
        Ok((grids, traces))
    }
}

fn rows_of<F: Scalar>(m: &Mat<F>, range: std::ops::Range<usize>) -> Mat<F> {
    let mut out = Mat::zeros(range.len(), m.cols);
    for (i, t) in range.enumerate() {
        out.row_mut(i).copy_from_slice(m.row(t));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::schedule::{make_schedule, partition_blocks, RatioTag};

    fn test_config() -> ModelConfig {
        ModelConfig {
            layers: 2,
            dim: 16,
            heads: 2,
            vocab: 4,
            classes: 2,
            embed_dim: 6,
            mlp_factor: 2,
            mix_layers: 1,
            ratio: RatioTag::X2,
            side: 4,
        }
    }

    fn random_params(seed: u64) -> ModelParams<f64> {
        let mut p = ModelParams::init(&test_config(), seed).unwrap();
        p.randomize_all(seed ^ 0xbeef, 0.25);
        p
    }

    #[test]
    fn cfg_conventions() {
        let cond = [1.0f64, 2.0, 3.0];
        let uncond = [0.0, 1.0, -1.0];
        let mut out = [0.0; 3];
        apply_cfg(&cond, &uncond, 1.0, false, &mut out).unwrap();
        assert_eq!(out, cond);
        apply_cfg(&cond, &uncond, 0.0, false, &mut out).unwrap();
        assert_eq!(out, uncond);
        apply_cfg(&cond, &uncond, 7.5, true, &mut out).unwrap();
        assert_eq!(out, uncond, "warmup must force the unconditional logits");
        apply_cfg(&cond, &uncond, 2.0, false, &mut out).unwrap();
        assert_eq!(out, [2.0, 3.0, 7.0]);
        assert!(apply_cfg(&cond, &uncond[..2], 1.0, false, &mut out).is_err());
    }

    #[test]
    fn warmup_covers_the_coarse_scales() {
        let schedule = make_schedule(RatioTag::X2, 16).unwrap();
        let partition = partition_blocks(&schedule, 4).unwrap();
        assert_eq!(default_warmup_steps(&partition), 5);
        let single = partition_blocks(&make_schedule(RatioTag::Single, 16).unwrap(), 1).unwrap();
        assert_eq!(default_warmup_steps(&single), 0);
    }

    #[test]
    fn cached_sampler_matches_reference_bit_for_bit() {
        let params = random_params(31);
        for (p, cfg_scale, temp) in [(1, 1.5, 1.0), (2, 1.5, 0.9), (4, 0.7, 1.3), (16, 1.0, 1.0)]
        {
            let sampler = Sampler::new(
                &params,
                SamplerConfig {
                    parallelism: p,
                    cfg_scale,
                    cfg_warmup_steps: None,
                    temperature: temp,
                    seed: 99,
                },
            )
            .unwrap();
            let (fast, fast_trace) = sampler.sample(1, 3).unwrap();
            let (slow, slow_trace) = sampler.sample_reference(1, 3).unwrap();
            assert_eq!(fast.tokens, slow.tokens, "grids diverge at P={p}");
            assert_eq!(fast_trace, slow_trace, "traces diverge at P={p}");
        }
    }

    #[test]
    fn sampling_is_deterministic_and_label_sensitive() {
        let params = random_params(5);
        let sampler = Sampler::new(
            &params,
            SamplerConfig {
                parallelism: 4,
                cfg_scale: 1.0,
                cfg_warmup_steps: Some(1),
                temperature: 1.0,
                seed: 123,
            },
        )
        .unwrap();
        let (a, ta) = sampler.sample(0, 0).unwrap();
        let (b, tb) = sampler.sample(0, 0).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(ta, tb);
        let (c, _) = sampler.sample(0, 1).unwrap();
        assert_ne!(a.tokens, c.tokens, "different grid indices reuse the same stream");
        let (d, _) = sampler.sample(1, 0).unwrap();
        assert_ne!(a.tokens, d.tokens, "labels do not influence sampling");
    }

    #[test]
    fn zero_head_gives_uniform_entropy() {
        // Freshly initialized parameters keep the output head at zero, so
        // every sampling distribution is exactly uniform.
        let params: ModelParams<f64> = ModelParams::init(&test_config(), 8).unwrap();
        let sampler = Sampler::new(
            &params,
            SamplerConfig {
                parallelism: 2,
                cfg_scale: 2.0,
                cfg_warmup_steps: None,
                temperature: 1.0,
                seed: 5,
            },
        )
        .unwrap();
        let (_, trace) = sampler.sample(0, 0).unwrap();
        let ln_v = (test_config().vocab as f64).ln();
        for r in &trace.records {
            assert!((r.entropy - ln_v).abs() < 1e-12, "entropy {} ≠ ln V", r.entropy);
        }
    }

    #[test]
    fn trace_covers_every_cell_once() {
        let params = random_params(17);
        let sampler = Sampler::new(
            &params,
            SamplerConfig {
                parallelism: 4,
                cfg_scale: 1.0,
                cfg_warmup_steps: None,
                temperature: 1.0,
                seed: 2,
            },
        )
        .unwrap();
        let (grid, trace) = sampler.sample(2, 0).unwrap(); // null class: unconditional
        assert_eq!(grid.side, 4);
        assert_eq!(trace.records.len(), sampler.layout().seq_len - 1);
        assert_eq!(trace.total_steps(), sampler.total_steps());
        // Final-scale records reproduce the returned grid.
        for r in trace.records.iter().filter(|r| r.scale == 2) {
            assert_eq!(grid.tokens[r.y * 4 + r.x], r.token);
        }
        // Steps are non-decreasing along the generation order.
        for w in trace.records.windows(2) {
            assert!(w[0].step <= w[1].step);
        }
    }

    #[test]
    fn entropy_aggregates_and_map() {
        let mk = |vals: &[(usize, f64)]| SampleTrace {
            records: vals
                .iter()
                .map(|&(step, entropy)| TokenRecord {
                    step,
                    scale: 0,
                    block: 0,
                    x: 0,
                    y: 0,
                    token: 0,
                    entropy,
                })
                .collect(),
        };
        let single = mk(&[(0, 0.5), (1, 0.25)]);
        let agg = entropy_trace(std::slice::from_ref(&single)).unwrap();
        assert_eq!(agg.len(), 2);
        assert_eq!((agg[0].mean, agg[0].p25, agg[0].p75), (0.5, 0.5, 0.5));
        assert_eq!(agg[1].mean, 0.25);

        // Nearest-rank quartiles of {1,2,3,4}: p25 = 1, p75 = 3.
        let four = [
            mk(&[(0, 2.0)]),
            mk(&[(0, 4.0)]),
            mk(&[(0, 1.0)]),
            mk(&[(0, 3.0)]),
        ];
        let agg = entropy_trace(&four).unwrap();
        assert_eq!((agg[0].p25, agg[0].p75), (1.0, 3.0));
        assert!(entropy_trace(&[]).is_err());

        let trace = SampleTrace {
            records: vec![
                TokenRecord { step: 0, scale: 0, block: 0, x: 0, y: 0, token: 0, entropy: 0.1 },
                TokenRecord { step: 0, scale: 0, block: 0, x: 1, y: 0, token: 0, entropy: 0.3 },
                TokenRecord { step: 1, scale: 0, block: 1, x: 0, y: 1, token: 0, entropy: 0.5 },
                TokenRecord { step: 1, scale: 0, block: 1, x: 1, y: 1, token: 0, entropy: 0.7 },
            ],
        };
        let map = entropy_map(std::slice::from_ref(&trace), 0, 2).unwrap();
        assert_eq!(map, vec![0.1, 0.3, 0.5, 0.7]);
        assert!(entropy_map(std::slice::from_ref(&trace), 1, 2).is_err());
    }

    #[test]
    fn fully_sequential_equals_one_token_blocks() {
        // P beyond every scale's cell count degenerates to one token per
        // step; the sampler must accept it and emit strictly ordered steps.
        let params = random_params(23);
        let sampler = Sampler::new(
            &params,
            SamplerConfig {
                parallelism: 1usize << 30,
                cfg_scale: 1.0,
                cfg_warmup_steps: None,
                temperature: 1.0,
                seed: 77,
            },
        )
        .unwrap();
        assert_eq!(sampler.total_steps(), 1 + 4 + 16);
        let (_, trace) = sampler.sample(0, 0).unwrap();
        let steps: Vec<usize> = trace.records.iter().map(|r| r.step).collect();
        let expect: Vec<usize> = (0..21).collect();
        assert_eq!(steps, expect);
    }
}
