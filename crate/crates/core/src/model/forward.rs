//! Teacher-forced forward pass.
//!
//! The pass runs in four stages: (1) embed every ground-truth grid cell and
//! lift it through the unfold MLP, (2) assemble per-token inputs from the
//! four conditioning channels and project them to the model width, (3) run
//! the pre-norm transformer layers with conditioned layer norms and
//! block-causal attention with rotary coordinates, (4) read logits off the
//! final norm and score the mean cross-entropy over all grid tokens.
//!
//! Every intermediate needed by the backward pass is collected in a
//! [`ForwardTrace`].

use crate::error::{Error, Result};
use crate::layout::{BlockCausalMask, SequenceLayout};
use crate::resample::upsample_index_map;
use crate::rope::{self, RopeCoord};
use crate::scalar::Scalar;
use crate::tensor::{dot, matmul, Mat};

use super::{ModelParams, TrainingBatch};

pub(crate) const LN_EPS: f64 = 1e-6;

/// Where a conditioning channel reads its vector from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    /// The learned start constant (`z0` for code channels, `pos0` for the
    /// position channel).
    Start,
    /// A cell of a scale grid, `cell = y · side + x`.
    Cell { scale: usize, cell: usize },
}

/// Per-token conditioning plan derived from the layout alone.
#[derive(Debug, Clone)]
pub struct TokenMeta {
    pub cur: RopeCoord,
    pub prev: RopeCoord,
    /// Code channel from the coarser scale at the matching cell.
    pub zup: Source,
    /// Code channel from the predecessor block's rank-mate.
    pub zprev: Source,
    /// Position channel of the token's own cell, `(scale, cell)`.
    pub pos_cur: (usize, usize),
    /// Position channel of the rank-mate.
    pub pos_prev: Source,
    /// Ground-truth target, `(scale, cell)`.
    pub target: (usize, usize),
}

/// Conditioning plan for a whole sequence.
#[derive(Debug, Clone)]
pub struct SequenceMeta {
    pub seq_len: usize,
    /// Plans for flat slots `1..seq_len`.
    pub tokens: Vec<TokenMeta>,
    /// Rotary coordinates (current, predecessor) per flat slot, the class
    /// slot at index 0 using all-zero coordinates.
    pub coords: Vec<(RopeCoord, RopeCoord)>,
}

impl SequenceMeta {
    pub fn build(layout: &SequenceLayout) -> Self {
        let up_maps: Vec<Vec<usize>> = layout
            .sizes
            .windows(2)
            .map(|w| upsample_index_map(w[0], w[1]))
            .collect();
        let mut tokens = Vec::with_capacity(layout.seq_len - 1);
        let mut coords = vec![(RopeCoord::ZERO, RopeCoord::ZERO)];
        for entry in &layout.entries {
            let s = entry.scale;
            let side = layout.sizes[s];
            let cell = entry.pos.y * side + entry.pos.x;
            let cur = RopeCoord::new(entry.pos, s);
            let (prev, zprev, pos_prev) = if entry.block == 0 {
                (cur, Source::Start, Source::Start)
            } else {
                let blocks = &layout.partition.blocks[s];
                let within = entry.rank - blocks[entry.block].start;
                let prev_range = &blocks[entry.block - 1];
                let prev_rank = prev_range.start + within.min(prev_range.len() - 1);
                let ppos = layout.orders[s].positions[prev_rank];
                let pcell = ppos.y * side + ppos.x;
                (
                    RopeCoord::new(ppos, s),
                    Source::Cell { scale: s, cell: pcell },
                    Source::Cell { scale: s, cell: pcell },
                )
            };
            let zup = if s == 0 {
                Source::Start
            } else {
                Source::Cell { scale: s - 1, cell: up_maps[s - 1][cell] }
            };
            coords.push((cur, prev));
            tokens.push(TokenMeta {
                cur,
                prev,
                zup,
                zprev,
                pos_cur: (s, cell),
                pos_prev,
                target: (s, cell),
            });
        }
        SequenceMeta { seq_len: layout.seq_len, tokens, coords }
    }
}

#[inline]
pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

#[inline]
pub(crate) fn gelu_prime<F: Scalar>(x: F) -> F {
    let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}

/// Normalize `x` into `out`; returns the inverse standard deviation.
pub(crate) fn layer_norm_row<F: Scalar>(x: &[F], out: &mut [F]) -> F {
    let n = F::from_usize(x.len());
    let mut mean = F::zero();
    for &v in x {
        mean += v;
    }
    mean /= n;
    let mut var = F::zero();
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    var /= n;
    let inv_std = F::one() / (var + F::from_f64(LN_EPS)).sqrt();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mean) * inv_std;
    }
    inv_std
}

/// `out = y ⊙ (1 + scale) + shift`.
pub(crate) fn modulate_row<F: Scalar>(y: &[F], scale: &[F], shift: &[F], out: &mut [F]) {
    for i in 0..y.len() {
        out[i] = y[i] * (F::one() + scale[i]) + shift[i];
    }
}

/// In-place numerically stable softmax.
pub(crate) fn softmax_row<F: Scalar>(row: &mut [F]) {
    let mut max = row[0];
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `out += x @ w`, then add the 1×n bias row to every output row if given.
pub(crate) fn linear<F: Scalar>(out: &mut Mat<F>, x: &Mat<F>, w: &Mat<F>, bias: Option<&Mat<F>>) {
    matmul(out, x, w);
    if let Some(b) = bias {
        for r in 0..out.rows {
            let row = out.row_mut(r);
            for (o, &bv) in row.iter_mut().zip(&b.data) {
                *o += bv;
            }
        }
    }
}

/// Embed one token id and lift it through the unfold MLP (no trace); used by
/// the samplers. Accumulation order replicates `linear` exactly — products
/// in input order, bias last — so sampled codes match training codes bit for
/// bit.
pub(crate) fn embed_token_row<F: Scalar>(params: &ModelParams<F>, token: usize, out: &mut [F]) {
    let d = params.config.dim;
    let e = params.embed.row(token);
    let mut u = vec![F::zero(); d];
    for (i, &ev) in e.iter().enumerate() {
        for (uj, &wv) in u.iter_mut().zip(params.unfold_w1.row(i)) {
            *uj += ev * wv;
        }
    }
    for (uj, &bv) in u.iter_mut().zip(&params.unfold_b1.data) {
        *uj += bv;
        *uj = gelu(*uj);
    }
    out.fill(F::zero());
    for (i, &hv) in u.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(params.unfold_w2.row(i)) {
            *o += hv * wv;
        }
    }
    for (o, &bv) in out.iter_mut().zip(&params.unfold_b2.data) {
        *o += bv;
    }
}

/// Embedding-pipeline activations for one scale grid.
#[derive(Debug, Clone)]
pub(crate) struct EmbedTrace<F> {
    /// Raw embedding rows gathered per cell, `cells × embed_dim`.
    pub e: Mat<F>,
    /// Pre-activation of the unfold hidden layer, `cells × dim`.
    pub u: Mat<F>,
    /// Post-activation, `cells × dim`.
    pub h: Mat<F>,
    /// Final embedded codes, `cells × dim`.
    pub z: Mat<F>,
}

fn embed_grid<F: Scalar>(params: &ModelParams<F>, tokens: &[usize]) -> EmbedTrace<F> {
    let cells = tokens.len();
    let (ed, d) = (params.config.embed_dim, params.config.dim);
    let mut e = Mat::zeros(cells, ed);
    for (c, &t) in tokens.iter().enumerate() {
        e.row_mut(c).copy_from_slice(params.embed.row(t));
    }
    let mut u = Mat::zeros(cells, d);
    linear(&mut u, &e, &params.unfold_w1, Some(&params.unfold_b1));
    let mut h = u.clone();
    h.data.iter_mut().for_each(|x| *x = gelu(*x));
    let mut z = Mat::zeros(cells, d);
    linear(&mut z, &h, &params.unfold_w2, Some(&params.unfold_b2));
    EmbedTrace { e, u, h, z }
}

fn copy_channel<F: Scalar>(
    dst: &mut [F],
    source: Source,
    start_const: &Mat<F>,
    grids: &[EmbedTrace<F>],
) {
    match source {
        Source::Start => dst.copy_from_slice(&start_const.data),
        Source::Cell { scale, cell } => dst.copy_from_slice(grids[scale].z.row(cell)),
    }
}

/// Assemble the concatenated conditioning channels and the projected input
/// stream. Row 0 of `concat` stays zero; row 0 of the input stream is the
/// class embedding.
pub fn build_inputs<F: Scalar>(
    params: &ModelParams<F>,
    meta: &SequenceMeta,
    batch: &TrainingBatch,
) -> Result<(Mat<F>, Mat<F>)> {
    let built = build_inputs_full(params, meta, batch)?;
    Ok((built.concat, built.x0))
}

pub(crate) struct InputBuild<F> {
    pub concat: Mat<F>,
    pub x0: Mat<F>,
    pub embeds: Vec<EmbedTrace<F>>,
}

pub(crate) fn build_inputs_full<F: Scalar>(
    params: &ModelParams<F>,
    meta: &SequenceMeta,
    batch: &TrainingBatch,
) -> Result<InputBuild<F>> {
    batch.validate(&params.config, &params.sizes)?;
    let d = params.config.dim;
    let t_len = meta.seq_len;

    let embeds: Vec<EmbedTrace<F>> =
        batch.grids.iter().map(|g| embed_grid(params, &g.tokens)).collect();

    let mut concat = Mat::zeros(t_len, 4 * d);
    for (i, tok) in meta.tokens.iter().enumerate() {
        let row = concat.row_mut(i + 1);
        copy_channel(&mut row[..d], tok.zup, &params.z0, &embeds);
        copy_channel(&mut row[d..2 * d], tok.zprev, &params.z0, &embeds);
        let (s, cell) = tok.pos_cur;
        row[2 * d..3 * d].copy_from_slice(params.pos.tables[s].row(cell));
        match tok.pos_prev {
            Source::Start => row[3 * d..].copy_from_slice(&params.pos0.data),
            Source::Cell { scale, cell } => {
                row[3 * d..].copy_from_slice(params.pos.tables[scale].row(cell))
            }
        }
    }

    let mut x0 = Mat::zeros(t_len, d);
    linear(&mut x0, &concat, &params.w_proj, Some(&params.b_proj));
    x0.row_mut(0).copy_from_slice(params.class_embed.row(batch.label));
    Ok(InputBuild { concat, x0, embeds })
}

/// Activations of one transformer layer kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerTrace<F> {
    pub inv_std1: Vec<F>,
    pub y1: Mat<F>,
    pub xt1: Mat<F>,
    pub q: Mat<F>,
    pub k: Mat<F>,
    pub v: Mat<F>,
    pub q_rot: Mat<F>,
    pub k_rot: Mat<F>,
    /// Attention weights, flattened per head over the ragged visible
    /// prefixes: index `head · total_vis + vis_offset[t] + k`.
    pub attn: Vec<F>,
    pub att_cat: Mat<F>,
    pub inv_std2: Vec<F>,
    pub y2: Mat<F>,
    pub xt2: Mat<F>,
    pub m1: Mat<F>,
    pub g: Mat<F>,
}

/// Everything the backward pass needs from a forward run.
#[derive(Debug, Clone)]
pub struct ForwardTrace<F> {
    pub loss: F,
    pub logits: Mat<F>,
    pub label: usize,
    pub(crate) concat: Mat<F>,
    pub(crate) embeds: Vec<EmbedTrace<F>>,
    pub(crate) ada: Vec<Mat<F>>,
    pub(crate) final_ada: Mat<F>,
    pub(crate) layers: Vec<LayerTrace<F>>,
    pub(crate) inv_stdf: Vec<F>,
    pub(crate) yf: Mat<F>,
    pub(crate) xtf: Mat<F>,
    pub(crate) probs: Mat<F>,
    pub(crate) targets: Vec<usize>,
    pub(crate) vis_ends: Vec<usize>,
    pub(crate) vis_offsets: Vec<usize>,
    pub(crate) total_vis: usize,
}

/// Mean cross-entropy over flat slots `1..T` (the class slot carries no
/// target). Returns the loss and the row-wise softmax probabilities.
pub fn loss_from_logits<F: Scalar>(logits: &Mat<F>, targets: &[usize]) -> (F, Mat<F>) {
    let mut probs = logits.clone();
    let mut loss = F::zero();
    for t in 0..logits.rows {
        softmax_row(probs.row_mut(t));
        if t > 0 {
            loss -= probs.get(t, targets[t]).ln();
        }
    }
    loss /= F::from_usize(logits.rows - 1);
    (loss, probs)
}

/// Run the teacher-forced forward pass, returning the loss and a full trace.
pub fn forward_train<F: Scalar>(
    params: &ModelParams<F>,
    layout: &SequenceLayout,
    mask: &BlockCausalMask,
    meta: &SequenceMeta,
    batch: &TrainingBatch,
) -> Result<ForwardTrace<F>> {
    let config = &params.config;
    let d = config.dim;
    let heads = config.heads;
    let hd = config.head_dim();
    let t_len = meta.seq_len;
    debug_assert_eq!(layout.seq_len, t_len);

    let InputBuild { concat, x0, embeds } = build_inputs_full(params, meta, batch)?;

    // Visible-prefix bookkeeping shared by all layers.
    let vis_ends: Vec<usize> = (0..t_len).map(|t| mask.visible_end(t)).collect();
    let mut vis_offsets = Vec::with_capacity(t_len);
    let mut total_vis = 0usize;
    for &end in &vis_ends {
        vis_offsets.push(total_vis);
        total_vis += end;
    }

    // Conditioned-norm modulation vectors from the class embedding.
    let cls = Mat::from_vec(1, d, params.class_embed.row(batch.label).to_vec());
    let ada: Vec<Mat<F>> = params
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

    let inv_sqrt_hd = F::from_f64(1.0 / (hd as f64).sqrt());
    let split = &params.rope_split;
    let freqs = &params.rope_freqs.data;

    let mut x = x0;
    let mut layer_traces = Vec::with_capacity(config.layers);
    for (l, layer) in params.layers.iter().enumerate() {
        // Attention sublayer.
        let mut y1 = Mat::zeros(t_len, d);
        let mut inv_std1 = Vec::with_capacity(t_len);
        for t in 0..t_len {
            inv_std1.push(layer_norm_row(x.row(t), y1.row_mut(t)));
        }
        let ada_l = &ada[l].data;
        let (g1, s1) = (&ada_l[..d], &ada_l[d..2 * d]);
        let mut xt1 = Mat::zeros(t_len, d);
        for t in 0..t_len {
            modulate_row(y1.row(t), g1, s1, xt1.row_mut(t));
        }

        let mut q = Mat::zeros(t_len, d);
        let mut k = Mat::zeros(t_len, d);
        let mut v = Mat::zeros(t_len, d);
        matmul(&mut q, &xt1, &layer.wq);
        matmul(&mut k, &xt1, &layer.wk);
        matmul(&mut v, &xt1, &layer.wv);

        let mut q_rot = q.clone();
        let mut k_rot = Mat::zeros(t_len, d);
        for t in 0..t_len {
            let (cur, prev) = meta.coords[t];
            for h in 0..heads {
                let span = h * hd..(h + 1) * hd;
                rope::rotate(split, freqs, cur, &mut q_rot.row_mut(t)[span.clone()]);
                if l < config.mix_layers {
                    let logit = params.mix.logit(l, h);
                    rope::rotate_mixed(
                        split,
                        freqs,
                        cur,
                        prev,
                        logit,
                        &k.row(t)[span.clone()],
                        &mut k_rot.row_mut(t)[span],
                    );
                } else {
                    let dst = &mut k_rot.row_mut(t)[span.clone()];
                    dst.copy_from_slice(&k.row(t)[span]);
                    rope::rotate(split, freqs, cur, dst);
                }
            }
        }

        let mut attn = vec![F::zero(); heads * total_vis];
        let mut att_cat = Mat::zeros(t_len, d);
        let mut scores: Vec<F> = Vec::new();
        for h in 0..heads {
            let span = h * hd..(h + 1) * hd;
            let base = h * total_vis;
            for t in 0..t_len {
                let end = vis_ends[t];
                scores.clear();
                scores.resize(end, F::zero());
                let qrow = &q_rot.row(t)[span.clone()];
                for (kk, sc) in scores.iter_mut().enumerate() {
                    *sc = dot(qrow, &k_rot.row(kk)[span.clone()]) * inv_sqrt_hd;
                }
                softmax_row(&mut scores);
                let out = &mut att_cat.row_mut(t)[span.clone()];
                for (kk, &w) in scores.iter().enumerate() {
                    let vrow = &v.row(kk)[span.clone()];
                    for (o, &vv) in out.iter_mut().zip(vrow) {
                        *o += w * vv;
                    }
                }
                attn[base + vis_offsets[t]..base + vis_offsets[t] + end]
                    .copy_from_slice(&scores);
            }
        }

        let mut x_mid = Mat::zeros(t_len, d);
        matmul(&mut x_mid, &att_cat, &layer.wo);
        x_mid.add_assign(&x);

        // MLP sublayer.
        let mut y2 = Mat::zeros(t_len, d);
        let mut inv_std2 = Vec::with_capacity(t_len);
        for t in 0..t_len {
            inv_std2.push(layer_norm_row(x_mid.row(t), y2.row_mut(t)));
        }
        let (g2, s2) = (&ada_l[2 * d..3 * d], &ada_l[3 * d..]);
        let mut xt2 = Mat::zeros(t_len, d);
        for t in 0..t_len {
            modulate_row(y2.row(t), g2, s2, xt2.row_mut(t));
        }
        let mut m1 = Mat::zeros(t_len, config.mlp_dim());
        linear(&mut m1, &xt2, &layer.fc1, Some(&layer.b_fc1));
        let mut g = m1.clone();
        g.data.iter_mut().for_each(|z| *z = gelu(*z));
        let mut mlp_out = Mat::zeros(t_len, d);
        linear(&mut mlp_out, &g, &layer.fc2, Some(&layer.b_fc2));
        let mut x_out = x_mid.clone();
        x_out.add_assign(&mlp_out);

        if !x_out.iter_finite() {
            return Err(Error::NumericFailure {
                layer: l,
                detail: "non-finite activation in residual stream".into(),
            });
        }

        layer_traces.push(LayerTrace {
            inv_std1,
            y1,
            xt1,
            q,
            k,
            v,
            q_rot,
            k_rot,
            attn,
            att_cat,
            inv_std2,
            y2,
            xt2,
            m1,
            g,
        });
        x = x_out;
    }

    // Final conditioned norm and head.
    let mut yf = Mat::zeros(t_len, d);
    let mut inv_stdf = Vec::with_capacity(t_len);
    for t in 0..t_len {
        inv_stdf.push(layer_norm_row(x.row(t), yf.row_mut(t)));
    }
    let (gf, sf) = (&final_ada.data[..d], &final_ada.data[d..]);
    let mut xtf = Mat::zeros(t_len, d);
    for t in 0..t_len {
        modulate_row(yf.row(t), gf, sf, xtf.row_mut(t));
    }
    let mut logits = Mat::zeros(t_len, config.vocab);
    matmul(&mut logits, &xtf, &params.head);
    if !logits.iter_finite() {
        return Err(Error::NumericFailure {
            layer: config.layers,
            detail: "non-finite logits".into(),
        });
    }

    let mut targets = vec![0usize; t_len];
    for (i, tok) in meta.tokens.iter().enumerate() {
        let (s, cell) = tok.target;
        targets[i + 1] = batch.grids[s].tokens[cell];
    }
    let (loss, probs) = loss_from_logits(&logits, &targets);

    Ok(ForwardTrace {
        loss,
        logits,
        label: batch.label,
        concat,
        embeds,
        ada,
        final_ada,
        layers: layer_traces,
        inv_stdf,
        yf,
        xtf,
        probs,
        targets,
        vis_ends,
        vis_offsets,
        total_vis,
    })
}
