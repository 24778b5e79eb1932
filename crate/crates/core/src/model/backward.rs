//! Exact backpropagation mirroring `forward.rs`, accumulating into a
//! zero-initialized `ModelParams` used as the gradient container.

use crate::error::Result;
use crate::layout::SequenceLayout;
use crate::rope::{pair_coord, sigmoid, RopeCoord, RopeSplit};
use crate::scalar::Scalar;
use crate::tensor::{axpy, dot, matmul_at_acc, matmul_bt, Mat};

use super::forward::{gelu_prime, ForwardTrace, SequenceMeta, Source};
use super::ModelParams;

/// `dx_i = r · (dy_i − mean(dy) − y_i · mean(dy ⊙ y))` for a layer norm
/// without affine parameters; writes (overwrites) `dx`.
fn ln_backward_row<F: Scalar>(dy: &[F], y: &[F], inv_std: F, dx: &mut [F]) {
    let n = F::from_usize(dy.len());
    let mut mean_dy = F::zero();
    let mut mean_dyy = F::zero();
    for i in 0..dy.len() {
        mean_dy += dy[i];
        mean_dyy += dy[i] * y[i];
    }
    mean_dy /= n;
    mean_dyy /= n;
    for i in 0..dy.len() {
        dx[i] = inv_std * (dy[i] - mean_dy - y[i] * mean_dyy);
    }
}

/// Backward through the conditioned modulation `xt = y ⊙ (1+γ) + β`:
/// produces `dy`, and accumulates `dγ`, `dβ`.
fn modulate_backward<F: Scalar>(
    dxt: &Mat<F>,
    y: &Mat<F>,
    gamma: &[F],
    dgamma: &mut [F],
    dbeta: &mut [F],
    dy: &mut Mat<F>,
) {
    for t in 0..dxt.rows {
        let dxt_row = dxt.row(t);
        let y_row = y.row(t);
        let dy_row = dy.row_mut(t);
        for i in 0..dxt.cols {
            dy_row[i] = dxt_row[i] * (F::one() + gamma[i]);
            dgamma[i] += dxt_row[i] * y_row[i];
            dbeta[i] += dxt_row[i];
        }
    }
}

/// Backward of a single rotation pair: given output grads `(ga, gb)` and the
/// pre-rotation pair `(a, b)`, returns the input grads and `dθ`.
#[inline]
fn rotate_pair_backward<F: Scalar>(
    sin: F,
    cos: F,
    a: F,
    b: F,
    ga: F,
    gb: F,
) -> (F, F, F) {
    let da = cos * ga + sin * gb;
    let db = -sin * ga + cos * gb;
    let dtheta = ga * (-sin * a - cos * b) + gb * (cos * a - sin * b);
    (da, db, dtheta)
}

/// Column-wise sum of `x` rows `row_start..`, accumulated into the 1×n `acc`.
fn add_colsum<F: Scalar>(acc: &mut Mat<F>, x: &Mat<F>, row_start: usize) {
    for t in row_start..x.rows {
        for (a, &v) in acc.data.iter_mut().zip(x.row(t)) {
            *a += v;
        }
    }
}

struct RotGrads<'a, F> {
    split: &'a RopeSplit,
    freqs: &'a [F],
    dfreqs: &'a mut [F],
}

impl<F: Scalar> RotGrads<'_, F> {
    /// Backward through the plain rotation applied at `coord`; overwrites
    /// `dv` with the input gradient.
    fn plain(&mut self, coord: RopeCoord, pre: &[F], dout: &[F], dv: &mut [F]) {
        for j in 0..self.split.n_pairs() {
            let c = pair_coord(self.split, coord, j);
            let theta = self.freqs[j] * F::from_usize(c);
            let (sin, cos) = (theta.sin(), theta.cos());
            let (da, db, dtheta) = rotate_pair_backward(
                sin,
                cos,
                pre[2 * j],
                pre[2 * j + 1],
                dout[2 * j],
                dout[2 * j + 1],
            );
            dv[2 * j] = da;
            dv[2 * j + 1] = db;
            self.dfreqs[j] += F::from_usize(c) * dtheta;
        }
    }

    /// Backward through the mixed key rotation; overwrites `dv` and returns
    /// the gradient w.r.t. the mixing logit.
    fn mixed(
        &mut self,
        cur: RopeCoord,
        prev: RopeCoord,
        logit: F,
        pre: &[F],
        dout: &[F],
        dv: &mut [F],
    ) -> F {
        let alpha = sigmoid(logit);
        let beta = F::one() - alpha;
        let mut dalpha = F::zero();
        for j in 0..self.split.n_pairs() {
            let cc_coord = pair_coord(self.split, cur, j);
            let cp_coord = pair_coord(self.split, prev, j);
            let tc = self.freqs[j] * F::from_usize(cc_coord);
            let tp = self.freqs[j] * F::from_usize(cp_coord);
            let (sc, cc) = (tc.sin(), tc.cos());
            let (sp, cp) = (tp.sin(), tp.cos());
            let (a, b) = (pre[2 * j], pre[2 * j + 1]);
            let (ga, gb) = (dout[2 * j], dout[2 * j + 1]);
            dv[2 * j] = alpha * (cc * ga + sc * gb) + beta * (cp * ga + sp * gb);
            dv[2 * j + 1] = alpha * (-sc * ga + cc * gb) + beta * (-sp * ga + cp * gb);
            let dtc = alpha * (ga * (-sc * a - cc * b) + gb * (cc * a - sc * b));
            let dtp = beta * (ga * (-sp * a - cp * b) + gb * (cp * a - sp * b));
            self.dfreqs[j] += F::from_usize(cc_coord) * dtc + F::from_usize(cp_coord) * dtp;
            dalpha += ga * ((cc * a - sc * b) - (cp * a - sp * b))
                + gb * ((sc * a + cc * b) - (sp * a + cp * b));
        }
        alpha * (F::one() - alpha) * dalpha
    }
}

/// Backpropagate the mean cross-entropy of a traced forward pass,
/// accumulating parameter gradients into `grads` (a zero-initialized or
/// partially accumulated `ModelParams` of identical shape).
pub fn backward<F: Scalar>(
    params: &ModelParams<F>,
    layout: &SequenceLayout,
    meta: &SequenceMeta,
    trace: &ForwardTrace<F>,
    grads: &mut ModelParams<F>,
) -> Result<()> {
    let config = &params.config;
    let d = config.dim;
    let heads = config.heads;
    let hd = config.head_dim();
    let t_len = meta.seq_len;
    let inv_sqrt_hd = F::from_f64(1.0 / (hd as f64).sqrt());
    let denom = F::from_usize(t_len - 1);
    debug_assert_eq!(layout.seq_len, t_len);

    // Class-embedding gradient accumulates from the norm modulations and the
    // class slot of the input stream.
    let mut dcls = vec![F::zero(); d];
    let cls = Mat::from_vec(1, d, params.class_embed.row(trace.label).to_vec());

    // Loss → logits.
    let mut dlogits = trace.probs.clone();
    for t in 0..t_len {
        if t == 0 {
            dlogits.row_mut(0).iter_mut().for_each(|v| *v = F::zero());
            continue;
        }
        let target = trace.targets[t];
        let row = dlogits.row_mut(t);
        for (i, v) in row.iter_mut().enumerate() {
            let delta = if i == target { F::one() } else { F::zero() };
            *v = (*v - delta) / denom;
        }
    }

    // Head and final conditioned norm.
    matmul_at_acc(&mut grads.head, &trace.xtf, &dlogits);
    let mut dxtf = Mat::zeros(t_len, d);
    matmul_bt(&mut dxtf, &dlogits, &params.head);

    let gf = &trace.final_ada.data[..d];
    let mut dfinal_vec = Mat::zeros(1, 2 * d);
    {
        let (dgf, dsf) = dfinal_vec.data.split_at_mut(d);
        let mut dyf = Mat::zeros(t_len, d);
        modulate_backward(&dxtf, &trace.yf, gf, dgf, dsf, &mut dyf);
        let mut dx = Mat::zeros(t_len, d);
        for t in 0..t_len {
            ln_backward_row(dyf.row(t), trace.yf.row(t), trace.inv_stdf[t], dx.row_mut(t));
        }
        dxtf = dx; // reuse the buffer name for the running stream gradient
    }
    matmul_at_acc(&mut grads.final_ada_w, &cls, &dfinal_vec);
    grads.final_ada_b.add_assign(&dfinal_vec);
    {
        let mut dc = Mat::zeros(1, d);
        matmul_bt(&mut dc, &dfinal_vec, &params.final_ada_w);
        for (a, &v) in dcls.iter_mut().zip(&dc.data) {
            *a += v;
        }
    }
    let mut dx_stream = dxtf;

    let split = &params.rope_split;
    let freqs = &params.rope_freqs.data;

    for l in (0..config.layers).rev() {
        let layer = &params.layers[l];
        let tr = &trace.layers[l];
        let glayer = &mut grads.layers[l];
        let ada_l = &trace.ada[l].data;
        let mut dada_vec = Mat::zeros(1, 4 * d);

        // ---- MLP sublayer backward. dx_stream is dL/dx_out.
        // x_out = x_mid + gelu(xt2 @ fc1 + b1) @ fc2 + b2.
        matmul_at_acc(&mut glayer.fc2, &tr.g, &dx_stream);
        add_colsum(&mut glayer.b_fc2, &dx_stream, 0);
        let mut dg = Mat::zeros(t_len, config.mlp_dim());
        matmul_bt(&mut dg, &dx_stream, &layer.fc2);
        let mut dm1 = dg;
        for (v, &pre) in dm1.data.iter_mut().zip(&tr.m1.data) {
            *v *= gelu_prime(pre);
        }
        matmul_at_acc(&mut glayer.fc1, &tr.xt2, &dm1);
        add_colsum(&mut glayer.b_fc1, &dm1, 0);
        let mut dxt2 = Mat::zeros(t_len, d);
        matmul_bt(&mut dxt2, &dm1, &layer.fc1);

        let mut dx_mid = dx_stream; // residual path
        {
            let (dada_scale, rest) = dada_vec.data.split_at_mut(3 * d);
            let dg2 = &mut dada_scale[2 * d..];
            let ds2 = rest;
            let g2 = &ada_l[2 * d..3 * d];
            let mut dy2 = Mat::zeros(t_len, d);
            modulate_backward(&dxt2, &tr.y2, g2, dg2, ds2, &mut dy2);
            let mut dx_ln = vec![F::zero(); d];
            for t in 0..t_len {
                ln_backward_row(dy2.row(t), tr.y2.row(t), tr.inv_std2[t], &mut dx_ln);
                for (a, &v) in dx_mid.row_mut(t).iter_mut().zip(&dx_ln) {
                    *a += v;
                }
            }
        }

        // ---- Attention sublayer backward. dx_mid is dL/dx_mid where
        // x_mid = x_in + att_cat @ wo.
        matmul_at_acc(&mut glayer.wo, &tr.att_cat, &dx_mid);
        let mut datt_cat = Mat::zeros(t_len, d);
        matmul_bt(&mut datt_cat, &dx_mid, &layer.wo);

        let mut dq_rot = Mat::zeros(t_len, d);
        let mut dk_rot = Mat::zeros(t_len, d);
        let mut dv = Mat::zeros(t_len, d);
        for h in 0..heads {
            let span = h * hd..(h + 1) * hd;
            let base = h * trace.total_vis;
            let mut dw: Vec<F> = Vec::new();
            for t in 0..t_len {
                let end = trace.vis_ends[t];
                let weights = &tr.attn[base + trace.vis_offsets[t]..][..end];
                let g = &datt_cat.row(t)[span.clone()];
                dw.clear();
                dw.resize(end, F::zero());
                let mut s_dot = F::zero();
                for kk in 0..end {
                    let dwk = dot(g, &tr.v.row(kk)[span.clone()]);
                    axpy(&mut dv.row_mut(kk)[span.clone()], weights[kk], g);
                    dw[kk] = dwk;
                    s_dot += weights[kk] * dwk;
                }
                let qrow = tr.q_rot.row(t)[span.clone()].to_vec();
                let dq_row = &mut dq_rot.row_mut(t)[span.clone()];
                for kk in 0..end {
                    let ds = weights[kk] * (dw[kk] - s_dot) * inv_sqrt_hd;
                    axpy(dq_row, ds, &tr.k_rot.row(kk)[span.clone()]);
                    axpy(&mut dk_rot.row_mut(kk)[span.clone()], ds, &qrow);
                }
            }
        }

        // Rotation backward: queries rotate at their own coordinates; keys
        // either mix with the predecessor block's coordinates (early layers)
        // or rotate plainly.
        let mut dq = Mat::zeros(t_len, d);
        let mut dk = Mat::zeros(t_len, d);
        {
            let mut rot = RotGrads {
                split,
                freqs,
                dfreqs: &mut grads.rope_freqs.data,
            };
            for t in 0..t_len {
                let (cur, prev) = meta.coords[t];
                for h in 0..heads {
                    let span = h * hd..(h + 1) * hd;
                    rot.plain(
                        cur,
                        &tr.q.row(t)[span.clone()],
                        &dq_rot.row(t)[span.clone()],
                        &mut dq.row_mut(t)[span.clone()],
                    );
                    if l < config.mix_layers {
                        let dlogit = rot.mixed(
                            cur,
                            prev,
                            params.mix.logit(l, h),
                            &tr.k.row(t)[span.clone()],
                            &dk_rot.row(t)[span.clone()],
                            &mut dk.row_mut(t)[span.clone()],
                        );
                        let cell = grads.mix.logits.get(l, h) + dlogit;
                        grads.mix.logits.set(l, h, cell);
                    } else {
                        rot.plain(
                            cur,
                            &tr.k.row(t)[span.clone()],
                            &dk_rot.row(t)[span.clone()],
                            &mut dk.row_mut(t)[span.clone()],
                        );
                    }
                }
            }
        }

        matmul_at_acc(&mut glayer.wq, &tr.xt1, &dq);
        matmul_at_acc(&mut glayer.wk, &tr.xt1, &dk);
        matmul_at_acc(&mut glayer.wv, &tr.xt1, &dv);
        let mut dxt1 = Mat::zeros(t_len, d);
        matmul_bt(&mut dxt1, &dq, &layer.wq);
        let mut tmp = Mat::zeros(t_len, d);
        matmul_bt(&mut tmp, &dk, &layer.wk);
        dxt1.add_assign(&tmp);
        matmul_bt(&mut tmp, &dv, &layer.wv);
        dxt1.add_assign(&tmp);

        {
            let (dg1s, rest) = dada_vec.data.split_at_mut(d);
            let ds1 = &mut rest[..d];
            let g1 = &ada_l[..d];
            let mut dy1 = Mat::zeros(t_len, d);
            modulate_backward(&dxt1, &tr.y1, g1, dg1s, ds1, &mut dy1);
            let mut dx_ln = vec![F::zero(); d];
            for t in 0..t_len {
                ln_backward_row(dy1.row(t), tr.y1.row(t), tr.inv_std1[t], &mut dx_ln);
                for (a, &v) in dx_mid.row_mut(t).iter_mut().zip(&dx_ln) {
                    *a += v;
                }
            }
        }

        matmul_at_acc(&mut glayer.w_ada, &cls, &dada_vec);
        glayer.b_ada.add_assign(&dada_vec);
        {
            let mut dc = Mat::zeros(1, d);
            matmul_bt(&mut dc, &dada_vec, &layer.w_ada);
            for (a, &v) in dcls.iter_mut().zip(&dc.data) {
                *a += v;
            }
        }

        dx_stream = dx_mid;
    }

    // Input stream: the class slot feeds the class embedding; every other
    // row flows back through the input projection into the conditioning
    // channels.
    for (a, &v) in dcls.iter_mut().zip(dx_stream.row(0)) {
        *a += v;
    }
    dx_stream.row_mut(0).iter_mut().for_each(|v| *v = F::zero());
    matmul_at_acc(&mut grads.w_proj, &trace.concat, &dx_stream);
    add_colsum(&mut grads.b_proj, &dx_stream, 1);
    let mut dconcat = Mat::zeros(t_len, 4 * d);
    matmul_bt(&mut dconcat, &dx_stream, &params.w_proj);

    // Scatter the channel gradients to embedded codes, position tables, and
    // the start constants.
    let mut dz: Vec<Mat<F>> =
        trace.embeds.iter().map(|e| Mat::zeros(e.z.rows, d)).collect();
    for (i, tok) in meta.tokens.iter().enumerate() {
        let row = dconcat.row(i + 1);
        match tok.zup {
            Source::Start => axpy(&mut grads.z0.data, F::one(), &row[..d]),
            Source::Cell { scale, cell } => axpy(dz[scale].row_mut(cell), F::one(), &row[..d]),
        }
        match tok.zprev {
            Source::Start => axpy(&mut grads.z0.data, F::one(), &row[d..2 * d]),
            Source::Cell { scale, cell } => {
                axpy(dz[scale].row_mut(cell), F::one(), &row[d..2 * d])
            }
        }
        let (s, cell) = tok.pos_cur;
        axpy(grads.pos.tables[s].row_mut(cell), F::one(), &row[2 * d..3 * d]);
        match tok.pos_prev {
            Source::Start => axpy(&mut grads.pos0.data, F::one(), &row[3 * d..]),
            Source::Cell { scale, cell } => {
                axpy(grads.pos.tables[scale].row_mut(cell), F::one(), &row[3 * d..])
            }
        }
    }

    // Embedding pipeline backward per scale, then scatter to embedding rows
    // by token id (recovered from the targets: every cell is some token's
    // target exactly once).
    let mut tokens_by_scale: Vec<Vec<usize>> =
        trace.embeds.iter().map(|e| vec![0usize; e.z.rows]).collect();
    for (i, tok) in meta.tokens.iter().enumerate() {
        let (s, cell) = tok.target;
        tokens_by_scale[s][cell] = trace.targets[i + 1];
    }
    for (s, dz_s) in dz.iter().enumerate() {
        let emb = &trace.embeds[s];
        matmul_at_acc(&mut grads.unfold_w2, &emb.h, dz_s);
        add_colsum(&mut grads.unfold_b2, dz_s, 0);
        let mut dh = Mat::zeros(dz_s.rows, d);
        matmul_bt(&mut dh, dz_s, &params.unfold_w2);
        let mut du = dh;
        for (v, &pre) in du.data.iter_mut().zip(&emb.u.data) {
            *v *= gelu_prime(pre);
        }
        matmul_at_acc(&mut grads.unfold_w1, &emb.e, &du);
        add_colsum(&mut grads.unfold_b1, &du, 0);
        let mut de = Mat::zeros(du.rows, config.embed_dim);
        matmul_bt(&mut de, &du, &params.unfold_w1);
        for (cell, &token) in tokens_by_scale[s].iter().enumerate() {
            axpy(grads.embed.row_mut(token), F::one(), de.row(cell));
        }
    }

    axpy(grads.class_embed.row_mut(trace.label), F::one(), &dcls);
    Ok(())
}
