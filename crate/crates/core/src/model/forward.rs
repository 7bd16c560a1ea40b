//! Forward pass with cached activations and exact reverse-mode gradients.

use super::kernels::{
    accumulate_col_sums, add_bias, gelu, gelu_grad, layer_norm, layer_norm_backward, log_softmax, matmul, matmul_at,
    matmul_bt, softmax_prefix, Scalar,
};
use super::{ModelConfig, ParamLayout};
use crate::context::ModelInput;
use crate::embed_store::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::lexicon::TokenId;

struct ImageCache<T> {
    start: usize,
    input: Vec<T>,
    hidden: Vec<T>,
}

struct BlockCache<T> {
    ln1_xhat: Vec<T>,
    ln1_rstd: Vec<T>,
    a: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    attn: Vec<T>,
    ln2_xhat: Vec<T>,
    ln2_rstd: Vec<T>,
    m: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
}

/// Activations of one forward pass, sufficient for [`backward`].
pub struct ForwardTrace<T> {
    seq_len: usize,
    tokens: Vec<TokenId>,
    is_image: Vec<bool>,
    images: Vec<ImageCache<T>>,
    blocks: Vec<BlockCache<T>>,
    /// Positions whose next-token logits were computed.
    pub positions: Vec<usize>,
    /// Targets aligned with `positions`, when computing a loss.
    pub targets: Vec<TokenId>,
    lnf_xhat: Vec<T>,
    lnf_rstd: Vec<T>,
    z: Vec<T>,
    /// `positions.len() x vocab` logits.
    pub logits: Vec<T>,
    pub vocab: usize,
    pub loss: f64,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn logit_row(&self, i: usize) -> &[T] {
        &self.logits[i * self.vocab..(i + 1) * self.vocab]
    }
}

/// Mapping network for one embedding: returns (tanh hidden, prefix rows).
pub(crate) fn map_visual_cached<T: Scalar>(
    cfg: &ModelConfig,
    layout: &ParamLayout,
    params: &[T],
    e: &[T],
) -> (Vec<T>, Vec<T>) {
    let (dim, hid, out_dim) = (cfg.embed_dim, cfg.map_hidden, cfg.prefix_len * cfg.d_model);
    let mut h = params[layout.map_b1..layout.map_b1 + hid].to_vec();
    matmul(
        1,
        dim,
        hid,
        e,
        &params[layout.map_w1..layout.map_w1 + dim * hid],
        &mut h,
        T::one(),
    );
    for v in h.iter_mut() {
        *v = T::from_f64v(v.as_f64().tanh());
    }
    let mut out = params[layout.map_b2..layout.map_b2 + out_dim].to_vec();
    matmul(
        1,
        hid,
        out_dim,
        &h,
        &params[layout.map_w2..layout.map_w2 + hid * out_dim],
        &mut out,
        T::one(),
    );
    (h, out)
}

/// Mean cross-entropy over the loss-masked positions.
pub fn forward_loss<T: Scalar>(
    cfg: &ModelConfig,
    layout: &ParamLayout,
    params: &[T],
    input: &ModelInput,
    embeddings: &EmbeddingMatrix,
) -> Result<(f64, ForwardTrace<T>)> {
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for (t, &on) in input.loss_mask.iter().enumerate() {
        if on {
            if t == 0 {
                return Err(Error::Data("loss mask set on the first position".into()));
            }
            positions.push(t - 1);
            targets.push(input.token_ids[t]);
        }
    }
    if positions.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let mut trace = run(cfg, layout, params, input, embeddings, positions)?;
    let mut loss = 0.0;
    for (i, &tgt) in targets.iter().enumerate() {
        let lp = log_softmax(trace.logit_row(i));
        loss -= lp[tgt as usize];
    }
    loss /= targets.len() as f64;
    trace.targets = targets;
    trace.loss = loss;
    Ok((loss, trace))
}

/// Forward pass returning next-token logits at `positions`.
pub fn forward_with_logits<T: Scalar>(
    cfg: &ModelConfig,
    layout: &ParamLayout,
    params: &[T],
    input: &ModelInput,
    embeddings: &EmbeddingMatrix,
    positions: Vec<usize>,
) -> Result<ForwardTrace<T>> {
    run(cfg, layout, params, input, embeddings, positions)
}

fn run<T: Scalar>(
    cfg: &ModelConfig,
    layout: &ParamLayout,
    params: &[T],
    input: &ModelInput,
    embeddings: &EmbeddingMatrix,
    positions: Vec<usize>,
) -> Result<ForwardTrace<T>> {
    let s = input.token_ids.len();
    let d = cfg.d_model;
    let vocab = (layout.pos_emb - layout.tok_emb) / d;
    if s == 0 {
        return Err(Error::Data("empty input".into()));
    }
    if s > cfg.max_len {
        return Err(Error::Length(format!(
            "sequence of {s} exceeds max_len {}",
            cfg.max_len
        )));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= s) {
        return Err(Error::Data(format!("logit position {p} outside sequence of {s}")));
    }
    if embeddings.dim() != cfg.embed_dim {
        return Err(Error::config(format!(
            "embeddings have {} dims, model expects {}",
            embeddings.dim(),
            cfg.embed_dim
        )));
    }

    // input embeddings
    let mut x = vec![T::zero(); s * d];
    let mut is_image = vec![false; s];
    let mut images = Vec::with_capacity(input.image_slots.len());
    for slot in &input.image_slots {
        let row = slot.row_id as usize;
        if row >= embeddings.n_rows() {
            return Err(Error::Data(format!("image row {row} not in embedding matrix")));
        }
        if slot.position + cfg.prefix_len > s {
            return Err(Error::Data(format!(
                "image slot at {} overruns sequence",
                slot.position
            )));
        }
        let e: Vec<T> = embeddings
            .row(row)
            .iter()
            .map(|&v| <T as Scalar>::from_f32(v))
            .collect();
        let (hidden, prefix) = map_visual_cached(cfg, layout, params, &e);
        for p in 0..cfg.prefix_len {
            let t = slot.position + p;
            is_image[t] = true;
            x[t * d..(t + 1) * d].copy_from_slice(&prefix[p * d..(p + 1) * d]);
        }
        images.push(ImageCache {
            start: slot.position,
            input: e,
            hidden,
        });
    }
    for t in 0..s {
        let row = &mut x[t * d..(t + 1) * d];
        if !is_image[t] {
            let tok = input.token_ids[t] as usize;
            if tok >= vocab {
                return Err(Error::config(format!("token id {tok} outside lexicon of {vocab}")));
            }
            let e = &params[layout.tok_emb + tok * d..layout.tok_emb + (tok + 1) * d];
            row.copy_from_slice(e);
        }
        let pe = &params[layout.pos_emb + t * d..layout.pos_emb + (t + 1) * d];
        for (v, &p) in row.iter_mut().zip(pe) {
            *v = *v + p;
        }
    }

    let (nh, hd, f) = (cfg.n_heads, cfg.head_dim(), cfg.d_ff);
    let scale = T::from_f64v(1.0 / (hd as f64).sqrt());
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for b in &layout.blocks {
        let mut a = vec![T::zero(); s * d];
        let mut ln1_xhat = vec![T::zero(); s * d];
        let mut ln1_rstd = vec![T::zero(); s];
        layer_norm(
            &x,
            d,
            &params[b.ln1_g..b.ln1_g + d],
            &params[b.ln1_b..b.ln1_b + d],
            &mut a,
            &mut ln1_xhat,
            &mut ln1_rstd,
        );

        let mut qkv = vec![T::zero(); s * 3 * d];
        matmul(
            s,
            d,
            3 * d,
            &a,
            &params[b.wqkv..b.wqkv + 3 * d * d],
            &mut qkv,
            T::zero(),
        );
        add_bias(&mut qkv, &params[b.bqkv..b.bqkv + 3 * d]);

        let mut probs = vec![T::zero(); nh * s * s];
        let mut attn = vec![T::zero(); s * d];
        for h in 0..nh {
            let pr = &mut probs[h * s * s..(h + 1) * s * s];
            T::gemm_raw(
                s,
                hd,
                s,
                scale,
                &qkv[h * hd..],
                3 * d as isize,
                1,
                &qkv[d + h * hd..],
                1,
                3 * d as isize,
                T::zero(),
                pr,
                s as isize,
                1,
            );
            for i in 0..s {
                softmax_prefix(&mut pr[i * s..(i + 1) * s], i + 1);
            }
            T::gemm_raw(
                s,
                s,
                hd,
                T::one(),
                pr,
                s as isize,
                1,
                &qkv[2 * d + h * hd..],
                3 * d as isize,
                1,
                T::zero(),
                &mut attn[h * hd..],
                d as isize,
                1,
            );
        }
        let mut proj = params[b.bo..b.bo + d].repeat(s);
        matmul(s, d, d, &attn, &params[b.wo..b.wo + d * d], &mut proj, T::one());
        for (xv, pv) in x.iter_mut().zip(&proj) {
            *xv = *xv + *pv;
        }

        let mut m = vec![T::zero(); s * d];
        let mut ln2_xhat = vec![T::zero(); s * d];
        let mut ln2_rstd = vec![T::zero(); s];
        layer_norm(
            &x,
            d,
            &params[b.ln2_g..b.ln2_g + d],
            &params[b.ln2_b..b.ln2_b + d],
            &mut m,
            &mut ln2_xhat,
            &mut ln2_rstd,
        );
        let mut u = params[b.ff_b1..b.ff_b1 + f].repeat(s);
        matmul(s, d, f, &m, &params[b.ff_w1..b.ff_w1 + d * f], &mut u, T::one());
        let g: Vec<T> = u.iter().map(|&v| gelu(v)).collect();
        let mut out = params[b.ff_b2..b.ff_b2 + d].repeat(s);
        matmul(s, f, d, &g, &params[b.ff_w2..b.ff_w2 + f * d], &mut out, T::one());
        for (xv, ov) in x.iter_mut().zip(&out) {
            *xv = *xv + *ov;
        }
        blocks.push(BlockCache {
            ln1_xhat,
            ln1_rstd,
            a,
            qkv,
            probs,
            attn,
            ln2_xhat,
            ln2_rstd,
            m,
            u,
            g,
        });
    }

    let np = positions.len();
    let mut xs = Vec::with_capacity(np * d);
    for &p in &positions {
        xs.extend_from_slice(&x[p * d..(p + 1) * d]);
    }
    let mut z = vec![T::zero(); np * d];
    let mut lnf_xhat = vec![T::zero(); np * d];
    let mut lnf_rstd = vec![T::zero(); np];
    layer_norm(
        &xs,
        d,
        &params[layout.lnf_g..layout.lnf_g + d],
        &params[layout.lnf_b..layout.lnf_b + d],
        &mut z,
        &mut lnf_xhat,
        &mut lnf_rstd,
    );
    let mut logits = params[layout.head_bias..layout.head_bias + vocab].repeat(np);
    matmul_bt(
        np,
        d,
        vocab,
        &z,
        &params[layout.tok_emb..layout.tok_emb + vocab * d],
        &mut logits,
        T::one(),
    );

    Ok(ForwardTrace {
        seq_len: s,
        tokens: input.token_ids.clone(),
        is_image,
        images,
        blocks,
        positions,
        targets: Vec::new(),
        lnf_xhat,
        lnf_rstd,
        z,
        logits,
        vocab,
        loss: f64::NAN,
    })
}

/// Gradient of the trace's mean cross-entropy with respect to every parameter.
pub fn backward<T: Scalar>(cfg: &ModelConfig, layout: &ParamLayout, params: &[T], trace: &ForwardTrace<T>) -> Vec<T> {
    let mut grad = vec![T::zero(); layout.total()];
    backward_into(cfg, layout, params, trace, T::one(), &mut grad);
    grad
}

/// Adds `weight * dLoss/dParams` into `grad`.
pub(crate) fn backward_into<T: Scalar>(
    cfg: &ModelConfig,
    layout: &ParamLayout,
    params: &[T],
    trace: &ForwardTrace<T>,
    weight: T,
    grad: &mut [T],
) {
    let s = trace.seq_len;
    let d = cfg.d_model;
    let v = trace.vocab;
    let np = trace.positions.len();
    assert_eq!(trace.targets.len(), np, "backward needs a loss trace");

    // dL/dlogits = (softmax - onehot) / n
    let inv_n = 1.0 / np as f64;
    let mut dlogits = vec![T::zero(); np * v];
    for i in 0..np {
        let lp = log_softmax(trace.logit_row(i));
        for (j, l) in lp.iter().enumerate() {
            dlogits[i * v + j] = T::from_f64v(l.exp() * inv_n * weight.as_f64());
        }
        let tgt = trace.targets[i] as usize;
        dlogits[i * v + tgt] = dlogits[i * v + tgt] - T::from_f64v(inv_n * weight.as_f64());
    }
    accumulate_col_sums(&dlogits, v, &mut grad[layout.head_bias..layout.head_bias + v]);
    matmul_at(
        v,
        np,
        d,
        &dlogits,
        &trace.z,
        &mut grad[layout.tok_emb..layout.tok_emb + v * d],
        T::one(),
    );
    let mut dz = vec![T::zero(); np * d];
    matmul(
        np,
        v,
        d,
        &dlogits,
        &params[layout.tok_emb..layout.tok_emb + v * d],
        &mut dz,
        T::zero(),
    );

    let mut dxs = vec![T::zero(); np * d];
    {
        let (gl, bl) = grad.split_at_mut(layout.lnf_b);
        layer_norm_backward(
            &dz,
            &trace.lnf_xhat,
            &trace.lnf_rstd,
            &params[layout.lnf_g..layout.lnf_g + d],
            d,
            &mut gl[layout.lnf_g..layout.lnf_g + d],
            &mut bl[..d],
            &mut dxs,
        );
    }
    let mut dx = vec![T::zero(); s * d];
    for (i, &p) in trace.positions.iter().enumerate() {
        for k in 0..d {
            dx[p * d + k] = dx[p * d + k] + dxs[i * d + k];
        }
    }

    let (nh, hd, f) = (cfg.n_heads, cfg.head_dim(), cfg.d_ff);
    let scale = T::from_f64v(1.0 / (hd as f64).sqrt());
    for (b, c) in layout.blocks.iter().zip(&trace.blocks).rev() {
        // feed-forward
        matmul_at(f, s, d, &c.g, &dx, &mut grad[b.ff_w2..b.ff_w2 + f * d], T::one());
        accumulate_col_sums(&dx, d, &mut grad[b.ff_b2..b.ff_b2 + d]);
        let mut du = vec![T::zero(); s * f];
        matmul_bt(s, d, f, &dx, &params[b.ff_w2..b.ff_w2 + f * d], &mut du, T::zero());
        for (g, &u) in du.iter_mut().zip(&c.u) {
            *g = *g * gelu_grad(u);
        }
        matmul_at(d, s, f, &c.m, &du, &mut grad[b.ff_w1..b.ff_w1 + d * f], T::one());
        accumulate_col_sums(&du, f, &mut grad[b.ff_b1..b.ff_b1 + f]);
        let mut dm = vec![T::zero(); s * d];
        matmul_bt(s, f, d, &du, &params[b.ff_w1..b.ff_w1 + d * f], &mut dm, T::zero());
        {
            let (gl, bl) = grad.split_at_mut(b.ln2_b);
            layer_norm_backward(
                &dm,
                &c.ln2_xhat,
                &c.ln2_rstd,
                &params[b.ln2_g..b.ln2_g + d],
                d,
                &mut gl[b.ln2_g..b.ln2_g + d],
                &mut bl[..d],
                &mut dx,
            );
        }

        // attention
        matmul_at(d, s, d, &c.attn, &dx, &mut grad[b.wo..b.wo + d * d], T::one());
        accumulate_col_sums(&dx, d, &mut grad[b.bo..b.bo + d]);
        let mut dattn = vec![T::zero(); s * d];
        matmul_bt(s, d, d, &dx, &params[b.wo..b.wo + d * d], &mut dattn, T::zero());

        let mut dqkv = vec![T::zero(); s * 3 * d];
        let mut dp = vec![T::zero(); s * s];
        for h in 0..nh {
            let pr = &c.probs[h * s * s..(h + 1) * s * s];
            // dP = dO V^T
            T::gemm_raw(
                s,
                hd,
                s,
                T::one(),
                &dattn[h * hd..],
                d as isize,
                1,
                &c.qkv[2 * d + h * hd..],
                1,
                3 * d as isize,
                T::zero(),
                &mut dp,
                s as isize,
                1,
            );
            // dV = P^T dO
            T::gemm_raw(
                s,
                s,
                hd,
                T::one(),
                pr,
                1,
                s as isize,
                &dattn[h * hd..],
                d as isize,
                1,
                T::zero(),
                &mut dqkv[2 * d + h * hd..],
                3 * d as isize,
                1,
            );
            // dS = P * (dP - rowsum(dP * P)), scaled
            for i in 0..s {
                let row_p = &pr[i * s..i * s + i + 1];
                let row_d = &mut dp[i * s..(i + 1) * s];
                let dot: f64 = row_p.iter().zip(row_d.iter()).map(|(a, b)| (*a * *b).as_f64()).sum();
                let dot = T::from_f64v(dot);
                for j in 0..=i {
                    row_d[j] = row_p[j] * (row_d[j] - dot) * scale;
                }
                for val in row_d[i + 1..].iter_mut() {
                    *val = T::zero();
                }
            }
            // dQ = dS K, dK = dS^T Q
            T::gemm_raw(
                s,
                s,
                hd,
                T::one(),
                &dp,
                s as isize,
                1,
                &c.qkv[d + h * hd..],
                3 * d as isize,
                1,
                T::zero(),
                &mut dqkv[h * hd..],
                3 * d as isize,
                1,
            );
            T::gemm_raw(
                s,
                s,
                hd,
                T::one(),
                &dp,
                1,
                s as isize,
                &c.qkv[h * hd..],
                3 * d as isize,
                1,
                T::zero(),
                &mut dqkv[d + h * hd..],
                3 * d as isize,
                1,
            );
        }
        matmul_at(
            d,
            s,
            3 * d,
            &c.a,
            &dqkv,
            &mut grad[b.wqkv..b.wqkv + 3 * d * d],
            T::one(),
        );
        accumulate_col_sums(&dqkv, 3 * d, &mut grad[b.bqkv..b.bqkv + 3 * d]);
        let mut da = vec![T::zero(); s * d];
        matmul_bt(
            s,
            3 * d,
            d,
            &dqkv,
            &params[b.wqkv..b.wqkv + 3 * d * d],
            &mut da,
            T::zero(),
        );
        {
            let (gl, bl) = grad.split_at_mut(b.ln1_b);
            layer_norm_backward(
                &da,
                &c.ln1_xhat,
                &c.ln1_rstd,
                &params[b.ln1_g..b.ln1_g + d],
                d,
                &mut gl[b.ln1_g..b.ln1_g + d],
                &mut bl[..d],
                &mut dx,
            );
        }
    }

    // input embeddings
    for t in 0..s {
        let row = &dx[t * d..(t + 1) * d];
        let pe = &mut grad[layout.pos_emb + t * d..layout.pos_emb + (t + 1) * d];
        for (g, &r) in pe.iter_mut().zip(row) {
            *g = *g + r;
        }
        if !trace.is_image[t] {
            let tok = trace.tokens[t] as usize;
            let te = &mut grad[layout.tok_emb + tok * d..layout.tok_emb + (tok + 1) * d];
            for (g, &r) in te.iter_mut().zip(row) {
                *g = *g + r;
            }
        }
    }
    let (dim, hid, out_dim) = (cfg.embed_dim, cfg.map_hidden, cfg.prefix_len * d);
    for img in &trace.images {
        let dprefix = &dx[img.start * d..img.start * d + out_dim];
        matmul_at(
            hid,
            1,
            out_dim,
            &img.hidden,
            dprefix,
            &mut grad[layout.map_w2..layout.map_w2 + hid * out_dim],
            T::one(),
        );
        for (g, &r) in grad[layout.map_b2..layout.map_b2 + out_dim].iter_mut().zip(dprefix) {
            *g = *g + r;
        }
        let mut dh = vec![T::zero(); hid];
        matmul_bt(
            1,
            out_dim,
            hid,
            dprefix,
            &params[layout.map_w2..layout.map_w2 + hid * out_dim],
            &mut dh,
            T::zero(),
        );
        for (g, &h) in dh.iter_mut().zip(&img.hidden) {
            *g = *g * (T::one() - h * h);
        }
        matmul_at(
            dim,
            1,
            hid,
            &img.input,
            &dh,
            &mut grad[layout.map_w1..layout.map_w1 + dim * hid],
            T::one(),
        );
        for (g, &r) in grad[layout.map_b1..layout.map_b1 + hid].iter_mut().zip(&dh) {
            *g = *g + r;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::ImageSlot;
    use crate::lexicon::{Lexicon, CAP_ID, EOS_ID, IMG_ID, PAD_ID};
    use crate::model::TinyVlm;

    fn setup() -> (TinyVlm, ModelInput, EmbeddingMatrix) {
        let names: Vec<String> = ["dax", "wug"].iter().map(|s| s.to_string()).collect();
        let lex = Lexicon::new(&names, 1).unwrap();
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            prefix_len: 2,
            embed_dim: 3,
            map_hidden: 5,
            max_len: 16,
            init_std: 0.3,
            map_gain: 1.0,
        };
        let mut m = TinyVlm::new(cfg, lex, 11).unwrap();
        // make gains and biases non-trivial
        for v in m.params_mut().iter_mut().step_by(7) {
            *v += 0.05;
        }
        let dax = m.lexicon().id("dax").unwrap();
        let wug = m.lexicon().id("wug").unwrap();
        let tokens = vec![
            IMG_ID, PAD_ID, PAD_ID, CAP_ID, dax, EOS_ID, IMG_ID, PAD_ID, PAD_ID, CAP_ID, wug, EOS_ID,
        ];
        let mut loss_mask = vec![false; tokens.len()];
        loss_mask[10] = true;
        loss_mask[11] = true;
        let input = ModelInput {
            token_ids: tokens,
            image_slots: vec![
                ImageSlot { position: 1, row_id: 0 },
                ImageSlot { position: 7, row_id: 1 },
            ],
            loss_mask,
            prompt_len: 10,
        };
        let emb = EmbeddingMatrix::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.5, 0.2, -0.7]]).unwrap();
        (m, input, emb)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (m, input, emb) = setup();
        let cfg = m.config().clone();
        let layout = m.layout();
        let mut p: Vec<f64> = m.params().iter().map(|&v| f64::from(v)).collect();
        let (_, trace) = forward_loss(&cfg, &layout, &p, &input, &emb).unwrap();
        let g = backward(&cfg, &layout, &p, &trace);
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..p.len() {
            let orig = p[i];
            p[i] = orig + eps;
            let lp = forward_loss(&cfg, &layout, &p, &input, &emb).unwrap().0;
            p[i] = orig - eps;
            let lm = forward_loss(&cfg, &layout, &p, &input, &emb).unwrap().0;
            p[i] = orig;
            let num = (lp - lm) / (2.0 * eps);
            let err = (num - g[i]).abs() / (num.abs() + g[i].abs()).max(1e-4);
            worst = worst.max(err);
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn logits_agree_between_entry_points() {
        let (m, input, emb) = setup();
        let cfg = m.config().clone();
        let layout = m.layout();
        let (loss, t1) = forward_loss::<f32>(&cfg, &layout, m.params(), &input, &emb).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        let t2 = forward_with_logits::<f32>(&cfg, &layout, m.params(), &input, &emb, vec![9, 10]).unwrap();
        assert_eq!(t1.logits, t2.logits);
    }

    #[test]
    fn causal_prefix_is_unaffected_by_suffix() {
        let (m, input, emb) = setup();
        let cfg = m.config().clone();
        let layout = m.layout();
        let a = forward_with_logits::<f32>(&cfg, &layout, m.params(), &input, &emb, vec![5]).unwrap();
        let mut short = input.clone();
        short.token_ids.truncate(6);
        short.loss_mask.truncate(6);
        short.image_slots.truncate(1);
        let b = forward_with_logits::<f32>(&cfg, &layout, m.params(), &short, &emb, vec![5]).unwrap();
        for (x, y) in a.logits.iter().zip(&b.logits) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn empty_mask_and_overlong_inputs() {
        let (m, mut input, emb) = setup();
        let cfg = m.config().clone();
        let layout = m.layout();
        input.loss_mask.fill(false);
        assert!(matches!(
            forward_loss::<f32>(&cfg, &layout, m.params(), &input, &emb),
            Err(Error::EmptyTarget)
        ));
        input.token_ids = vec![EOS_ID; 17];
        input.loss_mask = vec![true; 17];
        input.loss_mask[0] = false;
        assert!(matches!(
            forward_loss::<f32>(&cfg, &layout, m.params(), &input, &emb),
            Err(Error::Length(_))
        ));
    }
}
