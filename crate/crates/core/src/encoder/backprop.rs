//! Reverse-mode gradients of the CTC loss through the offline (chunk-masked)
//! encoder pass. Only the trainer uses this.

use super::{
    offline_chunk_mask, positional_encoding, stack_frames, EncoderConfig, EncoderError,
    EncoderWeights, LayerWeights, Result, LN_EPS,
};
use crate::ctc::{ctc_grad, ctc_loss, TokenId};
use crate::linalg::{attention_with_probs, linear, log_softmax, matmul, AttnMask, Matrix};

struct NormTrace {
    xhat: Matrix,
    inv_std: Vec<f32>,
}

fn norm_forward(x: &Matrix, gamma: &Matrix, beta: &Matrix) -> (Matrix, NormTrace) {
    let (rows, cols) = x.shape();
    let mut xhat = Matrix::zeros(rows, cols);
    let mut y = Matrix::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    let n = cols as f32;
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f32>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        for c in 0..cols {
            let xh = (row[c] - mean) * inv;
            xhat.set(r, c, xh);
            y.set(r, c, xh * gamma.get(0, c) + beta.get(0, c));
        }
    }
    (y, NormTrace { xhat, inv_std })
}

/// Returns `dx` and accumulates `dgamma`, `dbeta`.
fn norm_backward(
    dy: &Matrix,
    t: &NormTrace,
    gamma: &Matrix,
    dgamma: &mut Matrix,
    dbeta: &mut Matrix,
) -> Matrix {
    let (rows, cols) = dy.shape();
    let n = cols as f32;
    let mut dx = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let mut dxhat = vec![0.0f32; cols];
        let mut sum = 0.0f32;
        let mut sum_xh = 0.0f32;
        for c in 0..cols {
            let g = dy.get(r, c);
            let xh = t.xhat.get(r, c);
            dgamma.data_mut()[c] += g * xh;
            dbeta.data_mut()[c] += g;
            dxhat[c] = g * gamma.get(0, c);
            sum += dxhat[c];
            sum_xh += dxhat[c] * xh;
        }
        let inv = t.inv_std[r];
        for c in 0..cols {
            let xh = t.xhat.get(r, c);
            dx.set(r, c, inv * (dxhat[c] - sum / n - xh * sum_xh / n));
        }
    }
    dx
}

struct LayerTrace {
    norm1: NormTrace,
    hn1: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    ctx: Matrix,
    norm2: NormTrace,
    hn2: Matrix,
    pre_relu: Matrix,
    post_relu: Matrix,
}

fn accumulate(dst: &mut Matrix, src: &Matrix) {
    dst.add_assign(src);
}

fn accumulate_bias(dst: &mut Matrix, grad: &Matrix) {
    for (d, g) in dst.data_mut().iter_mut().zip(grad.sum_rows()) {
        *d += g;
    }
}

fn mm_t(a: &Matrix, b: &Matrix) -> Matrix {
    // a × bᵀ
    matmul(a, &b.transpose()).expect("shapes checked by forward pass")
}

fn t_mm(a: &Matrix, b: &Matrix) -> Matrix {
    // aᵀ × b
    matmul(&a.transpose(), b).expect("shapes checked by forward pass")
}

fn layer_forward(
    cfg: &EncoderConfig,
    lw: &LayerWeights,
    h: &mut Matrix,
    mask: &AttnMask,
) -> Result<LayerTrace> {
    let (hn1, norm1) = norm_forward(h, &lw.ln1_gamma, &lw.ln1_beta);
    let q = linear(&hn1, &lw.wq, lw.bq.data())?;
    let k = linear(&hn1, &lw.wk, lw.bk.data())?;
    let v = linear(&hn1, &lw.wv, lw.bv.data())?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f32).sqrt();
    let mut ctx = Matrix::zeros(h.rows(), cfg.d_model);
    let mut probs = Vec::with_capacity(cfg.n_heads);
    for head in 0..cfg.n_heads {
        let (a, b) = (head * dh, (head + 1) * dh);
        let (out, p) = attention_with_probs(
            &q.slice_cols(a, b),
            &k.slice_cols(a, b),
            &v.slice_cols(a, b),
            mask,
            scale,
        )?;
        ctx.set_cols(a, &out);
        probs.push(p);
    }
    h.add_assign(&linear(&ctx, &lw.wo, lw.bo.data())?);

    let (hn2, norm2) = norm_forward(h, &lw.ln2_gamma, &lw.ln2_beta);
    let pre_relu = linear(&hn2, &lw.w1, lw.b1.data())?;
    let mut post_relu = pre_relu.clone();
    for v in post_relu.data_mut() {
        *v = v.max(0.0);
    }
    h.add_assign(&linear(&post_relu, &lw.w2, lw.b2.data())?);
    Ok(LayerTrace {
        norm1,
        hn1,
        q,
        k,
        v,
        probs,
        ctx,
        norm2,
        hn2,
        pre_relu,
        post_relu,
    })
}

/// Takes `d(loss)/d(layer output)` and returns `d(loss)/d(layer input)`.
fn layer_backward(
    cfg: &EncoderConfig,
    lw: &LayerWeights,
    t: &LayerTrace,
    dout: Matrix,
    g: &mut LayerWeights,
) -> Matrix {
    // Feed-forward branch.
    accumulate(&mut g.w2, &t_mm(&t.post_relu, &dout));
    accumulate_bias(&mut g.b2, &dout);
    let mut dpre = mm_t(&dout, &lw.w2);
    for (d, p) in dpre.data_mut().iter_mut().zip(t.pre_relu.data()) {
        if *p <= 0.0 {
            *d = 0.0;
        }
    }
    accumulate(&mut g.w1, &t_mm(&t.hn2, &dpre));
    accumulate_bias(&mut g.b1, &dpre);
    let dhn2 = mm_t(&dpre, &lw.w1);
    let mut dmid = dout;
    dmid.add_assign(&norm_backward(
        &dhn2,
        &t.norm2,
        &lw.ln2_gamma,
        &mut g.ln2_gamma,
        &mut g.ln2_beta,
    ));

    // Attention branch.
    accumulate(&mut g.wo, &t_mm(&t.ctx, &dmid));
    accumulate_bias(&mut g.bo, &dmid);
    let dctx = mm_t(&dmid, &lw.wo);
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f32).sqrt();
    let rows = dctx.rows();
    let mut dq = Matrix::zeros(rows, cfg.d_model);
    let mut dk = Matrix::zeros(rows, cfg.d_model);
    let mut dv = Matrix::zeros(rows, cfg.d_model);
    for (head, p) in t.probs.iter().enumerate() {
        let (a, b) = (head * dh, (head + 1) * dh);
        let dctx_h = dctx.slice_cols(a, b);
        let q_h = t.q.slice_cols(a, b);
        let k_h = t.k.slice_cols(a, b);
        let v_h = t.v.slice_cols(a, b);
        dv.set_cols(a, &t_mm(p, &dctx_h));
        let dp = mm_t(&dctx_h, &v_h);
        let mut ds = Matrix::zeros(rows, rows);
        for r in 0..rows {
            let dot: f32 = dp.row(r).iter().zip(p.row(r)).map(|(x, y)| x * y).sum();
            for c in 0..rows {
                ds.set(r, c, p.get(r, c) * (dp.get(r, c) - dot) * scale);
            }
        }
        dq.set_cols(a, &matmul(&ds, &k_h).expect("shape"));
        dk.set_cols(a, &t_mm(&ds, &q_h));
    }
    accumulate(&mut g.wq, &t_mm(&t.hn1, &dq));
    accumulate_bias(&mut g.bq, &dq);
    accumulate(&mut g.wk, &t_mm(&t.hn1, &dk));
    accumulate_bias(&mut g.bk, &dk);
    accumulate(&mut g.wv, &t_mm(&t.hn1, &dv));
    accumulate_bias(&mut g.bv, &dv);
    let mut dhn1 = mm_t(&dq, &lw.wq);
    dhn1.add_assign(&mm_t(&dk, &lw.wk));
    dhn1.add_assign(&mm_t(&dv, &lw.wv));
    let mut din = dmid;
    din.add_assign(&norm_backward(
        &dhn1,
        &t.norm1,
        &lw.ln1_gamma,
        &mut g.ln1_gamma,
        &mut g.ln1_beta,
    ));
    din
}

#[derive(Debug, Clone)]
pub struct LossAndGrad {
    pub loss: f64,
    pub grads: EncoderWeights,
    pub logprobs: Matrix,
}

/// CTC loss of one utterance and its gradient with respect to every weight.
/// Fails with [`EncoderError::Empty`] on empty input and reports an
/// infeasible target as an infinite loss with zero gradients.
pub fn loss_and_grad(
    cfg: &EncoderConfig,
    weights: &EncoderWeights,
    feats: &Matrix,
    target: &[TokenId],
) -> Result<LossAndGrad> {
    if feats.rows() == 0 {
        return Err(EncoderError::Empty);
    }
    if feats.cols() != cfg.feat_dim {
        return Err(EncoderError::FeatDim {
            got: feats.cols(),
            want: cfg.feat_dim,
        });
    }
    let x = stack_frames(feats, cfg.subsample);
    let mask = offline_chunk_mask(x.rows(), cfg.chunk_frames, cfg.left_chunks);
    let mut h = linear(&x, &weights.input_w, weights.input_b.data())?;
    h.add_assign(&positional_encoding(0, x.rows(), cfg.d_model));
    let mut traces = Vec::with_capacity(cfg.num_layers);
    for lw in &weights.layers {
        traces.push(layer_forward(cfg, lw, &mut h, &mask)?);
    }
    let logits = linear(&h, &weights.out_w, weights.out_b.data())?;
    let logprobs = log_softmax(&logits);
    let loss = ctc_loss(&logprobs, target);

    let mut grads = weights.zeros_like();
    let cg = ctc_grad(&logprobs, target);
    if !cg.feasible {
        return Ok(LossAndGrad {
            loss,
            grads,
            logprobs,
        });
    }
    let dlogits = cg.grad;
    accumulate(&mut grads.out_w, &t_mm(&h, &dlogits));
    accumulate_bias(&mut grads.out_b, &dlogits);
    let mut dh = mm_t(&dlogits, &weights.out_w);
    for l in (0..cfg.num_layers).rev() {
        dh = layer_backward(cfg, &weights.layers[l], &traces[l], dh, &mut grads.layers[l]);
    }
    accumulate(&mut grads.input_w, &t_mm(&x, &dh));
    accumulate_bias(&mut grads.input_b, &dh);
    Ok(LossAndGrad {
        loss,
        grads,
        logprobs,
    })
}
