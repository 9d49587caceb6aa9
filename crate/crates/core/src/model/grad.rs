//! Reverse-mode pass through [`TinyTransformer::forward_taped`].

use super::transformer::{
    final_norm_index, head_index, layer_tensor, Tape, TinyTransformer, ATTN_NORM, EMBEDDING,
    MLP_NORM, WK, WO, WQ, WV, W_DOWN, W_UP,
};

/// Backward through RMS norm `y = x * inv * w`. Accumulates `dw`, returns `dx`.
fn rms_norm_back(x: &[f64], w: &[f64], inv: f64, dy: &[f64], dw: &mut [f64], dx: &mut [f64]) {
    let d = x.len() as f64;
    let mut dot = 0.0;
    for i in 0..x.len() {
        dw[i] += dy[i] * x[i] * inv;
        dot += dy[i] * w[i] * x[i];
    }
    let c = inv * inv * inv * dot / d;
    for i in 0..x.len() {
        dx[i] = inv * w[i] * dy[i] - c * x[i];
    }
}

/// `dw += x^T dy` for one row; `dx = dy · w^T`.
fn linear_back(x: &[f64], w: &[f64], dy: &[f64], dw: &mut [f64], dx: &mut [f64]) {
    let cols = dy.len();
    for (i, &xi) in x.iter().enumerate() {
        let wrow = &w[i * cols..(i + 1) * cols];
        let grow = &mut dw[i * cols..(i + 1) * cols];
        let mut acc = 0.0;
        for j in 0..cols {
            grow[j] += xi * dy[j];
            acc += wrow[j] * dy[j];
        }
        dx[i] = acc;
    }
}

fn silu_grad(u: f64) -> f64 {
    let s = 1.0 / (1.0 + (-u).exp());
    s * (1.0 + u * (1.0 - s))
}

/// Gradients for every parameter tensor (same indexing as `params()`), given
/// the loss gradient with respect to the logits and, optionally, the hidden
/// states. Frozen tensors are still computed here; callers mask them.
pub(crate) fn backward(
    model: &TinyTransformer,
    tape: &Tape,
    dlogits: &[f64],
    dhidden_extra: Option<&[f64]>,
) -> Vec<Vec<f64>> {
    let cfg = model.config();
    let (n, d, ff, vocab, heads, hd) = (
        tape.tokens.len(),
        cfg.d_model,
        cfg.d_ff,
        cfg.vocab,
        cfg.heads,
        cfg.head_dim(),
    );
    let scale = 1.0 / (hd as f64).sqrt();
    let mut grads: Vec<Vec<f64>> = model.params().iter().map(|t| vec![0.0; t.data.len()]).collect();

    // Output head and final norm.
    let head = head_index(cfg);
    let fnorm = final_norm_index(cfg);
    let mut dx = vec![0.0; n * d];
    let mut dh = vec![0.0; d];
    for i in 0..n {
        let hidden = &tape.hidden[i * d..(i + 1) * d];
        linear_back(
            hidden,
            model.w(head),
            &dlogits[i * vocab..(i + 1) * vocab],
            &mut grads[head],
            &mut dh,
        );
        if let Some(extra) = dhidden_extra {
            for (a, b) in dh.iter_mut().zip(&extra[i * d..(i + 1) * d]) {
                *a += b;
            }
        }
        let (gw, dxr) = split_grad(&mut grads, fnorm, &mut dx, i, d);
        rms_norm_back(
            &tape.final_in[i * d..(i + 1) * d],
            model.w(fnorm),
            tape.final_inv_rms[i],
            &dh,
            gw,
            dxr,
        );
    }

    let mut dnorm = vec![0.0; d];
    let mut dtmp = vec![0.0; d];
    let mut dact = vec![0.0; ff];
    let mut dup = vec![0.0; ff];
    for layer in (0..cfg.layers).rev() {
        let lt = &tape.layers[layer];

        // MLP: x_out = x_mid + silu(norm(x_mid) W_up) W_down
        let (iu, idn, inorm) = (
            layer_tensor(layer, W_UP),
            layer_tensor(layer, W_DOWN),
            layer_tensor(layer, MLP_NORM),
        );
        let mut dx_mid = dx.clone();
        for i in 0..n {
            let urow = i * ff..(i + 1) * ff;
            linear_back(&lt.act[urow.clone()], model.w(idn), &dx[i * d..(i + 1) * d], &mut grads[idn], &mut dact);
            for ((g, &a), &u) in dup.iter_mut().zip(&dact).zip(&lt.up[urow]) {
                *g = a * silu_grad(u);
            }
            linear_back(&lt.mlp_in[i * d..(i + 1) * d], model.w(iu), &dup, &mut grads[iu], &mut dnorm);
            rms_norm_back(
                &lt.x_mid[i * d..(i + 1) * d],
                model.w(inorm),
                lt.mlp_inv_rms[i],
                &dnorm,
                &mut grads[inorm],
                &mut dtmp,
            );
            for (a, b) in dx_mid[i * d..(i + 1) * d].iter_mut().zip(&dtmp) {
                *a += b;
            }
        }

        // Attention: x_mid = x_in + attn(norm(x_in)) W_o
        let io = layer_tensor(layer, WO);
        let mut dattn = vec![0.0; n * d];
        for i in 0..n {
            linear_back(
                &lt.attn_out[i * d..(i + 1) * d],
                model.w(io),
                &dx_mid[i * d..(i + 1) * d],
                &mut grads[io],
                &mut dattn[i * d..(i + 1) * d],
            );
        }
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut dw = vec![0.0; n];
        for i in 0..n {
            for h in 0..heads {
                let hs = h * hd..(h + 1) * hd;
                let w = &lt.weights[(i * heads + h) * n..(i * heads + h + 1) * n];
                let dout = &dattn[i * d + hs.start..i * d + hs.end];
                let mut dot = 0.0;
                for j in 0..n {
                    if !tape.mask[i * n + j] {
                        dw[j] = 0.0;
                        continue;
                    }
                    let vj = &lt.v[j * d + hs.start..j * d + hs.end];
                    dw[j] = dout.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dot += w[j] * dw[j];
                    for (g, &o) in dv[j * d + hs.start..j * d + hs.end].iter_mut().zip(dout) {
                        *g += w[j] * o;
                    }
                }
                for j in 0..n {
                    if !tape.mask[i * n + j] {
                        continue;
                    }
                    let ds = w[j] * (dw[j] - dot) * scale;
                    for t in hs.clone() {
                        dq[i * d + t] += ds * lt.k[j * d + t];
                        dk[j * d + t] += ds * lt.q[i * d + t];
                    }
                }
            }
        }
        let (iq, ik, iv, inorm) = (
            layer_tensor(layer, WQ),
            layer_tensor(layer, WK),
            layer_tensor(layer, WV),
            layer_tensor(layer, ATTN_NORM),
        );
        let mut dx_in = dx_mid;
        for i in 0..n {
            let row = i * d..(i + 1) * d;
            model.unrotate(&mut dq[row.clone()], tape.positions[i]);
            model.unrotate(&mut dk[row.clone()], tape.positions[i]);
            let a = &lt.attn_in[row.clone()];
            dnorm.iter_mut().for_each(|v| *v = 0.0);
            for (idx, src) in [(iq, &dq), (ik, &dk), (iv, &dv)] {
                linear_back(a, model.w(idx), &src[row.clone()], &mut grads[idx], &mut dtmp);
                for (x, y) in dnorm.iter_mut().zip(&dtmp) {
                    *x += y;
                }
            }
            rms_norm_back(
                &lt.x_in[row.clone()],
                model.w(inorm),
                lt.attn_inv_rms[i],
                &dnorm,
                &mut grads[inorm],
                &mut dtmp,
            );
            for (x, y) in dx_in[row].iter_mut().zip(&dtmp) {
                *x += y;
            }
        }
        dx = dx_in;
    }

    for (i, &t) in tape.tokens.iter().enumerate() {
        for (g, &v) in grads[EMBEDDING][t * d..(t + 1) * d].iter_mut().zip(&dx[i * d..(i + 1) * d]) {
            *g += v;
        }
    }
    grads
}

fn split_grad<'a>(
    grads: &'a mut [Vec<f64>],
    index: usize,
    dx: &'a mut [f64],
    row: usize,
    d: usize,
) -> (&'a mut [f64], &'a mut [f64]) {
    (&mut grads[index], &mut dx[row * d..(row + 1) * d])
}
