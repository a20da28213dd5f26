//! Reverse-mode gradients of the final-position cross-entropy, written out
//! by hand for the fixed block structure.

use ndarray::{s, Array1, Array2, Axis};
use rayon::prelude::*;

use super::forward::{attention_core, check_tokens, gelu, gelu_grad, rms_norm};
use super::{ModelError, Parameters};
use crate::tasks::Example;

struct BlockTape {
    x: Array2<f64>,
    a: Array2<f64>,
    inv_a: Array1<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    y: Array2<f64>,
    b: Array2<f64>,
    inv_b: Array1<f64>,
    z: Array2<f64>,
    gz: Array2<f64>,
}

/// Backprop through the gain-only RMS norm. Returns `dx` and accumulates
/// the gain gradient into `dgain`.
fn rms_norm_backward(
    x: &Array2<f64>,
    gain: &Array1<f64>,
    inv: &Array1<f64>,
    dy: &Array2<f64>,
    dgain: &mut Array1<f64>,
) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut dx = Array2::zeros(x.raw_dim());
    for (((xr, dyr), mut dxr), &r) in x
        .axis_iter(Axis(0))
        .zip(dy.axis_iter(Axis(0)))
        .zip(dx.axis_iter_mut(Axis(0)))
        .zip(inv.iter())
    {
        let mut dot = 0.0;
        for j in 0..xr.len() {
            dot += dyr[j] * gain[j] * xr[j];
            dgain[j] += dyr[j] * xr[j] * r;
        }
        let r3 = r * r * r / d;
        for j in 0..xr.len() {
            dxr[j] = r * gain[j] * dyr[j] - r3 * xr[j] * dot;
        }
    }
    dx
}

/// Gradients of the attention core with respect to `q`, `k` and `v`.
fn attention_core_backward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    probs: &[Array2<f64>],
    d_out: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (t_len, d) = q.dim();
    let n_heads = probs.len();
    let dh = d / n_heads;
    let scale = (dh as f64).sqrt().recip();
    let mut dq = Array2::zeros((t_len, d));
    let mut dk = Array2::zeros((t_len, d));
    let mut dv = Array2::zeros((t_len, d));
    let mut dp = vec![0.0; t_len];
    for (h, p) in probs.iter().enumerate() {
        let cols = h * dh..(h + 1) * dh;
        let qh = q.slice(s![.., cols.clone()]);
        let kh = k.slice(s![.., cols.clone()]);
        let vh = v.slice(s![.., cols.clone()]);
        let doh = d_out.slice(s![.., cols.clone()]);
        for t in 0..t_len {
            let mut weighted = 0.0;
            for u in 0..=t {
                dp[u] = doh.row(t).dot(&vh.row(u));
                weighted += p[[t, u]] * dp[u];
                dv.slice_mut(s![u, cols.clone()])
                    .scaled_add(p[[t, u]], &doh.row(t));
            }
            for u in 0..=t {
                let ds = p[[t, u]] * (dp[u] - weighted) * scale;
                dq.slice_mut(s![t, cols.clone()]).scaled_add(ds, &kh.row(u));
                dk.slice_mut(s![u, cols.clone()]).scaled_add(ds, &qh.row(t));
            }
        }
    }
    (dq, dk, dv)
}

/// Cross-entropy of one example at the final position, and its gradient.
fn example_grad(params: &Parameters<f64>, example: &Example) -> (f64, Parameters<f64>) {
    let cfg = &params.config;
    let tokens = &example.tokens;
    let t_len = tokens.len();

    // Forward, recording what the backward pass needs.
    let mut h = super::embed(params, tokens);
    let mut tape = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let x = h;
        let (a, inv_a) = rms_norm(&x, &block.attn_norm);
        let q = a.dot(&block.wq);
        let k = a.dot(&block.wk);
        let v = a.dot(&block.wv);
        let (o, probs) = attention_core(&q, &k, &v, cfg.n_heads);
        let y = &x + &o.dot(&block.wo);
        let (b, inv_b) = rms_norm(&y, &block.ffn_norm);
        let z = b.dot(&block.w1);
        let gz = z.mapv(gelu);
        h = &y + &gz.dot(&block.w2);
        tape.push(BlockTape {
            x,
            a,
            inv_a,
            q,
            k,
            v,
            probs,
            o,
            y,
            b,
            inv_b,
            z,
            gz,
        });
    }
    let last = h.slice(s![t_len - 1.., ..]).to_owned();
    let (f, inv_f) = rms_norm(&last, &params.final_norm);
    let logits = f.dot(&params.head);

    let row = logits.row(0);
    let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let z: f64 = row.iter().map(|&x| (x - max).exp()).sum();
    let loss = max + z.ln() - row[example.target];

    let mut g = params.zeros_like();
    let mut dlogits = logits.mapv(|x| (x - max).exp() / z);
    dlogits[[0, example.target]] -= 1.0;

    g.head = f.t().dot(&dlogits);
    let df = dlogits.dot(&params.head.t());
    let dlast = rms_norm_backward(&last, &params.final_norm, &inv_f, &df, &mut g.final_norm);
    let mut dh = Array2::zeros((t_len, cfg.d_model));
    dh.slice_mut(s![t_len - 1.., ..]).assign(&dlast);

    for (l, (block, tp)) in params.blocks.iter().zip(&tape).enumerate().rev() {
        let gb = &mut g.blocks[l];

        // h = y + W2·gelu(W1·norm(y))
        gb.w2 = tp.gz.t().dot(&dh);
        let dgz = dh.dot(&block.w2.t());
        let mut dz = dgz;
        dz.zip_mut_with(&tp.z, |d, &z| *d *= gelu_grad(z));
        gb.w1 = tp.b.t().dot(&dz);
        let db = dz.dot(&block.w1.t());
        dh = dh + rms_norm_backward(&tp.y, &block.ffn_norm, &tp.inv_b, &db, &mut gb.ffn_norm);

        // y = x + Wo·attn(norm(x))
        gb.wo = tp.o.t().dot(&dh);
        let d_o = dh.dot(&block.wo.t());
        let (dq, dk, dv) = attention_core_backward(&tp.q, &tp.k, &tp.v, &tp.probs, &d_o);
        gb.wq = tp.a.t().dot(&dq);
        gb.wk = tp.a.t().dot(&dk);
        gb.wv = tp.a.t().dot(&dv);
        let da = dq.dot(&block.wq.t()) + dk.dot(&block.wk.t()) + dv.dot(&block.wv.t());
        dh = dh + rms_norm_backward(&tp.x, &block.attn_norm, &tp.inv_a, &da, &mut gb.attn_norm);
    }

    for (t, &tok) in tokens.iter().enumerate() {
        let mut e = g.embed.row_mut(tok);
        e += &dh.row(t);
        let mut p = g.pos.row_mut(t);
        p += &dh.row(t);
    }
    (loss, g)
}

fn check_example(params: &Parameters<f64>, example: &Example) -> Result<(), ModelError> {
    check_tokens(params, &example.tokens)?;
    if example.target >= params.config.vocab_size {
        return Err(ModelError::TokenOutOfRange {
            token: example.target,
            vocab_size: params.config.vocab_size,
        });
    }
    Ok(())
}

/// Cross-entropy of the final-position logits against `example.target`.
pub fn example_loss(params: &Parameters<f64>, example: &Example) -> Result<f64, ModelError> {
    check_example(params, example)?;
    let logits = super::final_logits(
        params,
        &example.tokens,
        &super::AblationMask::full(params.config.n_sublayers()),
    )?;
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let z: f64 = logits.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + z.ln() - logits[example.target])
}

/// Mean final-position cross-entropy over the batch and its gradient with
/// respect to every parameter. Per-example work runs in parallel; the
/// reduction is sequential in batch order.
pub fn loss_and_grad(
    params: &Parameters<f64>,
    batch: &[Example],
) -> Result<(f64, Parameters<f64>), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    for ex in batch {
        check_example(params, ex)?;
    }
    let per_example: Vec<(f64, Parameters<f64>)> = batch
        .par_iter()
        .map(|ex| example_grad(params, ex))
        .collect();
    let mut loss = 0.0;
    let mut grad = params.zeros_like();
    for (l, g) in &per_example {
        loss += l;
        grad.add_scaled(1.0, g);
    }
    let inv = 1.0 / batch.len() as f64;
    grad.scale(inv);
    Ok((loss * inv, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init, ModelConfig};

    fn tiny() -> Parameters<f64> {
        init(&ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_blocks: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 6,
            seed: 3,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut p = tiny();
        p.head.fill(0.0);
        let batch = vec![Example {
            tokens: vec![1, 2, 3],
            target: 5,
        }];
        let (loss, _) = loss_and_grad(&p, &batch).unwrap();
        assert!((loss - 16f64.ln()).abs() < 1e-12);
        assert!((loss - 2.7726).abs() < 1e-4);
    }

    #[test]
    fn loss_matches_forward_path() {
        let p = tiny();
        let ex = Example {
            tokens: vec![4, 4, 9, 1],
            target: 2,
        };
        let (loss, _) = loss_and_grad(&p, std::slice::from_ref(&ex)).unwrap();
        assert!((loss - example_loss(&p, &ex).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn duplicated_batch_has_same_mean() {
        let p = tiny();
        let batch = vec![
            Example {
                tokens: vec![1, 2, 3],
                target: 5,
            },
            Example {
                tokens: vec![7, 7, 0, 3, 2],
                target: 7,
            },
        ];
        let doubled: Vec<Example> = batch.iter().chain(batch.iter()).cloned().collect();
        let (l1, g1) = loss_and_grad(&p, &batch).unwrap();
        let (l2, g2) = loss_and_grad(&p, &doubled).unwrap();
        assert!((l1 - l2).abs() <= 1e-14 * l1.abs());
        for ((_, _, a), (_, _, b)) in g1.tensors().into_iter().zip(g2.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-14 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn empty_batch_and_bad_target_rejected() {
        let p = tiny();
        assert!(matches!(
            loss_and_grad(&p, &[]),
            Err(ModelError::EmptyBatch)
        ));
        let bad = [Example {
            tokens: vec![1],
            target: 16,
        }];
        assert!(loss_and_grad(&p, &bad).is_err());
    }
}
