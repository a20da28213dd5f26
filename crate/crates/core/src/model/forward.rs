use ndarray::{s, Array1, Array2, ArrayView1, Axis};

use super::{BlockParams, ModelError, Parameters, Scalar};
use crate::coalition::Coalition;

pub(crate) const NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Which residual branches run. Layout matches [`Coalition`]: bit `2l` is
/// block `l`'s attention branch, bit `2l + 1` its feed-forward branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationMask {
    keep: Coalition,
}

impl AblationMask {
    pub fn full(n_sublayers: usize) -> Self {
        Self {
            keep: Coalition::full(n_sublayers),
        }
    }

    pub fn empty(n_sublayers: usize) -> Self {
        Self {
            keep: Coalition::empty(n_sublayers),
        }
    }

    /// Keeps exactly the retained players of `coalition`.
    pub fn from_coalition(coalition: Coalition) -> Self {
        Self { keep: coalition }
    }

    /// Full mask with one sublayer removed.
    pub fn without(n_sublayers: usize, sublayer: usize) -> Self {
        Self {
            keep: Coalition::full(n_sublayers).without(sublayer),
        }
    }

    pub fn keeps(&self, sublayer: usize) -> bool {
        self.keep.contains(sublayer)
    }

    pub fn n_sublayers(&self) -> usize {
        self.keep.n_players()
    }

    pub fn coalition(&self) -> Coalition {
        self.keep
    }
}

/// Gain-only RMS norm over each row. Also returns `1/rms` per row.
pub(crate) fn rms_norm<F: Scalar>(x: &Array2<F>, gain: &Array1<F>) -> (Array2<F>, Array1<F>) {
    let d = F::lit(x.ncols() as f64);
    let eps = F::lit(NORM_EPS);
    let mut out = x.clone();
    let mut inv = Array1::zeros(x.nrows());
    for (mut row, r) in out.axis_iter_mut(Axis(0)).zip(inv.iter_mut()) {
        let ms = row.iter().fold(F::zero(), |acc, &v| acc + v * v) / d;
        let ir = (ms + eps).sqrt().recip();
        *r = ir;
        for (v, &g) in row.iter_mut().zip(gain.iter()) {
            *v = *v * ir * g;
        }
    }
    (out, inv)
}

pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let half = F::lit(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn check_tokens<F: Scalar>(
    params: &Parameters<F>,
    tokens: &[usize],
) -> Result<(), ModelError> {
    let cfg = &params.config;
    if tokens.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    if let Some(&token) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            token,
            vocab_size: cfg.vocab_size,
        });
    }
    Ok(())
}

fn check_mask<F: Scalar>(params: &Parameters<F>, mask: &AblationMask) -> Result<(), ModelError> {
    let expected = params.config.n_sublayers();
    if mask.n_sublayers() != expected {
        return Err(ModelError::MaskMismatch {
            expected,
            got: mask.n_sublayers(),
        });
    }
    Ok(())
}

/// Token plus positional embedding, `T × d`. Tokens must be validated.
pub fn embed<F: Scalar>(params: &Parameters<F>, tokens: &[usize]) -> Array2<F> {
    let d = params.config.d_model;
    let mut h = Array2::zeros((tokens.len(), d));
    for (t, &tok) in tokens.iter().enumerate() {
        for ((out, &e), &p) in h
            .row_mut(t)
            .iter_mut()
            .zip(params.embed.row(tok))
            .zip(params.pos.row(t))
        {
            *out = e + p;
        }
    }
    h
}

/// Causal multi-head attention on already-normalised input. Returns the
/// concatenated head outputs (before `W_o`) and each head's `T × T`
/// probability matrix (zero above the diagonal).
pub(crate) fn attention_core<F: Scalar>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    n_heads: usize,
) -> (Array2<F>, Vec<Array2<F>>) {
    let (t_len, d) = q.dim();
    let dh = d / n_heads;
    let scale = F::lit(dh as f64).sqrt().recip();
    let mut out = Array2::zeros((t_len, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let (qh, kh, vh) = (q.slice(cols), k.slice(cols), v.slice(cols));
        let mut p = Array2::zeros((t_len, t_len));
        for t in 0..t_len {
            let mut max = F::neg_infinity();
            for u in 0..=t {
                let score = qh.row(t).dot(&kh.row(u)) * scale;
                p[[t, u]] = score;
                if score > max {
                    max = score;
                }
            }
            let mut z = F::zero();
            for u in 0..=t {
                let e = (p[[t, u]] - max).exp();
                p[[t, u]] = e;
                z = z + e;
            }
            let mut o = out.slice_mut(s![t, h * dh..(h + 1) * dh]);
            for u in 0..=t {
                let w = p[[t, u]] / z;
                p[[t, u]] = w;
                o.scaled_add(w, &vh.row(u));
            }
        }
        probs.push(p);
    }
    (out, probs)
}

/// Attention residual branch `Attn(norm(x))`, without the skip term.
pub fn attention_branch<F: Scalar>(
    block: &BlockParams<F>,
    n_heads: usize,
    x: &Array2<F>,
) -> Array2<F> {
    let (a, _) = rms_norm(x, &block.attn_norm);
    let (o, _) = attention_core(
        &a.dot(&block.wq),
        &a.dot(&block.wk),
        &a.dot(&block.wv),
        n_heads,
    );
    o.dot(&block.wo)
}

/// Per-head attention probabilities of a block's attention branch.
pub fn attention_weights<F: Scalar>(
    block: &BlockParams<F>,
    n_heads: usize,
    x: &Array2<F>,
) -> Vec<Array2<F>> {
    let (a, _) = rms_norm(x, &block.attn_norm);
    attention_core(
        &a.dot(&block.wq),
        &a.dot(&block.wk),
        &a.dot(&block.wv),
        n_heads,
    )
    .1
}

/// Feed-forward residual branch `W_2 · gelu(W_1 · norm(x))`.
pub fn ffn_branch<F: Scalar>(block: &BlockParams<F>, x: &Array2<F>) -> Array2<F> {
    let (b, _) = rms_norm(x, &block.ffn_norm);
    b.dot(&block.w1).mapv(gelu).dot(&block.w2)
}

/// Final norm and head: logits for every row of `h`.
pub fn head<F: Scalar>(params: &Parameters<F>, h: &Array2<F>) -> Array2<F> {
    let (f, _) = rms_norm(h, &params.final_norm);
    f.dot(&params.head)
}

fn residual_stream<F: Scalar>(
    params: &Parameters<F>,
    tokens: &[usize],
    mask: &AblationMask,
) -> Array2<F> {
    let n_heads = params.config.n_heads;
    let mut h = embed(params, tokens);
    for (l, block) in params.blocks.iter().enumerate() {
        if mask.keeps(2 * l) {
            h = &h + &attention_branch(block, n_heads, &h);
        }
        if mask.keeps(2 * l + 1) {
            h = &h + &ffn_branch(block, &h);
        }
    }
    h
}

/// Logits at every position (`T × vocab_size`) with masked branches removed.
pub fn forward<F: Scalar>(
    params: &Parameters<F>,
    tokens: &[usize],
    mask: &AblationMask,
) -> Result<Array2<F>, ModelError> {
    check_tokens(params, tokens)?;
    check_mask(params, mask)?;
    Ok(head(params, &residual_stream(params, tokens, mask)))
}

/// Forward pass with no masking logic at all.
pub fn forward_unmasked<F: Scalar>(
    params: &Parameters<F>,
    tokens: &[usize],
) -> Result<Array2<F>, ModelError> {
    check_tokens(params, tokens)?;
    let n_heads = params.config.n_heads;
    let mut h = embed(params, tokens);
    for block in &params.blocks {
        h = &h + &attention_branch(block, n_heads, &h);
        h = &h + &ffn_branch(block, &h);
    }
    Ok(head(params, &h))
}

/// Logits at the final position only.
pub fn final_logits<F: Scalar>(
    params: &Parameters<F>,
    tokens: &[usize],
    mask: &AblationMask,
) -> Result<Array1<F>, ModelError> {
    check_tokens(params, tokens)?;
    check_mask(params, mask)?;
    let h = residual_stream(params, tokens, mask);
    let last = h.slice(s![h.nrows() - 1.., ..]).to_owned();
    Ok(head(params, &last).row(0).to_owned())
}

/// Index of the largest entry among `candidates`; ties go to the earliest.
pub(crate) fn argmax_among<F: Scalar>(logits: ArrayView1<F>, candidates: &[usize]) -> usize {
    let mut best = candidates[0];
    for &c in &candidates[1..] {
        if logits[c] > logits[best] {
            best = c;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init, ModelConfig};

    fn small() -> Parameters<f64> {
        init(&ModelConfig {
            d_model: 8,
            n_blocks: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 8,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn full_mask_matches_unmasked_bitwise() {
        let p = small();
        let tokens = [3, 1, 4, 1, 5, 9, 2, 6];
        let a = forward(&p, &tokens, &AblationMask::full(4)).unwrap();
        let b = forward_unmasked(&p, &tokens).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_mask_is_head_of_embedding() {
        let p = small();
        let tokens = [0, 15, 7];
        let a = forward(&p, &tokens, &AblationMask::empty(4)).unwrap();
        let b = head(&p, &embed(&p, &tokens));
        assert_eq!(a, b);
    }

    #[test]
    fn causal_prefix_is_unaffected() {
        let p = small();
        let base = [3, 1, 4, 1, 5, 9];
        let mut other = base;
        other[4] = 11;
        other[5] = 0;
        let a = forward(&p, &base, &AblationMask::full(4)).unwrap();
        let b = forward(&p, &other, &AblationMask::full(4)).unwrap();
        for t in 0..4 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(4), b.row(4));
    }

    #[test]
    fn final_logits_is_last_row() {
        let p = small();
        let tokens = [2, 2, 3, 1, 2];
        let mask = AblationMask::without(4, 1);
        let all = forward(&p, &tokens, &mask).unwrap();
        let last = final_logits(&p, &tokens, &mask).unwrap();
        for (a, b) in all.row(4).iter().zip(last.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let p = small();
        let x = embed(&p, &[1, 2, 3, 4, 5]);
        for probs in attention_weights(&p.blocks[0], 2, &x) {
            for (t, row) in probs.rows().into_iter().enumerate() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
                assert!(row.iter().skip(t + 1).all(|&w| w == 0.0));
            }
        }
    }

    #[test]
    fn input_errors() {
        let p = small();
        let full = AblationMask::full(4);
        assert!(matches!(
            forward(&p, &[16], &full),
            Err(ModelError::TokenOutOfRange { token: 16, .. })
        ));
        assert!(matches!(
            forward(&p, &[0; 9], &full),
            Err(ModelError::SequenceTooLong { .. })
        ));
        assert!(matches!(
            forward(&p, &[], &full),
            Err(ModelError::EmptySequence)
        ));
        assert!(matches!(
            forward(&p, &[1], &AblationMask::full(6)),
            Err(ModelError::MaskMismatch { .. })
        ));
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
