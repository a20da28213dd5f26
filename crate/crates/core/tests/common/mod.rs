#![allow(dead_code)]

use layershap::model::{example_loss, init, loss_and_grad, ModelConfig, Parameters};
use layershap::tasks::{generate, Example, Split, TaskKind, TaskSpec};
use rand::Rng;

/// Per-tensor comparison of backprop against central differences.
pub struct TensorCheck {
    pub name: String,
    /// `max |g - fd| / max |g|` over the tensor.
    pub normwise: f64,
    /// `max |g - fd| / max(|g|, |fd|)` over coordinates with either side
    /// above 1e-8.
    pub coordinatewise: f64,
}

pub fn grad_check_setup(seed: u64) -> (Parameters<f64>, Vec<Example>) {
    let cfg = ModelConfig {
        vocab_size: 16,
        d_model: 8,
        n_blocks: 2,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 8,
        seed,
        ..ModelConfig::default()
    };
    let task = TaskSpec {
        kind: TaskKind::MajorityToken,
        seq_len: 8,
        n_train: 4,
        n_eval: 1,
        ..TaskSpec::default()
    };
    (init(&cfg).unwrap(), generate(&task, Split::Train).unwrap())
}

fn mean_loss(params: &Parameters<f64>, batch: &[Example]) -> f64 {
    batch
        .iter()
        .map(|ex| example_loss(params, ex).unwrap())
        .sum::<f64>()
        / batch.len() as f64
}

pub fn gradient_check(params: &Parameters<f64>, batch: &[Example], h: f64) -> Vec<TensorCheck> {
    let (_, grad) = loss_and_grad(params, batch).unwrap();
    let grads: Vec<(String, Vec<f64>)> = grad
        .tensors()
        .into_iter()
        .map(|(name, _, g)| (name, g.to_vec()))
        .collect();
    let mut work = params.clone();
    let mut out = Vec::new();
    for (t, (name, g)) in grads.iter().enumerate() {
        let mut fd = vec![0.0; g.len()];
        for (j, slot) in fd.iter_mut().enumerate() {
            let orig = work.tensors_mut()[t][j];
            work.tensors_mut()[t][j] = orig + h;
            let up = mean_loss(&work, batch);
            work.tensors_mut()[t][j] = orig - h;
            let down = mean_loss(&work, batch);
            work.tensors_mut()[t][j] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let scale = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let max_diff = g
            .iter()
            .zip(&fd)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let coordinatewise = g
            .iter()
            .zip(&fd)
            .filter(|(a, b)| a.abs().max(b.abs()) > 1e-8)
            .fold(0.0f64, |m, (a, b)| {
                m.max((a - b).abs() / a.abs().max(b.abs()))
            });
        out.push(TensorCheck {
            name: name.clone(),
            normwise: if scale > 0.0 {
                max_diff / scale
            } else {
                max_diff
            },
            coordinatewise,
        });
    }
    out
}

/// Random value table indexed by mask, with `v(∅) = 0`.
pub fn random_values(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..1usize << n)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    v[0] = 0.0;
    v
}

/// Makes `player` a null player: `v(S) = v(S \ {player})`.
pub fn with_null_player(values: &[f64], player: usize) -> Vec<f64> {
    (0..values.len())
        .map(|b| values[b & !(1 << player)])
        .collect()
}

/// Makes `i` and `j` interchangeable by mapping every set holding exactly
/// one of them onto the one holding `i`.
pub fn with_symmetric_pair(values: &[f64], i: usize, j: usize) -> Vec<f64> {
    (0..values.len())
        .map(|b| {
            let (hi, hj) = (b >> i & 1 == 1, b >> j & 1 == 1);
            if hi != hj {
                values[(b | 1 << i) & !(1 << j)]
            } else {
                values[b]
            }
        })
        .collect()
}
