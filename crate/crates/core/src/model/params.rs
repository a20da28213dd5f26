use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError, Scalar};

/// Weights of one decoder block. Matrices act on row vectors (`x · W`).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<F = f64> {
    pub attn_norm: Array1<F>,
    pub wq: Array2<F>,
    pub wk: Array2<F>,
    pub wv: Array2<F>,
    pub wo: Array2<F>,
    pub ffn_norm: Array1<F>,
    pub w1: Array2<F>,
    pub w2: Array2<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<F = f64> {
    pub config: ModelConfig,
    /// `vocab_size × d_model`
    pub embed: Array2<F>,
    /// `max_seq_len × d_model`
    pub pos: Array2<F>,
    pub blocks: Vec<BlockParams<F>>,
    pub final_norm: Array1<F>,
    /// `d_model × vocab_size`
    pub head: Array2<F>,
}

impl<F: Scalar> Parameters<F> {
    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_model;
        let block = BlockParams {
            attn_norm: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            ffn_norm: Array1::zeros(d),
            w1: Array2::zeros((d, config.d_ff)),
            w2: Array2::zeros((config.d_ff, d)),
        };
        Ok(Self {
            config: config.clone(),
            embed: Array2::zeros((config.vocab_size, d)),
            pos: Array2::zeros((config.max_seq_len, d)),
            blocks: vec![block; config.n_blocks],
            final_norm: Array1::zeros(d),
            head: Array2::zeros((d, config.vocab_size)),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config).expect("config already validated")
    }

    /// Named views of every tensor in canonical order, with shapes.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[F])> {
        fn m<F>(name: String, a: &Array2<F>) -> (String, Vec<usize>, &[F]) {
            (
                name,
                a.shape().to_vec(),
                a.as_slice().expect("standard layout"),
            )
        }
        fn v<F>(name: String, a: &Array1<F>) -> (String, Vec<usize>, &[F]) {
            (
                name,
                a.shape().to_vec(),
                a.as_slice().expect("standard layout"),
            )
        }
        let mut out = vec![m("embed".into(), &self.embed), m("pos".into(), &self.pos)];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push(v(format!("blocks.{l}.attn_norm"), &b.attn_norm));
            out.push(m(format!("blocks.{l}.wq"), &b.wq));
            out.push(m(format!("blocks.{l}.wk"), &b.wk));
            out.push(m(format!("blocks.{l}.wv"), &b.wv));
            out.push(m(format!("blocks.{l}.wo"), &b.wo));
            out.push(v(format!("blocks.{l}.ffn_norm"), &b.ffn_norm));
            out.push(m(format!("blocks.{l}.w1"), &b.w1));
            out.push(m(format!("blocks.{l}.w2"), &b.w2));
        }
        out.push(v("final_norm".into(), &self.final_norm));
        out.push(m("head".into(), &self.head));
        out
    }

    /// Mutable slices in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = vec![
            self.embed.as_slice_mut().expect("standard layout"),
            self.pos.as_slice_mut().expect("standard layout"),
        ];
        for b in &mut self.blocks {
            out.push(b.attn_norm.as_slice_mut().expect("standard layout"));
            out.push(b.wq.as_slice_mut().expect("standard layout"));
            out.push(b.wk.as_slice_mut().expect("standard layout"));
            out.push(b.wv.as_slice_mut().expect("standard layout"));
            out.push(b.wo.as_slice_mut().expect("standard layout"));
            out.push(b.ffn_norm.as_slice_mut().expect("standard layout"));
            out.push(b.w1.as_slice_mut().expect("standard layout"));
            out.push(b.w2.as_slice_mut().expect("standard layout"));
        }
        out.push(self.final_norm.as_slice_mut().expect("standard layout"));
        out.push(self.head.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.2.iter().all(|x| x.is_finite()))
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn add_scaled(&mut self, alpha: F, other: &Self) {
        let src = other.tensors();
        for (dst, (_, _, src)) in self.tensors_mut().into_iter().zip(src) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *d + alpha * *s;
            }
        }
    }

    pub fn scale(&mut self, alpha: F) {
        for t in self.tensors_mut() {
            for x in t {
                *x = *x * alpha;
            }
        }
    }

    /// Converts every tensor to another float type.
    pub fn cast<G: Scalar>(&self) -> Parameters<G> {
        let c2 = |a: &Array2<F>| a.mapv(|x| G::lit(x.to_f64().expect("finite")));
        let c1 = |a: &Array1<F>| a.mapv(|x| G::lit(x.to_f64().expect("finite")));
        Parameters {
            config: self.config.clone(),
            embed: c2(&self.embed),
            pos: c2(&self.pos),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    attn_norm: c1(&b.attn_norm),
                    wq: c2(&b.wq),
                    wk: c2(&b.wk),
                    wv: c2(&b.wv),
                    wo: c2(&b.wo),
                    ffn_norm: c1(&b.ffn_norm),
                    w1: c2(&b.w1),
                    w2: c2(&b.w2),
                })
                .collect(),
            final_norm: c1(&self.final_norm),
            head: c2(&self.head),
        }
    }
}

fn fill_uniform(rng: &mut ChaCha8Rng, a: &mut Array2<f64>, bound: f64) {
    for x in a.iter_mut() {
        *x = rng.random_range(-bound..bound);
    }
}

/// Seeded initialisation: matrices uniform in `±1/√fan_in` (lookup tables
/// have fan-in 1), norm gains at 1.
pub fn init(config: &ModelConfig) -> Result<Parameters<f64>, ModelError> {
    let mut p = Parameters::<f64>::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d_model as f64;
    let ff = config.d_ff as f64;
    fill_uniform(&mut rng, &mut p.embed, 1.0);
    fill_uniform(&mut rng, &mut p.pos, 1.0);
    for b in &mut p.blocks {
        b.attn_norm.fill(1.0);
        b.ffn_norm.fill(1.0);
        fill_uniform(&mut rng, &mut b.wq, d.sqrt().recip());
        fill_uniform(&mut rng, &mut b.wk, d.sqrt().recip());
        fill_uniform(&mut rng, &mut b.wv, d.sqrt().recip());
        fill_uniform(&mut rng, &mut b.wo, d.sqrt().recip());
        fill_uniform(&mut rng, &mut b.w1, d.sqrt().recip());
        fill_uniform(&mut rng, &mut b.w2, ff.sqrt().recip());
    }
    p.final_norm.fill(1.0);
    fill_uniform(&mut rng, &mut p.head, d.sqrt().recip());
    Ok(p)
}
