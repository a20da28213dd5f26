//! Synthetic classification tasks used as game outcomes.
//!
//! Every example is a token sequence whose label is read at the final
//! position. Accuracy only compares the logits of the task's class tokens,
//! so a model that guesses uniformly scores `1 / n_classes`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{final_logits, AblationMask, ModelError, Parameters, Scalar};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid task spec: {0}")]
    Spec(String),
    #[error("model vocabulary {model} is smaller than task vocabulary {task}")]
    VocabMismatch { model: usize, task: usize },
    #[error("task sequences of length {seq_len} exceed model max_seq_len {max}")]
    SequenceTooLong { seq_len: usize, max: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Label is the most frequent class token; class tokens are
    /// `1..=n_classes`.
    MajorityToken,
    /// Label is `Σ tokens mod n_classes`; class tokens are `0..n_classes`.
    ModularSum,
    /// The final token occurred once before; the label is the token that
    /// followed it. Sequences use tokens `0..n_classes`.
    InductionRecall,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::MajorityToken => "majority_token",
            TaskKind::ModularSum => "modular_sum",
            TaskKind::InductionRecall => "induction_recall",
        }
    }

    fn min_seq_len(self) -> usize {
        match self {
            TaskKind::MajorityToken => 3,
            TaskKind::ModularSum => 2,
            TaskKind::InductionRecall => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Eval => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub n_classes: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::MajorityToken,
            vocab_size: 16,
            seq_len: 12,
            n_classes: 4,
            seed: 1,
            n_train: 20_000,
            n_eval: 2000,
        }
    }
}

/// Accuracy over the evaluation split, with the uniform-guess reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub accuracy: f64,
    pub n_examples: usize,
    pub baseline: f64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), TaskError> {
        let fail = |m: String| Err(TaskError::Spec(m));
        if self.n_classes < 2 {
            return fail(format!(
                "n_classes must be at least 2, got {}",
                self.n_classes
            ));
        }
        let needed = match self.kind {
            TaskKind::MajorityToken => self.n_classes + 1,
            TaskKind::ModularSum | TaskKind::InductionRecall => self.n_classes,
        };
        if self.vocab_size < needed {
            return fail(format!(
                "{} with {} classes needs vocab_size >= {needed}, got {}",
                self.kind.name(),
                self.n_classes,
                self.vocab_size
            ));
        }
        let min = self.kind.min_seq_len();
        if self.seq_len < min {
            return fail(format!(
                "{} needs seq_len >= {min} to be well-posed, got {}",
                self.kind.name(),
                self.seq_len
            ));
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return fail("n_train and n_eval must be positive".into());
        }
        Ok(())
    }

    /// Token ids of the classes, in class order.
    pub fn class_tokens(&self) -> Vec<usize> {
        match self.kind {
            TaskKind::MajorityToken => (1..=self.n_classes).collect(),
            TaskKind::ModularSum | TaskKind::InductionRecall => (0..self.n_classes).collect(),
        }
    }

    /// Random-guess accuracy.
    pub fn baseline(&self) -> f64 {
        1.0 / self.n_classes as f64
    }

    /// Short identifier used on the external evaluator wire.
    pub fn id(&self) -> String {
        self.kind.name().to_owned()
    }

    /// Re-derives the label from the tokens; `None` when the sequence has
    /// no unique answer.
    pub fn label(&self, tokens: &[usize]) -> Option<usize> {
        match self.kind {
            TaskKind::MajorityToken => {
                let mut counts = vec![0usize; self.n_classes + 1];
                for &t in tokens {
                    if (1..=self.n_classes).contains(&t) {
                        counts[t] += 1;
                    }
                }
                let best = *counts.iter().max()?;
                let mut winners = (1..=self.n_classes).filter(|&c| counts[c] == best);
                let w = winners.next()?;
                if winners.next().is_some() || best == 0 {
                    None
                } else {
                    Some(w)
                }
            }
            TaskKind::ModularSum => Some(tokens.iter().sum::<usize>() % self.n_classes),
            TaskKind::InductionRecall => {
                let (&query, prefix) = tokens.split_last()?;
                let mut hits = prefix.iter().enumerate().filter(|(_, &t)| t == query);
                let (p, _) = hits.next()?;
                if hits.next().is_some() || p + 1 >= prefix.len() {
                    return None;
                }
                Some(prefix[p + 1])
            }
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Example {
        let n = self.seq_len;
        match self.kind {
            TaskKind::MajorityToken => loop {
                let tokens: Vec<usize> = (0..n)
                    .map(|_| rng.random_range(1..=self.n_classes))
                    .collect();
                if let Some(target) = self.label(&tokens) {
                    return Example { tokens, target };
                }
            },
            TaskKind::ModularSum => {
                let tokens: Vec<usize> = (0..n)
                    .map(|_| rng.random_range(0..self.vocab_size))
                    .collect();
                let target = tokens.iter().sum::<usize>() % self.n_classes;
                Example { tokens, target }
            }
            TaskKind::InductionRecall => {
                let query = rng.random_range(0..self.n_classes);
                // Query sits somewhere in the prefix with a follower that is
                // still inside the prefix.
                let p = rng.random_range(0..n - 2);
                let mut tokens: Vec<usize> = (0..n - 1)
                    .map(|_| {
                        let t = rng.random_range(0..self.n_classes - 1);
                        if t >= query {
                            t + 1
                        } else {
                            t
                        }
                    })
                    .collect();
                tokens[p] = query;
                let target = tokens[p + 1];
                tokens.push(query);
                Example { tokens, target }
            }
        }
    }
}

/// Deterministic dataset for `(spec, split)`; the two splits draw from
/// distinct ChaCha streams of the same seed.
pub fn generate(spec: &TaskSpec, split: Split) -> Result<Vec<Example>, TaskError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(split.stream());
    let n = match split {
        Split::Train => spec.n_train,
        Split::Eval => spec.n_eval,
    };
    Ok((0..n).map(|_| spec.sample(&mut rng)).collect())
}

pub(crate) fn check_model<F: Scalar>(
    params: &Parameters<F>,
    spec: &TaskSpec,
) -> Result<(), TaskError> {
    if params.config.vocab_size < spec.vocab_size {
        return Err(TaskError::VocabMismatch {
            model: params.config.vocab_size,
            task: spec.vocab_size,
        });
    }
    if params.config.max_seq_len < spec.seq_len {
        return Err(TaskError::SequenceTooLong {
            seq_len: spec.seq_len,
            max: params.config.max_seq_len,
        });
    }
    Ok(())
}

/// Number of examples whose class-restricted argmax equals the target.
pub fn count_correct<F: Scalar>(
    params: &Parameters<F>,
    examples: &[Example],
    class_tokens: &[usize],
    mask: &AblationMask,
) -> Result<usize, TaskError> {
    let hits: Result<Vec<bool>, ModelError> = examples
        .par_iter()
        .map(|ex| {
            let logits = final_logits(params, &ex.tokens, mask)?;
            Ok(crate::model::argmax_among(logits.view(), class_tokens) == ex.target)
        })
        .collect();
    Ok(hits?.into_iter().filter(|&h| h).count())
}

/// Accuracy of the masked model on the evaluation split.
pub fn evaluate<F: Scalar>(
    params: &Parameters<F>,
    spec: &TaskSpec,
    mask: &AblationMask,
) -> Result<EvalOutcome, TaskError> {
    check_model(params, spec)?;
    let data = generate(spec, Split::Eval)?;
    let correct = count_correct(params, &data, &spec.class_tokens(), mask)?;
    Ok(EvalOutcome {
        accuracy: correct as f64 / data.len() as f64,
        n_examples: data.len(),
        baseline: spec.baseline(),
    })
}

/// Writes `tokens,target` rows, tokens space-separated.
pub fn write_csv(examples: &[Example], w: impl Write) -> Result<(), TaskError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["tokens", "target"])?;
    for ex in examples {
        let tokens = ex
            .tokens
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        out.write_record([tokens, ex.target.to_string()])?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}
