//! Built-in value oracle: accuracy of the toy transformer on a task with
//! every sublayer outside the coalition ablated.

use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::coalition::{Coalition, GameValue, OracleError, ValueOracle};
use crate::model::{write_checkpoint, AblationMask, Parameters, Precision};
use crate::tasks::{check_model, count_correct, generate, Example, Split, TaskError, TaskSpec};

enum Weights {
    F32(Arc<Parameters<f32>>),
    F64(Arc<Parameters<f64>>),
}

pub struct ModelOracle {
    weights: Weights,
    n_players: usize,
    eval_set: Arc<Vec<Example>>,
    class_tokens: Vec<usize>,
    fingerprint: String,
}

impl std::fmt::Debug for ModelOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelOracle")
            .field("n_players", &self.n_players)
            .field("n_eval", &self.eval_set.len())
            .field("fingerprint", &self.fingerprint)
            .finish()
    }
}

impl ModelOracle {
    /// Runs in the precision named by the model config.
    pub fn new(params: &Parameters<f64>, task: &TaskSpec) -> Result<Self, TaskError> {
        check_model(params, task)?;
        let eval_set = generate(task, Split::Eval)?;

        let mut hasher = Sha256::new();
        let mut ckpt = Vec::new();
        write_checkpoint(params, &mut ckpt)?;
        hasher.update(&ckpt);
        hasher.update(serde_json::to_vec(task).expect("task spec serialises"));
        let precision = params.config.precision;
        let fingerprint = format!(
            "builtin:{}:{:?}:{}",
            task.id(),
            precision,
            hex::encode(&hasher.finalize()[..16])
        );

        let weights = match precision {
            Precision::F32 => Weights::F32(Arc::new(params.cast())),
            Precision::F64 => Weights::F64(Arc::new(params.clone())),
        };
        Ok(Self {
            weights,
            n_players: params.config.n_sublayers(),
            eval_set: Arc::new(eval_set),
            class_tokens: task.class_tokens(),
            fingerprint,
        })
    }
}

impl ValueOracle for ModelOracle {
    fn n_players(&self) -> usize {
        self.n_players
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn value(&self, retained: Coalition) -> Result<GameValue, OracleError> {
        let mask = AblationMask::from_coalition(retained);
        let correct = match &self.weights {
            Weights::F32(p) => count_correct(p, &self.eval_set, &self.class_tokens, &mask),
            Weights::F64(p) => count_correct(p, &self.eval_set, &self.class_tokens, &mask),
        }
        .map_err(|e| OracleError::Failed(e.to_string()))?;
        let n = self.eval_set.len();
        GameValue::accuracy(correct as f64 / n as f64, n)
    }

    /// Coalitions are evaluated one after another; each evaluation already
    /// spreads its examples over the rayon pool.
    fn value_batch(&self, coalitions: &[Coalition]) -> Vec<Result<GameValue, OracleError>> {
        coalitions.iter().map(|&c| self.value(c)).collect()
    }
}
