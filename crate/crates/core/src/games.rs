//! Synthetic cooperative games.
//!
//! These stand in for a model when exercising the Shapley engine: their
//! Shapley values are known in closed form or cheap to brute force.

use std::fmt;

use crate::coalition::{Coalition, GameValue, OracleError, ValueOracle};

/// `v(S) = Σ_{i∈S} w_i`, summed in ascending player order.
#[derive(Debug, Clone)]
pub struct AdditiveGame {
    weights: Vec<f64>,
}

impl AdditiveGame {
    pub fn new(weights: Vec<f64>) -> Self {
        Self { weights }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

impl ValueOracle for AdditiveGame {
    fn n_players(&self) -> usize {
        self.weights.len()
    }

    fn fingerprint(&self) -> String {
        format!("synthetic:additive:{:?}", self.weights)
    }

    fn metric_name(&self) -> &str {
        "synthetic"
    }

    fn value(&self, retained: Coalition) -> Result<GameValue, OracleError> {
        GameValue::synthetic(retained.players().map(|i| self.weights[i]).sum())
    }
}

/// Game given by an explicit value table indexed by coalition mask.
#[derive(Debug, Clone)]
pub struct TableGame {
    n_players: usize,
    values: Vec<f64>,
}

impl TableGame {
    /// `values.len()` must be `2^n_players`.
    pub fn new(n_players: usize, values: Vec<f64>) -> Self {
        assert!(n_players < 32, "table games are for small player counts");
        assert_eq!(values.len(), 1usize << n_players, "table size must be 2^n");
        Self { n_players, values }
    }

    pub fn from_fn(n_players: usize, f: impl Fn(Coalition) -> f64) -> Self {
        let values = (0..1u64 << n_players)
            .map(|b| f(Coalition::new(n_players, b).expect("mask in range")))
            .collect();
        Self::new(n_players, values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Pointwise `alpha·self + beta·other`.
    pub fn combine(&self, alpha: f64, other: &TableGame, beta: f64) -> TableGame {
        assert_eq!(self.n_players, other.n_players);
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        TableGame::new(self.n_players, values)
    }
}

impl ValueOracle for TableGame {
    fn n_players(&self) -> usize {
        self.n_players
    }

    fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.values {
            for b in v.to_bits().to_le_bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
        }
        format!("synthetic:table:{}:{h:016x}", self.n_players)
    }

    fn metric_name(&self) -> &str {
        "synthetic"
    }

    fn value(&self, retained: Coalition) -> Result<GameValue, OracleError> {
        GameValue::synthetic(self.values[retained.bits() as usize])
    }
}

/// Chain-local game: unary weights plus interactions between adjacent
/// players only, `v(S) = Σ_{i∈S} w_i + Σ_{i,i+1∈S} u_i`.
#[derive(Debug, Clone)]
pub struct ChainGame {
    pub unary: Vec<f64>,
    pub pair: Vec<f64>,
}

impl ChainGame {
    pub fn new(unary: Vec<f64>, pair: Vec<f64>) -> Self {
        assert_eq!(
            pair.len() + 1,
            unary.len().max(1),
            "one interaction per adjacent pair"
        );
        Self { unary, pair }
    }

    /// Closed-form Shapley value: each interaction splits evenly.
    pub fn shapley(&self) -> Vec<f64> {
        let n = self.unary.len();
        (0..n)
            .map(|i| {
                let left = if i > 0 { self.pair[i - 1] } else { 0.0 };
                let right = if i + 1 < n { self.pair[i] } else { 0.0 };
                self.unary[i] + 0.5 * (left + right)
            })
            .collect()
    }
}

impl ValueOracle for ChainGame {
    fn n_players(&self) -> usize {
        self.unary.len()
    }

    fn fingerprint(&self) -> String {
        format!("synthetic:chain:{:?}:{:?}", self.unary, self.pair)
    }

    fn metric_name(&self) -> &str {
        "synthetic"
    }

    fn value(&self, retained: Coalition) -> Result<GameValue, OracleError> {
        let mut v = 0.0;
        for i in retained.players() {
            v += self.unary[i];
            if retained.contains(i + 1) {
                v += self.pair[i];
            }
        }
        GameValue::synthetic(v)
    }
}

/// Game defined by a closure.
pub struct FnGame<F> {
    name: String,
    n_players: usize,
    f: F,
}

impl<F> FnGame<F>
where
    F: Fn(Coalition) -> f64 + Send + Sync,
{
    pub fn new(name: impl Into<String>, n_players: usize, f: F) -> Self {
        Self {
            name: name.into(),
            n_players,
            f,
        }
    }
}

impl<F> fmt::Debug for FnGame<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnGame")
            .field("name", &self.name)
            .field("n_players", &self.n_players)
            .finish()
    }
}

impl<F> ValueOracle for FnGame<F>
where
    F: Fn(Coalition) -> f64 + Send + Sync,
{
    fn n_players(&self) -> usize {
        self.n_players
    }

    fn fingerprint(&self) -> String {
        format!("synthetic:fn:{}", self.name)
    }

    fn metric_name(&self) -> &str {
        "synthetic"
    }

    fn value(&self, retained: Coalition) -> Result<GameValue, OracleError> {
        GameValue::synthetic((self.f)(retained))
    }
}
