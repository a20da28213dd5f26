//! Players, coalitions and the memoised game value function.
//!
//! A player is one residual sublayer of the model (an attention or a
//! feed-forward branch). A [`Coalition`] is the set of sublayers that are
//! kept; everything outside it is ablated. [`CoalitionGame`] wraps a
//! deterministic [`ValueOracle`] with a cache so that every distinct
//! coalition is evaluated at most once per run, and the cache can be
//! persisted so interrupted sweeps resume where they stopped.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest player count a [`Coalition`] bit mask can hold.
pub const MAX_PLAYERS: usize = 64;

/// Metric name attached to task accuracies.
pub const ACCURACY: &str = "accuracy";

const CACHE_MAGIC: &str = "# layershap-cache v1";

#[derive(Debug, Error)]
pub enum GameError {
    #[error("coalition has {got} players, game has {expected}")]
    PlayerCountMismatch { expected: usize, got: usize },
    #[error("player {player} is already in coalition {coalition}")]
    PlayerInCoalition { player: usize, coalition: Coalition },
    #[error("player index {player} out of range for {n_players} players")]
    PlayerOutOfRange { player: usize, n_players: usize },
    #[error("{n_players} players exceeds the {MAX_PLAYERS}-player mask width")]
    TooManyPlayers { n_players: usize },
    #[error("mask {bits:#x} has bits set at or above {n_players}")]
    StrayBits { bits: u64, n_players: usize },
    #[error("evaluating coalition {coalition} failed: {source}")]
    Evaluation {
        coalition: Coalition,
        #[source]
        source: OracleError,
    },
    #[error("cache file: {0}")]
    Cache(String),
    #[error("cache fingerprint mismatch: file has `{found}`, game expects `{expected}`")]
    FingerprintMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Failure raised by a value oracle. Never replaced by a default value.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("evaluator returned error `{code}`: {message}")]
    Remote { code: String, message: String },
    #[error("invalid game value: {0}")]
    InvalidValue(String),
    #[error("evaluation failed: {0}")]
    Failed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PlayerKind {
    Attention,
    FeedForward,
    /// Reserved label for mixture-of-experts sublayers.
    MoE,
}

impl PlayerKind {
    pub fn short_name(self) -> &'static str {
        match self {
            PlayerKind::Attention => "Attn",
            PlayerKind::FeedForward => "FFN",
            PlayerKind::MoE => "MoE",
        }
    }
}

/// One sublayer of the model. Even indices are attention branches, odd
/// indices the feed-forward (or MoE) branch of the same block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PlayerId {
    pub index: usize,
    pub kind: PlayerKind,
    pub depth: usize,
}

impl PlayerId {
    pub fn new(index: usize, mlp_kind: PlayerKind) -> Self {
        let kind = if index.is_multiple_of(2) {
            PlayerKind::Attention
        } else {
            mlp_kind
        };
        Self {
            index,
            kind,
            depth: index / 2,
        }
    }
}

impl fmt::Display for PlayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.kind.short_name(), self.depth)
    }
}

/// Player roster for `n_players` interleaved sublayers.
pub fn roster(n_players: usize, mlp_kind: PlayerKind) -> Vec<PlayerId> {
    (0..n_players).map(|i| PlayerId::new(i, mlp_kind)).collect()
}

/// Set of retained players, stored as a bit mask.
///
/// Ordering is by mask bits, which is the aggregation order used
/// everywhere results must be reproducible.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coalition {
    bits: u64,
    n_players: usize,
}

fn width_mask(n_players: usize) -> u64 {
    if n_players >= 64 {
        u64::MAX
    } else {
        (1u64 << n_players) - 1
    }
}

impl Coalition {
    pub fn new(n_players: usize, bits: u64) -> Result<Self, GameError> {
        if n_players > MAX_PLAYERS {
            return Err(GameError::TooManyPlayers { n_players });
        }
        if bits & !width_mask(n_players) != 0 {
            return Err(GameError::StrayBits { bits, n_players });
        }
        Ok(Self { bits, n_players })
    }

    pub fn full(n_players: usize) -> Self {
        assert!(n_players <= MAX_PLAYERS, "too many players");
        Self {
            bits: width_mask(n_players),
            n_players,
        }
    }

    pub fn empty(n_players: usize) -> Self {
        assert!(n_players <= MAX_PLAYERS, "too many players");
        Self { bits: 0, n_players }
    }

    pub fn from_players(
        n_players: usize,
        players: impl IntoIterator<Item = usize>,
    ) -> Result<Self, GameError> {
        let mut c = Self::new(n_players, 0)?;
        for p in players {
            if p >= n_players {
                return Err(GameError::PlayerOutOfRange {
                    player: p,
                    n_players,
                });
            }
            c.bits |= 1 << p;
        }
        Ok(c)
    }

    pub fn bits(self) -> u64 {
        self.bits
    }

    pub fn n_players(self) -> usize {
        self.n_players
    }

    pub fn len(self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.bits == 0
    }

    pub fn contains(self, player: usize) -> bool {
        player < self.n_players && self.bits >> player & 1 == 1
    }

    pub fn with(self, player: usize) -> Self {
        debug_assert!(player < self.n_players);
        Self {
            bits: self.bits | 1 << player,
            ..self
        }
    }

    pub fn without(self, player: usize) -> Self {
        debug_assert!(player < self.n_players);
        Self {
            bits: self.bits & !(1 << player),
            ..self
        }
    }

    pub fn complement(self) -> Self {
        Self {
            bits: !self.bits & width_mask(self.n_players),
            ..self
        }
    }

    pub fn union(self, other: Self) -> Self {
        debug_assert_eq!(self.n_players, other.n_players);
        Self {
            bits: self.bits | other.bits,
            ..self
        }
    }

    pub fn intersection(self, other: Self) -> Self {
        debug_assert_eq!(self.n_players, other.n_players);
        Self {
            bits: self.bits & other.bits,
            ..self
        }
    }

    /// Members in ascending order.
    pub fn players(self) -> impl Iterator<Item = usize> {
        (0..self.n_players).filter(move |&i| self.bits >> i & 1 == 1)
    }

    pub fn to_hex(self) -> String {
        format!("{:x}", self.bits)
    }
}

impl fmt::Debug for Coalition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Coalition({:#x}/{})", self.bits, self.n_players)
    }
}

impl fmt::Display for Coalition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (k, p) in self.players().enumerate() {
            if k > 0 {
                f.write_str(",")?;
            }
            write!(f, "{p}")?;
        }
        f.write_str("}")
    }
}

/// Outcome of one coalition evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameValue {
    pub value: f64,
    pub n_examples: usize,
    pub metric_name: String,
}

impl GameValue {
    /// Task accuracy; must lie in `[0, 1]`.
    pub fn accuracy(value: f64, n_examples: usize) -> Result<Self, OracleError> {
        if !(0.0..=1.0).contains(&value) {
            return Err(OracleError::InvalidValue(format!(
                "accuracy {value} outside [0, 1]"
            )));
        }
        Self::checked(value, n_examples, ACCURACY)
    }

    /// Any finite value, for synthetic games used to exercise the engine.
    pub fn synthetic(value: f64) -> Result<Self, OracleError> {
        Self::checked(value, 1, "synthetic")
    }

    fn checked(value: f64, n_examples: usize, metric: &str) -> Result<Self, OracleError> {
        if !value.is_finite() {
            return Err(OracleError::InvalidValue(format!(
                "non-finite value {value}"
            )));
        }
        if n_examples == 0 {
            return Err(OracleError::InvalidValue("n_examples must be > 0".into()));
        }
        Ok(Self {
            value,
            n_examples,
            metric_name: metric.to_owned(),
        })
    }
}

/// Deterministic value function `v(S)` over retained sublayers.
pub trait ValueOracle: Send + Sync {
    fn n_players(&self) -> usize;

    /// Identifies the oracle configuration; cache files are keyed by it.
    fn fingerprint(&self) -> String;

    fn value(&self, retained: Coalition) -> Result<GameValue, OracleError>;

    fn metric_name(&self) -> &str {
        ACCURACY
    }

    /// Evaluates a batch. Results are returned in input order; the default
    /// implementation fans out over the current rayon pool.
    fn value_batch(&self, coalitions: &[Coalition]) -> Vec<Result<GameValue, OracleError>> {
        coalitions.par_iter().map(|&c| self.value(c)).collect()
    }
}

/// Player roster, value oracle and evaluation cache.
pub struct CoalitionGame {
    n_players: usize,
    seed: u64,
    oracle: Box<dyn ValueOracle>,
    cache: RwLock<BTreeMap<Coalition, GameValue>>,
    // Serialises cache misses so a coalition is never sent to the oracle twice.
    fetch: Mutex<()>,
    oracle_calls: AtomicUsize,
}

impl fmt::Debug for CoalitionGame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoalitionGame")
            .field("n_players", &self.n_players)
            .field("seed", &self.seed)
            .field("fingerprint", &self.oracle.fingerprint())
            .field("cached", &self.cached_len())
            .finish()
    }
}

impl CoalitionGame {
    pub fn new(oracle: impl ValueOracle + 'static, seed: u64) -> Result<Self, GameError> {
        Self::from_boxed(Box::new(oracle), seed)
    }

    pub fn from_boxed(oracle: Box<dyn ValueOracle>, seed: u64) -> Result<Self, GameError> {
        let n_players = oracle.n_players();
        if n_players > MAX_PLAYERS {
            return Err(GameError::TooManyPlayers { n_players });
        }
        Ok(Self {
            n_players,
            seed,
            oracle,
            cache: RwLock::new(BTreeMap::new()),
            fetch: Mutex::new(()),
            oracle_calls: AtomicUsize::new(0),
        })
    }

    pub fn n_players(&self) -> usize {
        self.n_players
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Oracle fingerprint combined with the game seed.
    pub fn fingerprint(&self) -> String {
        format!("{};seed={}", self.oracle.fingerprint(), self.seed)
    }

    /// Number of coalitions handed to the oracle so far.
    pub fn oracle_evaluations(&self) -> usize {
        self.oracle_calls.load(Ordering::SeqCst)
    }

    pub fn cached_len(&self) -> usize {
        self.cache.read().expect("cache lock poisoned").len()
    }

    pub fn full(&self) -> Coalition {
        Coalition::full(self.n_players)
    }

    pub fn empty(&self) -> Coalition {
        Coalition::empty(self.n_players)
    }

    fn check(&self, s: Coalition) -> Result<(), GameError> {
        if s.n_players() != self.n_players {
            return Err(GameError::PlayerCountMismatch {
                expected: self.n_players,
                got: s.n_players(),
            });
        }
        Ok(())
    }

    pub fn evaluate(&self, s: Coalition) -> Result<GameValue, GameError> {
        self.check(s)?;
        if let Some(v) = self.cache.read().expect("cache lock poisoned").get(&s) {
            return Ok(v.clone());
        }
        let mut out = self.evaluate_many(&[s])?;
        Ok(out.pop().expect("one value per coalition"))
    }

    /// Evaluates many coalitions, sending only distinct cache misses to the
    /// oracle (in ascending mask order). Values come back in input order.
    pub fn evaluate_many(&self, coalitions: &[Coalition]) -> Result<Vec<GameValue>, GameError> {
        for &s in coalitions {
            self.check(s)?;
        }
        {
            let _guard = self.fetch.lock().expect("fetch lock poisoned");
            let missing: Vec<Coalition> = {
                let cache = self.cache.read().expect("cache lock poisoned");
                let mut m: Vec<Coalition> = coalitions
                    .iter()
                    .copied()
                    .filter(|s| !cache.contains_key(s))
                    .collect();
                m.sort_unstable();
                m.dedup();
                m
            };
            if !missing.is_empty() {
                self.oracle_calls.fetch_add(missing.len(), Ordering::SeqCst);
                let results = self.oracle.value_batch(&missing);
                let mut cache = self.cache.write().expect("cache lock poisoned");
                let mut first_err = None;
                for (s, r) in missing.into_iter().zip(results) {
                    match r {
                        Ok(v) => {
                            cache.insert(s, v);
                        }
                        Err(source) => {
                            if first_err.is_none() {
                                first_err = Some(GameError::Evaluation {
                                    coalition: s,
                                    source,
                                });
                            }
                        }
                    }
                }
                if let Some(e) = first_err {
                    return Err(e);
                }
            }
        }
        let cache = self.cache.read().expect("cache lock poisoned");
        Ok(coalitions.iter().map(|s| cache[s].clone()).collect())
    }

    /// `v(s ∪ {i}) − v(s)`.
    pub fn marginal(&self, s: Coalition, player: usize) -> Result<f64, GameError> {
        self.check(s)?;
        if player >= self.n_players {
            return Err(GameError::PlayerOutOfRange {
                player,
                n_players: self.n_players,
            });
        }
        if s.contains(player) {
            return Err(GameError::PlayerInCoalition {
                player,
                coalition: s,
            });
        }
        let v = self.evaluate_many(&[s.with(player), s])?;
        Ok(v[0].value - v[1].value)
    }

    /// Writes the cache as `<hex mask>,<value>,<n_examples>` lines in
    /// ascending mask order behind a fingerprint header.
    pub fn save_cache(&self, path: &Path) -> Result<(), GameError> {
        let cache = self.cache.read().expect("cache lock poisoned");
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            writeln!(
                w,
                "{CACHE_MAGIC} n_players={} fingerprint={}",
                self.n_players,
                self.fingerprint()
            )?;
            for (s, v) in cache.iter() {
                writeln!(w, "{},{},{}", s.to_hex(), v.value, v.n_examples)?;
            }
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Merges a cache file written by [`save_cache`](Self::save_cache).
    /// Returns the number of records loaded.
    pub fn load_cache(&self, path: &Path) -> Result<usize, GameError> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| GameError::Cache("empty cache file".into()))??;
        let expected = format!("{CACHE_MAGIC} n_players={} fingerprint=", self.n_players);
        let found =
            header
                .strip_prefix(&expected)
                .ok_or_else(|| GameError::FingerprintMismatch {
                    expected: self.fingerprint(),
                    found: header.clone(),
                })?;
        if found != self.fingerprint() {
            return Err(GameError::FingerprintMismatch {
                expected: self.fingerprint(),
                found: found.to_owned(),
            });
        }
        let metric = self.oracle.metric_name();
        let mut records = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let bad =
                |what: &str| GameError::Cache(format!("line {}: {what}: `{line}`", lineno + 2));
            let mut fields = line.split(',');
            let (Some(hex), Some(value), Some(n), None) =
                (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(bad("expected 3 fields"));
            };
            let bits = u64::from_str_radix(hex, 16).map_err(|_| bad("bad mask"))?;
            let coalition =
                Coalition::new(self.n_players, bits).map_err(|_| bad("mask out of range"))?;
            let value: f64 = value.parse().map_err(|_| bad("bad value"))?;
            let n_examples: usize = n.parse().map_err(|_| bad("bad n_examples"))?;
            if !value.is_finite() || n_examples == 0 {
                return Err(bad("invalid record"));
            }
            records.push((
                coalition,
                GameValue {
                    value,
                    n_examples,
                    metric_name: metric.to_owned(),
                },
            ));
        }
        let n = records.len();
        self.cache
            .write()
            .expect("cache lock poisoned")
            .extend(records);
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::games::{AdditiveGame, FnGame};

    #[test]
    fn complement_algebra_exhaustive_small() {
        for n in 0..=10usize {
            for bits in 0..(1u64 << n) {
                let s = Coalition::new(n, bits).unwrap();
                let c = s.complement();
                assert_eq!(c.complement(), s);
                assert_eq!(c.union(s), Coalition::full(n));
                assert!(c.intersection(s).is_empty());
            }
        }
    }

    #[test]
    fn full_and_empty_at_mask_width() {
        let full = Coalition::full(64);
        assert_eq!(full.bits(), u64::MAX);
        assert_eq!(full.len(), 64);
        assert_eq!(full.complement(), Coalition::empty(64));
        assert!(Coalition::new(3, 0b1000).is_err());
        assert!(Coalition::new(65, 0).is_err());
    }

    #[test]
    fn player_layout_interleaves() {
        let r = roster(6, PlayerKind::FeedForward);
        assert_eq!(r[0].to_string(), "Attn 0");
        assert_eq!(r[1].to_string(), "FFN 0");
        assert_eq!(r[5].to_string(), "FFN 2");
        assert_eq!(r[4].depth, 2);
        assert_eq!(PlayerId::new(3, PlayerKind::MoE).to_string(), "MoE 1");
    }

    #[test]
    fn evaluate_is_memoised() {
        let game = CoalitionGame::new(AdditiveGame::new(vec![0.1, 0.2, 0.3]), 0).unwrap();
        let a = game.evaluate(game.full()).unwrap();
        let b = game.evaluate(game.full()).unwrap();
        assert_eq!(a, b);
        assert_eq!(game.oracle_evaluations(), 1);
    }

    #[test]
    fn additive_value_is_weight_sum() {
        let game = CoalitionGame::new(AdditiveGame::new(vec![0.25, 0.5, 0.125]), 0).unwrap();
        let s = Coalition::from_players(3, [0, 2]).unwrap();
        assert_eq!(game.evaluate(s).unwrap().value, 0.375);
    }

    #[test]
    fn marginal_examples() {
        let additive = CoalitionGame::new(AdditiveGame::new(vec![0.1, 0.2, 0.3]), 0).unwrap();
        let s = Coalition::from_players(3, [0]).unwrap();
        assert!((additive.marginal(s, 2).unwrap() - 0.3).abs() < 1e-15);

        let dummy = CoalitionGame::new(
            FnGame::new("dummy", 2, |s| if s.contains(0) { 1.0 } else { 0.0 }),
            0,
        )
        .unwrap();
        let s = Coalition::from_players(2, [1]).unwrap();
        assert_eq!(dummy.marginal(s, 0).unwrap(), 1.0);

        let square =
            CoalitionGame::new(FnGame::new("square", 3, |s| (s.len() * s.len()) as f64), 0)
                .unwrap();
        assert_eq!(square.marginal(Coalition::empty(3), 0).unwrap(), 1.0);
    }

    #[test]
    fn marginal_rejects_member() {
        let game = CoalitionGame::new(AdditiveGame::new(vec![0.1, 0.2]), 0).unwrap();
        let s = Coalition::from_players(2, [0]).unwrap();
        assert!(matches!(
            game.marginal(s, 0),
            Err(GameError::PlayerInCoalition { player: 0, .. })
        ));
    }

    #[test]
    fn mismatched_player_count_rejected() {
        let game = CoalitionGame::new(AdditiveGame::new(vec![0.1, 0.2]), 0).unwrap();
        assert!(matches!(
            game.evaluate(Coalition::full(3)),
            Err(GameError::PlayerCountMismatch { .. })
        ));
    }

    #[test]
    fn oracle_failure_carries_coalition() {
        struct Failing;
        impl ValueOracle for Failing {
            fn n_players(&self) -> usize {
                2
            }
            fn fingerprint(&self) -> String {
                "failing".into()
            }
            fn value(&self, _: Coalition) -> Result<GameValue, OracleError> {
                Err(OracleError::Transport("connection reset".into()))
            }
        }
        let game = CoalitionGame::new(Failing, 0).unwrap();
        let err = game.evaluate(game.full()).unwrap_err();
        match err {
            GameError::Evaluation { coalition, .. } => assert_eq!(coalition, Coalition::full(2)),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(game.cached_len(), 0);
    }

    #[test]
    fn distinct_requests_counted_once() {
        let game = CoalitionGame::new(AdditiveGame::new(vec![0.5; 4]), 0).unwrap();
        let reqs: Vec<Coalition> = (0..16u64)
            .chain(0..16)
            .map(|b| Coalition::new(4, b).unwrap())
            .collect();
        game.evaluate_many(&reqs).unwrap();
        game.evaluate_many(&reqs).unwrap();
        assert_eq!(game.oracle_evaluations(), 16);
    }

    #[test]
    fn cache_round_trip_and_fingerprint_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.csv");
        let game = CoalitionGame::new(AdditiveGame::new(vec![0.1, 0.2, 0.3]), 7).unwrap();
        let all: Vec<Coalition> = (0..8).map(|b| Coalition::new(3, b).unwrap()).collect();
        let values = game.evaluate_many(&all).unwrap();
        game.save_cache(&path).unwrap();

        let warm = CoalitionGame::new(AdditiveGame::new(vec![0.1, 0.2, 0.3]), 7).unwrap();
        assert_eq!(warm.load_cache(&path).unwrap(), 8);
        assert_eq!(warm.evaluate_many(&all).unwrap(), values);
        assert_eq!(warm.oracle_evaluations(), 0);

        let path2 = dir.path().join("cache2.csv");
        warm.save_cache(&path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());

        let other_seed = CoalitionGame::new(AdditiveGame::new(vec![0.1, 0.2, 0.3]), 8).unwrap();
        assert!(matches!(
            other_seed.load_cache(&path),
            Err(GameError::FingerprintMismatch { .. })
        ));
    }
}
