//! Exact and window-sampled Shapley values over a [`CoalitionGame`].
//!
//! The exact route enumerates all `2^n` coalitions. The estimator only
//! visits near-full coalitions whose removed players form one contiguous
//! window of at most `K` sublayers, and averages the marginal
//! contributions those windows expose for each player.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coalition::{Coalition, CoalitionGame, GameError};

/// Default player cap for exact enumeration.
pub const DEFAULT_EXACT_CAP: usize = 20;

/// Default maximum number of simultaneously removed sublayers.
pub const DEFAULT_MAX_REMOVED: usize = 4;

#[derive(Debug, Error)]
pub enum ShapleyError {
    #[error(
        "exact Shapley over {n_players} players needs 2^{n_players} evaluations; \
         the cap is {cap} players (use window estimation instead)"
    )]
    OverCap { n_players: usize, cap: usize },
    #[error("max_removed must be in 1..{limit} for {n_players} players, got {max_removed}")]
    BadMaxRemoved {
        n_players: usize,
        max_removed: usize,
        limit: usize,
    },
    #[error("n_min must be below n_players ({n_players}), got {n_min}")]
    BadMinRetained { n_players: usize, n_min: usize },
    #[error("plan is for {plan} players, game has {game}")]
    PlanMismatch { plan: usize, game: usize },
    #[error("player {player} has no marginal pair in the sampling plan")]
    NoPairs { player: usize },
    #[error(transparent)]
    Game(#[from] GameError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapleyMode {
    Exact,
    WindowEstimate,
}

/// Contiguous run of removed players `{start, ..., start + len - 1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Window {
    pub start: usize,
    pub len: usize,
}

impl Window {
    pub fn end(self) -> usize {
        self.start + self.len - 1
    }

    pub fn removed(self, n_players: usize) -> Coalition {
        Coalition::from_players(n_players, self.start..self.start + self.len)
            .expect("window lies inside the player range")
    }

    pub fn retained(self, n_players: usize) -> Coalition {
        self.removed(n_players).complement()
    }
}

/// Every contiguous removal window of size `1..=max_removed`, ordered by
/// (size, offset).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingPlan {
    n_players: usize,
    max_removed: usize,
    windows: Vec<Window>,
}

/// Plan parameters as carried in serialised results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanInfo {
    pub n_players: usize,
    pub max_removed: usize,
}

/// Builds the window family with at most `max_removed < n_players`
/// removals, so every sampled coalition keeps at least one player.
pub fn build_plan(n_players: usize, max_removed: usize) -> Result<SamplingPlan, ShapleyError> {
    if max_removed == 0 || max_removed >= n_players {
        return Err(ShapleyError::BadMaxRemoved {
            n_players,
            max_removed,
            limit: n_players,
        });
    }
    Ok(SamplingPlan::enumerate(n_players, max_removed))
}

/// Like [`build_plan`] but also admits `max_removed == n_players`, whose
/// largest window removes every player. For small games this lets the
/// window family reach the empty coalition.
pub fn build_plan_including_empty(
    n_players: usize,
    max_removed: usize,
) -> Result<SamplingPlan, ShapleyError> {
    if max_removed == 0 || max_removed > n_players {
        return Err(ShapleyError::BadMaxRemoved {
            n_players,
            max_removed,
            limit: n_players + 1,
        });
    }
    Ok(SamplingPlan::enumerate(n_players, max_removed))
}

impl SamplingPlan {
    fn enumerate(n_players: usize, max_removed: usize) -> Self {
        let windows = (1..=max_removed)
            .flat_map(|len| (0..=n_players - len).map(move |start| Window { start, len }))
            .collect();
        Self {
            n_players,
            max_removed,
            windows,
        }
    }

    pub fn n_players(&self) -> usize {
        self.n_players
    }

    pub fn max_removed(&self) -> usize {
        self.max_removed
    }

    pub fn windows(&self) -> &[Window] {
        &self.windows
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn info(&self) -> PlanInfo {
        PlanInfo {
            n_players: self.n_players,
            max_removed: self.max_removed,
        }
    }

    /// Position of the window `(start, len)` in plan order.
    fn index_of(&self, start: usize, len: usize) -> usize {
        // Sizes 1..len-1 contribute (n - k + 1) windows each.
        let before: usize = (1..len).map(|k| self.n_players - k + 1).sum();
        before + start
    }

    /// Retained coalitions implied by the plan, in plan order.
    pub fn retained_coalitions(&self) -> Vec<Coalition> {
        self.windows
            .iter()
            .map(|w| w.retained(self.n_players))
            .collect()
    }
}

/// Closed-form window count `K(2N + 1 − K)/2`.
pub fn plan_size(n_players: usize, max_removed: usize) -> usize {
    max_removed * (2 * n_players + 1 - max_removed) / 2
}

/// The closed-form sample count `(N + N_min)(N − N_min)/2`, where
/// `N_min = N − K` is the minimum number of retained players.
///
/// For the same `K` it is `K/2` smaller than the enumerated window count;
/// both numbers are reported. Odd products are floored.
pub fn closed_form_sample_count(n_players: usize, n_min: usize) -> Result<u64, ShapleyError> {
    if n_min >= n_players {
        return Err(ShapleyError::BadMinRetained { n_players, n_min });
    }
    let (n, m) = (n_players as u64, n_min as u64);
    Ok((n + m) * (n - m) / 2)
}

/// Per-player attributions plus how they were obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyResult {
    pub mode: ShapleyMode,
    pub values: Vec<f64>,
    pub pairs_used: Vec<u64>,
    pub v_full: f64,
    /// Not evaluated by the window estimator, which never visits far
    /// coalitions.
    pub v_empty: Option<f64>,
    pub plan: Option<PlanInfo>,
}

impl ShapleyResult {
    pub fn n_players(&self) -> usize {
        self.values.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serialises")
    }
}

/// Exact Shapley values with the default player cap.
pub fn exact_shapley(game: &CoalitionGame) -> Result<ShapleyResult, ShapleyError> {
    exact_shapley_with_cap(game, DEFAULT_EXACT_CAP)
}

/// `φ_i = Σ_{S ⊆ N∖{i}} |S|!(n−|S|−1)!/n! · (v(S∪{i}) − v(S))`, summed over
/// `S` in ascending mask order.
pub fn exact_shapley_with_cap(
    game: &CoalitionGame,
    cap: usize,
) -> Result<ShapleyResult, ShapleyError> {
    let n = game.n_players();
    if n > cap || n >= 63 {
        return Err(ShapleyError::OverCap { n_players: n, cap });
    }
    if n == 0 {
        let v = game.evaluate(game.empty())?.value;
        return Ok(ShapleyResult {
            mode: ShapleyMode::Exact,
            values: vec![],
            pairs_used: vec![],
            v_full: v,
            v_empty: Some(v),
            plan: None,
        });
    }
    let all: Vec<Coalition> = (0..1u64 << n)
        .map(|b| Coalition::new(n, b).expect("mask in range"))
        .collect();
    let values: Vec<f64> = game
        .evaluate_many(&all)?
        .into_iter()
        .map(|v| v.value)
        .collect();

    // |S|!(n−|S|−1)!/n! = 1 / (n · C(n−1, |S|))
    let mut weights = Vec::with_capacity(n);
    let mut binom: u64 = 1;
    for s in 0..n {
        weights.push(1.0 / (n as f64 * binom as f64));
        binom = binom * (n - 1 - s) as u64 / (s + 1) as u64;
    }

    let phi = (0..n)
        .map(|i| {
            let bit = 1u64 << i;
            let mut acc = 0.0;
            for s in 0..1u64 << n {
                if s & bit != 0 {
                    continue;
                }
                let w = weights[s.count_ones() as usize];
                acc += w * (values[(s | bit) as usize] - values[s as usize]);
            }
            acc
        })
        .collect();

    Ok(ShapleyResult {
        mode: ShapleyMode::Exact,
        values: phi,
        pairs_used: vec![1u64 << (n - 1); n],
        v_full: values[(1usize << n) - 1],
        v_empty: Some(values[0]),
        plan: None,
    })
}

/// Window estimate: for each player `i`, every plan window `W` with `i` at
/// one of its ends yields the pair `S = N∖W`, `S∪{i} = N∖(W∖{i})`. The
/// estimate is the unweighted mean of those marginals in plan order.
pub fn estimate_shapley(
    game: &CoalitionGame,
    plan: &SamplingPlan,
) -> Result<ShapleyResult, ShapleyError> {
    let n = game.n_players();
    if plan.n_players() != n {
        return Err(ShapleyError::PlanMismatch {
            plan: plan.n_players(),
            game: n,
        });
    }
    let mut requests = Vec::with_capacity(plan.len() + 1);
    requests.push(game.full());
    requests.extend(plan.retained_coalitions());
    let evaluated: Vec<f64> = game
        .evaluate_many(&requests)?
        .into_iter()
        .map(|v| v.value)
        .collect();
    let v_full = evaluated[0];
    let window_value = &evaluated[1..];

    let value_without = |start: usize, len: usize| -> f64 {
        if len == 0 {
            v_full
        } else {
            window_value[plan.index_of(start, len)]
        }
    };

    let mut values = Vec::with_capacity(n);
    let mut pairs_used = Vec::with_capacity(n);
    for i in 0..n {
        let mut sum = 0.0;
        let mut count = 0u64;
        for (k, w) in plan.windows().iter().enumerate() {
            let partner = if w.start == i {
                // Drop i from the left end.
                Some((w.start + 1, w.len - 1))
            } else if w.end() == i {
                Some((w.start, w.len - 1))
            } else {
                None
            };
            if let Some((start, len)) = partner {
                sum += value_without(start, len) - window_value[k];
                count += 1;
            }
        }
        if count == 0 {
            return Err(ShapleyError::NoPairs { player: i });
        }
        values.push(sum / count as f64);
        pairs_used.push(count);
    }

    Ok(ShapleyResult {
        mode: ShapleyMode::WindowEstimate,
        values,
        pairs_used,
        v_full,
        v_empty: None,
        plan: Some(plan.info()),
    })
}
