//! Turns Shapley results and ablation sweeps into report artifacts:
//! per-layer shares, top-k concentration, collapse flags, cornerstone
//! sets and grouped accuracy drops.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coalition::{CoalitionGame, GameError, PlayerId};
use crate::shapley::ShapleyResult;

/// Default collapse tolerance above the random-guess baseline.
pub const DEFAULT_COLLAPSE_EPSILON: f64 = 0.02;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("all Shapley values are zero; shares are undefined")]
    AllZero,
    #[error("k = {k} outside 1..={n_players}")]
    BadK { k: usize, n_players: usize },
    #[error("Shapley result covers {shapley} players, ablation report {ablation}")]
    PlayerMismatch { shapley: usize, ablation: usize },
    #[error("roster has {roster} players, game has {game}")]
    RosterMismatch { roster: usize, game: usize },
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Share of total absolute attribution per player, with the signed values
/// kept for bar output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shares {
    pub shares: Vec<f64>,
    pub signed: Vec<f64>,
}

pub fn proportions(result: &ShapleyResult) -> Result<Shares, AnalysisError> {
    let total: f64 = result.values.iter().map(|v| v.abs()).sum();
    if total == 0.0 || !total.is_finite() {
        return Err(AnalysisError::AllZero);
    }
    Ok(Shares {
        shares: result.values.iter().map(|v| v.abs() / total).collect(),
        signed: result.values.clone(),
    })
}

/// Player indices sorted by decreasing share, ties to the lower index.
pub fn ranking(shares: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| shares[b].total_cmp(&shares[a]).then(a.cmp(&b)));
    order
}

/// Sum of the `k` largest shares.
pub fn top_k_share(result: &ShapleyResult, k: usize) -> Result<f64, AnalysisError> {
    let n = result.n_players();
    if k == 0 || k > n {
        return Err(AnalysisError::BadK { k, n_players: n });
    }
    if k == n {
        proportions(result)?;
        return Ok(1.0);
    }
    let shares = proportions(result)?.shares;
    Ok(ranking(&shares)
        .into_iter()
        .take(k)
        .map(|i| shares[i])
        .sum())
}

pub fn detect_collapse(accuracy: f64, random_baseline: f64, epsilon: f64) -> bool {
    accuracy <= random_baseline + epsilon
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub player: usize,
    pub name: String,
    pub accuracy: f64,
}

/// Single-sublayer ablation accuracies next to the unablated and
/// random-guess references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub entries: Vec<AblationEntry>,
    pub baseline_full: f64,
    pub random_baseline: f64,
    pub collapse_epsilon: f64,
}

impl AblationReport {
    pub fn n_players(&self) -> usize {
        self.entries.len()
    }

    pub fn drop(&self, player: usize) -> f64 {
        self.baseline_full - self.entries[player].accuracy
    }

    pub fn collapsed(&self, player: usize) -> bool {
        detect_collapse(
            self.entries[player].accuracy,
            self.random_baseline,
            self.collapse_epsilon,
        )
    }

    /// `player,accuracy,drop,collapse` with a leading `baseline` row.
    pub fn write_csv(&self, w: impl Write) -> Result<(), AnalysisError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["player", "accuracy", "drop", "collapse"])?;
        out.write_record([
            "baseline".to_owned(),
            self.baseline_full.to_string(),
            "0".to_owned(),
            detect_collapse(
                self.baseline_full,
                self.random_baseline,
                self.collapse_epsilon,
            )
            .to_string(),
        ])?;
        for (i, e) in self.entries.iter().enumerate() {
            out.write_record([
                e.name.clone(),
                e.accuracy.to_string(),
                self.drop(i).to_string(),
                self.collapsed(i).to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Evaluates the full coalition and every leave-one-out coalition.
pub fn ablation_sweep(
    game: &CoalitionGame,
    roster: &[PlayerId],
    random_baseline: f64,
    collapse_epsilon: f64,
) -> Result<AblationReport, AnalysisError> {
    let n = game.n_players();
    if roster.len() != n {
        return Err(AnalysisError::RosterMismatch {
            roster: roster.len(),
            game: n,
        });
    }
    let full = game.full();
    let mut requests = vec![full];
    requests.extend((0..n).map(|i| full.without(i)));
    let values = game.evaluate_many(&requests)?;
    Ok(AblationReport {
        entries: roster
            .iter()
            .zip(&values[1..])
            .map(|(p, v)| AblationEntry {
                player: p.index,
                name: p.to_string(),
                accuracy: v.value,
            })
            .collect(),
        baseline_full: values[0].value,
        random_baseline,
        collapse_epsilon,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CornerstoneFinding {
    pub cornerstone: Vec<usize>,
    pub names: Vec<String>,
    pub share_threshold: f64,
    pub require_collapse: bool,
    pub shares: Vec<f64>,
}

impl CornerstoneFinding {
    pub fn contains(&self, player: usize) -> bool {
        self.cornerstone.contains(&player)
    }

    /// Comma-separated names, e.g. `Attn 0, FFN 0, FFN 1`.
    pub fn label(&self) -> String {
        self.names.join(", ")
    }
}

/// Players whose share exceeds `share_threshold` (default `2/n`) and whose
/// single ablation collapses accuracy to the random-guess level.
pub fn detect_cornerstones(
    result: &ShapleyResult,
    report: &AblationReport,
    share_threshold: Option<f64>,
) -> Result<CornerstoneFinding, AnalysisError> {
    let n = result.n_players();
    if n != report.n_players() {
        return Err(AnalysisError::PlayerMismatch {
            shapley: n,
            ablation: report.n_players(),
        });
    }
    let shares = proportions(result)?.shares;
    let threshold = share_threshold.unwrap_or(2.0 / n as f64);
    let cornerstone: Vec<usize> = (0..n)
        .filter(|&i| shares[i] > threshold && report.collapsed(i))
        .collect();
    Ok(CornerstoneFinding {
        names: cornerstone
            .iter()
            .map(|&i| report.entries[i].name.clone())
            .collect(),
        cornerstone,
        share_threshold: threshold,
        require_collapse: true,
        shares,
    })
}

/// Mean accuracy drop over cornerstone and over the remaining players.
/// An empty group is `None`, never zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub cornerstone_mean_drop: Option<f64>,
    pub other_mean_drop: Option<f64>,
    pub n_cornerstone: usize,
    pub n_other: usize,
}

pub fn group_summary(
    result: &ShapleyResult,
    report: &AblationReport,
    finding: &CornerstoneFinding,
) -> Result<GroupSummary, AnalysisError> {
    if result.n_players() != report.n_players() || finding.shares.len() != report.n_players() {
        return Err(AnalysisError::PlayerMismatch {
            shapley: result.n_players(),
            ablation: report.n_players(),
        });
    }
    let (mut c_sum, mut c_n, mut o_sum, mut o_n) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..report.n_players() {
        if finding.contains(i) {
            c_sum += report.drop(i);
            c_n += 1;
        } else {
            o_sum += report.drop(i);
            o_n += 1;
        }
    }
    let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    Ok(GroupSummary {
        cornerstone_mean_drop: mean(c_sum, c_n),
        other_mean_drop: mean(o_sum, o_n),
        n_cornerstone: c_n,
        n_other: o_n,
    })
}

/// Averages per-task group means, skipping tasks where a group is absent.
pub fn average_groups(groups: &[GroupSummary]) -> GroupSummary {
    let avg =
        |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    GroupSummary {
        cornerstone_mean_drop: avg(groups
            .iter()
            .filter_map(|g| g.cornerstone_mean_drop)
            .collect()),
        other_mean_drop: avg(groups.iter().filter_map(|g| g.other_mean_drop).collect()),
        n_cornerstone: groups.iter().map(|g| g.n_cornerstone).sum(),
        n_other: groups.iter().map(|g| g.n_other).sum(),
    }
}

/// Agreement between two attributions of the same players.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankAgreement {
    /// Spearman correlation of the values (average ranks for ties).
    pub spearman: f64,
    pub argmax_match: bool,
    /// Size of the overlap between the two top-3 sets.
    pub top3_overlap: usize,
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn rank_agreement(a: &[f64], b: &[f64]) -> RankAgreement {
    assert_eq!(a.len(), b.len(), "rank agreement needs equal lengths");
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    let spearman = if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    };
    let top = |v: &[f64]| -> Vec<usize> { ranking(v).into_iter().take(3).collect() };
    let (ta, tb) = (top(a), top(b));
    RankAgreement {
        spearman,
        argmax_match: ranking(a).first() == ranking(b).first(),
        top3_overlap: ta.iter().filter(|i| tb.contains(i)).count(),
    }
}

/// `player,kind,depth,value,share,pairs_used` per player.
pub fn write_shapley_csv(
    result: &ShapleyResult,
    roster: &[PlayerId],
    w: impl Write,
) -> Result<(), AnalysisError> {
    let shares = proportions(result)?.shares;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["player", "kind", "depth", "value", "share", "pairs_used"])?;
    for (i, p) in roster.iter().enumerate() {
        out.write_record([
            p.to_string(),
            p.kind.short_name().to_owned(),
            p.depth.to_string(),
            result.values[i].to_string(),
            shares[i].to_string(),
            result.pairs_used[i].to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
