//! Layer attribution for residual sequential models.
//!
//! Sublayers (attention and feed-forward branches) are treated as players
//! of a cooperative game whose value is task accuracy with every other
//! sublayer ablated. Shapley values are computed exactly for small models
//! and estimated from contiguous removal windows for larger ones; single
//! layer ablation sweeps check the attributions mechanistically. A small
//! trainable decoder-only transformer provides the built-in value oracle.

pub mod analysis;
pub mod bridge;
pub mod coalition;
pub mod evaluator;
pub mod experiment;
pub mod games;
pub mod model;
pub mod shapley;
pub mod tasks;

pub use evaluator::ModelOracle;

pub use coalition::{
    Coalition, CoalitionGame, GameError, GameValue, OracleError, PlayerId, PlayerKind, ValueOracle,
};
pub use shapley::{
    build_plan, build_plan_including_empty, closed_form_sample_count, estimate_shapley,
    exact_shapley, SamplingPlan, ShapleyError, ShapleyMode, ShapleyResult,
};
