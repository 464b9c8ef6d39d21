//! Verifiable rewards for multi-task visual reasoning rollouts and task-wise
//! EMA advantage normalisation.
//!
//! * [`protocol`] parses `<think>/<answer>` responses and scores format.
//! * [`rewards`] holds the per-task accuracy rewards.
//! * [`scorer`] is the reward-model client for open-ended answers.
//! * [`normalize`] turns group rewards into advantages (GRPO, Dr.GRPO, EMA-GRPO).
//! * [`objective`] evaluates the clipped-surrogate + KL objective and its gradient.
//! * [`sim`] is a synthetic multi-task bandit for comparing the schemes.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod normalize;
pub mod objective;
pub mod protocol;
pub mod rewards;
pub mod scorer;
pub mod sim;

pub use normalize::{AdvantageEngine, EmaConfig, RolloutGroup, Scheme, StatsRegistry, TaskStats};
pub use objective::{ObjectiveParams, PolicySnapshot, Trajectory};
pub use protocol::{parse_response, ParsedResponse, TaskAnswer, TaskKind};
pub use rewards::{GroundTruth, RewardConfig, RewardRecord, Rewarder};
pub use scorer::{MockScorer, ScoreRequest, ScoreResponse, Scorer};
pub use sim::{ExperimentConfig, RunReport, SyntheticTask};
