//! Group advantages under three schemes.
//!
//! All schemes centre rewards on the group mean. They differ in the scale:
//!
//! * GRPO divides by the group's own population standard deviation.
//! * Dr.GRPO does not rescale.
//! * EMA-GRPO divides by a per-task scale `sigma = sqrt(m2 - m1^2)`, where
//!   `m1` and `m2` are exponential moving averages (decay `beta`) of the batch
//!   mean and batch mean-of-squares of that task's rewards. Every group of a
//!   task shares this scale, so within a task samples are weighted by their
//!   centred reward alone, while tasks with very different reward scales end
//!   up with comparable advantage magnitudes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::objective::Trajectory;
use crate::protocol::TaskKind;

/// Default number of rollouts per prompt.
pub const DEFAULT_GROUP_SIZE: usize = 8;
/// Slack allowed on `m2 >= m1^2`.
pub const MOMENT_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NormalizeError {
    #[error("group reward standard deviation is zero")]
    DegenerateGroup,
    #[error("statistics for task `{0}` have not been initialised")]
    StatsUninitialized(TaskKind),
    #[error("empty reward batch")]
    EmptyBatch,
    #[error("group has {got} rewards, expected {expected}")]
    GroupSize { expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterReason {
    AllCorrect,
    AllIncorrect,
    /// Constant rewards strictly between 0 and the task maximum.
    Constant,
}

/// G rollouts for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub task: TaskKind,
    pub rewards: Vec<f64>,
    #[serde(default)]
    pub advantages: Option<Vec<f64>>,
    #[serde(default)]
    pub filtered: bool,
    /// Sampled action sequences, one per reward. Empty when the group comes
    /// from a reward log rather than a live policy.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trajectories: Vec<Trajectory>,
}

impl RolloutGroup {
    pub fn new(task: TaskKind, rewards: Vec<f64>) -> Self {
        Self {
            task,
            rewards,
            advantages: None,
            filtered: false,
            trajectories: Vec::new(),
        }
    }

    pub fn mean(&self) -> f64 {
        mean(&self.rewards)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn centered(rewards: &[f64]) -> Vec<f64> {
    let m = mean(rewards);
    rewards.iter().map(|r| r - m).collect()
}

/// Population standard deviation.
pub fn population_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// `(R_i - mean) / std_group`.
pub fn grpo_advantages(rewards: &[f64]) -> Result<Vec<f64>, NormalizeError> {
    if rewards.is_empty() {
        return Err(NormalizeError::EmptyBatch);
    }
    grpo_with_scale(rewards, population_std(rewards))
}

fn grpo_with_scale(rewards: &[f64], std: f64) -> Result<Vec<f64>, NormalizeError> {
    if !(std > 0.0) {
        return Err(NormalizeError::DegenerateGroup);
    }
    Ok(centered(rewards).into_iter().map(|a| a / std).collect())
}

/// `R_i - mean`.
pub fn drgrpo_advantages(rewards: &[f64]) -> Result<Vec<f64>, NormalizeError> {
    if rewards.is_empty() {
        return Err(NormalizeError::EmptyBatch);
    }
    Ok(centered(rewards))
}

/// Per-task EMA of the first and second reward moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    pub m1: f64,
    pub m2: f64,
    pub steps: u64,
    pub beta: f64,
}

impl TaskStats {
    pub fn new(beta: f64) -> Self {
        Self {
            m1: 0.0,
            m2: 0.0,
            steps: 0,
            beta,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.steps > 0
    }

    pub fn sigma(&self) -> f64 {
        (self.m2 - self.m1 * self.m1).max(0.0).sqrt()
    }

    /// Folds one batch of rewards into the moments. The first batch
    /// initialises `m1`, `m2` to its own moments.
    pub fn updated(&self, rewards: &[f64]) -> Result<TaskStats, NormalizeError> {
        if rewards.is_empty() {
            return Err(NormalizeError::EmptyBatch);
        }
        let n = rewards.len() as f64;
        let mu = rewards.iter().sum::<f64>() / n;
        let nu = rewards.iter().map(|r| r * r).sum::<f64>() / n;
        let (m1, m2) = if self.is_initialized() {
            (
                self.beta * self.m1 + (1.0 - self.beta) * mu,
                self.beta * self.m2 + (1.0 - self.beta) * nu,
            )
        } else {
            (mu, nu)
        };
        Ok(TaskStats {
            m1,
            m2,
            steps: self.steps + 1,
            beta: self.beta,
        })
    }
}

pub fn ema_update(stats: &TaskStats, rewards: &[f64]) -> Result<TaskStats, NormalizeError> {
    stats.updated(rewards)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateOrder {
    /// Fold the current batch into the statistics, then normalise it.
    Before,
    /// Normalise with the previous statistics, then fold the batch in. The
    /// very first batch of a task still initialises the statistics first.
    After,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmaConfig {
    pub beta: f64,
    pub sigma_floor: f64,
    /// Advantages are clipped to `[-clip, clip]`.
    pub clip: f64,
    pub update_order: UpdateOrder,
    /// Whether filtered groups still feed the statistics.
    pub update_on_filtered: bool,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self {
            beta: 0.99,
            sigma_floor: 1e-4,
            clip: 5.0,
            update_order: UpdateOrder::Before,
            update_on_filtered: false,
        }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<(), NormalizeError> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(NormalizeError::InvalidParameter("beta must lie in [0, 1)"));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(NormalizeError::InvalidParameter("sigma_floor must be positive"));
        }
        if !(self.clip > 0.0) {
            return Err(NormalizeError::InvalidParameter("clip must be positive"));
        }
        Ok(())
    }
}

/// `(R_i - mean) / max(sigma, floor)`, clipped to `[-clip, clip]`.
pub fn ema_advantages(rewards: &[f64], stats: &TaskStats, task: TaskKind, cfg: &EmaConfig) -> Result<Vec<f64>, NormalizeError> {
    if !stats.is_initialized() {
        return Err(NormalizeError::StatsUninitialized(task));
    }
    if rewards.is_empty() {
        return Err(NormalizeError::EmptyBatch);
    }
    Ok(scale_and_clip(rewards, stats.sigma(), cfg))
}

/// Shared tail of the EMA scheme; also used when the scale is pinned
/// externally.
pub fn scale_and_clip(rewards: &[f64], sigma: f64, cfg: &EmaConfig) -> Vec<f64> {
    let scale = sigma.max(cfg.sigma_floor);
    centered(rewards)
        .into_iter()
        .map(|a| (a / scale).clamp(-cfg.clip, cfg.clip))
        .collect()
}

/// Width below which a group's reward range counts as constant.
pub const DEFAULT_DEGENERATE_EPS: f64 = 1e-9;

/// Why a group should be discarded, if at all. `task_max` is the task's
/// maximum reward and only serves to label the reason.
pub fn filter_reason(rewards: &[f64], task_max: f64, eps: f64) -> Option<FilterReason> {
    let lo = rewards.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if rewards.is_empty() || hi - lo >= eps {
        return None;
    }
    Some(if (hi - task_max).abs() < eps {
        FilterReason::AllCorrect
    } else if lo.abs() < eps {
        FilterReason::AllIncorrect
    } else {
        FilterReason::Constant
    })
}

/// Marks all-equal groups as filtered and drops their advantages.
pub fn filter_group(mut group: RolloutGroup, task_max: f64, eps: f64) -> RolloutGroup {
    if filter_reason(&group.rewards, task_max, eps).is_some() {
        group.filtered = true;
        group.advantages = None;
    }
    group
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Grpo,
    Drgrpo,
    Ema,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Grpo, Scheme::Drgrpo, Scheme::Ema];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Grpo => "grpo",
            Scheme::Drgrpo => "drgrpo",
            Scheme::Ema => "ema",
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| format!("unknown scheme `{s}` (expected grpo, drgrpo or ema)"))
    }
}

/// Task-keyed EMA statistics. Updates to one task are applied in call
/// order; wrap in a lock to share across threads.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StatsRegistry {
    stats: BTreeMap<TaskKind, TaskStats>,
}

impl StatsRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, task: TaskKind) -> Option<&TaskStats> {
        self.stats.get(&task)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TaskKind, &TaskStats)> {
        self.stats.iter()
    }

    pub fn update(&mut self, task: TaskKind, rewards: &[f64], beta: f64) -> Result<&TaskStats, NormalizeError> {
        let current = self.stats.get(&task).copied().unwrap_or_else(|| TaskStats::new(beta));
        let next = current.updated(rewards)?;
        self.stats.insert(task, next);
        Ok(&self.stats[&task])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Outcome of normalising one group inside a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupOutcome {
    pub group: RolloutGroup,
    pub filter_reason: Option<FilterReason>,
    pub error: Option<NormalizeError>,
}

/// Applies filtering, statistics updates and one advantage scheme to
/// batches of rollout groups.
#[derive(Debug, Clone)]
pub struct AdvantageEngine {
    pub scheme: Scheme,
    pub ema: EmaConfig,
    pub degenerate_eps: f64,
    pub registry: StatsRegistry,
}

impl AdvantageEngine {
    pub fn new(scheme: Scheme, ema: EmaConfig) -> Self {
        Self {
            scheme,
            ema,
            degenerate_eps: DEFAULT_DEGENERATE_EPS,
            registry: StatsRegistry::new(),
        }
    }

    /// Processes one training step's groups. For the EMA scheme each task's
    /// statistics receive a single update from all of its surviving rewards
    /// in the batch.
    pub fn process_batch(&mut self, groups: Vec<RolloutGroup>) -> Vec<GroupOutcome> {
        let mut outcomes: Vec<GroupOutcome> = groups
            .into_iter()
            .map(|g| {
                let eps = self.degenerate_eps;
                let reason = filter_reason(&g.rewards, g.task.max_accuracy(), eps).map(|r| {
                    if r == FilterReason::Constant && (g.rewards[0] - max_total(g.task)).abs() < eps {
                        FilterReason::AllCorrect
                    } else {
                        r
                    }
                });
                let group = if reason.is_some() {
                    RolloutGroup {
                        filtered: true,
                        advantages: None,
                        ..g
                    }
                } else {
                    g
                };
                GroupOutcome {
                    group,
                    filter_reason: reason,
                    error: None,
                }
            })
            .collect();

        if self.scheme == Scheme::Ema {
            let mut batch: BTreeMap<TaskKind, Vec<f64>> = BTreeMap::new();
            for o in &outcomes {
                if !o.group.filtered || self.ema.update_on_filtered {
                    batch.entry(o.group.task).or_default().extend(&o.group.rewards);
                }
            }
            let update_now: Vec<TaskKind> = batch
                .keys()
                .copied()
                .filter(|t| {
                    self.ema.update_order == UpdateOrder::Before
                        || !self.registry.get(*t).is_some_and(TaskStats::is_initialized)
                })
                .collect();
            for t in &update_now {
                self.apply_update(*t, &batch[t]);
            }
            for o in outcomes.iter_mut().filter(|o| !o.group.filtered) {
                let result = match self.registry.get(o.group.task) {
                    Some(s) => ema_advantages(&o.group.rewards, s, o.group.task, &self.ema),
                    None => Err(NormalizeError::StatsUninitialized(o.group.task)),
                };
                record(o, result);
            }
            for (t, rewards) in &batch {
                if !update_now.contains(t) {
                    self.apply_update(*t, rewards);
                }
            }
        } else {
            for o in outcomes.iter_mut().filter(|o| !o.group.filtered) {
                let result = match self.scheme {
                    Scheme::Grpo => grpo_advantages(&o.group.rewards),
                    _ => drgrpo_advantages(&o.group.rewards),
                };
                record(o, result);
            }
        }
        outcomes
    }

    fn apply_update(&mut self, task: TaskKind, rewards: &[f64]) {
        // non-empty by construction
        let _ = self.registry.update(task, rewards, self.ema.beta);
    }
}

fn record(o: &mut GroupOutcome, result: Result<Vec<f64>, NormalizeError>) {
    match result {
        Ok(a) => o.group.advantages = Some(a),
        Err(e) => o.error = Some(e),
    }
}

/// Maximum total reward (accuracy plus a unit format reward).
fn max_total(task: TaskKind) -> f64 {
    task.max_accuracy() + 1.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-5
    }

    #[test]
    fn grpo_cases() {
        let a = grpo_advantages(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        let expected = [1.73205, -0.57735, -0.57735, -0.57735];
        assert!(a.iter().zip(expected).all(|(x, y)| close(*x, y)));
        let shifted = grpo_advantages(&[4.0, 3.0, 3.0, 3.0]).unwrap();
        assert!(a.iter().zip(&shifted).all(|(x, y)| close(*x, *y)));
        let scaled = grpo_advantages(&[7.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(a.iter().zip(&scaled).all(|(x, y)| close(*x, *y)));
        assert_eq!(grpo_advantages(&[0.3; 8]), Err(NormalizeError::DegenerateGroup));
    }

    #[test]
    fn drgrpo_cases() {
        assert_eq!(drgrpo_advantages(&[1.0, 0.0, 0.0, 0.0]).unwrap(), vec![0.75, -0.25, -0.25, -0.25]);
        assert_eq!(drgrpo_advantages(&[0.4; 4]).unwrap(), vec![0.0; 4]);
        let a = drgrpo_advantages(&[1.0, 0.0, 0.5, 0.0]).unwrap();
        let b = drgrpo_advantages(&[3.0, 0.0, 1.5, 0.0]).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| close(3.0 * x, *y)));
    }

    #[test]
    fn ema_update_cases() {
        let s0 = TaskStats::new(0.99);
        let s1 = s0.updated(&[0.0, 1.0]).unwrap();
        assert_eq!((s1.m1, s1.m2, s1.steps), (0.5, 0.5, 1));
        let s = TaskStats { m1: 0.5, m2: 0.29, steps: 3, beta: 0.99 };
        let next = s.updated(&[0.7; 4]).unwrap();
        assert!(close(next.m1, 0.502));
        assert_eq!(next.steps, 4);
        assert!(close(s.sigma(), 0.2));
        assert!(s0.updated(&[]).is_err());
    }

    #[test]
    fn ema_advantage_cases() {
        let cfg = EmaConfig::default();
        let stats = TaskStats { m1: 0.0, m2: 0.25, steps: 1, beta: 0.99 };
        assert_eq!(stats.sigma(), 0.5);
        let a = ema_advantages(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0], &stats, TaskKind::MathQa, &cfg).unwrap();
        assert_eq!(a, vec![1.5, -0.5, -0.5, -0.5, 1.5, -0.5, -0.5, -0.5]);

        // raw advantage 8 clips to 5
        let narrow = TaskStats { m1: 0.0, m2: 0.01, steps: 1, beta: 0.99 };
        let a = ema_advantages(&[0.8, -0.8], &narrow, TaskKind::MathQa, &cfg).unwrap();
        assert_eq!(a, vec![5.0, -5.0]);

        assert_eq!(
            ema_advantages(&[1.0, 0.0], &TaskStats::new(0.99), TaskKind::Tracking, &cfg),
            Err(NormalizeError::StatsUninitialized(TaskKind::Tracking))
        );
    }

    #[test]
    fn sigma_floor_bounds_scale() {
        let cfg = EmaConfig::default();
        let flat = TaskStats { m1: 0.5, m2: 0.25, steps: 10, beta: 0.99 };
        let a = ema_advantages(&[0.5, 0.5 + 2e-5], &flat, TaskKind::MathQa, &cfg).unwrap();
        assert!(close(a[1], 0.1));
    }

    #[test]
    fn same_centered_rewards_share_ema_advantages() {
        let cfg = EmaConfig::default();
        let stats = TaskStats { m1: 0.4, m2: 0.4, steps: 5, beta: 0.99 };
        let g1 = [1.0, 0.0, 0.0, 0.0];
        let g2 = [1.5, 0.5, 0.5, 0.5];
        assert_eq!(
            ema_advantages(&g1, &stats, TaskKind::MathQa, &cfg).unwrap(),
            ema_advantages(&g2, &stats, TaskKind::MathQa, &cfg).unwrap()
        );
    }

    #[test]
    fn filtering() {
        assert_eq!(filter_reason(&[2.0; 8], 2.0, 1e-9), Some(FilterReason::AllCorrect));
        assert_eq!(filter_reason(&[0.0; 8], 2.0, 1e-9), Some(FilterReason::AllIncorrect));
        assert_eq!(filter_reason(&[0.7; 8], 2.0, 1e-9), Some(FilterReason::Constant));
        assert_eq!(filter_reason(&[0.0, 1.0, 0.0], 1.0, 1e-9), None);
        let g = filter_group(RolloutGroup::new(TaskKind::MathQa, vec![2.0; 8]), 2.0, 1e-9);
        assert!(g.filtered && g.advantages.is_none());
        let g = filter_group(RolloutGroup::new(TaskKind::MathQa, vec![0.0, 2.0]), 2.0, 1e-9);
        assert!(!g.filtered);
    }

    #[test]
    fn engine_skips_filtered_groups_for_stats() {
        let mut engine = AdvantageEngine::new(Scheme::Ema, EmaConfig::default());
        let out = engine.process_batch(vec![
            RolloutGroup::new(TaskKind::MathQa, vec![2.0; 8]),
            RolloutGroup::new(TaskKind::MathQa, vec![0.0; 8]),
        ]);
        assert!(out.iter().all(|o| o.group.filtered && o.group.advantages.is_none()));
        assert!(engine.registry.get(TaskKind::MathQa).is_none());

        let out = engine.process_batch(vec![
            RolloutGroup::new(TaskKind::MathQa, vec![2.0, 0.0, 0.0, 0.0]),
            RolloutGroup::new(TaskKind::MathQa, vec![2.0; 4]),
        ]);
        let stats = engine.registry.get(TaskKind::MathQa).unwrap();
        assert_eq!((stats.m1, stats.m2, stats.steps), (0.5, 1.0, 1));
        assert!(out[0].group.advantages.is_some());
        assert!(out[1].group.filtered);
    }

    #[test]
    fn engine_update_after_uses_previous_stats() {
        let cfg = EmaConfig {
            update_order: UpdateOrder::After,
            beta: 0.5,
            ..EmaConfig::default()
        };
        let mut engine = AdvantageEngine::new(Scheme::Ema, cfg);
        engine.process_batch(vec![RolloutGroup::new(TaskKind::Tracking, vec![0.0, 0.2])]);
        let before = *engine.registry.get(TaskKind::Tracking).unwrap();
        assert!(close(before.sigma(), 0.1));
        let out = engine.process_batch(vec![RolloutGroup::new(TaskKind::Tracking, vec![0.0, 1.0])]);
        assert_eq!(out[0].group.advantages, Some(vec![-5.0, 5.0]));
        assert_eq!(engine.registry.get(TaskKind::Tracking).unwrap().steps, 2);
    }

    #[test]
    fn grpo_error_does_not_abort_batch() {
        let mut engine = AdvantageEngine::new(Scheme::Grpo, EmaConfig::default());
        engine.degenerate_eps = 0.0;
        let out = engine.process_batch(vec![
            RolloutGroup::new(TaskKind::MathQa, vec![0.5; 4]),
            RolloutGroup::new(TaskKind::MathQa, vec![1.0, 0.0]),
        ]);
        assert_eq!(out[0].error, Some(NormalizeError::DegenerateGroup));
        assert_eq!(out[1].group.advantages, Some(vec![1.0, -1.0]));
    }

    #[test]
    fn checkpoint_restores_sigma_bitwise() {
        let mut reg = StatsRegistry::new();
        reg.update(TaskKind::Tracking, &[0.1, 0.37, 0.93], 0.99).unwrap();
        reg.update(TaskKind::Tracking, &[0.11, 0.2], 0.99).unwrap();
        reg.update(TaskKind::MathQa, &[0.0, 2.0, 2.0], 0.99).unwrap();
        let back = StatsRegistry::from_json(&reg.to_json()).unwrap();
        assert_eq!(back, reg);
        for (t, s) in reg.iter() {
            assert_eq!(back.get(*t).unwrap().sigma().to_bits(), s.sigma().to_bits());
        }
        assert!(reg.to_json().contains("\"tracking\""));
    }

    fn rewards() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0f64..10.0, 2..16)
    }

    proptest! {
        #[test]
        fn advantages_are_centered(r in rewards(), m1 in -1.0f64..1.0, var in 0.01f64..4.0) {
            let tol = 1e-9;
            let g = grpo_advantages(&r);
            if let Ok(a) = g {
                prop_assert!(a.iter().sum::<f64>().abs() / (a.len() as f64) < tol);
            }
            let d = drgrpo_advantages(&r).unwrap();
            prop_assert!(d.iter().sum::<f64>().abs() / (d.len() as f64) < tol);
            let stats = TaskStats { m1, m2: var + m1 * m1, steps: 1, beta: 0.99 };
            let e = scale_and_clip(&r, stats.sigma(), &EmaConfig { clip: f64::INFINITY, ..EmaConfig::default() });
            prop_assert!(e.iter().sum::<f64>().abs() / (e.len() as f64) < tol);
        }

        #[test]
        fn ema_advantages_bounded(r in rewards(), m1 in -5.0f64..5.0, var in 0.0f64..4.0) {
            let stats = TaskStats { m1, m2: var + m1 * m1, steps: 3, beta: 0.99 };
            let a = ema_advantages(&r, &stats, TaskKind::MathQa, &EmaConfig::default()).unwrap();
            prop_assert!(a.iter().all(|v| (-5.0..=5.0).contains(v)));
        }

        #[test]
        fn update_is_permutation_invariant(mut r in rewards(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let base = TaskStats { m1: 0.3, m2: 0.5, steps: 4, beta: 0.99 };
            let a = base.updated(&r).unwrap();
            r.sort_by(|x, y| y.partial_cmp(x).unwrap());
            let b = base.updated(&r).unwrap();
            r.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let c = base.updated(&r).unwrap();
            for s in [b, c] {
                prop_assert!((a.m1 - s.m1).abs() < 1e-12 && (a.m2 - s.m2).abs() < 1e-12);
            }
        }

        #[test]
        fn moments_stay_consistent(batches in proptest::collection::vec(rewards(), 1..20)) {
            let mut s = TaskStats::new(0.99);
            for b in &batches {
                s = s.updated(b).unwrap();
                prop_assert!(s.m2 >= s.m1 * s.m1 - MOMENT_SLACK);
                prop_assert!(s.sigma() >= 0.0);
            }
        }
    }
}
