//! Synthetic multi-task bandit simulator.
//!
//! Each synthetic task is a bandit whose arms pay either Bernoulli rewards
//! (sparse, like exact-match QA) or Beta-distributed rewards (dense, like IoU
//! scores), optionally rescaled. A tabular softmax policy holds one context
//! per task. Every step draws a rollout group per task, filters degenerate
//! groups, computes advantages under the chosen scheme and takes one
//! gradient-ascent step on the clipped-surrogate objective.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::normalize::{
    population_std, scale_and_clip, AdvantageEngine, EmaConfig, RolloutGroup, Scheme,
};
use crate::objective::{
    group_objective_grad, ObjectiveParams, Policies, PolicyGroup, PolicySnapshot, Trajectory,
};
use crate::protocol::TaskKind;

/// Current experiment-config schema version.
pub const CONFIG_VERSION: u32 = 1;

/// Arm reward distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardModel {
    /// Reward 1 with probability `p_success[arm]`, else 0.
    SparseBinary { p_success: Vec<f64> },
    /// Reward drawn from `Beta(alpha[arm], beta[arm])`.
    DenseBounded { alpha: Vec<f64>, beta: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub name: String,
    /// Key for the task's EMA statistics.
    pub task: TaskKind,
    pub kind: RewardModel,
    /// Multiplier applied to every drawn reward.
    #[serde(default = "one")]
    pub reward_scale: f64,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

/// A config problem, located by a field path such as `tasks[1].kind.alpha[0]`.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{path}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl SyntheticTask {
    pub fn sparse(name: &str, task: TaskKind, p_success: Vec<f64>, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            task,
            kind: RewardModel::SparseBinary { p_success },
            reward_scale: 1.0,
            seed,
        }
    }

    pub fn dense(name: &str, task: TaskKind, alpha: Vec<f64>, beta: Vec<f64>, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            task,
            kind: RewardModel::DenseBounded { alpha, beta },
            reward_scale: 1.0,
            seed,
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.reward_scale = scale;
        self
    }

    pub fn arms(&self) -> usize {
        match &self.kind {
            RewardModel::SparseBinary { p_success } => p_success.len(),
            RewardModel::DenseBounded { alpha, .. } => alpha.len(),
        }
    }

    pub fn expected_reward(&self, arm: usize) -> f64 {
        let base = match &self.kind {
            RewardModel::SparseBinary { p_success } => p_success[arm],
            RewardModel::DenseBounded { alpha, beta } => alpha[arm] / (alpha[arm] + beta[arm]),
        };
        base * self.reward_scale
    }

    /// Largest reward the task can pay.
    pub fn max_reward(&self) -> f64 {
        self.reward_scale
    }

    /// Arms whose expected reward is maximal.
    pub fn best_arms(&self) -> Vec<usize> {
        let means: Vec<f64> = (0..self.arms()).map(|a| self.expected_reward(a)).collect();
        let best = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (0..self.arms()).filter(|&a| means[a] == best).collect()
    }

    pub fn validate(&self, path: &str) -> Result<(), ConfigError> {
        let at = |field: &str| format!("{path}.{field}");
        if self.name.trim().is_empty() {
            return Err(ConfigError::new(at("name"), "must not be empty"));
        }
        if !(self.reward_scale > 0.0) || !self.reward_scale.is_finite() {
            return Err(ConfigError::new(at("reward_scale"), "must be positive and finite"));
        }
        match &self.kind {
            RewardModel::SparseBinary { p_success } => {
                if p_success.len() < 2 {
                    return Err(ConfigError::new(at("kind.p_success"), "needs at least 2 arms"));
                }
                if let Some(i) = p_success.iter().position(|p| !(0.0..=1.0).contains(p)) {
                    return Err(ConfigError::new(at(&format!("kind.p_success[{i}]")), "must lie in [0, 1]"));
                }
            }
            RewardModel::DenseBounded { alpha, beta } => {
                if alpha.len() < 2 {
                    return Err(ConfigError::new(at("kind.alpha"), "needs at least 2 arms"));
                }
                if alpha.len() != beta.len() {
                    return Err(ConfigError::new(at("kind.beta"), "must have one entry per arm"));
                }
                for (field, v) in [("alpha", alpha), ("beta", beta)] {
                    if let Some(i) = v.iter().position(|x| !(*x > 0.0) || !x.is_finite()) {
                        return Err(ConfigError::new(at(&format!("kind.{field}[{i}]")), "must be positive"));
                    }
                }
            }
        }
        Ok(())
    }

    fn draw(&self, arm: usize, rng: &mut ChaCha8Rng) -> f64 {
        let raw = match &self.kind {
            RewardModel::SparseBinary { p_success } => {
                if rng.gen::<f64>() < p_success[arm] {
                    1.0
                } else {
                    0.0
                }
            }
            RewardModel::DenseBounded { alpha, beta } => Beta::new(alpha[arm], beta[arm])
                .expect("validated Beta parameters")
                .sample(rng),
        };
        raw * self.reward_scale
    }
}

/// Inverse-CDF draw from a probability vector.
fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// The RNG stream for one task: seeded by the run seed, stream selected by
/// the task seed.
pub fn task_rng(run_seed: u64, task: &SyntheticTask) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    rng.set_stream(task.seed);
    rng
}

/// Samples `g_size` arms from `policy`'s row `context` and draws their
/// rewards.
pub fn generate_group(
    task: &SyntheticTask,
    policy: &PolicySnapshot,
    context: usize,
    g_size: usize,
    rng: &mut ChaCha8Rng,
) -> RolloutGroup {
    let probs = policy.probs(context);
    let mut rewards = Vec::with_capacity(g_size);
    let mut trajectories = Vec::with_capacity(g_size);
    for _ in 0..g_size {
        let arm = sample_index(&probs, rng);
        rewards.push(task.draw(arm, rng));
        trajectories.push(Trajectory::single(context, arm));
    }
    RolloutGroup {
        trajectories,
        ..RolloutGroup::new(task.task, rewards)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interleave {
    /// One group and one gradient step per task, tasks in config order.
    RoundRobin,
    /// All tasks' groups normalised as one batch and combined into a single
    /// gradient step.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub tasks: Vec<SyntheticTask>,
    pub schemes: Vec<Scheme>,
    pub steps: usize,
    pub group_size: usize,
    pub groups_per_step: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub interleave: Interleave,
    pub objective: ObjectiveParams,
    pub ema: EmaConfig,
    /// Replace the EMA scale by each group's own standard deviation. Used to
    /// check that the EMA path reduces to GRPO.
    pub pin_ema_to_group_std: bool,
}

impl Default for ExperimentConfig {
    /// Sparse binary task against a five-times narrower task of the same
    /// shape, both stationary.
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            tasks: vec![
                SyntheticTask::sparse("sparse", TaskKind::MathQa, vec![0.5, 0.5], 1),
                SyntheticTask::sparse("narrow", TaskKind::SpatialGrounding, vec![0.5, 0.5], 2).with_scale(0.2),
            ],
            schemes: Scheme::ALL.to_vec(),
            steps: 2000,
            group_size: crate::normalize::DEFAULT_GROUP_SIZE,
            groups_per_step: 1,
            learning_rate: 0.5,
            seed: 42,
            interleave: Interleave::RoundRobin,
            objective: ObjectiveParams::default(),
            ema: EmaConfig::default(),
            pin_ema_to_group_std: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.version != CONFIG_VERSION {
            return Err(ConfigError::new(
                "version",
                format!("unsupported version {} (expected {CONFIG_VERSION})", self.version),
            ));
        }
        if self.tasks.is_empty() {
            return Err(ConfigError::new("tasks", "needs at least one task"));
        }
        let mut kinds = BTreeSet::new();
        let mut seeds = BTreeSet::new();
        for (i, t) in self.tasks.iter().enumerate() {
            let path = format!("tasks[{i}]");
            t.validate(&path)?;
            if !kinds.insert(t.task) {
                return Err(ConfigError::new(format!("{path}.task"), "each task kind may appear once"));
            }
            if !seeds.insert(t.seed) {
                return Err(ConfigError::new(format!("{path}.seed"), "task seeds must be distinct"));
            }
        }
        if self.schemes.is_empty() {
            return Err(ConfigError::new("schemes", "needs at least one scheme"));
        }
        if self.group_size < 2 {
            return Err(ConfigError::new("group_size", "must be at least 2"));
        }
        if self.groups_per_step == 0 {
            return Err(ConfigError::new("groups_per_step", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(ConfigError::new("learning_rate", "must be positive"));
        }
        self.objective
            .validate()
            .map_err(|e| ConfigError::new("objective", e.to_string()))?;
        self.ema.validate().map_err(|e| ConfigError::new("ema", e.to_string()))?;
        Ok(())
    }
}

/// Per-task time series, one entry per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSeries {
    pub name: String,
    pub task: TaskKind,
    pub mean_reward: Vec<f64>,
    /// 0 until the task's statistics are initialised, and always 0 for
    /// schemes that keep no statistics.
    pub ema_sigma: Vec<f64>,
    /// Mean |advantage| over the step's surviving groups, 0 if none survived.
    pub mean_abs_advantage: Vec<f64>,
    pub entropy: Vec<f64>,
    pub filtered_groups: Vec<u32>,
}

impl TaskSeries {
    fn new(task: &SyntheticTask, steps: usize) -> Self {
        Self {
            name: task.name.clone(),
            task: task.task,
            mean_reward: Vec::with_capacity(steps),
            ema_sigma: Vec::with_capacity(steps),
            mean_abs_advantage: Vec::with_capacity(steps),
            entropy: Vec::with_capacity(steps),
            filtered_groups: Vec::with_capacity(steps),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub name: String,
    /// Final policy mass on the task's best arm(s).
    pub final_accuracy: f64,
    /// Mean |advantage| over every surviving group of the run.
    pub long_run_mean_abs_advantage: f64,
    pub filter_rate: f64,
    pub final_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scheme: Scheme,
    pub steps: usize,
    pub series: Vec<TaskSeries>,
    pub summary: Vec<TaskSummary>,
    pub final_policy: PolicySnapshot,
}

impl RunReport {
    pub fn summary_for(&self, name: &str) -> Option<&TaskSummary> {
        self.summary.iter().find(|s| s.name == name)
    }
}

#[derive(Default, Clone, Copy)]
struct Tally {
    abs_adv_sum: f64,
    surviving_groups: u64,
    filtered_groups: u64,
}

struct StepResult {
    groups: Vec<RolloutGroup>,
}

fn mean_abs(v: &[f64]) -> f64 {
    v.iter().map(|a| a.abs()).sum::<f64>() / v.len() as f64
}

/// Runs one scheme on the configured tasks.
pub fn run_experiment(cfg: &ExperimentConfig, scheme: Scheme) -> Result<RunReport, ConfigError> {
    cfg.validate()?;
    let n_tasks = cfg.tasks.len();
    let max_arms = cfg.tasks.iter().map(SyntheticTask::arms).max().unwrap_or(0);
    // tasks with fewer arms get -inf logits for the padding
    let mut policy = PolicySnapshot::new(
        cfg.tasks
            .iter()
            .map(|t| (0..max_arms).map(|a| if a < t.arms() { 0.0 } else { f64::NEG_INFINITY }).collect())
            .collect(),
    );
    let reference = policy.clone();
    let mut rngs: Vec<ChaCha8Rng> = cfg.tasks.iter().map(|t| task_rng(cfg.seed, t)).collect();
    let mut engine = AdvantageEngine::new(scheme, cfg.ema);
    let mut series: Vec<TaskSeries> = cfg.tasks.iter().map(|t| TaskSeries::new(t, cfg.steps)).collect();
    let mut tallies = vec![Tally::default(); n_tasks];

    let normalise = |engine: &mut AdvantageEngine, groups: Vec<RolloutGroup>| -> StepResult {
        let groups = engine
            .process_batch(groups)
            .into_iter()
            .map(|o| {
                let mut g = o.group;
                if o.error.is_some() {
                    g.advantages = None;
                }
                if scheme == Scheme::Ema && cfg.pin_ema_to_group_std && !g.filtered {
                    g.advantages = Some(scale_and_clip(&g.rewards, population_std(&g.rewards), &cfg.ema));
                }
                g
            })
            .collect();
        StepResult { groups }
    };

    let ascend = |policy: &mut PolicySnapshot, groups: &[RolloutGroup]| {
        let usable: Vec<PolicyGroup> = groups
            .iter()
            .filter_map(|g| {
                g.advantages.as_deref().map(|a| PolicyGroup {
                    trajectories: &g.trajectories,
                    advantages: a,
                })
            })
            .collect();
        if usable.is_empty() {
            return;
        }
        let old = policy.clone();
        let (_, grad) = group_objective_grad(
            &usable,
            Policies {
                current: &old,
                old: &old,
                reference: &reference,
            },
            &cfg.objective,
        )
        .expect("trajectories come from this policy");
        policy.ascend(&grad, cfg.learning_rate);
    };

    for _step in 0..cfg.steps {
        let mut per_task: Vec<Vec<RolloutGroup>> = vec![Vec::new(); n_tasks];
        match cfg.interleave {
            Interleave::RoundRobin => {
                for (ti, task) in cfg.tasks.iter().enumerate() {
                    let groups = (0..cfg.groups_per_step)
                        .map(|_| generate_group(task, &policy, ti, cfg.group_size, &mut rngs[ti]))
                        .collect();
                    let result = normalise(&mut engine, groups);
                    ascend(&mut policy, &result.groups);
                    per_task[ti] = result.groups;
                }
            }
            Interleave::Mixed => {
                let mut all = Vec::new();
                for (ti, task) in cfg.tasks.iter().enumerate() {
                    for _ in 0..cfg.groups_per_step {
                        all.push(generate_group(task, &policy, ti, cfg.group_size, &mut rngs[ti]));
                    }
                }
                let result = normalise(&mut engine, all);
                ascend(&mut policy, &result.groups);
                for g in result.groups {
                    let ti = cfg.tasks.iter().position(|t| t.task == g.task).expect("known task");
                    per_task[ti].push(g);
                }
            }
        }

        for (ti, groups) in per_task.iter().enumerate() {
            let s = &mut series[ti];
            let tally = &mut tallies[ti];
            let rewards: Vec<f64> = groups.iter().flat_map(|g| g.rewards.iter().copied()).collect();
            s.mean_reward.push(rewards.iter().sum::<f64>() / rewards.len() as f64);
            s.ema_sigma.push(
                engine
                    .registry
                    .get(cfg.tasks[ti].task)
                    .map_or(0.0, |st| st.sigma()),
            );
            let surviving: Vec<f64> = groups
                .iter()
                .filter_map(|g| g.advantages.as_deref().map(mean_abs))
                .collect();
            let filtered = groups.iter().filter(|g| g.filtered).count() as u32;
            tally.abs_adv_sum += surviving.iter().sum::<f64>();
            tally.surviving_groups += surviving.len() as u64;
            tally.filtered_groups += u64::from(filtered);
            s.mean_abs_advantage.push(if surviving.is_empty() {
                0.0
            } else {
                surviving.iter().sum::<f64>() / surviving.len() as f64
            });
            s.entropy.push(policy.entropy(ti));
            s.filtered_groups.push(filtered);
        }
    }

    let total_groups = (cfg.steps * cfg.groups_per_step) as f64;
    let summary = cfg
        .tasks
        .iter()
        .enumerate()
        .map(|(ti, task)| {
            let probs = policy.probs(ti);
            let t = tallies[ti];
            TaskSummary {
                name: task.name.clone(),
                final_accuracy: task.best_arms().iter().map(|&a| probs[a]).sum(),
                long_run_mean_abs_advantage: if t.surviving_groups == 0 {
                    0.0
                } else {
                    t.abs_adv_sum / t.surviving_groups as f64
                },
                filter_rate: if total_groups > 0.0 {
                    t.filtered_groups as f64 / total_groups
                } else {
                    0.0
                },
                final_sigma: engine.registry.get(task.task).map_or(0.0, |s| s.sigma()),
            }
        })
        .collect();

    Ok(RunReport {
        scheme,
        steps: cfg.steps,
        series,
        summary,
        final_policy: policy,
    })
}

/// Runs every configured scheme.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Vec<RunReport>, ConfigError> {
    cfg.schemes.iter().map(|s| run_experiment(cfg, *s)).collect()
}

/// CSV rendering: one row per scheme, step and task.
pub fn write_csv<W: std::io::Write>(reports: &[RunReport], mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "scheme,step,task,kind,mean_reward,ema_sigma,mean_abs_advantage,entropy,filtered_groups"
    )?;
    for r in reports {
        for step in 0..r.steps {
            for s in &r.series {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    r.scheme,
                    step,
                    s.name,
                    s.task,
                    s.mean_reward[step],
                    s.ema_sigma[step],
                    s.mean_abs_advantage[step],
                    s.entropy[step],
                    s.filtered_groups[step]
                )?;
            }
        }
    }
    Ok(())
}
