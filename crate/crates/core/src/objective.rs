//! Clipped-surrogate objective with a KL penalty, for small softmax
//! policies.
//!
//! Per rollout `i` with sequence-level ratio `rho_i = pi(o_i) / pi_old(o_i)`:
//!
//! ```text
//! term_i = min(rho_i * A_i, clip(rho_i, 1 - eps, 1 + eps) * A_i) - beta_kl * k3_i
//! k3_i   = r_i - ln r_i - 1,  r_i = pi_ref(o_i) / pi(o_i)
//! J      = mean over groups of (1 / G) * sum_i term_i
//! ```
//!
//! Sequence probabilities are products of per-step action probabilities and
//! are handled in log space.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ObjectiveError {
    #[error("invalid probability: {0}")]
    InvalidProbability(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("trajectory step ({context}, {action}) is outside the policy table")]
    OutOfRange { context: usize, action: usize },
    #[error("group has {trajectories} trajectories but {advantages} advantages")]
    LengthMismatch { trajectories: usize, advantages: usize },
    #[error("policy snapshots have different shapes")]
    ShapeMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub context: usize,
    pub action: usize,
}

/// One sampled response: a sequence of (context, action) steps.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn single(context: usize, action: usize) -> Self {
        Self {
            steps: vec![Step { context, action }],
        }
    }
}

/// Tabular softmax policy: one row of logits per context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub logits: Vec<Vec<f64>>,
}

impl PolicySnapshot {
    pub fn new(logits: Vec<Vec<f64>>) -> Self {
        Self { logits }
    }

    pub fn uniform(contexts: usize, actions: usize) -> Self {
        Self::new(vec![vec![0.0; actions]; contexts])
    }

    pub fn probs(&self, context: usize) -> Vec<f64> {
        softmax(&self.logits[context])
    }

    fn log_prob(&self, step: Step) -> Result<f64, ObjectiveError> {
        let row = self
            .logits
            .get(step.context)
            .filter(|r| step.action < r.len())
            .ok_or(ObjectiveError::OutOfRange {
                context: step.context,
                action: step.action,
            })?;
        Ok(row[step.action] - log_sum_exp(row))
    }

    /// `ln pi(o)` for a whole trajectory.
    pub fn sequence_log_prob(&self, traj: &Trajectory) -> Result<f64, ObjectiveError> {
        traj.steps.iter().map(|s| self.log_prob(*s)).sum()
    }

    /// Shannon entropy (nats) of one context's action distribution.
    pub fn entropy(&self, context: usize) -> f64 {
        -self
            .probs(context)
            .into_iter()
            .filter(|p| *p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }

    /// `logits += step * grad`.
    pub fn ascend(&mut self, grad: &[Vec<f64>], step: f64) {
        for (row, g) in self.logits.iter_mut().zip(grad) {
            for (l, d) in row.iter_mut().zip(g) {
                *l += step * d;
            }
        }
    }

    fn same_shape(&self, other: &PolicySnapshot) -> bool {
        self.logits.len() == other.logits.len()
            && self.logits.iter().zip(&other.logits).all(|(a, b)| a.len() == b.len())
    }

    fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.logits.iter().map(|r| vec![0.0; r.len()]).collect()
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveParams {
    pub epsilon: f64,
    pub beta_kl: f64,
}

impl Default for ObjectiveParams {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            beta_kl: 0.01,
        }
    }
}

impl ObjectiveParams {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(ObjectiveError::InvalidParameter("epsilon must lie in (0, 1)"));
        }
        if !(self.beta_kl >= 0.0) || !self.beta_kl.is_finite() {
            return Err(ObjectiveError::InvalidParameter("beta_kl must be non-negative"));
        }
        Ok(())
    }
}

/// `min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)`.
pub fn surrogate_term(ratio: f64, advantage: f64, eps: f64) -> Result<f64, ObjectiveError> {
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(ObjectiveError::InvalidProbability("ratio must be positive and finite"));
    }
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
    Ok(unclipped.min(clipped))
}

/// k3 estimator `r - ln r - 1` with `r = p_ref / p_current`.
pub fn kl_penalty(p_current: f64, p_ref: f64) -> Result<f64, ObjectiveError> {
    for p in [p_current, p_ref] {
        if !(p > 0.0 && p <= 1.0) {
            return Err(ObjectiveError::InvalidProbability("probabilities must lie in (0, 1]"));
        }
    }
    Ok(kl_from_log_ratio(p_ref.ln() - p_current.ln()))
}

fn kl_from_log_ratio(log_r: f64) -> f64 {
    // exp_m1 keeps precision near r = 1
    (log_r.exp_m1() - log_r).max(0.0)
}

/// Rollouts of one prompt together with their advantages.
#[derive(Debug, Clone, Copy)]
pub struct PolicyGroup<'a> {
    pub trajectories: &'a [Trajectory],
    pub advantages: &'a [f64],
}

/// The three policies the objective compares.
#[derive(Debug, Clone, Copy)]
pub struct Policies<'a> {
    pub current: &'a PolicySnapshot,
    pub old: &'a PolicySnapshot,
    pub reference: &'a PolicySnapshot,
}

impl Policies<'_> {
    fn check(&self) -> Result<(), ObjectiveError> {
        if self.current.same_shape(self.old) && self.current.same_shape(self.reference) {
            Ok(())
        } else {
            Err(ObjectiveError::ShapeMismatch)
        }
    }
}

pub fn group_objective(groups: &[PolicyGroup], policies: Policies, params: &ObjectiveParams) -> Result<f64, ObjectiveError> {
    evaluate(groups, policies, params, false).map(|(v, _)| v)
}

/// Objective value and its gradient with respect to the current policy's
/// logits.
pub fn group_objective_grad(
    groups: &[PolicyGroup],
    policies: Policies,
    params: &ObjectiveParams,
) -> Result<(f64, Vec<Vec<f64>>), ObjectiveError> {
    evaluate(groups, policies, params, true)
}

fn evaluate(
    groups: &[PolicyGroup],
    policies: Policies,
    params: &ObjectiveParams,
    with_grad: bool,
) -> Result<(f64, Vec<Vec<f64>>), ObjectiveError> {
    params.validate()?;
    policies.check()?;
    let mut grad = policies.current.zeros_like();
    if groups.is_empty() {
        return Ok((0.0, grad));
    }
    let eps = params.epsilon;
    let n_groups = groups.len() as f64;
    let mut total = 0.0;
    for g in groups {
        if g.trajectories.len() != g.advantages.len() {
            return Err(ObjectiveError::LengthMismatch {
                trajectories: g.trajectories.len(),
                advantages: g.advantages.len(),
            });
        }
        if g.trajectories.is_empty() {
            continue;
        }
        let weight = 1.0 / (g.trajectories.len() as f64 * n_groups);
        for (traj, &adv) in g.trajectories.iter().zip(g.advantages) {
            let lc = policies.current.sequence_log_prob(traj)?;
            let lo = policies.old.sequence_log_prob(traj)?;
            let lr = policies.reference.sequence_log_prob(traj)?;
            let ratio = (lc - lo).exp();
            let surrogate = surrogate_term(ratio, adv, eps)?;
            let log_r = lr - lc;
            let kl = kl_from_log_ratio(log_r);
            total += weight * (surrogate - params.beta_kl * kl);

            if with_grad {
                let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
                let d_surrogate = if ratio * adv <= clipped { ratio * adv } else { 0.0 };
                // d k3 / d ln pi = 1 - r
                let d_kl = -log_r.exp_m1();
                let d_lc = weight * (d_surrogate - params.beta_kl * d_kl);
                for step in &traj.steps {
                    let probs = policies.current.probs(step.context);
                    let row = &mut grad[step.context];
                    for (a, p) in probs.iter().enumerate() {
                        let indicator = if a == step.action { 1.0 } else { 0.0 };
                        row[a] += d_lc * (indicator - p);
                    }
                }
            }
        }
    }
    Ok((total, grad))
}
