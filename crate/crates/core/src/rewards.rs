//! Task-specific accuracy rewards and the total reward
//! `r_total = r_acc + r_format`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::protocol::{
    format_reward, normalize_choice, parse_number, payload_from_value, BBox, BoxTrack, Interval,
    ParsedResponse, Point, SchemaError, SegPrompt, TaskAnswer, TaskKind, SEG_POINTS,
};
use crate::scorer::{ScoreError, ScoreRequest, Scorer};

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error("degenerate reference: {0}")]
    DegenerateReference(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("expected {expected} points, got {got}")]
    Cardinality { expected: usize, got: usize },
    #[error("invalid ground truth for `{task}`: {reason}")]
    InvalidGroundTruth { task: TaskKind, reason: String },
    #[error(transparent)]
    ScoringUnavailable(#[from] ScoreError),
}

impl From<(TaskKind, SchemaError)> for RewardError {
    fn from((task, e): (TaskKind, SchemaError)) -> Self {
        RewardError::InvalidGroundTruth {
            task,
            reason: e.to_string(),
        }
    }
}

/// Reference answer for one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum GroundTruth {
    Choice(String),
    Number(f64),
    Text(String),
    /// Open-ended QA and captioning: the reward model also sees the query.
    Reference { query: String, answer: String },
    Interval(Interval),
    Box(BBox),
    BoxTrack(BoxTrack),
    SpatioTemporal { interval: Interval, boxes: BoxTrack },
    Segmentation(SegPrompt),
}

impl GroundTruth {
    /// Decodes a ground truth from its JSON form. Perception tasks use the
    /// same schema as answers; QA tasks take a string or a number. `query`
    /// is required for open-ended QA and captioning.
    pub fn from_json(task: TaskKind, value: &Value, query: Option<&str>) -> Result<Self, RewardError> {
        let bad = |reason: &str| RewardError::InvalidGroundTruth {
            task,
            reason: reason.to_string(),
        };
        let text = || match value {
            Value::String(s) if !s.trim().is_empty() => Ok(s.trim().to_string()),
            _ => Err(bad("expected a non-empty string")),
        };
        Ok(match task {
            TaskKind::MultiChoiceQa => GroundTruth::Choice(normalize_choice(&text()?)),
            TaskKind::NumericQa | TaskKind::RegressionQa | TaskKind::MathQa => {
                let v = match value {
                    Value::Number(n) => n.as_f64(),
                    Value::String(s) => parse_number(s),
                    _ => None,
                };
                GroundTruth::Number(v.ok_or_else(|| bad("expected a number or a fraction string"))?)
            }
            TaskKind::OcrQa => GroundTruth::Text(text()?),
            TaskKind::OpenEndedQa | TaskKind::Caption => {
                let query = query
                    .filter(|q| !q.trim().is_empty())
                    .ok_or_else(|| bad("missing `query`"))?;
                GroundTruth::Reference {
                    query: query.to_string(),
                    answer: text()?,
                }
            }
            _ => match payload_from_value(value.clone(), task).map_err(|e| RewardError::from((task, e)))? {
                TaskAnswer::Interval(i) => GroundTruth::Interval(i),
                TaskAnswer::Box(b) => GroundTruth::Box(b),
                TaskAnswer::BoxTrack(t) => GroundTruth::BoxTrack(t),
                TaskAnswer::SpatioTemporal { interval, boxes } => {
                    GroundTruth::SpatioTemporal { interval, boxes }
                }
                TaskAnswer::SegPrompt(s) => GroundTruth::Segmentation(s),
                _ => unreachable!("perception payloads decode to geometric answers"),
            },
        })
    }
}

/// Gaussian kernel widths for segmentation distances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// Pixels.
    pub sigma_spatial: f64,
    /// Seconds.
    pub sigma_temporal: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self {
            sigma_spatial: 50.0,
            sigma_temporal: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub format_weight: f64,
    pub kernel: KernelParams,
    /// Relative-error bounds `1 - θ` for each MRA confidence level θ.
    pub mra_thresholds: Vec<f64>,
    pub numeric_rel_tol: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            format_weight: 1.0,
            kernel: KernelParams::default(),
            // θ = 0.50, 0.55, ..., 0.95
            mra_thresholds: vec![0.50, 0.45, 0.40, 0.35, 0.30, 0.25, 0.20, 0.15, 0.10, 0.05],
            numeric_rel_tol: 1e-6,
        }
    }
}

/// Per-rollout reward with its breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub task: TaskKind,
    pub r_acc: f64,
    pub r_format: f64,
    pub r_total: f64,
}

/// Resolution of reported reward components.
const REWARD_GRID: f64 = (1u64 << 40) as f64;

/// Snaps `v` to a multiple of 2^-40. Sums of such values below 2^12 are
/// exact, so `r_total - r_format == r_acc` holds bit for bit.
fn on_grid(v: f64) -> f64 {
    (v * REWARD_GRID).round() / REWARD_GRID
}

impl RewardRecord {
    pub fn new(task: TaskKind, r_acc: f64, r_format: f64) -> Self {
        let (r_acc, r_format) = (on_grid(r_acc), on_grid(r_format));
        Self {
            task,
            r_acc,
            r_format,
            r_total: r_acc + r_format,
        }
    }
}

/// Exact-match reward for multiple-choice, numeric and math answers.
pub fn rule_qa_reward(pred: Option<&TaskAnswer>, gt: &GroundTruth, rel_tol: f64) -> f64 {
    let hit = match (pred, gt) {
        (Some(TaskAnswer::Choice(p)), GroundTruth::Choice(g)) => normalize_choice(p) == normalize_choice(g),
        (Some(TaskAnswer::Number(p)), GroundTruth::Number(g)) => numbers_equal(*p, *g, rel_tol),
        _ => false,
    };
    if hit {
        1.0
    } else {
        0.0
    }
}

fn numbers_equal(a: f64, b: f64, rel_tol: f64) -> bool {
    a == b || (a - b).abs() <= rel_tol * a.abs().max(b.abs())
}

/// Mean relative accuracy: the fraction of thresholds `t` with
/// `|pred - gt| / |gt| < t`.
pub fn mra_reward(pred: f64, gt: f64, thresholds: &[f64]) -> Result<f64, RewardError> {
    if gt == 0.0 || !gt.is_finite() {
        return Err(RewardError::DegenerateReference("MRA needs a finite, non-zero reference"));
    }
    if thresholds.is_empty() {
        return Err(RewardError::InvalidParameter("MRA needs at least one threshold"));
    }
    if !pred.is_finite() {
        return Ok(0.0);
    }
    let rel = (pred - gt).abs() / gt.abs();
    let passed = thresholds.iter().filter(|&&t| rel < t).count();
    Ok(passed as f64 / thresholds.len() as f64)
}

/// Word-level Levenshtein distance.
pub fn word_edit_distance(pred: &[&str], gt: &[&str]) -> usize {
    let mut prev: Vec<usize> = (0..=gt.len()).collect();
    let mut cur = vec![0; gt.len() + 1];
    for (i, p) in pred.iter().enumerate() {
        cur[0] = i + 1;
        for (j, g) in gt.iter().enumerate() {
            let sub = prev[j] + usize::from(p != g);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[gt.len()]
}

/// `1 - min(1, WER)` over whitespace tokens.
pub fn wer_reward(pred: &str, gt: &str) -> Result<f64, RewardError> {
    let gt: Vec<&str> = gt.split_whitespace().collect();
    if gt.is_empty() {
        return Err(RewardError::DegenerateReference("WER needs a non-empty reference"));
    }
    let pred: Vec<&str> = pred.split_whitespace().collect();
    let wer = word_edit_distance(&pred, &gt) as f64 / gt.len() as f64;
    Ok(1.0 - wer.min(1.0))
}

/// Temporal IoU. Invalid or zero-length intervals score 0.
pub fn temporal_iou(pred: &Interval, gt: &Interval) -> f64 {
    if !pred.is_valid() || !gt.is_valid() || pred.length() <= 0.0 || gt.length() <= 0.0 {
        return 0.0;
    }
    let inter = (pred.end.min(gt.end) - pred.start.max(gt.start)).max(0.0);
    let union = pred.length() + gt.length() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Box IoU. Invalid or zero-area boxes score 0.
pub fn spatial_iou(pred: &BBox, gt: &BBox) -> f64 {
    if !pred.is_valid() || !gt.is_valid() || pred.area() <= 0.0 || gt.area() <= 0.0 {
        return 0.0;
    }
    let w = (pred.x2.min(gt.x2) - pred.x1.max(gt.x1)).max(0.0);
    let h = (pred.y2.min(gt.y2) - pred.y1.max(gt.y1)).max(0.0);
    let inter = w * h;
    let union = pred.area() + gt.area() - inter;
    if union <= 0.0 || !union.is_finite() {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Mean box IoU over the ground-truth frames. Frames missing from the
/// prediction score 0; extra predicted frames are ignored.
pub fn mean_track_iou(pred: &BoxTrack, gt: &BoxTrack) -> Result<f64, RewardError> {
    if gt.is_empty() {
        return Err(RewardError::DegenerateReference("ground-truth track has no frames"));
    }
    let total: f64 = gt
        .frames
        .iter()
        .map(|g| pred.get(g.frame).map_or(0.0, |p| spatial_iou(p, &g.bbox)))
        .sum();
    Ok(total / gt.len() as f64)
}

pub fn tracking_reward(pred: &BoxTrack, gt: &BoxTrack) -> Result<f64, RewardError> {
    mean_track_iou(pred, gt)
}

/// tIoU plus mean per-frame sIoU, in [0, 2].
pub fn st_grounding_reward(
    pred_interval: &Interval,
    pred_boxes: &BoxTrack,
    gt_interval: &Interval,
    gt_boxes: &BoxTrack,
) -> Result<f64, RewardError> {
    Ok(temporal_iou(pred_interval, gt_interval) + mean_track_iou(pred_boxes, gt_boxes)?)
}

/// `exp(-d^2 / (2 sigma^2))`.
pub fn gaussian_kernel(d: f64, sigma: f64) -> Result<f64, RewardError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(RewardError::InvalidParameter("kernel sigma must be positive"));
    }
    Ok((-(d * d) / (2.0 * sigma * sigma)).exp())
}

/// All bijections of three elements.
const PERMUTATIONS_3: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

/// Minimum mean Euclidean distance between two point triples over all
/// pairings. Per pairing the distances are summed in prediction order and
/// divided by 3.
pub fn point_set_distance(pred: &[Point], gt: &[Point]) -> Result<f64, RewardError> {
    for set in [pred, gt] {
        if set.len() != SEG_POINTS {
            return Err(RewardError::Cardinality {
                expected: SEG_POINTS,
                got: set.len(),
            });
        }
    }
    let best = PERMUTATIONS_3
        .iter()
        .map(|perm| {
            let sum: f64 = (0..SEG_POINTS).map(|i| pred[i].distance(&gt[perm[i]])).sum();
            sum / SEG_POINTS as f64
        })
        .fold(f64::INFINITY, f64::min);
    Ok(best)
}

fn point_term(pred: &[Point], gt: &[Point], sigma: f64) -> f64 {
    point_set_distance(pred, gt)
        .and_then(|d| gaussian_kernel(d, sigma))
        .ok()
        .filter(|v| v.is_finite())
        .unwrap_or(0.0)
}

/// `sIoU + G(dis+) + G(dis-)`, in [0, 3]. A structurally invalid component
/// contributes 0.
pub fn image_seg_reward(pred: &SegPrompt, gt: &SegPrompt, k: &KernelParams) -> f64 {
    spatial_iou(&pred.bbox, &gt.bbox)
        + point_term(&pred.pos, &gt.pos, k.sigma_spatial)
        + point_term(&pred.neg, &gt.neg, k.sigma_spatial)
}

/// Image terms plus `G(|t_pred - t_gt|)` with the temporal sigma, in [0, 4].
/// A missing keyframe on either side zeroes the temporal term.
pub fn video_seg_reward(pred: &SegPrompt, gt: &SegPrompt, k: &KernelParams) -> f64 {
    let temporal = match (pred.keyframe, gt.keyframe) {
        (Some(p), Some(g)) if p.is_finite() && g.is_finite() => {
            gaussian_kernel((p - g).abs(), k.sigma_temporal).unwrap_or(0.0)
        }
        _ => 0.0,
    };
    image_seg_reward(pred, gt, k) + temporal
}

/// Computes rewards for parsed responses. The scorer is only consulted for
/// open-ended QA and captioning.
pub struct Rewarder<'a> {
    pub config: RewardConfig,
    scorer: Option<&'a dyn Scorer>,
}

impl<'a> Rewarder<'a> {
    pub fn new(config: RewardConfig, scorer: Option<&'a dyn Scorer>) -> Self {
        Self { config, scorer }
    }

    /// Accuracy reward. Malformed responses and missing answers score 0.
    pub fn accuracy(&self, parsed: &ParsedResponse, gt: &GroundTruth, task: TaskKind) -> Result<f64, RewardError> {
        let answer = match &parsed.answer {
            Some(a) if parsed.format_ok && task.accepts(a) => a,
            _ => return Ok(0.0),
        };
        let mismatch = || RewardError::InvalidGroundTruth {
            task,
            reason: "ground truth variant does not match the task".into(),
        };
        let cfg = &self.config;
        match task {
            TaskKind::MultiChoiceQa | TaskKind::NumericQa | TaskKind::MathQa => {
                if !matches!(gt, GroundTruth::Choice(_) | GroundTruth::Number(_)) {
                    return Err(mismatch());
                }
                Ok(rule_qa_reward(Some(answer), gt, cfg.numeric_rel_tol))
            }
            TaskKind::RegressionQa => match (answer, gt) {
                (TaskAnswer::Number(p), GroundTruth::Number(g)) => mra_reward(*p, *g, &cfg.mra_thresholds),
                _ => Err(mismatch()),
            },
            TaskKind::OcrQa => match (answer, gt) {
                (TaskAnswer::Text(p), GroundTruth::Text(g)) => wer_reward(p, g),
                _ => Err(mismatch()),
            },
            TaskKind::OpenEndedQa | TaskKind::Caption => match (answer, gt) {
                (TaskAnswer::Text(p), GroundTruth::Reference { query, answer }) => {
                    let scorer = self.scorer.ok_or_else(|| ScoreError::Unavailable {
                        reason: "no scorer backend configured".into(),
                        attempts: 0,
                        retryable: false,
                    })?;
                    let resp = scorer.score(&ScoreRequest::new(query.as_str(), p.as_str(), answer.as_str()))?;
                    Ok(resp.score.clamp(0.0, 1.0))
                }
                _ => Err(mismatch()),
            },
            TaskKind::TemporalGrounding => match (answer, gt) {
                (TaskAnswer::Interval(p), GroundTruth::Interval(g)) => Ok(temporal_iou(p, g)),
                _ => Err(mismatch()),
            },
            TaskKind::SpatialGrounding => match (answer, gt) {
                (TaskAnswer::Box(p), GroundTruth::Box(g)) => Ok(spatial_iou(p, g)),
                _ => Err(mismatch()),
            },
            TaskKind::SpatioTemporalGrounding => match (answer, gt) {
                (
                    TaskAnswer::SpatioTemporal { interval, boxes },
                    GroundTruth::SpatioTemporal {
                        interval: gi,
                        boxes: gb,
                    },
                ) => st_grounding_reward(interval, boxes, gi, gb),
                _ => Err(mismatch()),
            },
            TaskKind::Tracking => match (answer, gt) {
                (TaskAnswer::BoxTrack(p), GroundTruth::BoxTrack(g)) => tracking_reward(p, g),
                _ => Err(mismatch()),
            },
            TaskKind::ImageSegmentation => match (answer, gt) {
                (TaskAnswer::SegPrompt(p), GroundTruth::Segmentation(g)) => Ok(image_seg_reward(p, g, &cfg.kernel)),
                _ => Err(mismatch()),
            },
            TaskKind::VideoSegmentation => match (answer, gt) {
                (TaskAnswer::SegPrompt(p), GroundTruth::Segmentation(g)) => Ok(video_seg_reward(p, g, &cfg.kernel)),
                _ => Err(mismatch()),
            },
        }
    }

    pub fn total_reward(&self, parsed: &ParsedResponse, gt: &GroundTruth, task: TaskKind) -> Result<RewardRecord, RewardError> {
        let r_acc = self.accuracy(parsed, gt, task)?;
        Ok(RewardRecord::new(task, r_acc, format_reward(parsed, self.config.format_weight)))
    }
}
