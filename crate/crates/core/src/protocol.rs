//! Response protocol: `<think>...</think><answer>...</answer>` parsing,
//! per-task answer schemas and the format reward.
//!
//! Perception tasks carry a JSON payload inside the answer block. The wire
//! shapes are fixed (field names and order) so that rendering a [`TaskAnswer`]
//! and parsing it back is exact:
//!
//! ```text
//! temporal_grounding          {"start":3.0,"end":7.5}
//! spatial_grounding           {"bbox":[x1,y1,x2,y2]}
//! spatio_temporal_grounding   {"start":..,"end":..,"boxes":[{"frame":0,"bbox":[..]}]}
//! tracking                    {"boxes":[{"frame":0,"bbox":[..]}]}
//! image_segmentation          {"bbox":[..],"pos_points":[[x,y],..],"neg_points":[[x,y],..]}
//! video_segmentation          {"bbox":[..],"pos_points":[..],"neg_points":[..],"keyframe":t}
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";

/// Number of positive and of negative prompt points in a segmentation answer.
pub const SEG_POINTS: usize = 3;

/// Task taxonomy. Every reward record and every EMA statistic is keyed by one
/// of these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MultiChoiceQa,
    NumericQa,
    RegressionQa,
    MathQa,
    OcrQa,
    OpenEndedQa,
    Caption,
    TemporalGrounding,
    SpatialGrounding,
    SpatioTemporalGrounding,
    Tracking,
    ImageSegmentation,
    VideoSegmentation,
}

impl TaskKind {
    pub const ALL: [TaskKind; 13] = [
        TaskKind::MultiChoiceQa,
        TaskKind::NumericQa,
        TaskKind::RegressionQa,
        TaskKind::MathQa,
        TaskKind::OcrQa,
        TaskKind::OpenEndedQa,
        TaskKind::Caption,
        TaskKind::TemporalGrounding,
        TaskKind::SpatialGrounding,
        TaskKind::SpatioTemporalGrounding,
        TaskKind::Tracking,
        TaskKind::ImageSegmentation,
        TaskKind::VideoSegmentation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::MultiChoiceQa => "multi_choice_qa",
            TaskKind::NumericQa => "numeric_qa",
            TaskKind::RegressionQa => "regression_qa",
            TaskKind::MathQa => "math_qa",
            TaskKind::OcrQa => "ocr_qa",
            TaskKind::OpenEndedQa => "open_ended_qa",
            TaskKind::Caption => "caption",
            TaskKind::TemporalGrounding => "temporal_grounding",
            TaskKind::SpatialGrounding => "spatial_grounding",
            TaskKind::SpatioTemporalGrounding => "spatio_temporal_grounding",
            TaskKind::Tracking => "tracking",
            TaskKind::ImageSegmentation => "image_segmentation",
            TaskKind::VideoSegmentation => "video_segmentation",
        }
    }

    /// Perception tasks answer with a JSON payload that must validate for
    /// the response to count as well formatted.
    pub fn is_perception(self) -> bool {
        matches!(
            self,
            TaskKind::TemporalGrounding
                | TaskKind::SpatialGrounding
                | TaskKind::SpatioTemporalGrounding
                | TaskKind::Tracking
                | TaskKind::ImageSegmentation
                | TaskKind::VideoSegmentation
        )
    }

    /// Upper bound of the accuracy reward for this task.
    pub fn max_accuracy(self) -> f64 {
        match self {
            TaskKind::SpatioTemporalGrounding => 2.0,
            TaskKind::ImageSegmentation => 3.0,
            TaskKind::VideoSegmentation => 4.0,
            _ => 1.0,
        }
    }

    /// Whether `answer` is the variant this task produces.
    pub fn accepts(self, answer: &TaskAnswer) -> bool {
        match (self, answer) {
            (TaskKind::MultiChoiceQa, TaskAnswer::Choice(_)) => true,
            (TaskKind::NumericQa | TaskKind::RegressionQa | TaskKind::MathQa, TaskAnswer::Number(_)) => true,
            (TaskKind::OcrQa | TaskKind::OpenEndedQa | TaskKind::Caption, TaskAnswer::Text(_)) => true,
            (TaskKind::TemporalGrounding, TaskAnswer::Interval(_)) => true,
            (TaskKind::SpatialGrounding, TaskAnswer::Box(_)) => true,
            (TaskKind::SpatioTemporalGrounding, TaskAnswer::SpatioTemporal { .. }) => true,
            (TaskKind::Tracking, TaskAnswer::BoxTrack(_)) => true,
            (TaskKind::ImageSegmentation, TaskAnswer::SegPrompt(s)) => s.keyframe.is_none(),
            (TaskKind::VideoSegmentation, TaskAnswer::SegPrompt(s)) => s.keyframe.is_some(),
            _ => false,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown task kind `{0}`")]
pub struct UnknownTask(pub String);

impl FromStr for TaskKind {
    type Err = UnknownTask;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| UnknownTask(s.to_string()))
    }
}

/// Time span in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn is_valid(&self) -> bool {
        self.start.is_finite() && self.end.is_finite() && self.start <= self.end
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

/// Axis-aligned box `(x1, y1, x2, y2)` in absolute pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }
}

/// Per-frame box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameBox {
    pub frame: u32,
    pub bbox: BBox,
}

/// Box sequence keyed by frame index. Frame indices are unique.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BoxTrack {
    pub frames: Vec<FrameBox>,
}

impl BoxTrack {
    pub fn new(frames: Vec<FrameBox>) -> Self {
        Self { frames }
    }

    pub fn get(&self, frame: u32) -> Option<&BBox> {
        self.frames.iter().find(|f| f.frame == frame).map(|f| &f.bbox)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    fn is_valid(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.frames
            .iter()
            .all(|f| f.bbox.is_valid() && seen.insert(f.frame))
    }
}

/// Promptable-segmenter input: a box, positive and negative points, and for
/// video the keyframe time in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct SegPrompt {
    pub bbox: BBox,
    pub pos: Vec<Point>,
    pub neg: Vec<Point>,
    pub keyframe: Option<f64>,
}

impl SegPrompt {
    fn is_valid(&self) -> bool {
        self.bbox.is_valid()
            && self.pos.len() == SEG_POINTS
            && self.neg.len() == SEG_POINTS
            && self
                .pos
                .iter()
                .chain(&self.neg)
                .all(|p| p.x.is_finite() && p.y.is_finite())
            && self.keyframe.is_none_or(f64::is_finite)
    }
}

/// Structured answer extracted from the `<answer>` block.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskAnswer {
    Choice(String),
    Number(f64),
    Text(String),
    Interval(Interval),
    Box(BBox),
    BoxTrack(BoxTrack),
    SpatioTemporal { interval: Interval, boxes: BoxTrack },
    SegPrompt(SegPrompt),
}

/// A rollout decomposed into reasoning text, answer payload and format
/// validity.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedResponse {
    pub think_text: String,
    pub answer_raw: String,
    pub answer: Option<TaskAnswer>,
    pub format_ok: bool,
}

impl ParsedResponse {
    fn malformed() -> Self {
        Self {
            think_text: String::new(),
            answer_raw: String::new(),
            answer: None,
            format_ok: false,
        }
    }
}

/// Splits `raw` into think and answer text. Both tag pairs must appear
/// exactly once, think first, with only whitespace around and between them.
fn split_tags(raw: &str) -> Option<(&str, &str)> {
    let s = raw.trim();
    for tag in [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE] {
        if s.matches(tag).count() != 1 {
            return None;
        }
    }
    if !s.starts_with(THINK_OPEN) || !s.ends_with(ANSWER_CLOSE) {
        return None;
    }
    let think_close = s.find(THINK_CLOSE)?;
    let answer_open = s.find(ANSWER_OPEN)?;
    let answer_close = s.len() - ANSWER_CLOSE.len();
    if think_close < THINK_OPEN.len() || answer_open < think_close + THINK_CLOSE.len() {
        return None;
    }
    let answer_start = answer_open + ANSWER_OPEN.len();
    if answer_start > answer_close {
        return None;
    }
    if !s[think_close + THINK_CLOSE.len()..answer_open].trim().is_empty() {
        return None;
    }
    Some((&s[THINK_OPEN.len()..think_close], &s[answer_start..answer_close]))
}

/// Parses raw model output for `task`. Never fails: malformed input yields
/// `format_ok == false`.
pub fn parse_response(raw: &str, task: TaskKind) -> ParsedResponse {
    let Some((think, answer)) = split_tags(raw) else {
        return ParsedResponse::malformed();
    };
    let answer_raw = answer.trim().to_string();
    let parsed = if answer_raw.is_empty() {
        None
    } else {
        parse_answer(&answer_raw, task)
    };
    let format_ok = !answer_raw.is_empty() && (!task.is_perception() || parsed.is_some());
    ParsedResponse {
        think_text: think.trim().to_string(),
        answer_raw,
        answer: parsed,
        format_ok,
    }
}

/// Format reward: `weight` for a well-formed response, otherwise 0.
pub fn format_reward(parsed: &ParsedResponse, weight: f64) -> f64 {
    if parsed.format_ok {
        weight
    } else {
        0.0
    }
}

/// Extracts the task's answer from the (trimmed) answer block.
pub fn parse_answer(text: &str, task: TaskKind) -> Option<TaskAnswer> {
    let text = text.trim();
    if text.is_empty() {
        return None;
    }
    match task {
        TaskKind::MultiChoiceQa => Some(TaskAnswer::Choice(normalize_choice(text))),
        TaskKind::NumericQa | TaskKind::RegressionQa | TaskKind::MathQa => {
            parse_number(text).map(TaskAnswer::Number)
        }
        TaskKind::OcrQa | TaskKind::OpenEndedQa | TaskKind::Caption => {
            Some(TaskAnswer::Text(text.to_string()))
        }
        _ => parse_payload(text, task).ok(),
    }
}

/// Canonical option label: an optional opening parenthesis, a single ASCII
/// letter and a `)`, `.` or `:` terminator collapse to the uppercase letter
/// (`"(b) cat"` -> `"B"`). Anything else is kept verbatim after trimming.
pub fn normalize_choice(text: &str) -> String {
    let t = text.trim();
    let body = t.strip_prefix('(').unwrap_or(t);
    let mut chars = body.chars();
    if let Some(c) = chars.next() {
        if c.is_ascii_alphabetic() {
            let rest = chars.as_str();
            let terminated = rest.is_empty()
                || rest.starts_with([')', '.', ':'])
                || (!t.starts_with('(') && rest.starts_with(char::is_whitespace));
            if terminated {
                return c.to_ascii_uppercase().to_string();
            }
        }
    }
    t.to_string()
}

/// Plain numerals (`-3`, `2.5`, `1e-3`) and simple fractions `a/b`.
pub fn parse_number(text: &str) -> Option<f64> {
    let t = text.trim();
    if let Some((num, den)) = t.split_once('/') {
        let n = parse_numeral(num.trim())?;
        let d = parse_numeral(den.trim())?;
        if d == 0.0 {
            return None;
        }
        let v = n / d;
        return v.is_finite().then_some(v);
    }
    parse_numeral(t)
}

fn parse_numeral(t: &str) -> Option<f64> {
    let plain = !t.is_empty()
        && t.chars()
            .all(|c| c.is_ascii_digit() || matches!(c, '+' | '-' | '.' | 'e' | 'E'))
        && t.chars().any(|c| c.is_ascii_digit());
    if !plain {
        return None;
    }
    t.parse::<f64>().ok().filter(|v| v.is_finite())
}

// --- JSON wire shapes ----------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemporalWire {
    start: f64,
    end: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpatialWire {
    bbox: [f64; 4],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameBoxWire {
    frame: u32,
    bbox: [f64; 4],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpatioTemporalWire {
    start: f64,
    end: f64,
    boxes: Vec<FrameBoxWire>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrackWire {
    boxes: Vec<FrameBoxWire>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageSegWire {
    bbox: [f64; 4],
    pos_points: Vec<[f64; 2]>,
    neg_points: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VideoSegWire {
    bbox: [f64; 4],
    pos_points: Vec<[f64; 2]>,
    neg_points: Vec<[f64; 2]>,
    keyframe: f64,
}

/// Why a perception payload was rejected.
#[derive(Debug, thiserror::Error)]
pub enum SchemaError {
    #[error("task `{0}` has no JSON answer schema")]
    NotPerception(TaskKind),
    #[error("payload does not match schema: {0}")]
    Json(#[from] serde_json::Error),
    #[error("payload violates invariant: {0}")]
    Invariant(&'static str),
}

fn track_from_wire(boxes: Vec<FrameBoxWire>) -> BoxTrack {
    BoxTrack::new(
        boxes
            .into_iter()
            .map(|b| FrameBox {
                frame: b.frame,
                bbox: BBox::from_array(b.bbox),
            })
            .collect(),
    )
}

fn track_to_wire(track: &BoxTrack) -> Vec<FrameBoxWire> {
    track
        .frames
        .iter()
        .map(|f| FrameBoxWire {
            frame: f.frame,
            bbox: f.bbox.to_array(),
        })
        .collect()
}

fn points(raw: Vec<[f64; 2]>) -> Vec<Point> {
    raw.into_iter().map(|[x, y]| Point::new(x, y)).collect()
}

fn points_to_wire(pts: &[Point]) -> Vec<[f64; 2]> {
    pts.iter().map(|p| [p.x, p.y]).collect()
}

/// Decodes and validates a perception payload. Shared by response parsing
/// and ground-truth loading.
pub fn parse_payload(text: &str, task: TaskKind) -> Result<TaskAnswer, SchemaError> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    payload_from_value(value, task)
}

pub fn payload_from_value(value: serde_json::Value, task: TaskKind) -> Result<TaskAnswer, SchemaError> {
    let answer = match task {
        TaskKind::TemporalGrounding => {
            let w: TemporalWire = serde_json::from_value(value)?;
            TaskAnswer::Interval(Interval::new(w.start, w.end))
        }
        TaskKind::SpatialGrounding => {
            let w: SpatialWire = serde_json::from_value(value)?;
            TaskAnswer::Box(BBox::from_array(w.bbox))
        }
        TaskKind::SpatioTemporalGrounding => {
            let w: SpatioTemporalWire = serde_json::from_value(value)?;
            TaskAnswer::SpatioTemporal {
                interval: Interval::new(w.start, w.end),
                boxes: track_from_wire(w.boxes),
            }
        }
        TaskKind::Tracking => {
            let w: TrackWire = serde_json::from_value(value)?;
            TaskAnswer::BoxTrack(track_from_wire(w.boxes))
        }
        TaskKind::ImageSegmentation => {
            let w: ImageSegWire = serde_json::from_value(value)?;
            TaskAnswer::SegPrompt(SegPrompt {
                bbox: BBox::from_array(w.bbox),
                pos: points(w.pos_points),
                neg: points(w.neg_points),
                keyframe: None,
            })
        }
        TaskKind::VideoSegmentation => {
            let w: VideoSegWire = serde_json::from_value(value)?;
            TaskAnswer::SegPrompt(SegPrompt {
                bbox: BBox::from_array(w.bbox),
                pos: points(w.pos_points),
                neg: points(w.neg_points),
                keyframe: Some(w.keyframe),
            })
        }
        other => return Err(SchemaError::NotPerception(other)),
    };
    validate(&answer)?;
    Ok(answer)
}

fn validate(answer: &TaskAnswer) -> Result<(), SchemaError> {
    let ok = match answer {
        TaskAnswer::Interval(i) => i.is_valid(),
        TaskAnswer::Box(b) => b.is_valid(),
        TaskAnswer::BoxTrack(t) => t.is_valid(),
        TaskAnswer::SpatioTemporal { interval, boxes } => interval.is_valid() && boxes.is_valid(),
        TaskAnswer::SegPrompt(s) => s.is_valid(),
        TaskAnswer::Number(v) => v.is_finite(),
        TaskAnswer::Choice(_) | TaskAnswer::Text(_) => true,
    };
    if ok {
        Ok(())
    } else {
        Err(SchemaError::Invariant(match answer {
            TaskAnswer::Interval(_) => "interval requires start <= end",
            TaskAnswer::Box(_) => "box requires x1 <= x2 and y1 <= y2",
            TaskAnswer::BoxTrack(_) | TaskAnswer::SpatioTemporal { .. } => {
                "boxes must be valid with unique frame indices"
            }
            TaskAnswer::SegPrompt(_) => "segmentation needs a valid box and exactly 3 positive and 3 negative points",
            _ => "non-finite number",
        }))
    }
}

/// Canonical payload text for an answer: the JSON wire shape for perception
/// answers, the bare value otherwise.
pub fn render_answer(answer: &TaskAnswer) -> String {
    let json = |v: Result<String, serde_json::Error>| v.expect("wire structs always serialize");
    match answer {
        TaskAnswer::Choice(s) | TaskAnswer::Text(s) => s.clone(),
        TaskAnswer::Number(v) => v.to_string(),
        TaskAnswer::Interval(i) => json(serde_json::to_string(&TemporalWire {
            start: i.start,
            end: i.end,
        })),
        TaskAnswer::Box(b) => json(serde_json::to_string(&SpatialWire { bbox: b.to_array() })),
        TaskAnswer::BoxTrack(t) => json(serde_json::to_string(&TrackWire {
            boxes: track_to_wire(t),
        })),
        TaskAnswer::SpatioTemporal { interval, boxes } => {
            json(serde_json::to_string(&SpatioTemporalWire {
                start: interval.start,
                end: interval.end,
                boxes: track_to_wire(boxes),
            }))
        }
        TaskAnswer::SegPrompt(s) => match s.keyframe {
            None => json(serde_json::to_string(&ImageSegWire {
                bbox: s.bbox.to_array(),
                pos_points: points_to_wire(&s.pos),
                neg_points: points_to_wire(&s.neg),
            })),
            Some(keyframe) => json(serde_json::to_string(&VideoSegWire {
                bbox: s.bbox.to_array(),
                pos_points: points_to_wire(&s.pos),
                neg_points: points_to_wire(&s.neg),
                keyframe,
            })),
        },
    }
}

/// Full response text in the expected protocol.
pub fn render_response(think: &str, answer: &TaskAnswer) -> String {
    format!("{THINK_OPEN}{think}{THINK_CLOSE}{ANSWER_OPEN}{}{ANSWER_CLOSE}", render_answer(answer))
}
