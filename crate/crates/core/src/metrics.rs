//! Scoring reconstructed trajectories against ground truth: mostly tracked /
//! mostly lost per time window, identity swaps and failure causes.
//!
//! Each trajectory entry is matched to the nearest visible agent within
//! `match_radius`. The dominant agent is the one matched most often. A swap
//! opens when an entry matches another agent and is returned if the dominant
//! agent is matched again later; time spent on another agent before the
//! dominant one is first reached counts as an unreturned swap. Tracked
//! frames are the frames of entries on the dominant agent or inside returned
//! swaps, plus the frames between two consecutive such entries.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use serde::Serialize;

use crate::detection::Detection;
use crate::error::{Error, Result};
use crate::joiner::TrajectoryTrack;
use crate::synth::{FalsePositive, GroundTruth};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WindowSpec {
    pub name: String,
    pub span_seconds: f64,
    /// Tracked at least this long: mostly tracked.
    pub mt_min_seconds: f64,
    /// Tracked less than this: mostly lost.
    pub ml_max_seconds: f64,
}

impl WindowSpec {
    pub fn new(name: &str, span_seconds: f64, mt_min_seconds: f64, ml_max_seconds: f64) -> Self {
        WindowSpec { name: name.to_string(), span_seconds, mt_min_seconds, ml_max_seconds }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub match_radius: f64,
    pub windows: Vec<WindowSpec>,
    pub generic_mt_fraction: f64,
    pub generic_ml_fraction: f64,
    /// Frames after the tracked end in which an invisible dominant agent
    /// marks the failure as an occlusion.
    pub occlusion_lookahead: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            match_radius: 20.0,
            windows: vec![WindowSpec::new("2", 120.0, 100.0, 10.0), WindowSpec::new("5", 300.0, 240.0, 30.0)],
            generic_mt_fraction: 0.8,
            generic_ml_fraction: 0.2,
            occlusion_lookahead: 10,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.match_radius > 0.0) || self.windows.is_empty() {
            return Err(Error::Config("match_radius must be positive and at least one window given".into()));
        }
        for w in &self.windows {
            if !(w.mt_min_seconds <= w.span_seconds && w.ml_max_seconds < w.mt_min_seconds && w.ml_max_seconds >= 0.0) {
                return Err(Error::Config(format!("window {} needs ml_max < mt_min <= span", w.name)));
            }
        }
        if !(self.generic_ml_fraction < self.generic_mt_fraction && self.generic_mt_fraction <= 1.0) {
            return Err(Error::Config("generic fractions need ml < mt <= 1".into()));
        }
        Ok(())
    }

    /// Window used for the failure-cause breakdown: the longest one.
    pub fn long_window(&self) -> &WindowSpec {
        self.windows
            .iter()
            .max_by(|a, b| a.span_seconds.total_cmp(&b.span_seconds))
            .expect("validated config has windows")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    MostlyTracked,
    Mid,
    MostlyLost,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureCause {
    DetectionError,
    IdSwap,
    Occlusion,
    Lost,
}

impl FailureCause {
    pub const ALL: [FailureCause; 4] =
        [FailureCause::DetectionError, FailureCause::IdSwap, FailureCause::Occlusion, FailureCause::Lost];

    pub fn as_str(self) -> &'static str {
        match self {
            FailureCause::DetectionError => "detection_error",
            FailureCause::IdSwap => "id_swap",
            FailureCause::Occlusion => "occlusion",
            FailureCause::Lost => "lost",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SwapEvent {
    pub frame: usize,
    pub from_agent: u64,
    pub to_agent: u64,
    pub returned: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryEval {
    pub trajectory_id: u64,
    /// Frame and matched agent of every entry.
    pub matches: Vec<(usize, Option<u64>)>,
    pub dominant_agent: Option<u64>,
    pub swaps: Vec<SwapEvent>,
    /// Per entry: whether it counts as tracked.
    #[serde(skip)]
    pub tracked_entries: Vec<bool>,
    /// Sorted, disjoint inclusive frame ranges counted as tracked.
    pub tracked_ranges: Vec<(usize, usize)>,
    pub tracked_seconds: BTreeMap<String, f64>,
    pub categories: BTreeMap<String, Category>,
    pub generic_fraction: f64,
    pub generic_category: Category,
    pub failure_cause: Option<FailureCause>,
}

impl TrajectoryEval {
    pub fn tracked_frames_before(&self, end: usize) -> usize {
        self.tracked_ranges.iter().map(|&(a, b)| (b + 1).min(end).saturating_sub(a)).sum()
    }

    pub fn last_tracked_entry(&self) -> Option<usize> {
        self.tracked_entries.iter().rposition(|&t| t)
    }
}

fn nearest_agent(truth: &GroundTruth, det: &Detection, radius: f64) -> Option<u64> {
    truth
        .frame(det.frame())
        .iter()
        .zip(&truth.agent_ids)
        .filter(|(p, _)| p.visible)
        .map(|(p, &id)| (det.distance_to(p.x, p.y), id))
        .filter(|&(d, _)| d <= radius)
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, id)| id)
}

fn categorize(value: f64, mt_min: f64, ml_max: f64) -> Category {
    if value >= mt_min {
        Category::MostlyTracked
    } else if value < ml_max {
        Category::MostlyLost
    } else {
        Category::Mid
    }
}

/// Matching part of the evaluation: dominant agent, swaps, tracked frames
/// and per-window categories. The failure cause is filled in by
/// [`evaluate`].
pub fn associate_to_truth(track: &TrajectoryTrack, truth: &GroundTruth, cfg: &EvalConfig) -> Result<TrajectoryEval> {
    let frames = truth.num_frames();
    let mut matches = Vec::with_capacity(track.detections.len());
    for det in &track.detections {
        if det.frame() >= frames {
            return Err(Error::FrameOutsideTruth { frame: det.frame(), frames });
        }
        matches.push((det.frame(), nearest_agent(truth, det, cfg.match_radius)));
    }

    // plurality, ties to the agent matched first
    let mut counts: Vec<(u64, usize, usize)> = Vec::new();
    for (pos, &(_, m)) in matches.iter().enumerate() {
        if let Some(id) = m {
            match counts.iter_mut().find(|c| c.0 == id) {
                Some(c) => c.1 += 1,
                None => counts.push((id, 1, pos)),
            }
        }
    }
    let dominant = counts.iter().max_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2))).map(|c| c.0);

    let mut swaps: Vec<SwapEvent> = Vec::new();
    let mut tracked_entries = vec![false; matches.len()];
    if let Some(dom) = dominant {
        let mut open: Option<(usize, usize)> = None; // (swap index, entry position)
        // agent followed before the dominant one is first reached
        let mut lead_in: Option<u64> = None;
        let mut reached = false;
        for (pos, &(frame, m)) in matches.iter().enumerate() {
            match m {
                Some(id) if id != dom && !reached => {
                    lead_in.get_or_insert(id);
                }
                Some(id) if id == dom => {
                    if !reached {
                        reached = true;
                        if let Some(from) = lead_in {
                            swaps.push(SwapEvent { frame, from_agent: from, to_agent: dom, returned: false });
                        }
                    }
                    if let Some((si, start)) = open.take() {
                        swaps[si].returned = true;
                        tracked_entries[start..pos].iter_mut().for_each(|t| *t = true);
                    }
                    tracked_entries[pos] = true;
                }
                Some(id) if open.is_none() => {
                    swaps.push(SwapEvent { frame, from_agent: dom, to_agent: id, returned: false });
                    open = Some((swaps.len() - 1, pos));
                }
                _ => {}
            }
        }
    }

    // consecutive tracked entries cover the frames between them, unless an
    // entry on another agent lies in between
    let mut ranges: Vec<(usize, usize)> = Vec::new();
    let mut prev_tracked: Option<usize> = None;
    for (pos, &(frame, m)) in matches.iter().enumerate() {
        if tracked_entries[pos] {
            match (prev_tracked, ranges.last_mut()) {
                (Some(_), Some(last)) => last.1 = frame,
                _ => ranges.push((frame, frame)),
            }
            prev_tracked = Some(pos);
        } else if m.is_some() {
            prev_tracked = None;
        }
    }

    let fps = truth.fps;
    let mut tracked_seconds = BTreeMap::new();
    let mut categories = BTreeMap::new();
    let mut eval = TrajectoryEval {
        trajectory_id: track.id,
        matches,
        dominant_agent: dominant,
        swaps,
        tracked_entries,
        tracked_ranges: ranges,
        tracked_seconds: BTreeMap::new(),
        categories: BTreeMap::new(),
        generic_fraction: 0.0,
        generic_category: Category::MostlyLost,
        failure_cause: None,
    };
    for w in &cfg.windows {
        let window_frames = ((w.span_seconds * fps).round() as usize).min(frames);
        let secs = eval.tracked_frames_before(window_frames) as f64 / fps;
        tracked_seconds.insert(w.name.clone(), secs);
        categories.insert(w.name.clone(), categorize(secs, w.mt_min_seconds, w.ml_max_seconds));
    }
    eval.generic_fraction = eval.tracked_frames_before(frames) as f64 / frames as f64;
    eval.generic_category = categorize(eval.generic_fraction, cfg.generic_mt_fraction, cfg.generic_ml_fraction);
    eval.tracked_seconds = tracked_seconds;
    eval.categories = categories;
    Ok(eval)
}

fn fp_key(d: &Detection) -> (usize, i64, i64) {
    (d.frame(), (d.x() * 1e6).round() as i64, (d.y() * 1e6).round() as i64)
}

/// Cause of a trajectory's tracking ending early, checked in order: the
/// next entry is a known false positive, an unreturned swap, the dominant
/// agent becomes invisible shortly after, otherwise lost.
fn failure_cause(
    eval: &TrajectoryEval,
    track: &TrajectoryTrack,
    truth: &GroundTruth,
    false_positives: &HashSet<(usize, i64, i64)>,
    cfg: &EvalConfig,
) -> FailureCause {
    let last = eval.last_tracked_entry();
    let next = last.map_or(0, |p| p + 1);
    if track.detections.get(next).is_some_and(|d| false_positives.contains(&fp_key(d))) {
        return FailureCause::DetectionError;
    }
    if eval.swaps.iter().any(|s| !s.returned) {
        return FailureCause::IdSwap;
    }
    if let (Some(dom), Some(&(_, end))) = (eval.dominant_agent, eval.tracked_ranges.last()) {
        if let Some(col) = truth.agent_ids.iter().position(|&a| a == dom) {
            let stop = (end + cfg.occlusion_lookahead).min(truth.num_frames() - 1);
            if (end + 1..=stop).any(|f| !truth.pose(f, col).visible) {
                return FailureCause::Occlusion;
            }
        }
    }
    FailureCause::Lost
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// `mt<name>` and `ml<name>` per window, plus generic and swap figures.
    pub summary: BTreeMap<String, f64>,
    pub causes: BTreeMap<String, f64>,
    pub trajectories: Vec<TrajectoryEval>,
}

impl EvalReport {
    pub fn get(&self, key: &str) -> f64 {
        self.summary[key]
    }

    pub fn to_json(&self) -> String {
        let mut root = serde_json::Map::new();
        for (k, v) in &self.summary {
            root.insert(k.clone(), serde_json::json!(v));
        }
        root.insert("causes".into(), serde_json::json!(self.causes));
        root.insert(
            "cause_rules".into(),
            serde_json::json!("automated: next entry is a tagged false positive > unreturned swap > dominant agent invisible right after tracked end > lost"),
        );
        root.insert("trajectories".into(), serde_json::to_value(&self.trajectories).expect("serializable"));
        serde_json::to_string_pretty(&serde_json::Value::Object(root)).expect("serializable") + "\n"
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "metric,value")?;
        for (k, v) in &self.summary {
            writeln!(out, "{k},{v}")?;
        }
        for (k, v) in &self.causes {
            writeln!(out, "cause_{k},{v}")?;
        }
        Ok(())
    }
}

/// MT/ML share of `evals` for one window: (mostly tracked, mostly lost).
pub fn mt_ml_summary(evals: &[TrajectoryEval], window: &str) -> Result<(f64, f64)> {
    if evals.is_empty() {
        return Err(Error::Empty("no trajectories to evaluate".into()));
    }
    let n = evals.len() as f64;
    let count = |c: Category| evals.iter().filter(|e| e.categories.get(window) == Some(&c)).count() as f64 / n;
    Ok((count(Category::MostlyTracked), count(Category::MostlyLost)))
}

/// Share of all trajectories per failure cause, assigned to the trajectories
/// that are not mostly tracked in the long window.
pub fn error_breakdown(
    evals: &mut [TrajectoryEval],
    tracks: &[TrajectoryTrack],
    truth: &GroundTruth,
    false_positives: &[FalsePositive],
    cfg: &EvalConfig,
) -> BTreeMap<String, f64> {
    let long = cfg.long_window().name.clone();
    let fps: HashSet<(usize, i64, i64)> = false_positives.iter().map(|f| fp_key(&f.detection)).collect();
    for (eval, track) in evals.iter_mut().zip(tracks) {
        eval.failure_cause = (eval.categories[&long] != Category::MostlyTracked)
            .then(|| failure_cause(eval, track, truth, &fps, cfg));
    }
    let n = evals.len().max(1) as f64;
    FailureCause::ALL
        .iter()
        .map(|&c| (c.as_str().to_string(), evals.iter().filter(|e| e.failure_cause == Some(c)).count() as f64 / n))
        .collect()
}

pub fn evaluate(
    tracks: &[TrajectoryTrack],
    truth: &GroundTruth,
    false_positives: &[FalsePositive],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    if tracks.is_empty() {
        return Err(Error::Empty("no trajectories to evaluate".into()));
    }
    let mut evals = tracks.iter().map(|t| associate_to_truth(t, truth, cfg)).collect::<Result<Vec<_>>>()?;
    let mut summary = BTreeMap::new();
    for w in &cfg.windows {
        let (mt, ml) = mt_ml_summary(&evals, &w.name)?;
        summary.insert(format!("mt{}", w.name), mt);
        summary.insert(format!("ml{}", w.name), ml);
    }
    let n = evals.len() as f64;
    let generic = |c: Category| evals.iter().filter(|e| e.generic_category == c).count() as f64 / n;
    summary.insert("mt_generic".into(), generic(Category::MostlyTracked));
    summary.insert("ml_generic".into(), generic(Category::MostlyLost));
    let swaps: usize = evals.iter().map(|e| e.swaps.len()).sum();
    let unreturned: usize = evals.iter().map(|e| e.swaps.iter().filter(|s| !s.returned).count()).sum();
    summary.insert("swap_count".into(), swaps as f64);
    summary.insert("unreturned_swap_count".into(), unreturned as f64);
    summary.insert("num_trajectories".into(), n);
    let causes = error_breakdown(&mut evals, tracks, truth, false_positives, cfg);
    Ok(EvalReport { summary, causes, trajectories: evals })
}
