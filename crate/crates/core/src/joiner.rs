//! Appearance-based joining of fragments into full trajectories.
//!
//! Each iteration trains the identity classifier until its batch loss falls
//! below the loss gate, then runs one matching round. In a round every active
//! trajectory probes the frame `t + d_t` after its end `t`: detections there
//! that are unowned, are singles or among the first instances of a free
//! fragment, and lie within `D·√d_t` of the trajectory end are scored, and
//! the best one above the cutoff extends the trajectory. Choosing a
//! fragment's detection absorbs the whole fragment.
//!
//! Gating and scoring read a snapshot taken at the start of the round and may
//! run in parallel; commits are applied serially in ascending `(d_t, id)`
//! order and re-check ownership, so the outcome does not depend on the
//! number of workers.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};

use log::warn;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;

use crate::appearance::{AppearanceModel, Label, Patch, TrainBuffer};
use crate::detection::{parse_detection_cells, parse_frame, read_csv_rows, Detection, DetectionId, DetectionTable};
use crate::error::{Error, Result};
use crate::fragments::{FragmentSet, InitialSet};
use crate::image::FrameSource;
use crate::rng::StreamRng;

pub const TRAJECTORY_HEADER: &str = "trajectory_id,frame,x,y,class,angle,source";
pub const STATUS_HEADER: &str = "trajectory_id,status,first_frame,last_frame,num_entries";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JoinerConfig {
    /// Gate radius per unit `√d_t`, roughly the largest object dimension.
    pub gate_scale: f64,
    /// A candidate must score strictly above this for the identity.
    pub score_cutoff: f64,
    /// Fragment members at positions below this may start an absorption.
    pub fragment_head_window: usize,
    pub stall_limit: usize,
    /// Fraction of all frames a trajectory must span to be complete.
    pub completion_span: f64,
    pub loss_gate: f64,
    pub phase1_iterations: usize,
    pub phase2_iterations: usize,
    pub phase1_fraction: f64,
    /// Safety bound on optimizer steps per iteration.
    pub max_train_steps: usize,
    /// Patches kept per identity and for the background.
    pub buffer_size: usize,
    /// Candidate background positions sampled before picking `buffer_size`.
    pub background_pool: usize,
    /// Minimum distance of a background sample from every detection.
    pub background_clearance: f64,
}

impl Default for JoinerConfig {
    fn default() -> Self {
        JoinerConfig {
            gate_scale: 80.0,
            score_cutoff: 0.1,
            fragment_head_window: 10,
            stall_limit: 50,
            completion_span: 0.95,
            loss_gate: 0.01,
            phase1_iterations: 100,
            phase2_iterations: 900,
            phase1_fraction: 0.5,
            max_train_steps: 20_000,
            buffer_size: 250,
            background_pool: 10_000,
            background_clearance: 40.0,
        }
    }
}

impl JoinerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.gate_scale > 0.0
            && self.score_cutoff > 0.0
            && self.fragment_head_window > 0
            && self.stall_limit > 0
            && self.loss_gate > 0.0
            && self.max_train_steps > 0
            && self.buffer_size > 0
            && self.background_pool > 0;
        if !positive {
            return Err(Error::Config(format!("joiner parameters must be positive: {self:?}")));
        }
        if !(self.completion_span > 0.0 && self.completion_span <= 1.0)
            || !(self.phase1_fraction > 0.0 && self.phase1_fraction <= 1.0)
        {
            return Err(Error::Config("completion_span and phase1_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntrySource {
    /// Came from the fragment with this id.
    Fragment(usize),
    Single,
}

impl std::fmt::Display for EntrySource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EntrySource::Fragment(id) => write!(f, "fragment:{id}"),
            EntrySource::Single => f.write_str("single"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryEntry {
    pub id: DetectionId,
    pub detection: Detection,
    pub source: EntrySource,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrajectoryStatus {
    Active,
    Complete,
    Stalled,
}

impl TrajectoryStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TrajectoryStatus::Active => "active",
            TrajectoryStatus::Complete => "complete",
            TrajectoryStatus::Stalled => "stalled",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub id: u64,
    pub entries: Vec<TrajectoryEntry>,
    /// Frames between the end and the next probed frame (`d_t`).
    pub gap: usize,
    /// Consecutive rounds without an accepted extension.
    pub stall: usize,
    pub status: TrajectoryStatus,
}

impl Trajectory {
    pub fn end(&self) -> &TrajectoryEntry {
        self.entries.last().expect("trajectories are never empty")
    }

    pub fn end_frame(&self) -> usize {
        self.end().detection.frame()
    }

    pub fn first_frame(&self) -> usize {
        self.entries[0].detection.frame()
    }

    pub fn probe_frame(&self) -> usize {
        self.end_frame() + self.gap
    }

    pub fn span_fraction(&self, total_frames: usize) -> f64 {
        (self.end_frame() - self.first_frame() + 1) as f64 / total_frames.max(1) as f64
    }

    fn refresh_completion(&mut self, total_frames: usize, completion_span: f64) {
        if self.status == TrajectoryStatus::Active && self.span_fraction(total_frames) > completion_span {
            self.status = TrajectoryStatus::Complete;
        }
    }

    pub fn label(&self) -> Label {
        Label::Identity(self.id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FragmentState {
    Free,
    Absorbed(u64),
}

/// Who owns which detection, and which fragments have been absorbed.
#[derive(Clone, Debug, Default)]
pub struct AssignmentLedger {
    owner: HashMap<DetectionId, u64>,
    /// Indexed like `FragmentSet::fragments`.
    fragment_state: Vec<FragmentState>,
    /// Fragment index and position of every fragment member.
    membership: HashMap<DetectionId, (usize, usize)>,
    /// Members of absorbed fragments dropped for lying at or before the
    /// absorbing trajectory's end; they behave as singles afterwards.
    released: BTreeSet<DetectionId>,
}

impl AssignmentLedger {
    pub fn new(fragments: &FragmentSet) -> Self {
        let mut membership = HashMap::new();
        for (fi, frag) in fragments.fragments.iter().enumerate() {
            for (pos, &id) in frag.detections.iter().enumerate() {
                membership.insert(id, (fi, pos));
            }
        }
        AssignmentLedger {
            owner: HashMap::new(),
            fragment_state: vec![FragmentState::Free; fragments.fragments.len()],
            membership,
            released: BTreeSet::new(),
        }
    }

    pub fn owner(&self, id: DetectionId) -> Option<u64> {
        self.owner.get(&id).copied()
    }

    pub fn fragment_state(&self, fragment_index: usize) -> FragmentState {
        self.fragment_state[fragment_index]
    }

    /// Fragment index and position, unless the detection was released.
    pub fn fragment_of(&self, id: DetectionId) -> Option<(usize, usize)> {
        if self.released.contains(&id) {
            return None;
        }
        self.membership.get(&id).copied()
    }

    pub fn num_owned(&self) -> usize {
        self.owner.len()
    }

    pub fn released(&self) -> &BTreeSet<DetectionId> {
        &self.released
    }

    fn claim(&mut self, id: DetectionId, traj: u64) -> bool {
        match self.owner.entry(id) {
            std::collections::hash_map::Entry::Occupied(_) => false,
            std::collections::hash_map::Entry::Vacant(v) => {
                v.insert(traj);
                true
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CandidateKind {
    Single,
    /// Member of a free fragment; indices into `FragmentSet::fragments`.
    FragmentMember { fragment: usize, position: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Candidate {
    pub id: DetectionId,
    pub kind: CandidateKind,
}

/// Detections in `probe_frame` that may extend `traj`, in detection order.
pub fn candidate_gate(
    traj: &Trajectory,
    probe_frame: usize,
    table: &DetectionTable,
    ledger: &AssignmentLedger,
    cfg: &JoinerConfig,
) -> Vec<Candidate> {
    let gap = probe_frame.saturating_sub(traj.end_frame());
    if gap == 0 {
        return Vec::new();
    }
    let radius = cfg.gate_scale * (gap as f64).sqrt();
    let (px, py) = traj.end().detection.position();
    table
        .frame(probe_frame)
        .iter()
        .enumerate()
        .filter_map(|(index, det)| {
            let id = DetectionId { frame: probe_frame, index };
            if ledger.owner(id).is_some() || det.distance_to(px, py) > radius {
                return None;
            }
            let kind = match ledger.fragment_of(id) {
                None => CandidateKind::Single,
                Some((fragment, position)) => {
                    if ledger.fragment_state(fragment) != FragmentState::Free
                        || position >= cfg.fragment_head_window
                    {
                        return None;
                    }
                    CandidateKind::FragmentMember { fragment, position }
                }
            };
            Some(Candidate { id, kind })
        })
        .collect()
}

/// Index of the best-scoring candidate if its score is strictly above the
/// cutoff. Ties go to the smaller detection id.
pub fn select_extension(candidates: &[Candidate], scores: &[f64], cutoff: f64) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) if s > scores[b] || (s == scores[b] && candidates[i].id < candidates[b].id) => Some(i),
            keep => keep,
        };
    }
    best.filter(|&b| scores[b] > cutoff)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CommitOutcome {
    Committed { appended: usize },
    /// Ownership changed since gating; treated as no match.
    Rejected,
}

/// Shared state of a joining run.
pub struct JoinState<'a> {
    pub table: &'a DetectionTable,
    pub fragments: &'a FragmentSet,
    pub ledger: AssignmentLedger,
    pub trajectories: Vec<Trajectory>,
    pub buffer: TrainBuffer,
    /// Identities currently trained and matched.
    pub processing: BTreeSet<u64>,
    pub total_frames: usize,
    pub rejected_commits: usize,
}

impl<'a> JoinState<'a> {
    /// Creates one trajectory per initial fragment, in ascending fragment id
    /// order, and gives each ownership of its fragment.
    pub fn new(
        table: &'a DetectionTable,
        fragments: &'a FragmentSet,
        initial: &InitialSet,
        total_frames: usize,
        cfg: &JoinerConfig,
    ) -> Result<Self> {
        if initial.fragment_ids.is_empty() {
            return Err(Error::NoInitialSet("initial set is empty".into()));
        }
        let index_of: HashMap<usize, usize> =
            fragments.fragments.iter().enumerate().map(|(i, f)| (f.id, i)).collect();
        let mut ledger = AssignmentLedger::new(fragments);
        let mut trajectories = Vec::with_capacity(initial.fragment_ids.len());
        for (k, fid) in initial.fragment_ids.iter().enumerate() {
            let &fi = index_of
                .get(fid)
                .ok_or_else(|| Error::NoInitialSet(format!("fragment {fid} not in fragment set")))?;
            let id = k as u64;
            if ledger.fragment_state[fi] != FragmentState::Free {
                return Err(Error::NoInitialSet(format!("fragment {fid} listed twice")));
            }
            ledger.fragment_state[fi] = FragmentState::Absorbed(id);
            let entries = fragments.fragments[fi]
                .detections
                .iter()
                .map(|&did| {
                    ledger.claim(did, id);
                    TrajectoryEntry { id: did, detection: *table.detection(did), source: EntrySource::Fragment(*fid) }
                })
                .collect();
            let mut traj = Trajectory { id, entries, gap: 1, stall: 0, status: TrajectoryStatus::Active };
            traj.refresh_completion(total_frames, cfg.completion_span);
            trajectories.push(traj);
        }
        Ok(JoinState {
            table,
            fragments,
            ledger,
            trajectories,
            buffer: TrainBuffer::new(cfg.buffer_size)?,
            processing: BTreeSet::new(),
            total_frames,
            rejected_commits: 0,
        })
    }

    fn trajectory_index(&self, id: u64) -> usize {
        // ids are assigned densely from 0
        id as usize
    }

    pub fn trajectory(&self, id: u64) -> &Trajectory {
        &self.trajectories[self.trajectory_index(id)]
    }

    /// Fills the background label from `pool` random positions at least
    /// `background_clearance` away from every detection of their frame.
    pub fn sample_background(&mut self, source: &dyn FrameSource, cfg: &JoinerConfig, rng: &mut StreamRng) -> Result<()> {
        let frames: Vec<usize> = self.table.frame_indices().collect();
        if frames.is_empty() {
            return Err(Error::Empty("no frames to sample background from".into()));
        }
        let (w, h) = (source.width() as f64, source.height() as f64);
        let mut pool: Vec<(usize, f64, f64)> = Vec::with_capacity(cfg.background_pool);
        let max_attempts = cfg.background_pool.saturating_mul(50);
        let mut attempts = 0;
        while pool.len() < cfg.background_pool && attempts < max_attempts {
            attempts += 1;
            let frame = frames[rng.random_range(0..frames.len())];
            let x = rng.random_range(0.0..w);
            let y = rng.random_range(0.0..h);
            if self.table.frame(frame).iter().all(|d| d.distance_to(x, y) > cfg.background_clearance) {
                pool.push((frame, x, y));
            }
        }
        if pool.is_empty() {
            return Err(Error::Empty("no background position clear of detections".into()));
        }
        let take = cfg.buffer_size.min(pool.len());
        let mut chosen: Vec<(usize, f64, f64)> =
            sample_indices(rng, pool.len(), take).into_iter().map(|i| pool[i]).collect();
        chosen.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.total_cmp(&b.2)));
        let patches = chosen
            .into_iter()
            .map(|(f, x, y)| source.patch(f, (x, y)))
            .collect::<Result<Vec<Patch>>>()?;
        self.buffer.insert_label(Label::Background, patches)
    }

    /// Brings identities into training and matching. Their buffers are
    /// filled from the latter part of their current entries.
    pub fn activate(&mut self, ids: &[u64], model: &mut dyn AppearanceModel, source: &dyn FrameSource) -> Result<()> {
        for &id in ids {
            let traj = &self.trajectories[self.trajectory_index(id)];
            if traj.status != TrajectoryStatus::Active || self.processing.contains(&id) {
                continue;
            }
            let skip = traj.entries.len().saturating_sub(self.buffer.capacity());
            let patches = traj.entries[skip..]
                .iter()
                .map(|e| source.patch(e.detection.frame(), e.detection.position()))
                .collect::<Result<Vec<_>>>()?;
            self.buffer.insert_label(Label::Identity(id), patches)?;
            model.add_label(Label::Identity(id))?;
            self.processing.insert(id);
        }
        Ok(())
    }

    /// Applies one chosen extension. Ownership is re-checked here.
    pub fn commit_extension(
        &mut self,
        traj_id: u64,
        chosen: Candidate,
        source: &dyn FrameSource,
        cfg: &JoinerConfig,
    ) -> Result<CommitOutcome> {
        let ti = self.trajectory_index(traj_id);
        let end_frame = self.trajectories[ti].end_frame();
        if self.ledger.owner(chosen.id).is_some() || chosen.id.frame <= end_frame {
            self.rejected_commits += 1;
            return Ok(CommitOutcome::Rejected);
        }
        let (appended, dropped, fragment) = match chosen.kind {
            CandidateKind::Single => (vec![(chosen.id, EntrySource::Single)], Vec::new(), None),
            CandidateKind::FragmentMember { fragment, .. } => {
                if self.ledger.fragment_state(fragment) != FragmentState::Free {
                    self.rejected_commits += 1;
                    return Ok(CommitOutcome::Rejected);
                }
                let frag = &self.fragments.fragments[fragment];
                let (keep, drop): (Vec<DetectionId>, Vec<DetectionId>) =
                    frag.detections.iter().partition(|d| d.frame > end_frame);
                if keep.iter().any(|&d| self.ledger.owner(d).is_some()) {
                    self.rejected_commits += 1;
                    return Ok(CommitOutcome::Rejected);
                }
                let keep = keep.into_iter().map(|d| (d, EntrySource::Fragment(frag.id))).collect();
                (keep, drop, Some(fragment))
            }
        };

        let capacity = self.buffer.capacity();
        let skip = appended.len().saturating_sub(capacity);
        let patches = appended[skip..]
            .iter()
            .map(|(d, _)| {
                let det = self.table.detection(*d);
                source.patch(det.frame(), det.position())
            })
            .collect::<Result<Vec<_>>>()?;
        if self.processing.contains(&traj_id) {
            self.buffer.update(Label::Identity(traj_id), patches)?;
        }

        if let Some(fi) = fragment {
            self.ledger.fragment_state[fi] = FragmentState::Absorbed(traj_id);
            self.ledger.released.extend(dropped);
        }
        let count = appended.len();
        let traj = &mut self.trajectories[ti];
        for (d, src) in appended {
            let claimed = self.ledger.claim(d, traj_id);
            debug_assert!(claimed, "ownership checked above");
            traj.entries.push(TrajectoryEntry { id: d, detection: *self.table.detection(d), source: src });
        }
        traj.gap = 1;
        traj.stall = 0;
        traj.refresh_completion(self.total_frames, cfg.completion_span);
        Ok(CommitOutcome::Committed { appended: count })
    }

    fn propose(
        &self,
        traj: &Trajectory,
        model: &dyn AppearanceModel,
        source: &dyn FrameSource,
        cfg: &JoinerConfig,
    ) -> Result<Option<Candidate>> {
        let candidates = candidate_gate(traj, traj.probe_frame(), self.table, &self.ledger, cfg);
        if candidates.is_empty() {
            return Ok(None);
        }
        let Some(row) = model.labels().iter().position(|&l| l == traj.label()) else {
            return Ok(None);
        };
        let scores = candidates
            .iter()
            .map(|c| {
                let det = self.table.detection(c.id);
                Ok(model.score(&source.patch(det.frame(), det.position())?)[row])
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(select_extension(&candidates, &scores, cfg.score_cutoff).map(|i| candidates[i]))
    }

    /// One matching round over the processed, active trajectories.
    pub fn matching_round(
        &mut self,
        model: &mut dyn AppearanceModel,
        source: &dyn FrameSource,
        cfg: &JoinerConfig,
        pool: Option<&rayon::ThreadPool>,
    ) -> Result<RoundSummary> {
        let mut order: Vec<u64> = self
            .processing
            .iter()
            .copied()
            .filter(|&id| self.trajectory(id).status == TrajectoryStatus::Active)
            .collect();
        order.sort_by_key(|&id| (self.trajectory(id).gap, id));

        let proposals: Vec<Option<Candidate>> = {
            let frozen: &dyn AppearanceModel = &*model;
            let this = &*self;
            let work = |id: &u64| this.propose(this.trajectory(*id), frozen, source, cfg);
            match pool {
                Some(p) => p.install(|| order.par_iter().map(work).collect::<Result<Vec<_>>>())?,
                None => order.iter().map(work).collect::<Result<Vec<_>>>()?,
            }
        };

        let mut summary = RoundSummary::default();
        for (&id, proposal) in order.iter().zip(proposals) {
            let committed = match proposal {
                Some(c) => matches!(self.commit_extension(id, c, source, cfg)?, CommitOutcome::Committed { .. }),
                None => false,
            };
            let ti = self.trajectory_index(id);
            let traj = &mut self.trajectories[ti];
            if committed {
                summary.extensions += 1;
            } else {
                traj.gap += 1;
                traj.stall += 1;
                if traj.stall >= cfg.stall_limit {
                    traj.status = TrajectoryStatus::Stalled;
                }
            }
            match traj.status {
                TrajectoryStatus::Complete => summary.completions += 1,
                TrajectoryStatus::Stalled => summary.stalls += 1,
                TrajectoryStatus::Active => {}
            }
            if traj.status != TrajectoryStatus::Active {
                self.processing.remove(&id);
                self.buffer.remove_label(Label::Identity(id))?;
                model.remove_label(Label::Identity(id))?;
            }
        }
        Ok(summary)
    }

    /// Trains until the batch loss drops below the gate or the step bound.
    pub fn train(&mut self, model: &mut dyn AppearanceModel, cfg: &JoinerConfig, rng: &mut StreamRng) -> Result<(usize, f64)> {
        let mut steps = 0;
        let mut loss = f64::INFINITY;
        while steps < cfg.max_train_steps {
            loss = model.train_step(&self.buffer, rng)?;
            steps += 1;
            if loss < cfg.loss_gate {
                break;
            }
        }
        Ok((steps, loss))
    }

    /// Detection owned by no trajectory and in no free fragment.
    pub fn unowned_singles(&self) -> Vec<DetectionId> {
        let mut out: Vec<DetectionId> = self
            .fragments
            .residuals
            .iter()
            .chain(self.ledger.released.iter())
            .copied()
            .filter(|&d| self.ledger.owner(d).is_none())
            .collect();
        out.sort();
        out
    }

    pub fn free_fragments(&self) -> Vec<usize> {
        self.fragments
            .fragments
            .iter()
            .enumerate()
            .filter(|(i, _)| self.ledger.fragment_state(*i) == FragmentState::Free)
            .map(|(_, f)| f.id)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RoundSummary {
    pub extensions: usize,
    pub completions: usize,
    pub stalls: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub phase: u8,
    pub train_steps: usize,
    pub final_loss: f64,
    pub round: RoundSummary,
}

impl IterationLog {
    pub fn line(&self) -> String {
        format!(
            "iteration={} phase={} train_steps={} loss={:.6} extensions={} completions={} stalls={}",
            self.iteration,
            self.phase,
            self.train_steps,
            self.final_loss,
            self.round.extensions,
            self.round.completions,
            self.round.stalls
        )
    }
}

#[derive(Clone, Debug)]
pub struct JoinOutcome {
    pub trajectories: Vec<Trajectory>,
    /// Ids of fragments never absorbed.
    pub free_fragments: Vec<usize>,
    pub unowned_singles: Vec<DetectionId>,
    pub rejected_commits: usize,
    pub log: Vec<IterationLog>,
    /// Identities admitted in the first phase.
    pub phase1_ids: Vec<u64>,
}

impl JoinOutcome {
    pub fn progress_log(&self) -> String {
        self.log.iter().map(|l| l.line() + "\n").collect()
    }
}

/// Runs both phases of the train/match loop.
#[allow(clippy::too_many_arguments)]
pub fn run_joining(
    table: &DetectionTable,
    fragments: &FragmentSet,
    initial: &InitialSet,
    source: &dyn FrameSource,
    model: &mut dyn AppearanceModel,
    cfg: &JoinerConfig,
    rng: &mut StreamRng,
    pool: Option<&rayon::ThreadPool>,
) -> Result<JoinOutcome> {
    cfg.validate()?;
    let total_frames = source.num_frames().unwrap_or(0).max(table.total_frames());
    let mut state = JoinState::new(table, fragments, initial, total_frames, cfg)?;
    state.sample_background(source, cfg, rng)?;
    model.add_label(Label::Background)?;

    let mut pending: Vec<&Trajectory> =
        state.trajectories.iter().filter(|t| t.status == TrajectoryStatus::Active).collect();
    pending.sort_by(|a, b| b.entries.len().cmp(&a.entries.len()).then(a.id.cmp(&b.id)));
    let first = (cfg.phase1_fraction * pending.len() as f64).ceil() as usize;
    let phase1_ids: Vec<u64> = pending.iter().take(first).map(|t| t.id).collect();
    let all_ids: Vec<u64> = pending.iter().map(|t| t.id).collect();

    let mut log = Vec::new();
    let mut iteration = 0;
    for (phase, ids, iterations) in [(1u8, &phase1_ids, cfg.phase1_iterations), (2, &all_ids, cfg.phase2_iterations)] {
        state.activate(ids, model, source)?;
        for _ in 0..iterations {
            if state.processing.is_empty() {
                break;
            }
            let (train_steps, final_loss) = state.train(model, cfg, rng)?;
            if final_loss >= cfg.loss_gate {
                warn!(
                    "iteration {iteration}: loss {final_loss:.5} still above {} after {train_steps} steps",
                    cfg.loss_gate
                );
            }
            let round = state.matching_round(model, source, cfg, pool)?;
            log.push(IterationLog { iteration, phase, train_steps, final_loss, round });
            iteration += 1;
        }
    }

    Ok(JoinOutcome {
        free_fragments: state.free_fragments(),
        unowned_singles: state.unowned_singles(),
        rejected_commits: state.rejected_commits,
        trajectories: state.trajectories,
        log,
        phase1_ids,
    })
}

/// Checks that every detection of `table` appears exactly once across
/// trajectory entries, free fragments and unowned singles.
pub fn verify_conservation(table: &DetectionTable, fragments: &FragmentSet, outcome: &JoinOutcome) -> Result<(), String> {
    let mut seen: HashMap<DetectionId, usize> = HashMap::with_capacity(table.len());
    let by_id: HashMap<usize, &crate::fragments::TrackFragment> =
        fragments.fragments.iter().map(|f| (f.id, f)).collect();
    let entry_ids = outcome.trajectories.iter().flat_map(|t| t.entries.iter().map(|e| e.id));
    let free_ids = outcome.free_fragments.iter().flat_map(|fid| by_id[fid].detections.iter().copied());
    for id in entry_ids.chain(free_ids).chain(outcome.unowned_singles.iter().copied()) {
        *seen.entry(id).or_default() += 1;
    }
    for id in table.ids() {
        match seen.get(&id).copied().unwrap_or(0) {
            1 => {}
            n => return Err(format!("detection {id} appears {n} times")),
        }
    }
    if seen.len() != table.len() {
        return Err(format!("{} ids accounted for, table has {}", seen.len(), table.len()));
    }
    for t in &outcome.trajectories {
        if t.entries.windows(2).any(|w| w[0].detection.frame() >= w[1].detection.frame()) {
            return Err(format!("trajectory {} frames not strictly increasing", t.id));
        }
    }
    Ok(())
}

pub fn write_trajectories<W: Write>(trajectories: &[Trajectory], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{TRAJECTORY_HEADER}")?;
    for t in trajectories {
        for e in &t.entries {
            writeln!(out, "{},{},{},{}", t.id, e.detection.frame(), e.detection.value_cells(), e.source)?;
        }
    }
    Ok(())
}

pub fn write_status<W: Write>(trajectories: &[Trajectory], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{STATUS_HEADER}")?;
    for t in trajectories {
        writeln!(
            out,
            "{},{},{},{},{}",
            t.id,
            t.status.as_str(),
            t.first_frame(),
            t.end_frame(),
            t.entries.len()
        )?;
    }
    Ok(())
}

/// A trajectory as read back from the trajectory CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryTrack {
    pub id: u64,
    pub detections: Vec<Detection>,
    pub sources: Vec<EntrySource>,
}

impl From<&Trajectory> for TrajectoryTrack {
    fn from(t: &Trajectory) -> Self {
        TrajectoryTrack {
            id: t.id,
            detections: t.entries.iter().map(|e| e.detection).collect(),
            sources: t.entries.iter().map(|e| e.source).collect(),
        }
    }
}

pub fn read_trajectories<R: Read>(reader: R) -> Result<Vec<TrajectoryTrack>> {
    let mut tracks: Vec<TrajectoryTrack> = Vec::new();
    read_csv_rows(reader, TRAJECTORY_HEADER, |cells, line| {
        let err = |m: String| Error::Parse { line, message: m };
        let id: u64 = cells[0].parse().map_err(|_| err(format!("non-numeric trajectory_id '{}'", cells[0])))?;
        let frame = parse_frame(cells[1], line)?;
        let det = parse_detection_cells(frame, &cells[2..6], line)?;
        let source = match cells[6] {
            "single" => EntrySource::Single,
            s => s
                .strip_prefix("fragment:")
                .and_then(|v| v.parse().ok())
                .map(EntrySource::Fragment)
                .ok_or_else(|| err(format!("bad source '{s}'")))?,
        };
        match tracks.last_mut() {
            Some(t) if t.id == id => {
                t.detections.push(det);
                t.sources.push(source);
            }
            _ => tracks.push(TrajectoryTrack { id, detections: vec![det], sources: vec![source] }),
        }
        Ok(())
    })?;
    Ok(tracks)
}
