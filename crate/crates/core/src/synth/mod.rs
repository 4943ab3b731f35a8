//! Synthetic 2D hive: agent motion, rendered frames with per-agent textures,
//! and detection tables corrupted with detector-like noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::detection::{wrap_angle, ObjectClass};
use crate::error::{Error, Result};
use crate::rng::{indexed_substream, StreamRng};

mod bundle;
mod noise;
mod render;

pub use bundle::{
    load_scenario_bundle, read_manifest, read_truth, write_scenario_bundle, write_truth, BundleManifest, ScenarioBundle,
    TRUTH_HEADER,
};
pub use noise::{
    corrupt_detections, read_false_positives, write_false_positives, CorruptedDetections, FalsePositive, NoiseConfig,
    FALSE_POSITIVE_HEADER,
};
pub use render::{AgentTexture, Renderer, SyntheticFrames};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AgentMode {
    Stationary,
    Walker,
}

impl AgentMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentMode::Stationary => "stationary",
            AgentMode::Walker => "walker",
        }
    }
}

/// Half-open frame range `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct FrameInterval {
    pub start: usize,
    pub end: usize,
}

impl FrameInterval {
    pub fn new(start: usize, end: usize) -> Self {
        FrameInterval { start, end }
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start..self.end).contains(&frame)
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    fn overlaps(&self, other: &FrameInterval) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentSpec {
    pub id: u64,
    pub mode: AgentMode,
    pub texture_seed: u64,
    /// Frames with only the abdomen visible (class Abdomen, angle 0).
    pub cell_schedule: Vec<FrameInterval>,
    /// Frames in which the agent produces no detection.
    pub occlusion_schedule: Vec<FrameInterval>,
}

impl AgentSpec {
    pub fn in_cell(&self, frame: usize) -> bool {
        self.cell_schedule.iter().any(|i| i.contains(frame))
    }

    pub fn occluded(&self, frame: usize) -> bool {
        self.occlusion_schedule.iter().any(|i| i.contains(frame))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiveScenario {
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    pub fps: f64,
    pub agents: Vec<AgentSpec>,
    /// Walker step length in pixels per frame.
    pub walker_speed: f64,
    /// Carry-over of the turn rate from one frame to the next.
    pub heading_persistence: f64,
    /// Standard deviation of the per-frame turn-rate innovation, radians.
    pub turn_sigma: f64,
    /// Positional jitter of stationary agents around their anchor.
    pub jitter_sigma: f64,
    /// Agents are kept within this distance of the image border.
    pub margin: f64,
    /// Moves that bring two agents' centers closer than this are refused;
    /// 0 lets agents pass through each other.
    pub min_separation: f64,
    /// 0 gives every agent its own texture, 1 makes all textures identical.
    pub texture_blend: f64,
    pub seed: u64,
}

impl HiveScenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_frames == 0 {
            return bad("num_frames must be at least 1".into());
        }
        if !(self.margin >= 1.0) || self.width as f64 <= 2.0 * self.margin || self.height as f64 <= 2.0 * self.margin {
            return bad(format!("margin {} does not fit a {}x{} frame", self.margin, self.width, self.height));
        }
        if !(0.0..=1.0).contains(&self.heading_persistence) || !(0.0..=1.0).contains(&self.texture_blend) {
            return bad("heading_persistence and texture_blend must lie in [0, 1]".into());
        }
        if !(self.walker_speed >= 0.0
            && self.turn_sigma >= 0.0
            && self.jitter_sigma >= 0.0
            && self.min_separation >= 0.0
            && self.fps > 0.0)
        {
            return bad("speeds, sigmas and fps must be non-negative".into());
        }
        let mut ids: Vec<u64> = self.agents.iter().map(|a| a.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("agent ids must be unique".into());
        }
        for a in &self.agents {
            let mut all: Vec<FrameInterval> = a.cell_schedule.iter().chain(&a.occlusion_schedule).copied().collect();
            all.sort();
            if all.iter().any(|i| i.is_empty() || i.end > self.num_frames) {
                return bad(format!("agent {} has a schedule outside 0..{}", a.id, self.num_frames));
            }
            if all.windows(2).any(|w| w[0].overlaps(&w[1])) {
                return bad(format!("agent {} has overlapping schedules", a.id));
            }
        }
        Ok(())
    }
}

/// Knobs from which a [`HiveScenario`] is drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    pub fps: f64,
    pub num_agents: usize,
    pub stationary_fraction: f64,
    pub walker_speed: f64,
    pub heading_persistence: f64,
    pub turn_sigma: f64,
    pub jitter_sigma: f64,
    pub margin: f64,
    pub min_separation: f64,
    pub texture_blend: f64,
    /// Share of agents given detection dropouts.
    pub occluded_fraction: f64,
    pub occlusions_per_agent: usize,
    pub occlusion_min: usize,
    pub occlusion_max: usize,
    /// Share of agents that spend time in comb cells.
    pub cell_fraction: f64,
    pub cell_visits_per_agent: usize,
    pub cell_min: usize,
    pub cell_max: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            width: 512,
            height: 512,
            num_frames: 1000,
            fps: 10.0,
            num_agents: 20,
            stationary_fraction: 0.3,
            walker_speed: 3.0,
            heading_persistence: 0.8,
            turn_sigma: 0.05,
            jitter_sigma: 0.5,
            margin: 40.0,
            min_separation: 40.0,
            texture_blend: 0.0,
            occluded_fraction: 0.0,
            occlusions_per_agent: 2,
            occlusion_min: 5,
            occlusion_max: 40,
            cell_fraction: 0.0,
            cell_visits_per_agent: 1,
            cell_min: 20,
            cell_max: 80,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let fractions = [self.stationary_fraction, self.occluded_fraction, self.cell_fraction];
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config("scenario fractions must lie in [0, 1]".into()));
        }
        if self.occlusion_min == 0 || self.occlusion_min > self.occlusion_max || self.cell_min == 0 || self.cell_min > self.cell_max {
            return Err(Error::Config("interval length ranges must satisfy 1 <= min <= max".into()));
        }
        Ok(())
    }
}

/// Draws agent modes and schedules. Agent `i` gets id `i` and a texture
/// seed derived from `seed` and `i`.
pub fn build_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<HiveScenario> {
    cfg.validate()?;
    let mut rng = crate::rng::substream(seed, "synth.scenario");
    let n = cfg.num_agents;
    let pick = |rng: &mut StreamRng, frac: f64| -> Vec<bool> {
        let k = (frac * n as f64).round() as usize;
        let mut chosen = vec![false; n];
        for i in rand::seq::index::sample(rng, n, k.min(n)) {
            chosen[i] = true;
        }
        chosen
    };
    let stationary = pick(&mut rng, cfg.stationary_fraction);
    let occluded = pick(&mut rng, cfg.occluded_fraction);
    let celled = pick(&mut rng, cfg.cell_fraction);

    let mut agents = Vec::with_capacity(n);
    for i in 0..n {
        let mut taken: Vec<FrameInterval> = Vec::new();
        let mut place = |rng: &mut StreamRng, count: usize, lo: usize, hi: usize| -> Vec<FrameInterval> {
            let mut out = Vec::new();
            for _ in 0..count {
                for _attempt in 0..100 {
                    let len = rng.random_range(lo..=hi);
                    if len >= cfg.num_frames {
                        break;
                    }
                    // keep the first frames clean so every agent can seed a trajectory
                    let earliest = (cfg.num_frames / 10).min(cfg.num_frames - len);
                    let start = rng.random_range(earliest..=cfg.num_frames - len);
                    let iv = FrameInterval::new(start, start + len);
                    // a frame of separation keeps intervals distinguishable
                    let padded = FrameInterval::new(start.saturating_sub(1), iv.end + 1);
                    if taken.iter().all(|t| !t.overlaps(&padded)) {
                        taken.push(iv);
                        out.push(iv);
                        break;
                    }
                }
            }
            out.sort();
            out
        };
        let occlusion_schedule =
            if occluded[i] { place(&mut rng, cfg.occlusions_per_agent, cfg.occlusion_min, cfg.occlusion_max) } else { vec![] };
        let cell_schedule =
            if celled[i] { place(&mut rng, cfg.cell_visits_per_agent, cfg.cell_min, cfg.cell_max) } else { vec![] };
        agents.push(AgentSpec {
            id: i as u64,
            mode: if stationary[i] { AgentMode::Stationary } else { AgentMode::Walker },
            texture_seed: crate::rng::hash3(seed, 0x7e47, i as u64, 0),
            cell_schedule,
            occlusion_schedule,
        });
    }
    let scenario = HiveScenario {
        width: cfg.width,
        height: cfg.height,
        num_frames: cfg.num_frames,
        fps: cfg.fps,
        agents,
        walker_speed: cfg.walker_speed,
        heading_persistence: cfg.heading_persistence,
        turn_sigma: cfg.turn_sigma,
        jitter_sigma: cfg.jitter_sigma,
        margin: cfg.margin,
        min_separation: cfg.min_separation,
        texture_blend: cfg.texture_blend,
        seed,
    };
    scenario.validate()?;
    Ok(scenario)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentPose {
    pub x: f64,
    pub y: f64,
    pub angle: f64,
    pub class: ObjectClass,
    pub visible: bool,
}

/// True pose of every agent in every frame, frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    /// Agent ids in the column order of `poses`.
    pub agent_ids: Vec<u64>,
    pub poses: Vec<Vec<AgentPose>>,
}

impl GroundTruth {
    pub fn num_frames(&self) -> usize {
        self.poses.len()
    }

    pub fn frame(&self, frame: usize) -> &[AgentPose] {
        &self.poses[frame]
    }

    pub fn pose(&self, frame: usize, agent_index: usize) -> &AgentPose {
        &self.poses[frame][agent_index]
    }

    pub fn num_visible(&self) -> usize {
        self.poses.iter().flatten().filter(|p| p.visible).count()
    }
}

/// Reflects `v` back into `[lo, hi]`. Returns whether a reflection happened.
fn reflect(v: &mut f64, lo: f64, hi: f64) -> bool {
    let mut flipped = false;
    for _ in 0..8 {
        if *v < lo {
            *v = 2.0 * lo - *v;
        } else if *v > hi {
            *v = 2.0 * hi - *v;
        } else {
            return flipped;
        }
        flipped = !flipped;
    }
    *v = v.clamp(lo, hi);
    flipped
}

struct AgentState {
    x: f64,
    y: f64,
    heading: f64,
    rate: f64,
    anchor: (f64, f64, f64),
    rng: StreamRng,
}

/// Whether moving agent `i` to `(x, y)` brings it closer than `min_sep` to
/// another agent. Agents already too close may still move apart.
fn blocked(states: &[AgentState], i: usize, x: f64, y: f64, min_sep: f64) -> bool {
    let me = &states[i];
    states.iter().enumerate().any(|(j, o)| {
        if j == i {
            return false;
        }
        let d = (o.x - x).hypot(o.y - y);
        d < min_sep && d < (o.x - me.x).hypot(o.y - me.y)
    })
}

/// Per-frame poses. Walkers follow a correlated random walk: the turn rate
/// decays by `heading_persistence` each frame and receives Gaussian
/// innovations; the heading integrates the turn rate and walls reflect.
/// Agents move in id order within a frame; a walker whose step is refused
/// by `min_separation` stays put and turns around, a refused stationary
/// agent keeps its previous position.
pub fn simulate(scenario: &HiveScenario) -> Result<GroundTruth> {
    scenario.validate()?;
    let (w, h) = (scenario.width as f64, scenario.height as f64);
    let (lo_x, hi_x, lo_y, hi_y) = (scenario.margin, w - scenario.margin, scenario.margin, h - scenario.margin);
    let n = scenario.agents.len();
    let turn = Normal::new(0.0, scenario.turn_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let jitter = Normal::new(0.0, scenario.jitter_sigma).map_err(|e| Error::Config(e.to_string()))?;

    let mut states: Vec<AgentState> = scenario
        .agents
        .iter()
        .zip(initial_positions(scenario))
        .map(|(agent, (x, y, a))| AgentState {
            x,
            y,
            heading: a,
            rate: 0.0,
            anchor: (x, y, a),
            rng: indexed_substream(scenario.seed, "synth.motion", agent.id),
        })
        .collect();
    let mut poses = Vec::with_capacity(scenario.num_frames);
    for t in 0..scenario.num_frames {
        let mut frame = Vec::with_capacity(n);
        for (i, agent) in scenario.agents.iter().enumerate() {
            let in_cell = agent.in_cell(t);
            let angle = match agent.mode {
                AgentMode::Walker => {
                    if t > 0 {
                        let innovation = turn.sample(&mut states[i].rng);
                        if !in_cell {
                            let s = &states[i];
                            let rate = scenario.heading_persistence * s.rate + innovation;
                            let mut heading = s.heading + rate;
                            let mut rate = rate;
                            let mut x = s.x + scenario.walker_speed * heading.cos();
                            let mut y = s.y + scenario.walker_speed * heading.sin();
                            if reflect(&mut x, lo_x, hi_x) {
                                heading = std::f64::consts::PI - heading;
                                rate = -rate;
                            }
                            if reflect(&mut y, lo_y, hi_y) {
                                heading = -heading;
                                rate = -rate;
                            }
                            let refused = blocked(&states, i, x, y, scenario.min_separation);
                            let s = &mut states[i];
                            if refused {
                                s.heading = wrap_angle(heading + std::f64::consts::PI);
                                s.rate = 0.0;
                            } else {
                                (s.x, s.y, s.heading, s.rate) = (x, y, wrap_angle(heading), rate);
                            }
                        }
                    }
                    states[i].heading
                }
                AgentMode::Stationary => {
                    let dx = jitter.sample(&mut states[i].rng);
                    let dy = jitter.sample(&mut states[i].rng);
                    let (x0, y0, a0) = states[i].anchor;
                    let (x, y) = ((x0 + dx).clamp(lo_x, hi_x), (y0 + dy).clamp(lo_y, hi_y));
                    if t == 0 || !blocked(&states, i, x, y, scenario.min_separation) {
                        (states[i].x, states[i].y) = (x, y);
                    }
                    a0
                }
            };
            frame.push(AgentPose {
                x: states[i].x,
                y: states[i].y,
                angle: if in_cell { 0.0 } else { wrap_angle(angle) },
                class: if in_cell { ObjectClass::Abdomen } else { ObjectClass::FullBee },
                visible: !agent.occluded(t),
            });
        }
        poses.push(frame);
    }
    Ok(GroundTruth {
        width: scenario.width,
        height: scenario.height,
        fps: scenario.fps,
        agent_ids: scenario.agents.iter().map(|a| a.id).collect(),
        poses,
    })
}

/// Start position and heading of each agent, spread out where possible.
fn initial_positions(scenario: &HiveScenario) -> Vec<(f64, f64, f64)> {
    let mut rng = crate::rng::substream(scenario.seed, "synth.placement");
    let (lo, hx, hy) = (scenario.margin, scenario.width as f64 - scenario.margin, scenario.height as f64 - scenario.margin);
    let mut out: Vec<(f64, f64, f64)> = Vec::with_capacity(scenario.agents.len());
    for _ in &scenario.agents {
        let mut best = (lo, lo, 0.0);
        let mut best_clearance = f64::NEG_INFINITY;
        for _ in 0..200 {
            let cand = (rng.random_range(lo..hx), rng.random_range(lo..hy), rng.random_range(0.0..std::f64::consts::TAU));
            let clearance =
                out.iter().map(|o| (o.0 - cand.0).hypot(o.1 - cand.1)).fold(f64::INFINITY, f64::min);
            if clearance > best_clearance {
                best = cand;
                best_clearance = clearance;
            }
            if clearance >= 60.0 {
                break;
            }
        }
        out.push(best);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(agents: Vec<AgentSpec>) -> HiveScenario {
        HiveScenario {
            width: 200,
            height: 100,
            num_frames: 20,
            fps: 10.0,
            agents,
            walker_speed: 0.0,
            heading_persistence: 1.0,
            turn_sigma: 0.0,
            jitter_sigma: 0.0,
            margin: 10.0,
            min_separation: 0.0,
            texture_blend: 0.0,
            seed: 3,
        }
    }

    fn agent(id: u64, mode: AgentMode) -> AgentSpec {
        AgentSpec { id, mode, texture_seed: id, cell_schedule: vec![], occlusion_schedule: vec![] }
    }

    #[test]
    fn no_motion_means_constant_poses() {
        let s = scenario(vec![agent(0, AgentMode::Walker), agent(1, AgentMode::Stationary)]);
        let truth = simulate(&s).unwrap();
        for f in 1..s.num_frames {
            assert_eq!(truth.frame(f), truth.frame(0));
        }
    }

    #[test]
    fn straight_walker_matches_hand_stepped_reflections() {
        let mut s = scenario(vec![agent(0, AgentMode::Walker)]);
        s.walker_speed = 7.0;
        let truth = simulate(&s).unwrap();
        let start = truth.pose(0, 0);
        let (mut x, mut y, mut a) = (start.x, start.y, start.angle);
        for f in 1..20 {
            x += 7.0 * a.cos();
            y += 7.0 * a.sin();
            if x < 10.0 {
                x = 20.0 - x;
                a = std::f64::consts::PI - a;
            } else if x > 190.0 {
                x = 380.0 - x;
                a = std::f64::consts::PI - a;
            }
            if y < 10.0 {
                y = 20.0 - y;
                a = -a;
            } else if y > 90.0 {
                y = 180.0 - y;
                a = -a;
            }
            a = a.rem_euclid(std::f64::consts::TAU);
            let p = truth.pose(f, 0);
            assert!((p.x - x).abs() < 1e-9 && (p.y - y).abs() < 1e-9, "frame {f}");
            assert!((p.angle - a).abs() < 1e-9 || (p.angle - a).abs() > std::f64::consts::TAU - 1e-6);
        }
    }

    #[test]
    fn schedules_drive_class_and_visibility() {
        let mut a = agent(0, AgentMode::Walker);
        a.cell_schedule = vec![FrameInterval::new(2, 5)];
        a.occlusion_schedule = vec![FrameInterval::new(8, 10)];
        let mut s = scenario(vec![a]);
        s.walker_speed = 1.0;
        let truth = simulate(&s).unwrap();
        assert_eq!(truth.pose(3, 0).class, ObjectClass::Abdomen);
        assert_eq!(truth.pose(3, 0).angle, 0.0);
        assert_eq!(truth.pose(3, 0).x, truth.pose(2, 0).x);
        assert_eq!(truth.pose(5, 0).class, ObjectClass::FullBee);
        assert!(!truth.pose(8, 0).visible && !truth.pose(9, 0).visible && truth.pose(10, 0).visible);
    }

    #[test]
    fn overlapping_schedules_rejected() {
        let mut a = agent(0, AgentMode::Walker);
        a.cell_schedule = vec![FrameInterval::new(2, 5)];
        a.occlusion_schedule = vec![FrameInterval::new(4, 10)];
        assert!(simulate(&scenario(vec![a])).is_err());
    }

    #[test]
    fn seeded_runs_are_identical_and_in_bounds() {
        let cfg = ScenarioConfig { num_frames: 300, num_agents: 6, walker_speed: 9.0, turn_sigma: 0.4, ..ScenarioConfig::default() };
        let a = simulate(&build_scenario(&cfg, 11).unwrap()).unwrap();
        let b = simulate(&build_scenario(&cfg, 11).unwrap()).unwrap();
        assert_eq!(a, b);
        for p in a.poses.iter().flatten() {
            assert!(p.x >= 0.0 && p.x < 512.0 && p.y >= 0.0 && p.y < 512.0);
        }
    }
}
