//! File-level stages behind the command line: each reads its inputs from
//! disk and writes its artifacts into an output directory.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;

use crate::appearance::AppearanceModel;
use crate::config::PipelineConfig;
use crate::detection::{parse_detections, DetectionTable};
use crate::error::{Error, Result};
use crate::fragments::{build_fragments, read_fragment_files, select_initial_set, write_fragments, write_residuals, FragmentSet};
use crate::image::{save_frame_image, FrameSource, PgmDirectory};
use crate::joiner::{
    read_trajectories, run_joining, verify_conservation, write_status, write_trajectories, JoinOutcome, TrajectoryTrack,
};
use crate::metrics::{evaluate, EvalReport};
use crate::plot::emit_plot;
use crate::rng::{substream, substream_seed};
use crate::synth::{
    build_scenario, corrupt_detections, read_false_positives, read_manifest, read_truth, simulate, write_scenario_bundle,
    BundleManifest, CorruptedDetections, GroundTruth, Renderer, SyntheticFrames,
};
use crate::Classifier;

pub const FRAGMENTS_FILE: &str = "fragments.csv";
pub const RESIDUALS_FILE: &str = "residuals.csv";
pub const TRAJECTORIES_FILE: &str = "trajectories.csv";
pub const STATUS_FILE: &str = "status.csv";
pub const PROGRESS_FILE: &str = "progress.log";
pub const CHECKPOINT_FILE: &str = "classifier.ckpt";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const OVERLAY_FILE: &str = "overlay.pgm";

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    f(&mut out).and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

/// Generates a scenario bundle in `out`.
pub fn run_synth(cfg: &PipelineConfig, workers: usize, out: &Path) -> Result<BundleManifest> {
    cfg.validate()?;
    ensure_dir(out)?;
    let seed = cfg.run.seed;
    let scenario = build_scenario(&cfg.scenario, substream_seed(seed, "synth.scenario"))?;
    let truth = simulate(&scenario)?;
    let detections = corrupt_detections(&truth, &cfg.noise, substream_seed(seed, "synth.detections"))?;
    let manifest = BundleManifest::new(seed, &truth, &detections, cfg.to_ini());
    let renderer = Renderer::new(&scenario);
    worker_pool(workers)?.install(|| write_scenario_bundle(out, &truth, &renderer, &detections, &manifest))?;
    info!(
        "synth: {} frames, {} agents, {} detections ({} false positives)",
        manifest.num_frames, manifest.num_agents, manifest.num_detections, manifest.num_false_positives
    );
    Ok(manifest)
}

/// Links a detection CSV into fragments and residual singles.
pub fn run_fragments(cfg: &PipelineConfig, detections: &Path, out: &Path) -> Result<FragmentSet> {
    cfg.matcher.validate()?;
    let table: DetectionTable = parse_detections(open(detections)?)?;
    let set = build_fragments(&table, &cfg.matcher);
    ensure_dir(out)?;
    write_file(&out.join(FRAGMENTS_FILE), |w| write_fragments(&table, &set, w))?;
    write_file(&out.join(RESIDUALS_FILE), |w| write_residuals(&table, &set, w))?;
    info!("fragments: {} fragments, {} residual singles", set.fragments.len(), set.residuals.len());
    Ok(set)
}

/// Joins fragments into trajectories using the frames in `frames_dir`.
pub fn run_join(cfg: &PipelineConfig, fragments_dir: &Path, frames_dir: &Path, workers: usize, out: &Path) -> Result<JoinOutcome> {
    cfg.validate()?;
    let (table, set) = read_fragment_files(
        open(&fragments_dir.join(FRAGMENTS_FILE))?,
        open(&fragments_dir.join(RESIDUALS_FILE))?,
    )?;
    if !frames_dir.is_dir() {
        return Err(Error::MissingFile(frames_dir.to_path_buf()));
    }
    let source = PgmDirectory::open(frames_dir)?;
    let initial = select_initial_set(&set.fragments, cfg.scenario.fps, cfg.initial.window_seconds, cfg.initial.min_length)?;
    let mut model = Classifier::new(cfg.classifier)?;
    let mut rng = substream(cfg.run.seed, "joiner");
    let pool = (workers > 1).then(|| worker_pool(workers)).transpose()?;
    let outcome = join_with(&table, &set, &initial, &source, &mut model, cfg, &mut rng, pool.as_ref())?;

    ensure_dir(out)?;
    write_file(&out.join(TRAJECTORIES_FILE), |w| write_trajectories(&outcome.trajectories, w))?;
    write_file(&out.join(STATUS_FILE), |w| write_status(&outcome.trajectories, w))?;
    write_file(&out.join(PROGRESS_FILE), |w| w.write_all(outcome.progress_log().as_bytes()))?;
    let ckpt = out.join(CHECKPOINT_FILE);
    fs::write(&ckpt, model.to_checkpoint()).map_err(|e| Error::io(&ckpt, e))?;
    Ok(outcome)
}

#[allow(clippy::too_many_arguments)]
fn join_with(
    table: &DetectionTable,
    set: &FragmentSet,
    initial: &crate::fragments::InitialSet,
    source: &dyn FrameSource,
    model: &mut dyn AppearanceModel,
    cfg: &PipelineConfig,
    rng: &mut crate::rng::StreamRng,
    pool: Option<&rayon::ThreadPool>,
) -> Result<JoinOutcome> {
    let outcome = run_joining(table, set, initial, source, model, &cfg.joiner, rng, pool)?;
    verify_conservation(table, set, &outcome).map_err(Error::Conservation)?;
    info!(
        "join: {} trajectories, {} free fragments, {} unowned singles",
        outcome.trajectories.len(),
        outcome.free_fragments.len(),
        outcome.unowned_singles.len()
    );
    Ok(outcome)
}

/// Scores a trajectory CSV against the truth and false-positive sidecar of
/// the bundle in `bundle_dir`.
pub fn run_eval(cfg: &PipelineConfig, trajectories: &Path, bundle_dir: &Path, out: &Path) -> Result<EvalReport> {
    let tracks = read_trajectories(open(trajectories)?)?;
    let truth_path = bundle_dir.join("truth.csv");
    let truth_reader = open(&truth_path)?;
    let fp_reader = open(&bundle_dir.join("false_positives.csv"))?;
    let manifest = read_manifest(bundle_dir)?;
    let truth = read_truth(truth_reader, manifest.width, manifest.height, manifest.fps, manifest.num_frames)?;
    let fps = read_false_positives(fp_reader)?;
    let report = evaluate(&tracks, &truth, &fps, &cfg.eval)?;
    ensure_dir(out)?;
    write_file(&out.join(REPORT_JSON), |w| w.write_all(report.to_json().as_bytes()))?;
    write_file(&out.join(REPORT_CSV), |w| report.write_csv(w))?;
    Ok(report)
}

pub fn run_plot(trajectories: &Path, width: usize, height: usize, out_file: &Path) -> Result<()> {
    let tracks = read_trajectories(open(trajectories)?)?;
    if tracks.is_empty() {
        return Err(Error::Empty(format!("no trajectories in {}", trajectories.display())));
    }
    if let Some(parent) = out_file.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    save_frame_image(&emit_plot(&tracks, width, height)?, out_file)
}

/// Paths of a complete run directory.
#[derive(Clone, Debug)]
pub struct RunDirectory {
    pub root: PathBuf,
}

impl RunDirectory {
    pub fn new(root: &Path) -> Self {
        RunDirectory { root: root.to_path_buf() }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn frames(&self) -> PathBuf {
        self.root.join("frames")
    }
}

/// All stages in one directory: bundle, fragments, trajectories, report and
/// overlay.
pub fn run_pipeline(cfg: &PipelineConfig, workers: usize, out: &Path) -> Result<EvalReport> {
    let dir = RunDirectory::new(out);
    run_synth(cfg, workers, out)?;
    run_fragments(cfg, &dir.file("detections.csv"), out)?;
    run_join(cfg, out, &dir.frames(), workers, out)?;
    let report = run_eval(cfg, &dir.file(TRAJECTORIES_FILE), out, out)?;
    let (w, h) = cfg.plot_size();
    run_plot(&dir.file(TRAJECTORIES_FILE), w, h, &dir.file(OVERLAY_FILE))?;
    Ok(report)
}

/// Everything produced by [`run_in_memory`].
#[derive(Debug)]
pub struct InMemoryRun {
    pub truth: GroundTruth,
    pub detections: CorruptedDetections,
    pub fragments: FragmentSet,
    pub outcome: JoinOutcome,
    pub report: EvalReport,
}

/// The pipeline without touching disk. Patches are rendered on demand,
/// which matches reading the written frames pixel for pixel, so results
/// equal those of [`run_pipeline`] with the same configuration.
pub fn run_in_memory(cfg: &PipelineConfig, workers: usize) -> Result<InMemoryRun> {
    cfg.validate()?;
    let seed = cfg.run.seed;
    let scenario = build_scenario(&cfg.scenario, substream_seed(seed, "synth.scenario"))?;
    let truth = simulate(&scenario)?;
    let detections = corrupt_detections(&truth, &cfg.noise, substream_seed(seed, "synth.detections"))?;
    let fragments = build_fragments(&detections.table, &cfg.matcher);
    let initial =
        select_initial_set(&fragments.fragments, cfg.scenario.fps, cfg.initial.window_seconds, cfg.initial.min_length)?;
    let renderer = Renderer::new(&scenario);
    let source = SyntheticFrames::new(&renderer, &truth);
    let mut model = Classifier::new(cfg.classifier)?;
    let mut rng = substream(seed, "joiner");
    let pool = (workers > 1).then(|| worker_pool(workers)).transpose()?;
    let outcome = join_with(&detections.table, &fragments, &initial, &source, &mut model, cfg, &mut rng, pool.as_ref())?;
    let tracks: Vec<TrajectoryTrack> = outcome.trajectories.iter().map(TrajectoryTrack::from).collect();
    let report = evaluate(&tracks, &truth, &detections.false_positives, &cfg.eval)?;
    Ok(InMemoryRun { truth, detections, fragments, outcome, report })
}
