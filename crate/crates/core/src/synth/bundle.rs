//! On-disk scenario bundle: frames, detections, truth, false-positive
//! sidecar and a manifest.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::detection::{parse_detections, parse_frame, read_csv_rows, write_detections, FrameBounds, ObjectClass};
use crate::error::{Error, Result};
use crate::image::{frame_file_name, save_frame_image};

use super::noise::{read_false_positives, write_false_positives};
use super::{AgentPose, CorruptedDetections, GroundTruth, Renderer};

pub const TRUTH_HEADER: &str = "agent_id,frame,x,y,class,angle,visible";
const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct BundleManifest {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    pub fps: f64,
    pub num_agents: usize,
    pub num_detections: usize,
    pub num_false_positives: usize,
    /// Further INI sections echoing the configuration used.
    pub config_echo: String,
}

impl BundleManifest {
    pub fn new(seed: u64, truth: &GroundTruth, detections: &CorruptedDetections, config_echo: String) -> Self {
        BundleManifest {
            seed,
            width: truth.width,
            height: truth.height,
            num_frames: truth.num_frames(),
            fps: truth.fps,
            num_agents: truth.agent_ids.len(),
            num_detections: detections.table.len(),
            num_false_positives: detections.false_positives.len(),
            config_echo,
        }
    }

    pub fn to_ini(&self) -> String {
        let mut s = format!(
            "[bundle]\nseed = {}\nwidth = {}\nheight = {}\nnum_frames = {}\nfps = {}\nnum_agents = {}\nnum_detections = {}\nnum_false_positives = {}\n",
            self.seed,
            self.width,
            self.height,
            self.num_frames,
            self.fps,
            self.num_agents,
            self.num_detections,
            self.num_false_positives
        );
        if !self.config_echo.is_empty() {
            s.push('\n');
            s.push_str(&self.config_echo);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let ini = ini::Ini::load_from_str(text).map_err(|e| Error::Bundle(format!("manifest: {e}")))?;
        let section = ini.section(Some("bundle")).ok_or_else(|| Error::Bundle("manifest has no [bundle] section".into()))?;
        fn get<T: std::str::FromStr>(section: &ini::Properties, key: &str) -> Result<T> {
            section
                .get(key)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Bundle(format!("manifest key bundle.{key} missing or invalid")))
        }
        let config_echo = text.split_once("\n\n").map(|(_, rest)| rest.to_string()).unwrap_or_default();
        Ok(BundleManifest {
            seed: get(section, "seed")?,
            width: get(section, "width")?,
            height: get(section, "height")?,
            num_frames: get(section, "num_frames")?,
            fps: get(section, "fps")?,
            num_agents: get(section, "num_agents")?,
            num_detections: get(section, "num_detections")?,
            num_false_positives: get(section, "num_false_positives")?,
            config_echo,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioBundle {
    pub manifest: BundleManifest,
    pub truth: GroundTruth,
    pub detections: CorruptedDetections,
}

fn create(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    fs::File::create(path).map(std::io::BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn write_truth<W: Write>(truth: &GroundTruth, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{TRUTH_HEADER}")?;
    for (frame, poses) in truth.poses.iter().enumerate() {
        for (id, p) in truth.agent_ids.iter().zip(poses) {
            writeln!(out, "{},{},{},{},{},{},{}", id, frame, p.x, p.y, p.class.code(), p.angle, u8::from(p.visible))?;
        }
    }
    Ok(())
}

/// Reads a truth table written by [`write_truth`]. Rows must be grouped by
/// frame with the same agent order in every frame.
pub fn read_truth<R: std::io::Read>(reader: R, width: usize, height: usize, fps: f64, num_frames: usize) -> Result<GroundTruth> {
    let mut agent_ids: Vec<u64> = Vec::new();
    let mut poses: Vec<Vec<AgentPose>> = vec![Vec::new(); num_frames];
    read_csv_rows(reader, TRUTH_HEADER, |cells, line| {
        let err = |m: String| Error::Parse { line, message: m };
        let num = |i: usize| -> Result<f64> {
            cells[i].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| err(format!("bad number '{}'", cells[i])))
        };
        let id: u64 = cells[0].parse().map_err(|_| err(format!("bad agent_id '{}'", cells[0])))?;
        let frame = parse_frame(cells[1], line)?;
        let class = cells[4]
            .parse::<i64>()
            .ok()
            .and_then(ObjectClass::from_code)
            .ok_or_else(|| err(format!("bad class '{}'", cells[4])))?;
        let visible = match cells[6] {
            "1" => true,
            "0" => false,
            v => return Err(err(format!("bad visible flag '{v}'"))),
        };
        let row = poses
            .get_mut(frame)
            .ok_or_else(|| err(format!("frame {frame} beyond {num_frames} frames")))?;
        if frame == 0 {
            agent_ids.push(id);
        } else if agent_ids.get(row.len()) != Some(&id) {
            return Err(err(format!("agent {id} out of order in frame {frame}")));
        }
        row.push(AgentPose { x: num(2)?, y: num(3)?, angle: num(5)?, class, visible });
        Ok(())
    })?;
    if poses.iter().any(|p| p.len() != agent_ids.len()) {
        return Err(Error::Bundle("truth table does not list every agent in every frame".into()));
    }
    Ok(GroundTruth { width, height, fps, agent_ids, poses })
}

/// Writes the bundle into `dir`. Frames are rendered one at a time, in
/// parallel on the current rayon pool.
pub fn write_scenario_bundle(
    dir: &Path,
    truth: &GroundTruth,
    renderer: &Renderer,
    detections: &CorruptedDetections,
    manifest: &BundleManifest,
) -> Result<()> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    (0..truth.num_frames())
        .into_par_iter()
        .try_for_each(|f| save_frame_image(&renderer.render_frame(truth, f), &frames_dir.join(frame_file_name(f))))?;

    let path = dir.join("detections.csv");
    write_detections(&detections.table, create(&path)?).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("truth.csv");
    write_truth(truth, create(&path)?).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("false_positives.csv");
    write_false_positives(&detections.false_positives, create(&path)?).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest.to_ini()).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<BundleManifest> {
    let path = dir.join(MANIFEST);
    BundleManifest::parse(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)
}

/// Reloads everything but the frames. With `expected_seed`, a manifest
/// recorded under a different seed is rejected.
pub fn load_scenario_bundle(dir: &Path, expected_seed: Option<u64>) -> Result<ScenarioBundle> {
    let manifest = read_manifest(dir)?;
    if let Some(seed) = expected_seed {
        if seed != manifest.seed {
            return Err(Error::Bundle(format!("manifest seed {} does not match expected seed {seed}", manifest.seed)));
        }
    }
    let open = |name: &str| {
        let path = dir.join(name);
        fs::File::open(&path).map(std::io::BufReader::new).map_err(|e| Error::io(&path, e))
    };
    let truth = read_truth(open("truth.csv")?, manifest.width, manifest.height, manifest.fps, manifest.num_frames)?;
    let mut table = parse_detections(open("detections.csv")?)?
        .with_bounds(FrameBounds::new(manifest.width as f64, manifest.height as f64))
        .with_fps(manifest.fps);
    for f in 0..manifest.num_frames {
        table.ensure_frame(f);
    }
    let false_positives = read_false_positives(open("false_positives.csv")?)?;
    Ok(ScenarioBundle { manifest, truth, detections: CorruptedDetections { table, false_positives } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{build_scenario, corrupt_detections, simulate, NoiseConfig, ScenarioConfig};

    fn make(dir: &Path, agents: usize, seed: u64) -> ScenarioBundle {
        let cfg = ScenarioConfig {
            width: 160,
            height: 128,
            num_frames: 6,
            num_agents: agents,
            occluded_fraction: 0.5,
            occlusion_min: 1,
            occlusion_max: 2,
            ..ScenarioConfig::default()
        };
        let scenario = build_scenario(&cfg, seed).unwrap();
        let truth = simulate(&scenario).unwrap();
        let dets = corrupt_detections(&truth, &NoiseConfig::default(), seed).unwrap();
        let manifest = BundleManifest::new(seed, &truth, &dets, "[scenario]\nnum_agents = 3\n".into());
        write_scenario_bundle(dir, &truth, &Renderer::new(&scenario), &dets, &manifest).unwrap();
        ScenarioBundle { manifest, truth, detections: dets }
    }

    #[test]
    fn reload_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let written = make(dir.path(), 3, 8);
        assert_eq!(load_scenario_bundle(dir.path(), Some(8)).unwrap(), written);
        assert!(dir.path().join("frames").join("frame_000005.pgm").exists());
    }

    #[test]
    fn seed_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        make(dir.path(), 2, 8);
        let err = load_scenario_bundle(dir.path(), Some(9)).unwrap_err();
        assert!(matches!(err, Error::Bundle(_)), "{err}");
    }

    #[test]
    fn empty_scenario_gives_header_only_detections() {
        let dir = tempfile::tempdir().unwrap();
        let written = make(dir.path(), 0, 1);
        let csv = fs::read_to_string(dir.path().join("detections.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1);
        assert_eq!(load_scenario_bundle(dir.path(), None).unwrap(), written);
    }
}
