//! Detector-like corruption of ground-truth poses.

use std::f64::consts::{FRAC_PI_2, TAU};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::detection::{read_csv_rows, parse_detection_cells, parse_frame, Detection, DetectionTable, FrameBounds, ObjectClass};
use crate::error::{Error, Result};
use crate::rng::indexed_substream;

use super::GroundTruth;

pub const FALSE_POSITIVE_HEADER: &str = "frame,index,x,y,class,angle";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseConfig {
    /// Mean radial position error in pixels.
    pub position_error_mean: f64,
    /// Mean absolute orientation error in degrees.
    pub angle_error_mean: f64,
    /// False positives per true visible agent and frame.
    pub false_positive_rate: f64,
    /// Probability that a visible agent yields no detection in a frame.
    pub miss_rate: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { position_error_mean: 4.9, angle_error_mean: 9.7, false_positive_rate: 0.06, miss_rate: 0.02 }
    }
}

impl NoiseConfig {
    pub fn zero() -> Self {
        NoiseConfig { position_error_mean: 0.0, angle_error_mean: 0.0, false_positive_rate: 0.0, miss_rate: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.position_error_mean >= 0.0 && self.angle_error_mean >= 0.0) {
            return Err(Error::Config("noise errors must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.false_positive_rate) || !(0.0..1.0).contains(&self.miss_rate) {
            return Err(Error::Config("noise rates must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Per-axis σ whose 2D radial error has the configured mean.
    pub fn position_sigma(&self) -> f64 {
        self.position_error_mean / FRAC_PI_2.sqrt()
    }

    /// σ in radians whose absolute deviation has the configured mean.
    pub fn angle_sigma(&self) -> f64 {
        self.angle_error_mean.to_radians() / (2.0 / std::f64::consts::PI).sqrt()
    }
}

/// A detection that corresponds to no agent. `index` is its position within
/// the frame's detections.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FalsePositive {
    pub index: usize,
    pub detection: Detection,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptedDetections {
    pub table: DetectionTable,
    pub false_positives: Vec<FalsePositive>,
}

impl CorruptedDetections {
    pub fn false_positive_fraction(&self) -> f64 {
        self.false_positives.len() as f64 / self.table.len().max(1) as f64
    }
}

/// Values are stored at the 6-decimal precision of the CSV format so that
/// written tables reload identically.
fn quantize(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

fn quantized_detection(frame: usize, x: f64, y: f64, class: ObjectClass, angle: f64) -> Result<Detection> {
    let angle = match class {
        ObjectClass::Abdomen => 0.0,
        ObjectClass::FullBee => {
            let a = quantize(angle.rem_euclid(TAU));
            if a >= TAU { 0.0 } else { a }
        }
    };
    Detection::new(frame, quantize(x), quantize(y), class, angle)
}

/// Emits noisy detections of the visible agents plus false positives. Each
/// frame draws from its own stream and its detections are shuffled, so a
/// detection's index reveals nothing about its origin.
pub fn corrupt_detections(truth: &GroundTruth, noise: &NoiseConfig, seed: u64) -> Result<CorruptedDetections> {
    noise.validate()?;
    let (w, h) = (truth.width as f64, truth.height as f64);
    let pos = Normal::new(0.0, noise.position_sigma()).map_err(|e| Error::Config(e.to_string()))?;
    let ang = Normal::new(0.0, noise.angle_sigma()).map_err(|e| Error::Config(e.to_string()))?;
    let clamp_x = |v: f64| v.clamp(0.0, w - 1e-3);
    let clamp_y = |v: f64| v.clamp(0.0, h - 1e-3);
    let mut table = DetectionTable::new()
        .with_bounds(FrameBounds::new(w, h))
        .with_fps(truth.fps);
    let mut false_positives = Vec::new();

    for (frame, poses) in truth.poses.iter().enumerate() {
        let mut rng = indexed_substream(seed, "synth.noise", frame as u64);
        let mut emitted: Vec<(Detection, bool)> = Vec::new();
        let mut visible = 0usize;
        for p in poses.iter().filter(|p| p.visible) {
            visible += 1;
            let missed = rng.random::<f64>() < noise.miss_rate;
            let (dx, dy, da) = (pos.sample(&mut rng), pos.sample(&mut rng), ang.sample(&mut rng));
            if !missed {
                let d = quantized_detection(frame, clamp_x(p.x + dx), clamp_y(p.y + dy), p.class, p.angle + da)?;
                emitted.push((d, false));
            }
        }
        let expected = noise.false_positive_rate * visible as f64;
        let extra = expected.floor() as usize + usize::from(rng.random::<f64>() < expected.fract());
        for _ in 0..extra {
            let class = if rng.random::<bool>() { ObjectClass::FullBee } else { ObjectClass::Abdomen };
            let (x, y, a) = (rng.random_range(0.0..w), rng.random_range(0.0..h), rng.random_range(0.0..TAU));
            emitted.push((quantized_detection(frame, clamp_x(x), clamp_y(y), class, a)?, true));
        }
        emitted.shuffle(&mut rng);
        table.ensure_frame(frame);
        for (index, (d, fp)) in emitted.into_iter().enumerate() {
            table.push(d);
            if fp {
                false_positives.push(FalsePositive { index, detection: d });
            }
        }
    }
    Ok(CorruptedDetections { table, false_positives })
}

pub fn write_false_positives<W: Write>(fps: &[FalsePositive], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{FALSE_POSITIVE_HEADER}")?;
    for fp in fps {
        writeln!(out, "{},{},{}", fp.detection.frame(), fp.index, fp.detection.value_cells())?;
    }
    Ok(())
}

pub fn read_false_positives<R: Read>(reader: R) -> Result<Vec<FalsePositive>> {
    let mut out = Vec::new();
    read_csv_rows(reader, FALSE_POSITIVE_HEADER, |cells, line| {
        let frame = parse_frame(cells[0], line)?;
        let index = cells[1]
            .parse()
            .map_err(|_| Error::Parse { line, message: format!("non-numeric index '{}'", cells[1]) })?;
        out.push(FalsePositive { index, detection: parse_detection_cells(frame, &cells[2..6], line)? });
        Ok(())
    })?;
    Ok(out)
}
