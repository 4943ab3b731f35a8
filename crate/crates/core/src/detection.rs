//! Detection records and the frame-indexed detection table.
//!
//! Detections arrive as CSV with the fixed header `frame,x,y,class,angle`:
//! class `0` is a fully visible bee, class `1` an abdomen inside a comb cell,
//! and angles are radians in `[0, 2π)`. Abdomens carry no orientation, so
//! their angle must be exactly `0`.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::mean_std;

pub const DETECTION_HEADER: &str = "frame,x,y,class,angle";

/// Default recording rate after downsampling.
pub const DEFAULT_FPS: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObjectClass {
    FullBee = 0,
    Abdomen = 1,
}

impl ObjectClass {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            0 => Some(ObjectClass::FullBee),
            1 => Some(ObjectClass::Abdomen),
            _ => None,
        }
    }
}

/// One observation of one object in one frame.
///
/// Fields are private so that every construction goes through
/// [`Detection::new`], which enforces finiteness, the angle range and the
/// abdomen rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    frame: usize,
    x: f64,
    y: f64,
    class: ObjectClass,
    angle: f64,
}

impl Detection {
    pub fn new(frame: usize, x: f64, y: f64, class: ObjectClass, angle: f64) -> Result<Self> {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::InvalidDetection(format!("non-finite position ({x}, {y})")));
        }
        if !(0.0..TAU).contains(&angle) {
            return Err(Error::InvalidDetection(format!("angle {angle} outside [0, 2pi)")));
        }
        if class == ObjectClass::Abdomen && angle != 0.0 {
            return Err(Error::InvalidDetection("abdomen with nonzero angle".into()));
        }
        Ok(Detection { frame, x, y, class, angle })
    }

    /// Builds a detection from an arbitrary angle, wrapping it into `[0, 2π)`
    /// and zeroing it for abdomens.
    pub fn with_wrapped_angle(
        frame: usize,
        x: f64,
        y: f64,
        class: ObjectClass,
        angle: f64,
    ) -> Result<Self> {
        let angle = match class {
            ObjectClass::Abdomen => 0.0,
            ObjectClass::FullBee => wrap_angle(angle),
        };
        Detection::new(frame, x, y, class, angle)
    }

    pub fn frame(&self) -> usize {
        self.frame
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn position(&self) -> (f64, f64) {
        (self.x, self.y)
    }

    pub fn class(&self) -> ObjectClass {
        self.class
    }

    pub fn angle(&self) -> f64 {
        self.angle
    }

    pub fn distance_to(&self, x: f64, y: f64) -> f64 {
        (self.x - x).hypot(self.y - y)
    }

    /// CSV cells after the frame column: `x,y,class,angle` at 6 decimals.
    pub fn value_cells(&self) -> String {
        format!("{:.6},{:.6},{},{}", self.x, self.y, self.class.code(), format_angle(self.angle))
    }
}

/// Wraps any finite angle into `[0, 2π)`.
pub fn wrap_angle(angle: f64) -> f64 {
    let a = angle.rem_euclid(TAU);
    if a >= TAU {
        0.0
    } else {
        a
    }
}

/// Formats an angle at 6 decimals, folding values that would round up to 2π
/// back to zero so that the printed value re-parses.
pub fn format_angle(angle: f64) -> String {
    let s = format!("{angle:.6}");
    match s.parse::<f64>() {
        Ok(v) if v >= TAU => "0.000000".to_string(),
        _ => s,
    }
}

/// Position of a detection inside a [`DetectionTable`]: frame plus index
/// within that frame's row order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DetectionId {
    pub frame: usize,
    pub index: usize,
}

impl fmt::Display for DetectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.frame, self.index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameBounds {
    pub width: f64,
    pub height: f64,
}

impl FrameBounds {
    pub fn new(width: f64, height: f64) -> Self {
        FrameBounds { width, height }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x < self.width && y < self.height
    }
}

/// Detections grouped by frame, iterated in ascending frame order.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionTable {
    frames: BTreeMap<usize, Vec<Detection>>,
    pub frame_bounds: Option<FrameBounds>,
    pub fps: f64,
}

impl Default for DetectionTable {
    fn default() -> Self {
        DetectionTable { frames: BTreeMap::new(), frame_bounds: None, fps: DEFAULT_FPS }
    }
}

impl DetectionTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_bounds(mut self, bounds: FrameBounds) -> Self {
        self.frame_bounds = Some(bounds);
        self
    }

    pub fn with_fps(mut self, fps: f64) -> Self {
        self.fps = fps;
        self
    }

    /// Appends a detection to its frame and returns its id.
    pub fn push(&mut self, det: Detection) -> DetectionId {
        let rows = self.frames.entry(det.frame).or_default();
        rows.push(det);
        DetectionId { frame: det.frame, index: rows.len() - 1 }
    }

    /// Makes sure `frame` is present, possibly with no detections.
    pub fn ensure_frame(&mut self, frame: usize) {
        self.frames.entry(frame).or_default();
    }

    pub fn get(&self, id: DetectionId) -> Option<&Detection> {
        self.frames.get(&id.frame).and_then(|rows| rows.get(id.index))
    }

    pub fn detection(&self, id: DetectionId) -> &Detection {
        self.get(id).unwrap_or_else(|| panic!("detection {id} not in table"))
    }

    pub fn frame(&self, frame: usize) -> &[Detection] {
        self.frames.get(&frame).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn frames(&self) -> impl Iterator<Item = (usize, &[Detection])> {
        self.frames.iter().map(|(&f, rows)| (f, rows.as_slice()))
    }

    pub fn frame_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.frames.keys().copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = DetectionId> + '_ {
        self.frames
            .iter()
            .flat_map(|(&frame, rows)| (0..rows.len()).map(move |index| DetectionId { frame, index }))
    }

    pub fn len(&self) -> usize {
        self.frames.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_frames_present(&self) -> usize {
        self.frames.len()
    }

    pub fn last_frame(&self) -> Option<usize> {
        self.frames.keys().next_back().copied()
    }

    /// Recording length in frames, counting from frame 0.
    pub fn total_frames(&self) -> usize {
        self.last_frame().map_or(0, |f| f + 1)
    }
}

fn parse_err(line: u64, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

fn parse_f64(cell: &str, name: &str, line: u64) -> Result<f64> {
    cell.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| parse_err(line, format!("non-numeric {name} '{cell}'")))
}

fn parse_int(cell: &str, name: &str, line: u64) -> Result<i64> {
    cell.trim()
        .parse::<i64>()
        .map_err(|_| parse_err(line, format!("non-numeric {name} '{cell}'")))
}

/// Parses the `x,y,class,angle` cells shared by every detection-like CSV.
pub(crate) fn parse_detection_cells(
    frame: usize,
    cells: &[&str],
    line: u64,
) -> Result<Detection> {
    let x = parse_f64(cells[0], "x", line)?;
    let y = parse_f64(cells[1], "y", line)?;
    let code = parse_int(cells[2], "class", line)?;
    let class = ObjectClass::from_code(code)
        .ok_or_else(|| parse_err(line, format!("class {code} outside {{0,1}}")))?;
    let angle = parse_f64(cells[3], "angle", line)?;
    if !(0.0..TAU).contains(&angle) {
        return Err(parse_err(line, format!("angle {angle} outside [0, 2pi)")));
    }
    if class == ObjectClass::Abdomen && angle != 0.0 {
        return Err(parse_err(line, "abdomen with nonzero angle"));
    }
    Detection::new(frame, x, y, class, angle).map_err(|e| parse_err(line, e.to_string()))
}

pub(crate) fn parse_frame(cell: &str, line: u64) -> Result<usize> {
    let v = parse_int(cell, "frame", line)?;
    usize::try_from(v).map_err(|_| parse_err(line, format!("negative frame {v}")))
}

/// Reads a CSV table with the given exact header and hands each data row's
/// cells (and 1-based line number) to `row`.
pub(crate) fn read_csv_rows<R: Read>(
    reader: R,
    header: &str,
    mut row: impl FnMut(&[&str], u64) -> Result<()>,
) -> Result<()> {
    let expected: Vec<&str> = header.split(',').collect();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut record = csv::StringRecord::new();
    let mut first = true;
    loop {
        let more = rdr.read_record(&mut record).map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, format!("malformed row: {e}"))
        })?;
        if !more {
            break;
        }
        let line = record.position().map_or(0, |p| p.line());
        let cells: Vec<&str> = record.iter().collect();
        if first {
            first = false;
            if cells != expected {
                return Err(parse_err(line, format!("expected header '{header}'")));
            }
            continue;
        }
        if cells.len() != expected.len() {
            return Err(parse_err(
                line,
                format!("malformed row: expected {} fields, got {}", expected.len(), cells.len()),
            ));
        }
        row(&cells, line)?;
    }
    if first {
        return Err(parse_err(1, format!("missing header '{header}'")));
    }
    Ok(())
}

/// Parses a detection CSV. Rows may arrive in any frame order; parsing
/// stops at the first bad row.
pub fn parse_detections<R: Read>(reader: R) -> Result<DetectionTable> {
    let mut table = DetectionTable::new();
    read_csv_rows(reader, DETECTION_HEADER, |cells, line| {
        let frame = parse_frame(cells[0], line)?;
        let det = parse_detection_cells(frame, &cells[1..], line)?;
        table.push(det);
        Ok(())
    })?;
    Ok(table)
}

/// Writes the table frame-sorted at fixed 6-decimal precision.
pub fn write_detections<W: Write>(table: &DetectionTable, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{DETECTION_HEADER}")?;
    for (frame, rows) in table.frames() {
        for det in rows {
            writeln!(out, "{frame},{}", det.value_cells())?;
        }
    }
    Ok(())
}

pub fn detections_to_string(table: &DetectionTable) -> String {
    let mut buf = Vec::new();
    write_detections(table, &mut buf).expect("in-memory write");
    String::from_utf8(buf).expect("ascii output")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub out_of_bounds: Vec<DetectionId>,
    /// Frames between 0 and the last frame with no detection.
    pub empty_frames: Vec<usize>,
    /// `(frame, count)` for every frame in `0..=last_frame`.
    pub counts: Vec<(usize, usize)>,
    pub mean_count: f64,
    pub std_count: f64,
}

impl ValidationReport {
    pub fn violations(&self) -> usize {
        self.out_of_bounds.len()
    }
}

pub fn validate_table(table: &DetectionTable, bounds: FrameBounds) -> ValidationReport {
    let out_of_bounds = table
        .ids()
        .filter(|&id| {
            let d = table.detection(id);
            !bounds.contains(d.x, d.y)
        })
        .collect();
    let counts: Vec<(usize, usize)> =
        (0..table.total_frames()).map(|f| (f, table.frame(f).len())).collect();
    let empty_frames = counts.iter().filter(|(_, n)| *n == 0).map(|(f, _)| *f).collect();
    let values: Vec<f64> = counts.iter().map(|&(_, n)| n as f64).collect();
    let (mean_count, std_count) = mean_std(&values).unwrap_or((0.0, 0.0));
    ValidationReport { out_of_bounds, empty_frames, counts, mean_count, std_count }
}
