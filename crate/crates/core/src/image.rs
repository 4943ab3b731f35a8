//! 8-bit grayscale frames and binary PGM (P5) I/O.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use crate::appearance::Patch;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameImage {
    pub width: usize,
    pub height: usize,
    /// Row-major intensities, `width * height` entries.
    pub data: Vec<u8>,
}

impl FrameImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Pgm(format!(
                "expected {} pixels for {width}x{height}, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(FrameImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        FrameImage { width, height, data: vec![value; width * height] }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.data[row * self.width + col] = value;
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }
}

/// File name of frame `index` inside a frame directory.
pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.pgm")
}

/// Decodes a binary PGM with max value 255.
pub fn decode_pgm(bytes: &[u8]) -> Result<FrameImage> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::Pgm("wrong magic: not a PGM file".into()));
    }
    match bytes[1] {
        b'5' => {}
        b'1'..=b'6' => return Err(Error::Pgm("unsupported PGM variant".into())),
        _ => return Err(Error::Pgm("wrong magic: not a PGM file".into())),
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments between header tokens
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Pgm("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Pgm("malformed header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Pgm("malformed header".into()))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Pgm(format!("max value {maxval} != 255")));
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Pgm("truncated payload".into()));
    }
    pos += 1;
    let need = width * height;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(Error::Pgm(format!("truncated payload: {} of {need} bytes", payload.len())));
    }
    FrameImage::new(width, height, payload[..need].to_vec())
}

pub fn load_frame_image(path: &Path) -> Result<FrameImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|e| Error::Pgm(format!("{}: {e}", path.display())))
}

pub fn save_frame_image(image: &FrameImage, path: &Path) -> Result<()> {
    fs::write(path, image.to_pgm()).map_err(|e| Error::io(path, e))
}

/// Anything that can produce 80x80 appearance patches for a frame.
pub trait FrameSource: Sync {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    fn patch(&self, frame: usize, center: (f64, f64)) -> Result<Patch>;

    /// Number of frames in the recording, when known.
    fn num_frames(&self) -> Option<usize> {
        None
    }
}

/// Frames held in memory, indexed by frame number.
pub struct InMemoryFrames {
    frames: Vec<FrameImage>,
}

impl InMemoryFrames {
    pub fn new(frames: Vec<FrameImage>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::Empty("no frames".into()))?;
        if frames.iter().any(|f| f.width != first.width || f.height != first.height) {
            return Err(Error::Pgm("frames differ in size".into()));
        }
        Ok(InMemoryFrames { frames })
    }
}

impl FrameSource for InMemoryFrames {
    fn width(&self) -> usize {
        self.frames[0].width
    }

    fn height(&self) -> usize {
        self.frames[0].height
    }

    fn patch(&self, frame: usize, center: (f64, f64)) -> Result<Patch> {
        let image = self
            .frames
            .get(frame)
            .ok_or_else(|| Error::MissingFile(PathBuf::from(frame_file_name(frame))))?;
        Patch::extract(image, frame, center)
    }

    fn num_frames(&self) -> Option<usize> {
        Some(self.frames.len())
    }
}

/// Loaded frames and their insertion order.
type FrameCache = (HashMap<usize, Arc<FrameImage>>, VecDeque<usize>);

/// Lazily loads `frame_%06d.pgm` files, keeping a small FIFO cache.
pub struct PgmDirectory {
    dir: PathBuf,
    width: usize,
    height: usize,
    cache: Mutex<FrameCache>,
    capacity: usize,
    count: usize,
}

impl PgmDirectory {
    pub fn open(dir: &Path) -> Result<Self> {
        let mut names: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
            .collect();
        names.sort();
        let first = names.first().ok_or_else(|| Error::MissingFile(dir.join(frame_file_name(0))))?;
        let probe = load_frame_image(first)?;
        Ok(PgmDirectory {
            dir: dir.to_path_buf(),
            width: probe.width,
            height: probe.height,
            cache: Mutex::new((HashMap::new(), VecDeque::new())),
            capacity: 64,
            count: names.len(),
        })
    }

    pub fn frame(&self, frame: usize) -> Result<Arc<FrameImage>> {
        {
            let cache = self.cache.lock().expect("cache lock");
            if let Some(img) = cache.0.get(&frame) {
                return Ok(Arc::clone(img));
            }
        }
        let img = Arc::new(load_frame_image(&self.dir.join(frame_file_name(frame)))?);
        let mut cache = self.cache.lock().expect("cache lock");
        let (map, order) = &mut *cache;
        if map.insert(frame, Arc::clone(&img)).is_none() {
            order.push_back(frame);
            if order.len() > self.capacity {
                if let Some(old) = order.pop_front() {
                    map.remove(&old);
                }
            }
        }
        Ok(img)
    }
}

impl FrameSource for PgmDirectory {
    fn width(&self) -> usize {
        self.width
    }

    fn height(&self) -> usize {
        self.height
    }

    fn patch(&self, frame: usize, center: (f64, f64)) -> Result<Patch> {
        Patch::extract(&*self.frame(frame)?, frame, center)
    }

    fn num_frames(&self) -> Option<usize> {
        Some(self.count)
    }
}
