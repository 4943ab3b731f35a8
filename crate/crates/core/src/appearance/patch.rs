//! 80x80 appearance patches, augmentation and pooled features.

use crate::error::{Error, Result};
use crate::image::FrameImage;
use crate::scalar::Scalar;

pub const PATCH_SIZE: usize = 80;
pub const PATCH_PIXELS: usize = PATCH_SIZE * PATCH_SIZE;
/// Average-pooling block side.
pub const POOL: usize = 4;
pub const POOLED_SIZE: usize = PATCH_SIZE / POOL;
pub const POOLED_LEN: usize = POOLED_SIZE * POOLED_SIZE;
/// Pooled values plus the constant bias input.
pub const FEATURE_DIM: usize = POOLED_LEN + 1;

/// Side of the square kept by [`Mask::Square`].
pub const SQUARE_MASK_SIDE: usize = 40;
/// Radius of the disk kept by [`Mask::Round`].
pub const ROUND_MASK_RADIUS: f64 = 20.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pixels: Vec<u8>,
    pub source_frame: usize,
    pub center: (f64, f64),
}

impl Patch {
    pub fn from_pixels(pixels: Vec<u8>, source_frame: usize, center: (f64, f64)) -> Result<Self> {
        if pixels.len() != PATCH_PIXELS {
            return Err(Error::Pgm(format!("patch needs {PATCH_PIXELS} pixels, got {}", pixels.len())));
        }
        Ok(Patch { pixels, source_frame, center })
    }

    pub fn filled(value: u8) -> Self {
        Patch { pixels: vec![value; PATCH_PIXELS], source_frame: 0, center: (0.0, 0.0) }
    }

    /// Crops the 80x80 window around `center` (rounded to the nearest pixel);
    /// samples outside the image are 0.
    pub fn extract(image: &FrameImage, frame: usize, center: (f64, f64)) -> Result<Self> {
        let (x, y) = center;
        if !(x >= 0.0 && y >= 0.0 && x < image.width as f64 && y < image.height as f64) {
            return Err(Error::CenterOutsideImage { x, y, width: image.width, height: image.height });
        }
        let (x0, y0) = patch_origin(center);
        let mut pixels = vec![0u8; PATCH_PIXELS];
        for r in 0..PATCH_SIZE {
            let iy = y0 + r as i64;
            if iy < 0 || iy >= image.height as i64 {
                continue;
            }
            let row = iy as usize * image.width;
            for c in 0..PATCH_SIZE {
                let ix = x0 + c as i64;
                if ix >= 0 && ix < image.width as i64 {
                    pixels[r * PATCH_SIZE + c] = image.data[row + ix as usize];
                }
            }
        }
        Ok(Patch { pixels, source_frame: frame, center })
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * PATCH_SIZE + col]
    }
}

/// Image coordinates of the patch's top-left pixel.
pub fn patch_origin(center: (f64, f64)) -> (i64, i64) {
    let half = (PATCH_SIZE / 2) as i64;
    (center.0.round() as i64 - half, center.1.round() as i64 - half)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mask {
    None,
    Round,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AugmentationOp {
    /// Mirror columns.
    pub flip_x: bool,
    /// Mirror rows.
    pub flip_y: bool,
    pub mask: Mask,
}

impl AugmentationOp {
    pub const IDENTITY: AugmentationOp = AugmentationOp { flip_x: false, flip_y: false, mask: Mask::None };

    /// The 12 flip/mask combinations.
    pub fn all() -> [AugmentationOp; 12] {
        let mut ops = [Self::IDENTITY; 12];
        let mut i = 0;
        for mask in [Mask::None, Mask::Round, Mask::Square] {
            for flip_y in [false, true] {
                for flip_x in [false, true] {
                    ops[i] = AugmentationOp { flip_x, flip_y, mask };
                    i += 1;
                }
            }
        }
        ops
    }
}

#[inline]
fn in_square(r: usize, c: usize) -> bool {
    let lo = (PATCH_SIZE - SQUARE_MASK_SIDE) / 2;
    let hi = lo + SQUARE_MASK_SIDE;
    (lo..hi).contains(&r) && (lo..hi).contains(&c)
}

/// Whether pixel `(r, c)` has its center inside the centered disk.
#[inline]
pub fn in_round_mask(r: usize, c: usize) -> bool {
    let mid = PATCH_SIZE as f64 / 2.0;
    let dy = r as f64 + 0.5 - mid;
    let dx = c as f64 + 0.5 - mid;
    dx * dx + dy * dy <= ROUND_MASK_RADIUS * ROUND_MASK_RADIUS
}

fn keeps(mask: Mask, r: usize, c: usize) -> bool {
    match mask {
        Mask::None => true,
        Mask::Round => in_round_mask(r, c),
        Mask::Square => in_square(r, c),
    }
}

pub fn augment(patch: &Patch, op: AugmentationOp) -> Patch {
    let last = PATCH_SIZE - 1;
    let mut pixels = vec![0u8; PATCH_PIXELS];
    for r in 0..PATCH_SIZE {
        let sr = if op.flip_y { last - r } else { r };
        for c in 0..PATCH_SIZE {
            if keeps(op.mask, r, c) {
                let sc = if op.flip_x { last - c } else { c };
                pixels[r * PATCH_SIZE + c] = patch.get(sr, sc);
            }
        }
    }
    Patch { pixels, source_frame: patch.source_frame, center: patch.center }
}

/// 4x4 block sums of the masked patch. Sums are exact integers.
fn block_sums(patch: &Patch, mask: Mask) -> [u16; POOLED_LEN] {
    let mut sums = [0u16; POOLED_LEN];
    for r in 0..PATCH_SIZE {
        for c in 0..PATCH_SIZE {
            if keeps(mask, r, c) {
                sums[(r / POOL) * POOLED_SIZE + c / POOL] += u16::from(patch.get(r, c));
            }
        }
    }
    sums
}

/// Turns block sums into a zero-mean feature vector with a trailing bias 1.
fn features_from_sums<T: Scalar>(sums: &[u16; POOLED_LEN], out: &mut Vec<T>) {
    let scale = T::c((POOL * POOL * 255) as f64);
    out.clear();
    out.extend(sums.iter().map(|&s| T::from(s).expect("u16 fits") / scale));
    let mean = out.iter().copied().sum::<T>() / T::from_usize_lossy(POOLED_LEN);
    for v in out.iter_mut() {
        *v -= mean;
    }
    out.push(T::one());
}

pub fn featurize<T: Scalar>(patch: &Patch) -> Vec<T> {
    let mut out = Vec::with_capacity(FEATURE_DIM);
    features_from_sums(&block_sums(patch, Mask::None), &mut out);
    out
}

/// Block sums of a patch under no mask and under the round mask. Every
/// augmentation's features derive from these: the square mask is block
/// aligned and both masks are symmetric under flips, which commute with
/// pooling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PooledPatch {
    plain: [u16; POOLED_LEN],
    round: [u16; POOLED_LEN],
}

impl PooledPatch {
    pub fn new(patch: &Patch) -> Self {
        PooledPatch { plain: block_sums(patch, Mask::None), round: block_sums(patch, Mask::Round) }
    }

    /// Equal to `featurize(&augment(patch, op))`, bit for bit.
    pub fn features_into<T: Scalar>(&self, op: AugmentationOp, out: &mut Vec<T>) {
        let lo = (PATCH_SIZE - SQUARE_MASK_SIDE) / 2 / POOL;
        let hi = lo + SQUARE_MASK_SIDE / POOL;
        let last = POOLED_SIZE - 1;
        let base = match op.mask {
            Mask::Round => &self.round,
            _ => &self.plain,
        };
        let mut sums = [0u16; POOLED_LEN];
        for r in 0..POOLED_SIZE {
            let sr = if op.flip_y { last - r } else { r };
            for c in 0..POOLED_SIZE {
                if op.mask == Mask::Square && !((lo..hi).contains(&r) && (lo..hi).contains(&c)) {
                    continue;
                }
                let sc = if op.flip_x { last - c } else { c };
                sums[r * POOLED_SIZE + c] = base[sr * POOLED_SIZE + sc];
            }
        }
        features_from_sums(&sums, out);
    }
}
