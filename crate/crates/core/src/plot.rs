//! Grayscale trajectory overview: one polyline per trajectory on a white
//! canvas, darker for faster trajectories.

use crate::error::{Error, Result};
use crate::image::FrameImage;
use crate::joiner::TrajectoryTrack;

/// Shade of the slowest trajectory; the fastest is drawn black.
pub const SLOWEST_SHADE: u8 = 220;
const BACKGROUND: u8 = 255;

/// Mean speed in pixels per frame over consecutive entries.
pub fn mean_speed(track: &TrajectoryTrack) -> f64 {
    let pairs: Vec<f64> = track
        .detections
        .windows(2)
        .filter(|w| w[1].frame() > w[0].frame())
        .map(|w| w[1].distance_to(w[0].x(), w[0].y()) / (w[1].frame() - w[0].frame()) as f64)
        .collect();
    if pairs.is_empty() { 0.0 } else { pairs.iter().sum::<f64>() / pairs.len() as f64 }
}

fn put(img: &mut FrameImage, x: i64, y: i64, shade: u8) {
    if x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height {
        let (r, c) = (y as usize, x as usize);
        img.set(r, c, img.get(r, c).min(shade));
    }
}

fn line(img: &mut FrameImage, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), shade: u8) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, shade);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Renders all trajectories. Shades are assigned by speed rank, so the
/// image depends only on the ordering of speeds, not their scale.
pub fn emit_plot(tracks: &[TrajectoryTrack], width: usize, height: usize) -> Result<FrameImage> {
    if width == 0 || height == 0 {
        return Err(Error::Config("plot size must be positive".into()));
    }
    let mut img = FrameImage::filled(width, height, BACKGROUND);
    let mut ranked: Vec<(f64, &TrajectoryTrack)> = tracks.iter().map(|t| (mean_speed(t), t)).collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(&b.1.id)));
    let n = ranked.len();
    for (rank, (_, track)) in ranked.iter().enumerate() {
        let shade = if n <= 1 {
            SLOWEST_SHADE
        } else {
            (f64::from(SLOWEST_SHADE) * (1.0 - rank as f64 / (n - 1) as f64)).round() as u8
        };
        let points: Vec<(i64, i64)> =
            track.detections.iter().map(|d| (d.x().round() as i64, d.y().round() as i64)).collect();
        for w in points.windows(2) {
            line(&mut img, w[0], w[1], shade);
        }
        for &(x, y) in &points {
            for (ox, oy) in [(-1, -1), (0, -1), (1, -1), (-1, 0), (0, 0), (1, 0), (-1, 1), (0, 1), (1, 1)] {
                put(&mut img, x + ox, y + oy, shade);
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::{Detection, ObjectClass};
    use crate::joiner::EntrySource;

    fn track(id: u64, step: f64, y: f64) -> TrajectoryTrack {
        let detections: Vec<Detection> = (0..20)
            .map(|f| Detection::new(f, 10.0 + step * f as f64, y, ObjectClass::FullBee, 0.0).unwrap())
            .collect();
        TrajectoryTrack { id, sources: vec![EntrySource::Single; detections.len()], detections }
    }

    #[test]
    fn faster_is_darker() {
        let img = emit_plot(&[track(0, 0.0, 20.0), track(1, 5.0, 60.0)], 200, 100).unwrap();
        assert_eq!(img.get(20, 10), SLOWEST_SHADE);
        assert_eq!(img.get(60, 50), 0);
        assert_eq!(img.get(90, 150), BACKGROUND);
    }

    #[test]
    fn single_stationary_trajectory_is_a_light_blob() {
        let img = emit_plot(&[track(4, 0.0, 30.0)], 64, 64).unwrap();
        let marked: Vec<u8> = img.data.iter().copied().filter(|&v| v != BACKGROUND).collect();
        assert_eq!(marked.len(), 9);
        assert!(marked.iter().all(|&v| v == SLOWEST_SHADE));
    }

    #[test]
    fn shades_depend_on_rank_only() {
        let a = emit_plot(&[track(0, 1.0, 20.0), track(1, 2.0, 60.0)], 100, 100).unwrap();
        let b = emit_plot(&[track(0, 1.0, 20.0), track(1, 4.0, 60.0)], 100, 100).unwrap();
        assert_eq!(a.get(20, 15), b.get(20, 15));
        assert!(emit_plot(&[], 0, 10).is_err());
    }
}
