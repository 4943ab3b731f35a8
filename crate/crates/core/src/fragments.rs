//! Configuration-based matching of detections into short track fragments.
//!
//! Consecutive frames are linked greedily by ascending configuration cost
//!
//! ```text
//! D = d + w·|c_i − c_j| + w·|sin(α_i − α_j)| + |dx_i − dx_j| + |dy_i − dy_j|
//! ```
//!
//! where `d` is the Euclidean distance and the last two terms compare the
//! head's previous per-frame step with the step the candidate would imply.
//! Only pairs with `D < cost_threshold` are ever linked; no global assignment
//! is attempted.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use crate::detection::{
    parse_detection_cells, parse_frame, read_csv_rows, Detection, DetectionId, DetectionTable,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const FRAGMENT_HEADER: &str = "fragment_id,frame,x,y,class,angle";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatcherConfig {
    /// Weight of the class and axis-orientation terms.
    pub w: f64,
    /// Pairs are linked only while their cost is strictly below this.
    pub cost_threshold: f64,
    /// Largest frame gap a head may bridge.
    pub max_gap: usize,
    /// Chains must have strictly more detections than this to be kept.
    pub min_fragment_length: usize,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig { w: 20.0, cost_threshold: 50.0, max_gap: 10, min_fragment_length: 30 }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.cost_threshold > 0.0) || self.max_gap < 1 || self.min_fragment_length < 1 {
            return Err(Error::Config(format!("matcher parameters must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Similarity kernel over already extracted terms. `motion` is the head's
/// previous per-frame step, `step` the candidate's.
pub fn configuration_cost<T: Scalar>(
    distance: T,
    class_diff: T,
    angle_diff: T,
    motion: Option<[T; 2]>,
    step: [T; 2],
    w: T,
) -> T {
    let motion_terms = match motion {
        Some([mx, my]) => (mx - step[0]).abs() + (my - step[1]).abs(),
        None => T::zero(),
    };
    distance + w * class_diff.abs() + w * angle_diff.sin().abs() + motion_terms
}

/// Open end of a chain being grown by the matcher.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackHead {
    pub fragment_id: usize,
    pub last_id: DetectionId,
    pub last_detection: Detection,
    /// Per-frame displacement of the last link, `None` for a fresh head.
    pub last_motion: Option<(f64, f64)>,
    pub frames_since_match: usize,
}

impl TrackHead {
    pub fn new(fragment_id: usize, id: DetectionId, det: Detection) -> Self {
        TrackHead { fragment_id, last_id: id, last_detection: det, last_motion: None, frames_since_match: 0 }
    }

    /// Per-frame step from the head to `det`.
    pub fn step_to(&self, det: &Detection) -> (f64, f64) {
        let gap = det.frame().saturating_sub(self.last_detection.frame()).max(1) as f64;
        ((det.x() - self.last_detection.x()) / gap, (det.y() - self.last_detection.y()) / gap)
    }
}

pub fn pair_cost(head: &TrackHead, det: &Detection, cfg: &MatcherConfig) -> f64 {
    let last = &head.last_detection;
    let (sx, sy) = head.step_to(det);
    configuration_cost(
        last.distance_to(det.x(), det.y()),
        f64::from(last.class().code()) - f64::from(det.class().code()),
        last.angle() - det.angle(),
        head.last_motion.map(|(mx, my)| [mx, my]),
        [sx, sy],
        cfg.w,
    )
}

/// Greedy one-frame assignment. Returns `(head position, detection index)`
/// pairs in acceptance order.
pub fn match_step(heads: &[TrackHead], detections: &[Detection], cfg: &MatcherConfig) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (h, head) in heads.iter().enumerate() {
        let (hx, hy) = head.last_detection.position();
        for (d, det) in detections.iter().enumerate() {
            // every term but the distance is non-negative
            if det.distance_to(hx, hy) >= cfg.cost_threshold {
                continue;
            }
            let cost = pair_cost(head, det, cfg);
            if cost < cfg.cost_threshold {
                pairs.push((cost, h, d));
            }
        }
    }
    pairs.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(heads[a.1].fragment_id.cmp(&heads[b.1].fragment_id))
            .then(a.2.cmp(&b.2))
    });
    let mut head_used = vec![false; heads.len()];
    let mut det_used = vec![false; detections.len()];
    let mut out = Vec::new();
    for (_, h, d) in pairs {
        if !head_used[h] && !det_used[d] {
            head_used[h] = true;
            det_used[d] = true;
            out.push((h, d));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrackFragment {
    pub id: usize,
    /// Members in strictly increasing frame order.
    pub detections: Vec<DetectionId>,
}

impl TrackFragment {
    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn first_frame(&self) -> usize {
        self.detections[0].frame
    }

    pub fn last_frame(&self) -> usize {
        self.detections[self.detections.len() - 1].frame
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FragmentSet {
    pub fragments: Vec<TrackFragment>,
    /// Detections not in any kept fragment, sorted.
    pub residuals: Vec<DetectionId>,
}

/// Runs the frame loop over a whole table.
pub fn build_fragments(table: &DetectionTable, cfg: &MatcherConfig) -> FragmentSet {
    let mut active: Vec<TrackHead> = Vec::new();
    let mut chains: Vec<Vec<DetectionId>> = Vec::new();
    let mut closed: Vec<usize> = Vec::new();

    for (frame, dets) in table.frames() {
        // heads whose next match would exceed the gap budget are retired
        active.retain(|h| {
            let keep = frame - h.last_detection.frame() <= cfg.max_gap;
            if !keep {
                closed.push(h.fragment_id);
            }
            keep
        });
        let assigned = match_step(&active, dets, cfg);
        let mut det_taken = vec![false; dets.len()];
        for &(h, d) in &assigned {
            let det = dets[d];
            let id = DetectionId { frame, index: d };
            let head = &mut active[h];
            head.last_motion = Some(head.step_to(&det));
            head.last_detection = det;
            head.last_id = id;
            head.frames_since_match = 0;
            chains[head.fragment_id].push(id);
            det_taken[d] = true;
        }
        for head in active.iter_mut() {
            if head.last_detection.frame() != frame {
                head.frames_since_match = frame - head.last_detection.frame();
            }
        }
        for (d, det) in dets.iter().enumerate() {
            if !det_taken[d] {
                let id = DetectionId { frame, index: d };
                active.push(TrackHead::new(chains.len(), id, *det));
                chains.push(vec![id]);
            }
        }
    }

    let mut kept: Vec<Vec<DetectionId>> = Vec::new();
    let mut residuals = Vec::new();
    for chain in chains {
        if chain.len() > cfg.min_fragment_length {
            kept.push(chain);
        } else {
            residuals.extend(chain);
        }
    }
    kept.sort_by_key(|c| c[0]);
    residuals.sort();
    let fragments = kept
        .into_iter()
        .enumerate()
        .map(|(id, detections)| TrackFragment { id, detections })
        .collect();
    FragmentSet { fragments, residuals }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InitialSet {
    pub anchor_frame: usize,
    /// Ids of the fragments present at the anchor frame, ascending.
    pub fragment_ids: Vec<usize>,
}

/// Picks the frame within the first `window_seconds` covered by the most
/// fragments longer than `min_len`; earliest frame wins ties.
pub fn select_initial_set(
    fragments: &[TrackFragment],
    fps: f64,
    window_seconds: f64,
    min_len: usize,
) -> Result<InitialSet> {
    let window = (window_seconds * fps).round().max(0.0) as usize;
    if window == 0 {
        return Err(Error::NoInitialSet("empty search window".into()));
    }
    let long: Vec<&TrackFragment> = fragments.iter().filter(|f| f.len() > min_len).collect();
    // sweep over span starts and ends
    let mut delta = vec![0i64; window + 1];
    for f in &long {
        if f.first_frame() < window {
            delta[f.first_frame()] += 1;
            delta[(f.last_frame() + 1).min(window)] -= 1;
        }
    }
    let mut best = (0i64, 0usize);
    let mut running = 0i64;
    for (frame, d) in delta.iter().take(window).enumerate() {
        running += d;
        if running > best.0 {
            best = (running, frame);
        }
    }
    if best.0 == 0 {
        return Err(Error::NoInitialSet(format!(
            "no fragment longer than {min_len} within the first {window} frames"
        )));
    }
    let anchor = best.1;
    let fragment_ids = long
        .iter()
        .filter(|f| f.first_frame() <= anchor && anchor <= f.last_frame())
        .map(|f| f.id)
        .collect();
    Ok(InitialSet { anchor_frame: anchor, fragment_ids })
}

/// Writes `fragment_id,frame,x,y,class,angle` rows grouped by fragment.
pub fn write_fragments<W: Write>(table: &DetectionTable, set: &FragmentSet, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{FRAGMENT_HEADER}")?;
    for frag in &set.fragments {
        for &id in &frag.detections {
            let d = table.detection(id);
            writeln!(out, "{},{},{}", frag.id, d.frame(), d.value_cells())?;
        }
    }
    Ok(())
}

/// Writes residual singles with fragment id `-1`.
pub fn write_residuals<W: Write>(table: &DetectionTable, set: &FragmentSet, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{FRAGMENT_HEADER}")?;
    for &id in &set.residuals {
        let d = table.detection(id);
        writeln!(out, "-1,{},{}", d.frame(), d.value_cells())?;
    }
    Ok(())
}

/// Rebuilds a detection table and fragment set from the two fragment CSVs.
/// Rows enter the table in file order, fragments first.
pub fn read_fragment_files<R1: Read, R2: Read>(fragments: R1, residuals: R2) -> Result<(DetectionTable, FragmentSet)> {
    let mut table = DetectionTable::new();
    let mut set = FragmentSet::default();
    let mut ids_seen = BTreeSet::new();
    read_csv_rows(fragments, FRAGMENT_HEADER, |cells, line| {
        let fid: i64 = cells[0]
            .parse()
            .map_err(|_| Error::Parse { line, message: format!("non-numeric fragment_id '{}'", cells[0]) })?;
        let fid = usize::try_from(fid)
            .map_err(|_| Error::Parse { line, message: "negative fragment_id in fragment file".into() })?;
        let frame = parse_frame(cells[1], line)?;
        let det = parse_detection_cells(frame, &cells[2..], line)?;
        let id = table.push(det);
        match set.fragments.last_mut() {
            Some(f) if f.id == fid => {
                if f.last_frame() >= frame {
                    return Err(Error::Parse { line, message: "fragment frames not ascending".into() });
                }
                f.detections.push(id);
            }
            _ => {
                if !ids_seen.insert(fid) {
                    return Err(Error::Parse { line, message: format!("fragment {fid} rows not grouped") });
                }
                set.fragments.push(TrackFragment { id: fid, detections: vec![id] });
            }
        }
        Ok(())
    })?;
    read_csv_rows(residuals, FRAGMENT_HEADER, |cells, line| {
        if cells[0].trim() != "-1" {
            return Err(Error::Parse { line, message: "residual rows must have fragment_id -1".into() });
        }
        let frame = parse_frame(cells[1], line)?;
        let det = parse_detection_cells(frame, &cells[2..], line)?;
        set.residuals.push(table.push(det));
        Ok(())
    })?;
    set.fragments.sort_by_key(|f| f.id);
    set.residuals.sort();
    Ok((table, set))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::ObjectClass;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn det(frame: usize, x: f64, y: f64, class: ObjectClass, angle: f64) -> Detection {
        Detection::new(frame, x, y, class, angle).unwrap()
    }

    fn head(id: usize, d: Detection, motion: Option<(f64, f64)>) -> TrackHead {
        let mut h = TrackHead::new(id, DetectionId { frame: d.frame(), index: 0 }, d);
        h.last_motion = motion;
        h
    }

    #[test]
    fn cost_vanishes_for_identical_configuration() {
        let a = det(0, 10.0, 10.0, ObjectClass::FullBee, 1.0);
        let b = det(1, 10.0, 10.0, ObjectClass::FullBee, 1.0);
        assert_eq!(pair_cost(&head(0, a, Some((0.0, 0.0))), &b, &MatcherConfig::default()), 0.0);
    }

    #[test]
    fn class_change_costs_w() {
        let a = det(0, 10.0, 10.0, ObjectClass::FullBee, 0.0);
        let b = det(1, 10.0, 10.0, ObjectClass::Abdomen, 0.0);
        assert_eq!(pair_cost(&head(0, a, Some((0.0, 0.0))), &b, &MatcherConfig::default()), 20.0);
    }

    #[test]
    fn head_tail_flip_is_free() {
        let a = det(0, 10.0, 10.0, ObjectClass::FullBee, 0.0);
        let b = det(1, 10.0, 10.0, ObjectClass::FullBee, PI);
        let c = pair_cost(&head(0, a, None), &b, &MatcherConfig::default());
        assert!(c.abs() < 1e-12, "{c}");
    }

    #[test]
    fn perpendicular_at_distance_30_hits_the_cut() {
        let a = det(0, 0.0, 0.0, ObjectClass::FullBee, 0.0);
        let b = det(1, 30.0, 0.0, ObjectClass::FullBee, FRAC_PI_2);
        let cfg = MatcherConfig::default();
        let c = pair_cost(&head(0, a, Some((30.0, 0.0))), &b, &cfg);
        assert_eq!(c, 50.0);
        assert!(match_step(&[head(0, a, Some((30.0, 0.0)))], &[b], &cfg).is_empty());
    }

    #[test]
    fn motion_is_normalized_by_gap() {
        let a = det(0, 0.0, 0.0, ObjectClass::FullBee, 0.0);
        let b = det(3, 6.0, 0.0, ObjectClass::FullBee, 0.0);
        let c = pair_cost(&head(0, a, Some((2.0, 0.0))), &b, &MatcherConfig::default());
        assert!((c - 6.0).abs() < 1e-12);
    }

    #[test]
    fn greedy_prefers_cheaper_head() {
        let cfg = MatcherConfig::default();
        let d = det(1, 0.0, 0.0, ObjectClass::FullBee, 0.0);
        let h0 = head(0, det(0, 7.0, 0.0, ObjectClass::FullBee, 0.0), None);
        let h1 = head(1, det(0, 5.0, 0.0, ObjectClass::FullBee, 0.0), None);
        assert_eq!(match_step(&[h0.clone(), h1.clone()], &[d], &cfg), vec![(1, 0)]);
        assert_eq!(match_step(&[h0], &[det(1, 7.0, 3.0, ObjectClass::FullBee, 0.0)], &cfg), vec![(0, 0)]);
    }

    fn straight_line(n: usize) -> DetectionTable {
        let mut t = DetectionTable::new();
        for f in 0..n {
            t.push(det(f, 100.0 + 2.0 * f as f64, 50.0, ObjectClass::FullBee, 0.0));
        }
        t
    }

    #[test]
    fn straight_walker_forms_one_fragment() {
        let set = build_fragments(&straight_line(100), &MatcherConfig::default());
        assert_eq!(set.fragments.len(), 1);
        assert_eq!(set.fragments[0].len(), 100);
        assert!(set.residuals.is_empty());
    }

    #[test]
    fn short_track_dissolves() {
        let set = build_fragments(&straight_line(20), &MatcherConfig::default());
        assert!(set.fragments.is_empty());
        assert_eq!(set.residuals.len(), 20);
        // exactly min length is still too short
        let set = build_fragments(&straight_line(30), &MatcherConfig::default());
        assert!(set.fragments.is_empty());
        assert_eq!(build_fragments(&straight_line(31), &MatcherConfig::default()).fragments.len(), 1);
    }

    #[test]
    fn empty_table() {
        assert_eq!(build_fragments(&DetectionTable::new(), &MatcherConfig::default()), FragmentSet::default());
    }

    #[test]
    fn gaps_up_to_max_gap_are_bridged() {
        let cfg = MatcherConfig::default();
        let mut t = DetectionTable::new();
        // 39 -> 49 skips 9 frames: a frame difference of max_gap is bridged
        for f in (0..40).chain(49..90) {
            t.push(det(f, 100.0, 100.0, ObjectClass::FullBee, 0.0));
        }
        let set = build_fragments(&t, &cfg);
        assert_eq!(set.fragments.len(), 1);

        let mut t = DetectionTable::new();
        for f in (0..40).chain(50..90) {
            t.push(det(f, 100.0, 100.0, ObjectClass::FullBee, 0.0));
        }
        assert_eq!(build_fragments(&t, &cfg).fragments.len(), 2);
    }

    fn frag(id: usize, start: usize, len: usize) -> TrackFragment {
        TrackFragment { id, detections: (start..start + len).map(|frame| DetectionId { frame, index: id }).collect() }
    }

    #[test]
    fn initial_set_anchor() {
        let frags = vec![frag(0, 0, 150), frag(1, 10, 150), frag(2, 40, 150), frag(3, 200, 20)];
        let s = select_initial_set(&frags, 10.0, 30.0, 100).unwrap();
        assert_eq!(s.anchor_frame, 40);
        assert_eq!(s.fragment_ids, vec![0, 1, 2]);
        assert!(matches!(
            select_initial_set(&[frag(0, 0, 90)], 10.0, 30.0, 100),
            Err(Error::NoInitialSet(_))
        ));
        assert!(select_initial_set(&frags, 10.0, 0.0, 100).is_err());
    }

    #[test]
    fn fragment_files_round_trip() {
        let mut t = straight_line(40);
        t.push(det(3, 400.0, 400.0, ObjectClass::Abdomen, 0.0));
        let set = build_fragments(&t, &MatcherConfig::default());
        let (mut a, mut b) = (Vec::new(), Vec::new());
        write_fragments(&t, &set, &mut a).unwrap();
        write_residuals(&t, &set, &mut b).unwrap();
        let (t2, set2) = read_fragment_files(a.as_slice(), b.as_slice()).unwrap();
        assert_eq!(t2.len(), t.len());
        assert_eq!(set2.fragments.len(), 1);
        assert_eq!(set2.residuals.len(), 1);
        let (mut a2, mut b2) = (Vec::new(), Vec::new());
        write_fragments(&t2, &set2, &mut a2).unwrap();
        write_residuals(&t2, &set2, &mut b2).unwrap();
        assert_eq!((a, b), (a2, b2));
    }
}
