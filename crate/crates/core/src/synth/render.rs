//! Procedural frames: a comb-like background and one textured stamp per
//! visible agent. Every pixel is a pure function of (seed, frame, x, y) and
//! the poses, so any region can be rendered on its own.

use crate::appearance::{patch_origin, Patch, PATCH_SIZE};
use crate::detection::ObjectClass;
use crate::error::{Error, Result};
use crate::image::{frame_file_name, FrameImage, FrameSource};
use crate::rng::{hash3, mix64};

use super::{AgentPose, GroundTruth, HiveScenario};

pub const BODY_SEMI_MAJOR: f64 = 30.0;
pub const BODY_SEMI_MINOR: f64 = 15.0;
pub const ABDOMEN_RADIUS: f64 = 25.0;
const STAMP_REACH: f64 = 31.0;
const COMB_SPACING: f64 = 18.0;
const FRAME_NOISE: u64 = 9;
const STATIC_NOISE: u64 = 17;
const CODE_DIM: usize = 4;
const CODE_AMPLITUDE: f64 = 132.0;
/// The profile is flat beyond this radius.
const CODE_RADIUS: f64 = 30.0;

/// Gray levels of one agent's stamp. The identity is a radial profile, so it
/// looks the same under any rotation or mirror of the body.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentTexture {
    /// Unit code vector; the profile is `128 + A * sum_j code[j] * basis_j(r)`.
    pub code: [f64; CODE_DIM],
}

impl AgentTexture {
    /// Texture from a seed, pulled toward the shared template by `blend`.
    pub fn from_seed(seed: u64, blend: f64) -> Self {
        let mut rng = crate::rng::indexed_substream(seed, "texture", 0);
        let normal = rand_distr::StandardNormal;
        let mut code = [0.0; CODE_DIM];
        for c in code.iter_mut() {
            *c = rand_distr::Distribution::<f64>::sample(&normal, &mut rng);
        }
        let template = [1.0, 0.0, 0.0, 0.0];
        normalize(&mut code);
        for (c, t) in code.iter_mut().zip(template) {
            *c = (1.0 - blend) * *c + blend * t;
        }
        AgentTexture { code }
    }

    /// Low-frequency cosine series in the radius: smooth enough that a few
    /// pixels of detection error barely change a centered patch.
    fn profile(&self, r: f64) -> f64 {
        let rr = r.min(CODE_RADIUS);
        let v: f64 = (0..CODE_DIM)
            .map(|j| self.code[j] * (std::f64::consts::PI * j as f64 * rr / CODE_RADIUS).cos())
            .sum();
        (128.0 + CODE_AMPLITUDE * v).clamp(10.0, 245.0)
    }

    /// Stamp value at image offset `(dx, dy)` from the agent center, if covered.
    pub fn stamp(&self, pose: &AgentPose, dx: f64, dy: f64) -> Option<f64> {
        match pose.class {
            ObjectClass::FullBee => {
                let (s, c) = pose.angle.sin_cos();
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                let q = (u / BODY_SEMI_MAJOR).powi(2) + (v / BODY_SEMI_MINOR).powi(2);
                (q <= 1.0).then(|| self.profile(u.hypot(v)))
            }
            ObjectClass::Abdomen => {
                let r = dx.hypot(dy);
                (r <= ABDOMEN_RADIUS).then(|| self.profile(r))
            }
        }
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
}

#[derive(Clone, Debug)]
pub struct Renderer {
    width: usize,
    height: usize,
    seed: u64,
    /// Aligned with the truth's agent order.
    textures: Vec<AgentTexture>,
    /// Agent indices by descending id, so the first hit is drawn on top.
    draw_order: Vec<usize>,
}

impl Renderer {
    pub fn new(scenario: &HiveScenario) -> Self {
        let textures =
            scenario.agents.iter().map(|a| AgentTexture::from_seed(a.texture_seed, scenario.texture_blend)).collect();
        let mut draw_order: Vec<usize> = (0..scenario.agents.len()).collect();
        draw_order.sort_by_key(|&i| std::cmp::Reverse(scenario.agents[i].id));
        Renderer { width: scenario.width, height: scenario.height, seed: mix64(scenario.seed ^ 0x5eed_c0b5), textures, draw_order }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn textures(&self) -> &[AgentTexture] {
        &self.textures
    }

    fn comb(&self, x: i64, y: i64) -> f64 {
        let row_h = COMB_SPACING * 3f64.sqrt() / 2.0;
        let (fx, fy) = (x as f64, y as f64);
        let j0 = (fy / row_h).round() as i64;
        let mut best = (f64::INFINITY, 0i64, 0i64);
        for j in j0 - 1..=j0 + 1 {
            let off = if j.rem_euclid(2) == 1 { COMB_SPACING / 2.0 } else { 0.0 };
            let i0 = ((fx - off) / COMB_SPACING).round() as i64;
            for i in i0 - 1..=i0 + 1 {
                let d = (fx - (i as f64 * COMB_SPACING + off)).hypot(fy - j as f64 * row_h);
                if d < best.0 {
                    best = (d, i, j);
                }
            }
        }
        let (d, i, j) = best;
        let interior = 85.0 + (hash3(self.seed, i as u64, j as u64, 1) % 40) as f64;
        let t = ((d / COMB_SPACING - 0.32) / 0.14).clamp(0.0, 1.0);
        interior + (170.0 - interior) * t * t * (3.0 - 2.0 * t)
    }

    fn noise(&self, frame: usize, x: i64, y: i64) -> f64 {
        let fixed = (hash3(self.seed, x as u64, y as u64, 2) % STATIC_NOISE) as f64 - (STATIC_NOISE / 2) as f64;
        let moving = (hash3(self.seed ^ mix64(frame as u64 + 3), x as u64, y as u64, 3) % FRAME_NOISE) as f64
            - (FRAME_NOISE / 2) as f64;
        fixed + moving
    }

    /// Pixels of the `w`x`h` window with top-left `(x0, y0)`; pixels outside
    /// the image are 0.
    pub fn render_region(&self, truth: &GroundTruth, frame: usize, x0: i64, y0: i64, w: usize, h: usize) -> Vec<u8> {
        let poses = truth.frame(frame);
        let (x1, y1) = (x0 + w as i64, y0 + h as i64);
        let nearby: Vec<usize> = self
            .draw_order
            .iter()
            .copied()
            .filter(|&i| {
                let p = &poses[i];
                p.visible
                    && p.x + STAMP_REACH >= x0 as f64
                    && p.x - STAMP_REACH < x1 as f64
                    && p.y + STAMP_REACH >= y0 as f64
                    && p.y - STAMP_REACH < y1 as f64
            })
            .collect();
        let mut out = vec![0u8; w * h];
        for (r, row) in out.chunks_exact_mut(w).enumerate() {
            let y = y0 + r as i64;
            if y < 0 || y >= self.height as i64 {
                continue;
            }
            for (c, px) in row.iter_mut().enumerate() {
                let x = x0 + c as i64;
                if x < 0 || x >= self.width as i64 {
                    continue;
                }
                let base = nearby
                    .iter()
                    .find_map(|&i| self.textures[i].stamp(&poses[i], x as f64 - poses[i].x, y as f64 - poses[i].y))
                    .unwrap_or_else(|| self.comb(x, y));
                *px = (base + self.noise(frame, x, y)).round().clamp(0.0, 255.0) as u8;
            }
        }
        out
    }

    pub fn render_frame(&self, truth: &GroundTruth, frame: usize) -> FrameImage {
        let data = self.render_region(truth, frame, 0, 0, self.width, self.height);
        FrameImage { width: self.width, height: self.height, data }
    }
}

/// Frame source that renders only the requested patch window.
pub struct SyntheticFrames<'a> {
    renderer: &'a Renderer,
    truth: &'a GroundTruth,
}

impl<'a> SyntheticFrames<'a> {
    pub fn new(renderer: &'a Renderer, truth: &'a GroundTruth) -> Self {
        SyntheticFrames { renderer, truth }
    }
}

impl FrameSource for SyntheticFrames<'_> {
    fn width(&self) -> usize {
        self.renderer.width
    }

    fn height(&self) -> usize {
        self.renderer.height
    }

    fn patch(&self, frame: usize, center: (f64, f64)) -> Result<Patch> {
        if frame >= self.truth.num_frames() {
            return Err(Error::MissingFile(frame_file_name(frame).into()));
        }
        let (x, y) = center;
        let (w, h) = (self.renderer.width, self.renderer.height);
        if !(x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64) {
            return Err(Error::CenterOutsideImage { x, y, width: w, height: h });
        }
        let (x0, y0) = patch_origin(center);
        let pixels = self.renderer.render_region(self.truth, frame, x0, y0, PATCH_SIZE, PATCH_SIZE);
        Patch::from_pixels(pixels, frame, center)
    }

    fn num_frames(&self) -> Option<usize> {
        Some(self.truth.num_frames())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{simulate, AgentMode, AgentSpec};

    fn scenario(n: usize, seed: u64) -> HiveScenario {
        HiveScenario {
            width: 160,
            height: 120,
            num_frames: 3,
            fps: 10.0,
            agents: (0..n as u64)
                .map(|id| AgentSpec {
                    id,
                    mode: AgentMode::Walker,
                    texture_seed: id + 100,
                    cell_schedule: vec![],
                    occlusion_schedule: vec![],
                })
                .collect(),
            walker_speed: 2.0,
            heading_persistence: 0.5,
            turn_sigma: 0.1,
            jitter_sigma: 0.0,
            margin: 20.0,
            min_separation: 0.0,
            texture_blend: 0.0,
            seed,
        }
    }

    #[test]
    fn backgrounds_depend_on_seed() {
        let (s1, s2) = (scenario(0, 1), scenario(0, 2));
        let (t1, t2) = (simulate(&s1).unwrap(), simulate(&s2).unwrap());
        let a = Renderer::new(&s1).render_frame(&t1, 0);
        let b = Renderer::new(&s2).render_frame(&t2, 0);
        assert_ne!(a.data, b.data);
        assert_eq!(a.to_pgm(), Renderer::new(&s1).render_frame(&t1, 0).to_pgm());
    }

    #[test]
    fn patches_equal_crops_of_the_full_frame() {
        let s = scenario(3, 5);
        let truth = simulate(&s).unwrap();
        let renderer = Renderer::new(&s);
        let source = SyntheticFrames::new(&renderer, &truth);
        let full = renderer.render_frame(&truth, 2);
        for center in [(0.0, 0.0), (80.4, 60.6), (159.9, 119.0), (truth.pose(2, 1).x, truth.pose(2, 1).y)] {
            assert_eq!(source.patch(2, center).unwrap(), Patch::extract(&full, 2, center).unwrap());
        }
        assert!(source.patch(3, (1.0, 1.0)).is_err());
        assert!(source.patch(0, (160.0, 1.0)).is_err());
    }

    #[test]
    fn quarter_turn_rotates_the_stamp() {
        let texture = AgentTexture::from_seed(9, 0.0);
        let pose = |angle| AgentPose { x: 0.0, y: 0.0, angle, class: ObjectClass::FullBee, visible: true };
        let (a, b) = (pose(0.0), pose(std::f64::consts::FRAC_PI_2));
        let (mut covered, mut mismatched) = (0, 0);
        for dy in -35i32..=35 {
            for dx in -35i32..=35 {
                let here = texture.stamp(&a, dx as f64, dy as f64);
                // rotating the offset by +90 degrees maps (dx, dy) to (-dy, dx)
                let there = texture.stamp(&b, -dy as f64, dx as f64);
                covered += here.is_some() as usize;
                let same = match (here, there) {
                    (Some(p), Some(q)) => (p - q).abs() < 1e-9,
                    (p, q) => p.is_none() && q.is_none(),
                };
                if !same {
                    mismatched += 1;
                }
            }
        }
        assert!(covered > 1300, "ellipse area is about 1414 pixels, got {covered}");
        assert!(mismatched * 100 <= covered, "{mismatched} of {covered} pixels differ");
    }

    #[test]
    fn higher_id_is_drawn_on_top() {
        let mut s = scenario(2, 4);
        s.walker_speed = 0.0;
        s.turn_sigma = 0.0;
        let mut truth = simulate(&s).unwrap();
        for p in truth.poses[0].iter_mut() {
            p.x = 80.0;
            p.y = 60.0;
        }
        let r = Renderer::new(&s);
        let px = r.render_region(&truth, 0, 80, 60, 1, 1)[0] as f64;
        let top = r.textures()[1].profile(0.0);
        assert!((px - top).abs() <= 13.0, "{px} vs {top}");
    }

    #[test]
    fn full_blend_makes_textures_identical() {
        assert_eq!(AgentTexture::from_seed(1, 1.0), AgentTexture::from_seed(2, 1.0));
        assert_ne!(AgentTexture::from_seed(1, 0.5), AgentTexture::from_seed(2, 0.5));
    }
}
