//! Synthetic stereo worlds: a textured ground plane with surface regions and
//! axis-aligned box obstacles, ray cast into rectified stereo pairs plus an
//! exact depth image for the left camera.

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, StereoRig};
use crate::image::{DepthImage, GrayImage};
use crate::monitor::GridSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SurfaceKind {
    LambertianTextured,
    Textureless,
    ReflectiveGround,
    DarkStripe,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Footprint {
    Disc { center: [f64; 2], radius: f64 },
    Rect { min: [f64; 2], max: [f64; 2] },
}

impl Footprint {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Footprint::Disc { center, radius } => {
                let (dx, dy) = (x - center[0], y - center[1]);
                dx * dx + dy * dy <= radius * radius
            }
            Footprint::Rect { min, max } => x >= min[0] && x <= max[0] && y >= min[1] && y <= max[1],
        }
    }

    /// Euclidean distance from (x, y) to the region (zero inside).
    pub fn distance(&self, x: f64, y: f64) -> f64 {
        match *self {
            Footprint::Disc { center, radius } => {
                ((x - center[0]).hypot(y - center[1]) - radius).max(0.0)
            }
            Footprint::Rect { min, max } => {
                let dx = (min[0] - x).max(0.0).max(x - max[0]);
                let dy = (min[1] - y).max(0.0).max(y - max[1]);
                dx.hypot(dy)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundRegion {
    pub footprint: Footprint,
    pub kind: SurfaceKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ground {
    pub kind: SurfaceKind,
    /// Later regions override earlier ones where they overlap.
    pub regions: Vec<GroundRegion>,
    pub texture_seed: u64,
}

impl Ground {
    pub fn kind_at(&self, x: f64, y: f64) -> SurfaceKind {
        self.regions
            .iter()
            .rev()
            .find(|r| r.footprint.contains(x, y))
            .map_or(self.kind, |r| r.kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxObstacle {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub kind: SurfaceKind,
    pub texture_seed: u64,
}

impl BoxObstacle {
    pub fn footprint(&self) -> Footprint {
        Footprint::Rect { min: [self.min[0], self.min[1]], max: [self.max[0], self.max[1]] }
    }
}

/// A static world in world coordinates (z up, ground at z = 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub ground: Ground,
    pub obstacles: Vec<BoxObstacle>,
}

impl Scene {
    pub fn empty(texture_seed: u64) -> Self {
        Self {
            ground: Ground { kind: SurfaceKind::LambertianTextured, regions: vec![], texture_seed },
            obstacles: vec![],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.obstacles.iter().enumerate() {
            if b.min[2] < 0.0 {
                return Err(Error::invalid("scene.obstacles", format!("box {i} extends below the ground")));
            }
            if (0..3).any(|a| b.min[a] >= b.max[a]) {
                return Err(Error::invalid("scene.obstacles", format!("box {i} has an empty extent")));
            }
        }
        Ok(())
    }
}

/// Appearance and sensor-model knobs for the renderer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderParams {
    /// Gaussian noise added to the depth image (m).
    pub depth_noise_sigma: f64,
    /// Samples per pixel along each axis for the intensity images.
    pub supersample: usize,
    /// Depth below the ground of the mirrored surface seen in reflective regions (m).
    pub reflection_depth: f64,
    /// Finest value-noise cell size on the ground (m).
    pub ground_texture_scale: f64,
    /// Finest value-noise cell size on obstacle faces (m).
    pub box_texture_scale: f64,
    /// Value-noise cell size of the reflected surface (m).
    pub glare_texture_scale: f64,
    pub textureless_intensity: f32,
    pub dark_stripe_intensity: f32,
    pub sky_intensity: f32,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            depth_noise_sigma: 0.0,
            supersample: 2,
            reflection_depth: 0.5,
            ground_texture_scale: 0.02,
            box_texture_scale: 0.015,
            glare_texture_scale: 0.03,
            textureless_intensity: 0.55,
            dark_stripe_intensity: 0.03,
            sky_intensity: 0.9,
        }
    }
}

impl RenderParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.depth_noise_sigma >= 0.0) {
            return Err(Error::invalid("render.depth_noise_sigma", "must be non-negative"));
        }
        if self.supersample == 0 {
            return Err(Error::invalid("render.supersample", "must be at least 1"));
        }
        if !(self.reflection_depth > 0.0) {
            return Err(Error::invalid("render.reflection_depth", "must be positive"));
        }
        for (name, s) in [
            ("render.ground_texture_scale", self.ground_texture_scale),
            ("render.box_texture_scale", self.box_texture_scale),
            ("render.glare_texture_scale", self.glare_texture_scale),
        ] {
            if !(s > 0.0) {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        Ok(())
    }
}

/// One synchronized observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub left: GrayImage,
    pub right: GrayImage,
    pub depth: DepthImage,
    pub pose: Pose,
    pub frame_id: u32,
}

// ---------------------------------------------------------------------------
// Procedural texture

#[inline]
fn hash3(a: i64, b: i64, seed: u64) -> u64 {
    let mut z = seed
        ^ (a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn lattice_value(ix: i64, iy: i64, seed: u64) -> f64 {
    (hash3(ix, iy, seed) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[inline]
fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let (tx, ty) = (smooth(x - fx), smooth(y - fy));
    let a = lattice_value(ix, iy, seed);
    let b = lattice_value(ix + 1, iy, seed);
    let c = lattice_value(ix, iy + 1, seed);
    let d = lattice_value(ix + 1, iy + 1, seed);
    let top = a + (b - a) * tx;
    let bottom = c + (d - c) * tx;
    top + (bottom - top) * ty
}

/// Three-octave value noise in [0, 1]; `scale` is the finest cell size.
fn fbm(x: f64, y: f64, scale: f64, seed: u64) -> f64 {
    let s = 1.0 / scale;
    0.5 * value_noise(x * s, y * s, seed)
        + 0.3 * value_noise(x * s * 0.5, y * s * 0.5, seed ^ 0x51)
        + 0.2 * value_noise(x * s * 0.25, y * s * 0.25, seed ^ 0xA7)
}

fn stretch(v: f64) -> f64 {
    // value noise concentrates around 0.5; spread it back out
    (0.5 + 1.8 * (v - 0.5)).clamp(0.0, 1.0)
}

// ---------------------------------------------------------------------------
// Ray casting

#[derive(Debug, Clone, Copy)]
enum Hit {
    Ground { t: f64 },
    Box { t: f64, index: usize, face: usize },
}

impl Hit {
    fn t(&self) -> f64 {
        match *self {
            Hit::Ground { t } | Hit::Box { t, .. } => t,
        }
    }
}

/// Slab test; returns the entry distance and the axis-face index hit.
#[inline]
fn ray_box(o: &Point3<f64>, d: &Vector3<f64>, b: &BoxObstacle) -> Option<(f64, usize)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut face = 0;
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a] < b.min[a] || o[a] > b.max[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let (mut t0, mut t1) = ((b.min[a] - o[a]) * inv, (b.max[a] - o[a]) * inv);
        // face 2a is the min side, 2a+1 the max side
        let mut f = 2 * a;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
            f = 2 * a + 1;
        }
        if t0 > t_near {
            t_near = t0;
            face = f;
        }
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    (t_near > 1e-9).then_some((t_near, face))
}

struct Caster<'a> {
    scene: &'a Scene,
    params: &'a RenderParams,
}

impl Caster<'_> {
    fn cast(&self, o: &Point3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        if d.z < 0.0 {
            best = Some(Hit::Ground { t: -o.z / d.z });
        }
        for (index, b) in self.scene.obstacles.iter().enumerate() {
            if let Some((t, face)) = ray_box(o, d, b) {
                if best.map_or(true, |h| t < h.t()) {
                    best = Some(Hit::Box { t, index, face });
                }
            }
        }
        best
    }

    fn shade(&self, o: &Point3<f64>, d: &Vector3<f64>, hit: Option<Hit>) -> f32 {
        let p = self.params;
        let Some(hit) = hit else { return p.sky_intensity };
        let x = o + d * hit.t();
        match hit {
            Hit::Ground { .. } => {
                let g = &self.scene.ground;
                match g.kind_at(x.x, x.y) {
                    SurfaceKind::LambertianTextured => {
                        (0.15 + 0.6 * stretch(fbm(x.x, x.y, p.ground_texture_scale, g.texture_seed))) as f32
                    }
                    SurfaceKind::Textureless => p.textureless_intensity,
                    SurfaceKind::DarkStripe => p.dark_stripe_intensity,
                    SurfaceKind::ReflectiveGround => {
                        // the mirrored surface sits at a virtual depth below the floor
                        let t = (-p.reflection_depth - o.z) / d.z;
                        let m = o + d * t;
                        let glare = stretch(fbm(m.x, m.y, p.glare_texture_scale, g.texture_seed ^ 0x6C61_7265));
                        (0.55 + 0.45 * glare) as f32
                    }
                }
            }
            Hit::Box { index, face, .. } => {
                let b = &self.scene.obstacles[index];
                match b.kind {
                    SurfaceKind::LambertianTextured | SurfaceKind::ReflectiveGround => {
                        let (a, c) = match face / 2 {
                            0 => (x.y, x.z),
                            1 => (x.x, x.z),
                            _ => (x.x, x.y),
                        };
                        let seed = b.texture_seed.wrapping_add(face as u64 * 0x1F3D);
                        (0.08 + 0.84 * stretch(fbm(a, c, p.box_texture_scale, seed))) as f32
                    }
                    SurfaceKind::Textureless => p.textureless_intensity,
                    SurfaceKind::DarkStripe => p.dark_stripe_intensity,
                }
            }
        }
    }
}

/// Ray casts the scene from both cameras of the rig at `pose`.
pub fn render_frame(
    scene: &Scene,
    rig: &StereoRig,
    pose: &Pose,
    noise_seed: u64,
    params: &RenderParams,
) -> Result<Frame> {
    params.validate()?;
    let world_from_robot = pose.world_from_robot();
    let world_from_cam = world_from_robot * rig.cam_from_robot.inverse();
    let left_origin = world_from_cam * Point3::origin();
    if !(left_origin.z > 0.0) {
        return Err(Error::DegeneratePose(format!("camera center at height {:.3} m", left_origin.z)));
    }
    let right_origin = world_from_cam * Point3::new(rig.baseline, 0.0, 0.0);
    let intr = &rig.intrinsics;
    let (w, h) = (intr.width, intr.height);
    let rot = world_from_cam.rotation;
    // camera-frame ray (u - cx)/fx, (v - cy)/fy, 1 is linear in (u, v)
    let du = rot * Vector3::new(1.0 / intr.fx, 0.0, 0.0);
    let dv = rot * Vector3::new(0.0, 1.0 / intr.fy, 0.0);
    let d0 = rot * Vector3::new(-intr.cx / intr.fx, -intr.cy / intr.fy, 1.0);
    let caster = Caster { scene, params };
    let ss = params.supersample;
    let offsets: Vec<f64> = (0..ss).map(|i| (i as f64 + 0.5) / ss as f64 - 0.5).collect();
    let norm = 1.0 / (ss * ss) as f32;

    let render_row = |v: usize| {
        let mut left = vec![0f32; w];
        let mut right = vec![0f32; w];
        let mut depth = vec![0f32; w];
        for u in 0..w {
            let dc = d0 + du * u as f64 + dv * v as f64;
            if let Some(hit) = caster.cast(&left_origin, &dc) {
                // with dc's camera-z component equal to 1, t is the z-depth
                depth[u] = hit.t() as f32;
            }
            let (mut l, mut r) = (0f32, 0f32);
            for &oy in &offsets {
                for &ox in &offsets {
                    let d = dc + du * ox + dv * oy;
                    l += caster.shade(&left_origin, &d, caster.cast(&left_origin, &d));
                    r += caster.shade(&right_origin, &d, caster.cast(&right_origin, &d));
                }
            }
            left[u] = l * norm;
            right[u] = r * norm;
        }
        (left, right, depth)
    };

    #[cfg(feature = "parallel")]
    let rows: Vec<_> = {
        use rayon::prelude::*;
        (0..h).into_par_iter().map(render_row).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<_> = (0..h).map(render_row).collect();

    let mut left = Vec::with_capacity(w * h);
    let mut right = Vec::with_capacity(w * h);
    let mut depth = Vec::with_capacity(w * h);
    for (l, r, d) in rows {
        left.extend(l);
        right.extend(r);
        depth.extend(d);
    }
    if params.depth_noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let normal = Normal::new(0.0, params.depth_noise_sigma).expect("sigma validated");
        for d in depth.iter_mut().filter(|d| **d > 0.0) {
            *d = (*d as f64 + normal.sample(&mut rng)).max(1e-3) as f32;
        }
    }
    Ok(Frame {
        left: GrayImage::from_f32(w, h, &left)?,
        right: GrayImage::from_f32(w, h, &right)?,
        depth: DepthImage::from_raw(w, h, depth)?,
        pose: *pose,
        frame_id: 0,
    })
}

/// Exact z-depth of the first scene hit along a left-camera pixel ray.
pub fn ray_cast_depth(scene: &Scene, rig: &StereoRig, pose: &Pose, u: f64, v: f64) -> Option<f64> {
    let world_from_cam = pose.world_from_robot() * rig.cam_from_robot.inverse();
    let o = world_from_cam * Point3::origin();
    let intr = &rig.intrinsics;
    let d = world_from_cam.rotation * Vector3::new((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0);
    let params = RenderParams::default();
    Caster { scene, params: &params }.cast(&o, &d).map(|h| h.t())
}

// ---------------------------------------------------------------------------
// Sessions

/// Which failure surfaces a generated scene contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneTemplate {
    /// Only the explicitly listed plants.
    Empty,
    /// Textured boxes and walls only.
    Benign,
    Reflective,
    Textureless,
    DarkStripe,
    /// All of the above interleaved.
    Mixed,
}

/// An explicitly requested failure surface or obstacle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Plant {
    ReflectiveDisc { center: [f64; 2], radius: f64 },
    Box { min: [f64; 3], max: [f64; 3], kind: SurfaceKind },
    /// Textured wall over a dark band of `stripe_height`.
    StripedWall { min: [f64; 2], max: [f64; 2], height: f64, stripe_height: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub name: String,
    pub template: SceneTemplate,
    pub frames: usize,
    /// Forward distance between consecutive frames (m).
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub plants: Vec<Plant>,
}

fn default_step() -> f64 {
    0.1
}

/// Ground-truth extent of a planted surface, in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedExtent {
    pub kind: SurfaceKind,
    pub footprint: Footprint,
    /// True for obstacles (boxes), false for ground regions.
    pub obstacle: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub name: String,
    pub scene: Scene,
    pub poses: Vec<Pose>,
    pub extents: Vec<PlantedExtent>,
    pub seed: u64,
}

impl Session {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn render(&self, index: usize, rig: &StereoRig, params: &RenderParams) -> Result<Frame> {
        let noise_seed = self.seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(index as u64);
        let mut frame = render_frame(&self.scene, rig, &self.poses[index], noise_seed, params)?;
        frame.frame_id = index as u32;
        Ok(frame)
    }

    pub fn frames<'a>(
        &'a self,
        rig: &'a StereoRig,
        params: &'a RenderParams,
    ) -> impl Iterator<Item = Result<Frame>> + 'a {
        (0..self.len()).map(move |i| self.render(i, rig, params))
    }

    /// Planted extents (in world coordinates) whose kind is a failure surface.
    pub fn failure_extents(&self) -> impl Iterator<Item = &PlantedExtent> {
        self.extents.iter().filter(|e| e.kind != SurfaceKind::LambertianTextured)
    }
}

// Gaps between generated obstacle faces and the nearest lattice row or column
// outside them, as fractions of the lattice step. Front and side gaps leave
// the occupied neighbor's disc reaching well into the box (so ground checks
// see it) while keeping the next, free neighbor clear of reconstruction
// noise; points just behind a box are only ever seen over its top, so the
// back gap is tight.
const FRONT_GAP: f64 = 0.3;
const SIDE_GAP: f64 = 0.3;
const BACK_GAP: f64 = 0.1;

struct Layout<'a> {
    rng: ChaCha8Rng,
    align: f64,
    front_gap: f64,
    back_gap: f64,
    side_gap: f64,
    scene: Scene,
    extents: Vec<PlantedExtent>,
    grid: &'a GridSpec,
}

impl Layout<'_> {
    /// Low side edge: the lattice column outside it sits `side_gap` away.
    fn snap(&self, v: f64) -> f64 {
        (v / self.align).round() * self.align + self.side_gap
    }

    /// Far side edge for a footprint `cols` lattice steps wide from `y0`.
    fn side_end(&self, y0: f64, cols: usize) -> f64 {
        y0 - self.side_gap + cols as f64 * self.align - self.side_gap
    }

    /// Front (near) face position: the lattice row in front of it sits
    /// `front_gap` away.
    fn front(&self, x: f64) -> f64 {
        (x / self.align).round() * self.align + self.front_gap
    }

    /// Back face for a footprint spanning `rows` lattice steps from `x0`.
    fn back(&self, x0: f64, rows: usize) -> f64 {
        x0 - self.front_gap + rows as f64 * self.align - self.back_gap
    }

    fn lateral_center(&mut self, half_width: f64) -> f64 {
        let reach = (self.grid.y_max.abs().max(self.grid.y_min.abs()) + 0.3 - half_width * 0.5).max(0.0);
        self.rng.gen_range(-reach..=reach)
    }

    fn add_box(&mut self, min: [f64; 3], max: [f64; 3], kind: SurfaceKind) {
        let texture_seed = self.rng.gen();
        let b = BoxObstacle { min, max, kind, texture_seed };
        self.extents.push(PlantedExtent { kind, footprint: b.footprint(), obstacle: true });
        self.scene.obstacles.push(b);
    }

    fn add_wall(&mut self, x: f64, kind: SurfaceKind, min_w: usize, max_w: usize) -> f64 {
        let cols = self.rng.gen_range(min_w..=max_w);
        let width = cols as f64 * self.align;
        let yc = self.lateral_center(width);
        let y0 = self.snap(yc - width / 2.0);
        let x0 = self.front(x);
        let (min, max) = ([x0, y0], [self.back(x0, 2), self.side_end(y0, cols)]);
        match kind {
            SurfaceKind::DarkStripe => {
                let stripe = 0.25;
                self.add_box([min[0], min[1], 0.0], [max[0], max[1], stripe], SurfaceKind::DarkStripe);
                self.add_box([min[0], min[1], stripe], [max[0], max[1], 1.0], SurfaceKind::LambertianTextured);
            }
            k => self.add_box([min[0], min[1], 0.0], [max[0], max[1], 1.0], k),
        }
        2.0 * self.align
    }

    fn add_textured_box(&mut self, x: f64) -> f64 {
        let rows = self.rng.gen_range(3..=5);
        let cols = self.rng.gen_range(3..=6);
        let width = cols as f64 * self.align;
        let height = self.rng.gen_range(0.2..0.35);
        let yc = self.lateral_center(width);
        let (x0, y0) = (self.front(x), self.snap(yc - width / 2.0));
        let x1 = self.back(x0, rows);
        self.add_box([x0, y0, 0.0], [x1, self.side_end(y0, cols), height], SurfaceKind::LambertianTextured);
        x1 - x0
    }

    fn add_disc(&mut self, x: f64) -> f64 {
        let radius = self.rng.gen_range(0.3..0.5);
        let yc = self.lateral_center(radius * 2.0);
        let footprint = Footprint::Disc { center: [x + radius, yc], radius };
        self.scene.ground.regions.push(GroundRegion { footprint, kind: SurfaceKind::ReflectiveGround });
        self.extents.push(PlantedExtent { kind: SurfaceKind::ReflectiveGround, footprint, obstacle: false });
        2.0 * radius
    }
}

/// Builds a straight-line session: the robot starts at the world origin
/// heading +x and advances `step` meters per frame. Generated obstacles are
/// aligned so their edges fall midway between lattice query points.
pub fn make_session(config: &SessionConfig, grid: &GridSpec, seed: u64) -> Result<Session> {
    if config.frames == 0 {
        return Err(Error::invalid("session.frames", "at least one frame is required"));
    }
    if !(config.step > 0.0) {
        return Err(Error::invalid("session.step", "must be positive"));
    }
    grid.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layout = Layout {
        scene: Scene::empty(rng.gen()),
        rng,
        align: grid.step,
        front_gap: FRONT_GAP * grid.step,
        side_gap: SIDE_GAP * grid.step,
        back_gap: BACK_GAP * grid.step,
        extents: vec![],
        grid,
    };

    let travel = config.step * (config.frames - 1) as f64;
    let (start, end) = (grid.x_min + 0.2, travel + grid.x_max + 1.0);
    let choices: &[SurfaceKind] = match config.template {
        SceneTemplate::Empty => &[],
        SceneTemplate::Benign => &[SurfaceKind::LambertianTextured],
        SceneTemplate::Reflective => &[SurfaceKind::ReflectiveGround, SurfaceKind::LambertianTextured],
        SceneTemplate::Textureless => &[SurfaceKind::Textureless, SurfaceKind::LambertianTextured],
        SceneTemplate::DarkStripe => &[SurfaceKind::DarkStripe, SurfaceKind::LambertianTextured],
        SceneTemplate::Mixed => &[
            SurfaceKind::ReflectiveGround,
            SurfaceKind::Textureless,
            SurfaceKind::DarkStripe,
            SurfaceKind::LambertianTextured,
        ],
    };
    let mut x = start;
    let mut slot = 0usize;
    while !choices.is_empty() && x < end {
        // single-failure templates alternate the failure surface with a
        // random pick, so about three slots in four carry it
        let kind = if config.template != SceneTemplate::Mixed && slot % 2 == 0 {
            choices[0]
        } else {
            choices[layout.rng.gen_range(0..choices.len())]
        };
        let used = match kind {
            SurfaceKind::ReflectiveGround => layout.add_disc(x),
            // wider than the view: a visible vertical end would give the
            // matcher a real edge to lock onto
            SurfaceKind::Textureless | SurfaceKind::DarkStripe => layout.add_wall(x, kind, 36, 44),
            SurfaceKind::LambertianTextured => {
                if layout.rng.gen_bool(0.5) {
                    layout.add_wall(x, kind, 4, 10)
                } else {
                    layout.add_textured_box(x)
                }
            }
        };
        x += used + layout.rng.gen_range(1.0..1.8);
        slot += 1;
    }

    for plant in &config.plants {
        match *plant {
            Plant::ReflectiveDisc { center, radius } => {
                let footprint = Footprint::Disc { center, radius };
                layout.scene.ground.regions.push(GroundRegion { footprint, kind: SurfaceKind::ReflectiveGround });
                layout.extents.push(PlantedExtent { kind: SurfaceKind::ReflectiveGround, footprint, obstacle: false });
            }
            Plant::Box { min, max, kind } => layout.add_box(min, max, kind),
            Plant::StripedWall { min, max, height, stripe_height } => {
                layout.add_box([min[0], min[1], 0.0], [max[0], max[1], stripe_height], SurfaceKind::DarkStripe);
                layout.add_box(
                    [min[0], min[1], stripe_height],
                    [max[0], max[1], height],
                    SurfaceKind::LambertianTextured,
                );
            }
        }
    }
    layout.scene.validate()?;

    let poses = (0..config.frames).map(|i| Pose::planar(i as f64 * config.step, 0.0, 0.0)).collect();
    Ok(Session {
        name: config.name.clone(),
        scene: layout.scene,
        poses,
        extents: layout.extents,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, Mount};

    pub(crate) fn rig() -> StereoRig {
        let intr = CameraIntrinsics::new(250.0, 250.0, 160.0, 100.0, 320, 200).unwrap();
        StereoRig::mounted(intr, 0.2, Mount { height: 0.7, pitch_deg: 15.0, forward: 0.0, lateral: 0.0 }).unwrap()
    }

    fn grid() -> GridSpec {
        GridSpec::default()
    }

    #[test]
    fn empty_scene_depth_matches_ground_plane() {
        let rig = rig();
        let pose = Pose::planar(0.0, 0.0, 0.0);
        let f = render_frame(&Scene::empty(1), &rig, &pose, 0, &RenderParams::default()).unwrap();
        let mut checked = 0;
        for v in 0..200 {
            for u in 0..320 {
                let px = crate::geometry::Pixel::new(u as f64, v as f64);
                match rig.left_pixel_ground_point(px) {
                    Some(g) => {
                        let z = rig.robot_to_left_cam(&g).z;
                        let d = f.depth.get(u, v).unwrap() as f64;
                        // f32 storage
                        assert!((d - z).abs() <= 1e-6 * z.max(1.0), "({u},{v}) {d} vs {z}");
                        checked += 1;
                    }
                    None => assert_eq!(f.depth.get(u, v), None),
                }
            }
        }
        assert!(checked > 30_000);
    }

    #[test]
    fn box_face_depth_matches_analytic_intersection() {
        let rig = rig();
        let mut scene = Scene::empty(3);
        scene.obstacles.push(BoxObstacle {
            min: [1.0, -0.5, 0.0],
            max: [1.3, 0.5, 0.5],
            kind: SurfaceKind::LambertianTextured,
            texture_seed: 9,
        });
        let pose = Pose::planar(0.0, 0.0, 0.0);
        let f = render_frame(&scene, &rig, &pose, 0, &RenderParams::default()).unwrap();
        // front face plane x = 1: along a pixel ray o + t d, t = (1 - o.x)/d.x in robot frame
        let o = rig.left_center_robot();
        let mut checked = 0;
        for &(y, z) in &[(0.0, 0.2), (0.3, 0.1), (-0.2, 0.4)] {
            let p = Point3::new(1.0, y, z);
            let px = rig.robot_to_left_pixel(&p).unwrap();
            let (u, v) = px.rounded();
            let ray = rig.left_ray_robot(crate::geometry::Pixel::new(u as f64, v as f64));
            let hit = o + ray * ((1.0 - o.x) / ray.x);
            let z_cam = rig.robot_to_left_cam(&hit).z;
            let d = f.depth.get(u as usize, v as usize).unwrap() as f64;
            assert!((d - z_cam).abs() < 1e-5, "{d} vs {z_cam}");
            checked += 1;
        }
        assert_eq!(checked, 3);
    }

    #[test]
    fn rendering_is_deterministic() {
        let rig = rig();
        let cfg = SessionConfig {
            name: "s".into(),
            template: SceneTemplate::Mixed,
            frames: 2,
            step: 0.1,
            seed: 0,
            plants: vec![],
        };
        let s1 = make_session(&cfg, &grid(), 42).unwrap();
        let s2 = make_session(&cfg, &grid(), 42).unwrap();
        assert_eq!(s1, s2);
        let params = RenderParams { depth_noise_sigma: 0.01, ..Default::default() };
        assert_eq!(s1.render(1, &rig, &params).unwrap(), s2.render(1, &rig, &params).unwrap());
    }

    #[test]
    fn camera_below_ground_is_rejected() {
        let intr = CameraIntrinsics::new(250.0, 250.0, 160.0, 100.0, 320, 200).unwrap();
        let rig = StereoRig::mounted(intr, 0.2, Mount { height: -0.1, pitch_deg: 0.0, forward: 0.0, lateral: 0.0 })
            .unwrap();
        let err = render_frame(&Scene::empty(0), &rig, &Pose::planar(0.0, 0.0, 0.0), 0, &RenderParams::default());
        assert!(matches!(err, Err(Error::DegeneratePose(_))));
    }

    #[test]
    fn session_poses_advance_by_step() {
        let cfg = SessionConfig {
            name: "s".into(),
            template: SceneTemplate::Benign,
            frames: 10,
            step: 0.1,
            seed: 0,
            plants: vec![],
        };
        let s = make_session(&cfg, &grid(), 1).unwrap();
        assert_eq!(s.len(), 10);
        for (i, w) in s.poses.windows(2).enumerate() {
            let d = w[1].position() - w[0].position();
            assert!((d.x - 0.1).abs() < 1e-12 && d.y.abs() < 1e-12, "step {i}");
        }
    }

    #[test]
    fn zero_frames_is_an_error() {
        let cfg = SessionConfig {
            name: "s".into(),
            template: SceneTemplate::Benign,
            frames: 0,
            step: 0.1,
            seed: 0,
            plants: vec![],
        };
        assert!(make_session(&cfg, &grid(), 1).is_err());
    }

    #[test]
    fn explicit_disc_extent_is_recorded() {
        let cfg = SessionConfig {
            name: "s".into(),
            template: SceneTemplate::Empty,
            frames: 1,
            step: 0.1,
            seed: 0,
            plants: vec![Plant::ReflectiveDisc { center: [2.0, 0.0], radius: 0.3 }],
        };
        let s = make_session(&cfg, &grid(), 1).unwrap();
        assert_eq!(
            s.extents,
            vec![PlantedExtent {
                kind: SurfaceKind::ReflectiveGround,
                footprint: Footprint::Disc { center: [2.0, 0.0], radius: 0.3 },
                obstacle: false,
            }]
        );
        assert_eq!(s.scene.ground.kind_at(2.1, 0.1), SurfaceKind::ReflectiveGround);
        assert_eq!(s.scene.ground.kind_at(2.4, 0.0), SurfaceKind::LambertianTextured);
    }

    #[test]
    fn generated_obstacle_edges_keep_their_lattice_gaps() {
        let cfg = SessionConfig {
            name: "s".into(),
            template: SceneTemplate::Mixed,
            frames: 30,
            step: 0.1,
            seed: 0,
            plants: vec![],
        };
        let s = make_session(&cfg, &grid(), 5).unwrap();
        assert!(!s.scene.obstacles.is_empty());
        let frac = |v: f64| (v / 0.1).rem_euclid(1.0);
        for b in &s.scene.obstacles {
            // front face 0.03 past a lattice row, back face 0.01 before one
            assert!((frac(b.min[0]) - 0.3).abs() < 1e-6, "front {}", b.min[0]);
            assert!((frac(b.max[0]) - 0.9).abs() < 1e-6, "back {}", b.max[0]);
            assert!((frac(b.min[1]) - 0.3).abs() < 1e-6, "side {}", b.min[1]);
            assert!((frac(b.max[1]) - 0.7).abs() < 1e-6, "side {}", b.max[1]);
        }
    }

    #[test]
    fn footprint_distance() {
        let r = Footprint::Rect { min: [0.0, 0.0], max: [1.0, 1.0] };
        assert_eq!(r.distance(0.5, 0.5), 0.0);
        assert!((r.distance(2.0, 2.0) - 2f64.sqrt()).abs() < 1e-12);
        let d = Footprint::Disc { center: [0.0, 0.0], radius: 1.0 };
        assert!((d.distance(3.0, 0.0) - 2.0).abs() < 1e-12);
    }
}
