//! Ground-truth obstacle decisions from the depth image, the query lattice,
//! and an exact geometric oracle over the scene description.

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{back_project, Pixel, StereoRig};
use crate::image::DepthImage;
use crate::worldsim::Scene;

/// Rectangular lattice of ground query points in the robot frame, plus the
/// safety radius each query is evaluated with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub step: f64,
    #[serde(default = "default_radius")]
    pub radius: f64,
}

fn default_radius() -> f64 {
    0.10
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { x_min: 1.0, x_max: 2.5, y_min: -0.8, y_max: 0.8, step: 0.1, radius: 0.10 }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.x_min < self.x_max) {
            return Err(Error::invalid("grid.x_min", "must be below x_max"));
        }
        if !(self.y_min < self.y_max) {
            return Err(Error::invalid("grid.y_min", "must be below y_max"));
        }
        if !(self.step > 0.0) {
            return Err(Error::invalid("grid.step", "must be positive"));
        }
        if !(self.radius > 0.0) {
            return Err(Error::invalid("grid.radius", "must be positive"));
        }
        Ok(())
    }

    /// Number of lattice rows (along x) and columns (along y).
    pub fn dims(&self) -> (usize, usize) {
        let n = |lo: f64, hi: f64| ((hi - lo) / self.step + 1e-9).floor() as usize + 1;
        (n(self.x_min, self.x_max), n(self.y_min, self.y_max))
    }

    pub fn len(&self) -> usize {
        let (r, c) = self.dims();
        r * c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major lattice (x outer, y inner) of ground points `(x, y, 0)`.
    pub fn points(&self) -> Vec<Point3<f64>> {
        let (rows, cols) = self.dims();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                out.push(Point3::new(
                    self.x_min + i as f64 * self.step,
                    self.y_min + j as f64 * self.step,
                    0.0,
                ));
            }
        }
        out
    }
}

/// The ground disc around `p`, sampled at its center and `n - 1` points
/// evenly spaced on its rim (compass points for n = 5).
pub fn disc_samples(p: &Point3<f64>, radius: f64, n: usize) -> Vec<Point3<f64>> {
    let mut out = Vec::with_capacity(n.max(1));
    out.push(Point3::new(p.x, p.y, 0.0));
    let rim = n.saturating_sub(1);
    for i in 0..rim {
        let a = std::f64::consts::TAU * i as f64 / rim as f64;
        out.push(Point3::new(p.x + radius * a.cos(), p.y + radius * a.sin(), 0.0));
    }
    out
}

/// True when the center and compass points of the disc land inside the left
/// image, at least `margin` pixels from the border.
pub fn disc_in_left_view(rig: &StereoRig, p: &Point3<f64>, radius: f64, margin: f64) -> bool {
    disc_samples(p, radius, 5).iter().all(|q| {
        rig.project_left_unbounded(q)
            .map(|px| rig.intrinsics.contains_with_margin(px, margin))
            .unwrap_or(false)
    })
}

/// Counts of reconstructed points near a ground query.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Neighborhood {
    /// Every reconstructed point within the radius (horizontal distance).
    pub returns: usize,
    /// Points within the radius whose height lies in the obstacle band.
    pub obstacle: usize,
    /// Pixels whose ground footprint lies within the radius but whose
    /// reconstruction lies below `-h_obs`.
    pub hole: usize,
}

/// Robot-frame point cloud bucketed on a horizontal grid for radius queries.
#[derive(Debug, Clone)]
pub struct CloudIndex {
    cell: f64,
    origin: (f64, f64),
    dims: (usize, usize),
    /// Per cell: points as (x, y, z).
    points: Vec<Vec<[f32; 3]>>,
    /// Per cell: ground footprints (x, y) of below-ground reconstructions.
    holes: Vec<Vec<[f32; 2]>>,
    h_obs: f64,
    h_max: f64,
}

impl CloudIndex {
    const EXTENT_X: (f64, f64) = (-1.0, 12.0);
    const EXTENT_Y: (f64, f64) = (-6.0, 6.0);

    pub fn new(h_obs: f64, h_max: f64) -> Self {
        let cell = 0.05;
        let nx = ((Self::EXTENT_X.1 - Self::EXTENT_X.0) / cell).ceil() as usize;
        let ny = ((Self::EXTENT_Y.1 - Self::EXTENT_Y.0) / cell).ceil() as usize;
        Self {
            cell,
            origin: (Self::EXTENT_X.0, Self::EXTENT_Y.0),
            dims: (nx, ny),
            points: vec![Vec::new(); nx * ny],
            holes: vec![Vec::new(); nx * ny],
            h_obs,
            h_max,
        }
    }

    fn cell_of(&self, x: f64, y: f64) -> Option<usize> {
        let i = ((x - self.origin.0) / self.cell).floor();
        let j = ((y - self.origin.1) / self.cell).floor();
        if i < 0.0 || j < 0.0 || i >= self.dims.0 as f64 || j >= self.dims.1 as f64 {
            return None;
        }
        Some(i as usize * self.dims.1 + j as usize)
    }

    /// Adds the reconstruction of left-image pixel `px` at z-depth `depth`.
    pub fn insert(&mut self, rig: &StereoRig, px: Pixel, depth: f64) {
        let p = rig.left_cam_to_robot(&back_project(px, depth, &rig.intrinsics));
        if let Some(c) = self.cell_of(p.x, p.y) {
            self.points[c].push([p.x as f32, p.y as f32, p.z as f32]);
        }
        if p.z < -self.h_obs {
            if let Some(g) = rig.left_pixel_ground_point(px) {
                if let Some(c) = self.cell_of(g.x, g.y) {
                    self.holes[c].push([g.x as f32, g.y as f32]);
                }
            }
        }
    }

    pub fn query(&self, p: &Point3<f64>, radius: f64) -> Neighborhood {
        let mut n = Neighborhood::default();
        let r2 = radius * radius;
        let reach = (radius / self.cell).ceil() as i64 + 1;
        let ci = ((p.x - self.origin.0) / self.cell).floor() as i64;
        let cj = ((p.y - self.origin.1) / self.cell).floor() as i64;
        for i in ci - reach..=ci + reach {
            for j in cj - reach..=cj + reach {
                if i < 0 || j < 0 || i >= self.dims.0 as i64 || j >= self.dims.1 as i64 {
                    continue;
                }
                let c = i as usize * self.dims.1 + j as usize;
                for q in &self.points[c] {
                    let (dx, dy) = (q[0] as f64 - p.x, q[1] as f64 - p.y);
                    if dx * dx + dy * dy <= r2 {
                        n.returns += 1;
                        let z = q[2] as f64;
                        if z >= self.h_obs && z <= self.h_max {
                            n.obstacle += 1;
                        }
                    }
                }
                for g in &self.holes[c] {
                    let (dx, dy) = (g[0] as f64 - p.x, g[1] as f64 - p.y);
                    if dx * dx + dy * dy <= r2 {
                        n.hole += 1;
                    }
                }
            }
        }
        n
    }
}

/// Height band shared by the monitor and the dense stereo backend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonitorParams {
    /// Minimum obstacle height; also the hole depth (m).
    pub h_obs: f64,
    /// Maximum obstacle height (m); anything higher is overhead clearance.
    pub h_max: f64,
    /// Half-size (pixels) of the image neighborhood that must be seen as
    /// unobstructed ground around each disc sample before a free answer is
    /// trusted. Matches the stereo matching window by default.
    pub visibility_margin: usize,
}

impl Default for MonitorParams {
    fn default() -> Self {
        Self { h_obs: 0.15, h_max: 2.0, visibility_margin: 4 }
    }
}

/// The depth sensor's view of one frame, ready for repeated queries.
#[derive(Debug, Clone)]
pub struct DepthMonitor<'a> {
    rig: &'a StereoRig,
    depth: &'a DepthImage,
    cloud: CloudIndex,
    margin: i64,
}

impl<'a> DepthMonitor<'a> {
    pub fn new(depth: &'a DepthImage, rig: &'a StereoRig, params: &MonitorParams) -> Self {
        let mut cloud = CloudIndex::new(params.h_obs, params.h_max);
        for v in 0..depth.height() {
            for u in 0..depth.width() {
                if let Some(d) = depth.get(u, v) {
                    cloud.insert(rig, Pixel::new(u as f64, v as f64), d as f64);
                }
            }
        }
        Self { rig, depth, cloud, margin: params.visibility_margin as i64 }
    }

    /// `Ok(true)` when the disc of `radius` around ground point `p` is free.
    ///
    /// Any obstacle or hole return inside the disc decides "occupied". A free
    /// answer needs every disc sample's ground point confirmed visible to
    /// both cameras; otherwise the disc lies (partly) in a shadow the sensor
    /// cannot vouch for and the query is out of view.
    pub fn is_free(&self, p: &Point3<f64>, radius: f64) -> Result<bool> {
        if !disc_in_left_view(self.rig, p, radius, 0.0) {
            return Err(Error::OutOfView);
        }
        let n = self.cloud.query(p, radius);
        if n.obstacle > 0 || n.hole > 0 {
            return Ok(false);
        }
        if n.returns == 0 || !disc_samples(p, radius, 5).iter().all(|q| self.ground_visible(q)) {
            return Err(Error::OutOfView);
        }
        Ok(true)
    }

    /// Depth at the rounded left pixel of `q`, if it has a return.
    fn depth_at(&self, q: &Point3<f64>) -> Option<(f64, f64)> {
        let c = self.rig.robot_to_left_cam(q);
        if c.z <= 0.0 {
            return None;
        }
        let px = self.rig.project_left_unbounded(q).ok()?;
        let (u, v) = px.rounded();
        if u < 0 || v < 0 || u >= self.depth.width() as i64 || v >= self.depth.height() as i64 {
            return None;
        }
        self.depth.get(u as usize, v as usize).map(|d| (d as f64, c.z))
    }

    /// Ground point `q` and its image neighborhood are seen by both cameras.
    ///
    /// Left: every pixel within the margin returns a depth whose disparity
    /// differs from the ground plane's by at most one pixel. Right: no surface
    /// the left camera sees stands between the right camera and the ground
    /// under the neighborhood's center, corners and edge midpoints.
    fn ground_visible(&self, q: &Point3<f64>) -> bool {
        let Ok(px) = self.rig.project_left_unbounded(q) else {
            return false;
        };
        let (u, v) = px.rounded();
        let m = self.margin;
        let (w, h) = (self.depth.width() as i64, self.depth.height() as i64);
        let fb = self.rig.intrinsics.fx * self.rig.baseline;
        for y in v - m..=v + m {
            for x in u - m..=u + m {
                if x < 0 || y < 0 || x >= w || y >= h {
                    return false;
                }
                let at = Pixel::new(x as f64, y as f64);
                let (Some(d), Some(g)) = (self.depth.get(x as usize, y as usize), self.rig.left_pixel_ground_point(at))
                else {
                    return false;
                };
                let g = self.rig.robot_to_left_cam(&g).z;
                if fb * (1.0 / d as f64 - 1.0 / g) > 1.0 {
                    return false;
                }
            }
        }
        let (uf, vf, mf) = (u as f64, v as f64, m as f64);
        let from = self.rig.right_center_robot();
        let offsets = [-mf, 0.0, mf];
        let mut probes = offsets.iter().flat_map(|&du| offsets.iter().map(move |&dv| (uf + du, vf + dv)));
        probes.all(|(pu, pv)| {
            let Some(target) = self.rig.left_pixel_ground_point(Pixel::new(pu, pv)) else {
                return false;
            };
            self.sightline_clear(&from, &target)
        })
    }

    /// Marches from `from` to `to`; blocked when a point of the segment lies
    /// behind the surface the left camera sees along its own ray.
    fn sightline_clear(&self, from: &Point3<f64>, to: &Point3<f64>) -> bool {
        const STEPS: usize = 160;
        let tol = |z: f64| 0.02 * z + 0.01;
        for i in 1..STEPS {
            let t = i as f64 / STEPS as f64;
            if t > 0.97 {
                break;
            }
            let s = from + (to - from) * t;
            if let Some((d, z)) = self.depth_at(&s) {
                if z > d + tol(d) {
                    return false;
                }
            }
        }
        true
    }
}

/// One-shot form of [`DepthMonitor::is_free`].
pub fn is_obstacle_free_monitor(
    depth: &DepthImage,
    rig: &StereoRig,
    p: &Point3<f64>,
    radius: f64,
    params: &MonitorParams,
) -> Result<bool> {
    DepthMonitor::new(depth, rig, params).is_free(p, radius)
}

/// Exact answer from the scene description: free iff no box footprint
/// intersects the disc of `radius` around world point `(x, y)`.
pub fn geometric_oracle(scene: &Scene, x: f64, y: f64, radius: f64) -> bool {
    !scene.obstacles.iter().any(|b| b.footprint().distance(x, y) <= radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, Mount, Pose};
    use crate::worldsim::{render_frame, BoxObstacle, Footprint, GroundRegion, RenderParams, SurfaceKind};

    fn rig() -> StereoRig {
        let intr = CameraIntrinsics::new(500.0, 500.0, 480.0, 300.0, 960, 600).unwrap();
        StereoRig::mounted(intr, 0.2, Mount { height: 0.7, pitch_deg: 15.0, forward: 0.0, lateral: 0.0 }).unwrap()
    }

    fn cheap() -> RenderParams {
        RenderParams { supersample: 1, ..Default::default() }
    }

    #[test]
    fn lattice_dims_and_order() {
        let g = GridSpec::default();
        assert_eq!(g.dims(), (16, 17));
        let pts = g.points();
        assert_eq!(pts.len(), 272);
        assert_eq!((pts[0].x, pts[0].y), (1.0, -0.8));
        assert!((pts[1].y - -0.7).abs() < 1e-12 && pts[1].x == 1.0);
        let one = GridSpec { x_min: 2.0, x_max: 2.05, y_min: 0.0, y_max: 0.05, ..g };
        assert!(one.validate().is_ok());
        assert_eq!(one.dims(), (1, 1));
        assert!(GridSpec { x_max: 1.0, ..g }.validate().is_err());
    }

    #[test]
    fn empty_scene_is_free_everywhere_in_view() {
        let rig = rig();
        let f = render_frame(&crate::worldsim::Scene::empty(2), &rig, &Pose::planar(0.0, 0.0, 0.0), 0, &cheap())
            .unwrap();
        let m = DepthMonitor::new(&f.depth, &rig, &MonitorParams::default());
        let mut free = 0;
        for p in GridSpec::default().points() {
            match m.is_free(&p, 0.1) {
                Ok(v) => {
                    assert!(v, "{p:?}");
                    free += 1;
                }
                Err(Error::OutOfView) => {}
                Err(e) => panic!("{e}"),
            }
        }
        assert!(free > 250, "{free}");
    }

    #[test]
    fn box_at_query_is_occupied_and_oracle_agrees() {
        let rig = rig();
        let mut scene = crate::worldsim::Scene::empty(2);
        scene.obstacles.push(BoxObstacle {
            min: [1.85, -0.25, 0.0],
            max: [2.15, 0.25, 0.4],
            kind: SurfaceKind::Textureless,
            texture_seed: 0,
        });
        let f = render_frame(&scene, &rig, &Pose::planar(0.0, 0.0, 0.0), 0, &cheap()).unwrap();
        let p = Point3::new(2.0, 0.0, 0.0);
        assert!(!is_obstacle_free_monitor(&f.depth, &rig, &p, 0.1, &MonitorParams::default()).unwrap());
        assert!(!geometric_oracle(&scene, 2.0, 0.0, 0.1));
    }

    #[test]
    fn reflective_ground_is_free_to_the_monitor() {
        let rig = rig();
        let mut scene = crate::worldsim::Scene::empty(2);
        scene.ground.regions.push(GroundRegion {
            footprint: Footprint::Disc { center: [2.0, 0.0], radius: 0.4 },
            kind: SurfaceKind::ReflectiveGround,
        });
        let f = render_frame(&scene, &rig, &Pose::planar(0.0, 0.0, 0.0), 0, &cheap()).unwrap();
        let p = Point3::new(2.0, 0.0, 0.0);
        assert!(is_obstacle_free_monitor(&f.depth, &rig, &p, 0.1, &MonitorParams::default()).unwrap());
    }

    #[test]
    fn out_of_view_query() {
        let rig = rig();
        let f = render_frame(&crate::worldsim::Scene::empty(2), &rig, &Pose::planar(0.0, 0.0, 0.0), 0, &cheap())
            .unwrap();
        let p = Point3::new(-2.0, 0.0, 0.0);
        assert!(matches!(
            is_obstacle_free_monitor(&f.depth, &rig, &p, 0.1, &MonitorParams::default()),
            Err(Error::OutOfView)
        ));
    }

    #[test]
    fn oracle_boundary_cases() {
        let mut scene = crate::worldsim::Scene::empty(0);
        assert!(geometric_oracle(&scene, 0.0, 0.0, 0.1));
        scene.obstacles.push(BoxObstacle {
            min: [-0.2, -0.2, 0.0],
            max: [0.2, 0.2, 0.5],
            kind: SurfaceKind::LambertianTextured,
            texture_seed: 0,
        });
        assert!(!geometric_oracle(&scene, 0.0, 0.0, 0.1));
        let eps = 1e-6;
        assert!(geometric_oracle(&scene, 0.2 + 0.1 + eps, 0.0, 0.1));
        assert!(!geometric_oracle(&scene, 0.2 + 0.1 - eps, 0.0, 0.1));
    }
}
