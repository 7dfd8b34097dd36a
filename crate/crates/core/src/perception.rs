//! Stereo obstacle detectors whose failures the introspection model learns.
//!
//! Two interchangeable backends answer the same question, "is the ground
//! disc of radius r around (x, y, 0) free?":
//!
//! * [`BackendKind::SparseConvex`] checks only the ground. Under the convex
//!   world assumption a ground point that is visible (its left and right
//!   projections match) cannot be covered by an obstacle.
//! * [`BackendKind::DenseBm`] block-matches every pixel, reconstructs the
//!   scene and looks for points in the obstacle height band (or below the
//!   floor) near the query.

use std::fmt;
use std::str::FromStr;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pixel, StereoRig};
use crate::image::GrayImage;
use crate::monitor::{disc_samples, CloudIndex, GridSpec, Neighborhood};
use crate::worldsim::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    SparseConvex,
    DenseBm,
}

impl BackendKind {
    pub const ALL: [BackendKind; 2] = [BackendKind::SparseConvex, BackendKind::DenseBm];

    pub fn name(self) -> &'static str {
        match self {
            BackendKind::SparseConvex => "sparse",
            BackendKind::DenseBm => "dense",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" | "sparse_convex" => Ok(BackendKind::SparseConvex),
            "dense" | "dense_bm" => Ok(BackendKind::DenseBm),
            other => Err(Error::invalid("backend", format!("unknown backend `{other}` (sparse|dense)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptionParams {
    /// Matching window side k (odd).
    pub window: usize,
    /// Sparse match threshold: mean absolute intensity difference per pixel.
    pub tau: f64,
    /// Largest disparity searched by the dense matcher (pixels).
    pub max_disparity: usize,
    /// Minimum obstacle height and hole depth (m).
    pub h_obs: f64,
    /// Maximum obstacle height (m).
    pub h_max: f64,
    /// Ground samples per sparse query: center plus evenly spaced rim points.
    pub samples: usize,
    /// Dense matcher: minimum mean horizontal gradient inside the window.
    pub texture_threshold: f64,
    /// Dense matcher: reconstructed points needed to flag a query.
    pub min_support: usize,
    /// Dense matcher: the best cost must beat every non-adjacent disparity
    /// by this relative margin.
    pub uniqueness: f64,
    /// Dense matcher: connected disparity regions smaller than this many
    /// pixels are discarded as speckle (0 disables).
    pub speckle_size: usize,
}

impl Default for PerceptionParams {
    fn default() -> Self {
        Self {
            window: 9,
            tau: 0.05,
            max_disparity: 160,
            h_obs: 0.15,
            h_max: 2.0,
            samples: 9,
            texture_threshold: 0.01,
            min_support: 1,
            uniqueness: 0.15,
            speckle_size: 100,
        }
    }
}

impl PerceptionParams {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::invalid("perception.window", "must be odd and at least 3"));
        }
        if self.window > 15 {
            return Err(Error::invalid("perception.window", "must be at most 15"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid("perception.tau", "must be positive"));
        }
        if self.max_disparity < 1 {
            return Err(Error::invalid("perception.max_disparity", "must be at least 1"));
        }
        if !(self.h_obs > 0.0 && self.h_max > self.h_obs) {
            return Err(Error::invalid("perception.h_obs", "need 0 < h_obs < h_max"));
        }
        if self.samples < 1 {
            return Err(Error::invalid("perception.samples", "must be at least 1"));
        }
        if !(self.uniqueness >= 0.0) {
            return Err(Error::invalid("perception.uniqueness", "must be non-negative"));
        }
        if self.min_support < 1 {
            return Err(Error::invalid("perception.min_support", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerceptionBackend {
    pub kind: BackendKind,
    pub params: PerceptionParams,
}

impl PerceptionBackend {
    pub fn new(kind: BackendKind, params: PerceptionParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { kind, params })
    }

    /// Per-frame state for repeated queries (the dense matcher runs once here).
    pub fn prepare<'a>(&self, left: &'a GrayImage, right: &'a GrayImage, rig: &'a StereoRig) -> Detector<'a> {
        match self.kind {
            BackendKind::SparseConvex => Detector::Sparse(SparseDetector { left, right, rig, params: self.params }),
            BackendKind::DenseBm => Detector::Dense(DenseDetector::new(left, right, rig, self.params)),
        }
    }
}

pub enum Detector<'a> {
    Sparse(SparseDetector<'a>),
    Dense(DenseDetector<'a>),
}

impl Detector<'_> {
    pub fn is_free(&self, p: &Point3<f64>, radius: f64) -> Result<bool> {
        match self {
            Detector::Sparse(d) => d.is_free(p, radius),
            Detector::Dense(d) => d.is_free(p, radius),
        }
    }
}

/// True when every sample of the disc has a full matching window in both
/// images.
pub fn disc_in_stereo_view(rig: &StereoRig, p: &Point3<f64>, radius: f64, window: usize) -> bool {
    let margin = (window / 2 + 1) as f64;
    disc_samples(p, radius, 5).iter().all(|q| {
        let l = rig.project_left_unbounded(q);
        let r = rig.project_right_unbounded(q);
        matches!((l, r), (Ok(l), Ok(r))
            if rig.intrinsics.contains_with_margin(l, margin) && rig.intrinsics.contains_with_margin(r, margin))
    })
}

/// Mean absolute difference between k x k windows centered at `l` in the
/// left image and `r` in the right image (bilinear sampling).
pub fn window_mad(left: &GrayImage, right: &GrayImage, l: Pixel, r: Pixel, window: usize) -> f64 {
    let h = (window / 2) as i64;
    let mut sum = 0.0f64;
    for dy in -h..=h {
        for dx in -h..=h {
            let a = left.sample(l.u + dx as f64, l.v + dy as f64);
            let b = right.sample(r.u + dx as f64, r.v + dy as f64);
            sum += (a - b).abs() as f64;
        }
    }
    sum / (window * window) as f64
}

pub struct SparseDetector<'a> {
    left: &'a GrayImage,
    right: &'a GrayImage,
    rig: &'a StereoRig,
    params: PerceptionParams,
}

impl SparseDetector<'_> {
    pub fn is_free(&self, p: &Point3<f64>, radius: f64) -> Result<bool> {
        if !disc_in_stereo_view(self.rig, p, radius, self.params.window) {
            return Err(Error::OutOfView);
        }
        let margin = (self.params.window / 2 + 1) as f64;
        for q in disc_samples(p, radius, self.params.samples) {
            let (l, r) = match (self.rig.project_left_unbounded(&q), self.rig.project_right_unbounded(&q)) {
                (Ok(l), Ok(r)) => (l, r),
                _ => return Err(Error::OutOfView),
            };
            let intr = &self.rig.intrinsics;
            if !intr.contains_with_margin(l, margin) || !intr.contains_with_margin(r, margin) {
                return Err(Error::OutOfView);
            }
            if window_mad(self.left, self.right, l, r, self.params.window) > self.params.tau {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Ground-verification check on a single query.
pub fn is_obstacle_free_sparse(
    left: &GrayImage,
    right: &GrayImage,
    rig: &StereoRig,
    p: &Point3<f64>,
    radius: f64,
    params: &PerceptionParams,
) -> Result<bool> {
    SparseDetector { left, right, rig, params: *params }.is_free(p, radius)
}

/// Integer disparities for the left image; `None` where matching failed.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<Option<u16>>,
}

impl DisparityMap {
    pub fn get(&self, x: usize, y: usize) -> Option<u16> {
        self.values[y * self.width + x]
    }

    pub fn valid_fraction(&self) -> f64 {
        self.values.iter().filter(|v| v.is_some()).count() as f64 / self.values.len() as f64
    }
}

/// SAD block matching, winner-take-all over `0..=max_disparity`, with a
/// left-right consistency check (1 px) and a horizontal-texture filter.
pub fn block_match(left: &GrayImage, right: &GrayImage, params: &PerceptionParams) -> DisparityMap {
    let (w, h) = (left.width(), left.height());
    let k = params.window;
    let r = k / 2;
    let max_d = params.max_disparity.min(w.saturating_sub(k));
    let lraw = left.raw();
    let rraw = right.raw();

    let mut best_l = vec![(u32::MAX, 0u16); w * h];
    // lowest cost among disparities not adjacent to the current best
    let mut second_l = vec![u32::MAX; w * h];
    let mut best_r = vec![(u32::MAX, 0u16); w * h];
    let mut hsum = vec![0u32; w * h];
    let mut col = vec![0u32; w];

    for d in 0..=max_d {
        // horizontal window sums of |L(x) - R(x - d)|, valid for x - r >= d
        for y in 0..h {
            let lrow = &lraw[y * w..(y + 1) * w];
            let rrow = &rraw[y * w..(y + 1) * w];
            let out = &mut hsum[y * w..(y + 1) * w];
            let x0 = d + r;
            if x0 + r >= w {
                continue;
            }
            let ad = |x: usize| (lrow[x] as i32 - rrow[x - d] as i32).unsigned_abs();
            let mut s: u32 = (x0 - r..=x0 + r).map(ad).sum();
            out[x0] = s;
            for x in x0 + 1..w - r {
                s = s + ad(x + r) - ad(x - r - 1);
                out[x] = s;
            }
        }
        // vertical running sums
        let x_lo = d + r;
        if x_lo + r >= w {
            continue;
        }
        col[x_lo..w - r].fill(0);
        for y in 0..k.min(h) {
            for x in x_lo..w - r {
                col[x] += hsum[y * w + x];
            }
        }
        for yc in r..h.saturating_sub(r) {
            if yc > r {
                let (add, sub) = (yc + r, yc - r - 1);
                for x in x_lo..w - r {
                    col[x] = col[x] + hsum[add * w + x] - hsum[sub * w + x];
                }
            }
            let row = yc * w;
            for x in x_lo..w - r {
                let c = col[x];
                let bl = &mut best_l[row + x];
                let sl = &mut second_l[row + x];
                if c < bl.0 {
                    if d as u16 > bl.1 + 1 {
                        *sl = (*sl).min(bl.0);
                    }
                    *bl = (c, d as u16);
                } else if d as u16 > bl.1 + 1 && c < *sl {
                    *sl = c;
                }
                let br = &mut best_r[row + x - d];
                if c < br.0 {
                    *br = (c, d as u16);
                }
            }
        }
    }

    // texture: window sum of |L(x+1) - L(x)|
    let mut grad = vec![0u32; w * h];
    for y in 0..h {
        for x in 0..w - 1 {
            grad[y * w + x] = (lraw[y * w + x + 1] as i32 - lraw[y * w + x] as i32).unsigned_abs();
        }
    }
    let tex = box_sum(&grad, w, h, r);
    let min_tex = (params.texture_threshold * 255.0 * (k * k) as f64).round() as u32;

    let mut values = vec![None; w * h];
    for y in r..h.saturating_sub(r) {
        for x in r..w - r {
            let (cost, d) = best_l[y * w + x];
            if cost == u32::MAX || d == 0 {
                continue;
            }
            if tex[y * w + x] < min_tex {
                continue;
            }
            if (second_l[y * w + x] as f64) <= cost as f64 * (1.0 + params.uniqueness) {
                continue;
            }
            let xr = x - d as usize;
            let (rc, dr) = best_r[y * w + xr];
            if rc == u32::MAX || (dr as i32 - d as i32).abs() > 1 {
                continue;
            }
            values[y * w + x] = Some(d);
        }
    }
    let mut map = DisparityMap { width: w, height: h, values };
    if params.speckle_size > 0 {
        remove_speckles(&mut map, params.speckle_size);
    }
    map
}

/// Invalidates 4-connected regions (neighbors within 1 px of disparity)
/// with fewer than `min_size` pixels.
pub fn remove_speckles(map: &mut DisparityMap, min_size: usize) {
    let (w, h) = (map.width, map.height);
    let mut label = vec![0u32; w * h];
    let mut next = 1u32;
    let mut stack = Vec::new();
    let mut region = Vec::new();
    for start in 0..w * h {
        if label[start] != 0 || map.values[start].is_none() {
            continue;
        }
        label[start] = next;
        stack.push(start);
        region.clear();
        while let Some(i) = stack.pop() {
            region.push(i);
            let d = map.values[i].unwrap() as i32;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if label[j] == 0 {
                    if let Some(e) = map.values[j] {
                        if (e as i32 - d).abs() <= 1 {
                            label[j] = next;
                            stack.push(j);
                        }
                    }
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if region.len() < min_size {
            for &i in &region {
                map.values[i] = None;
            }
        }
        next += 1;
    }
}

/// (2r+1)^2 box sums; zero where the window leaves the image.
fn box_sum(src: &[u32], w: usize, h: usize, r: usize) -> Vec<u32> {
    let mut hs = vec![0u32; w * h];
    for y in 0..h {
        for x in r..w.saturating_sub(r) {
            hs[y * w + x] = src[y * w + x - r..=y * w + x + r].iter().sum();
        }
    }
    let mut out = vec![0u32; w * h];
    for y in r..h.saturating_sub(r) {
        for x in 0..w {
            out[y * w + x] = (y - r..=y + r).map(|yy| hs[yy * w + x]).sum();
        }
    }
    out
}

pub struct DenseDetector<'a> {
    rig: &'a StereoRig,
    params: PerceptionParams,
    pub disparity: DisparityMap,
    cloud: CloudIndex,
}

impl<'a> DenseDetector<'a> {
    pub fn new(left: &GrayImage, right: &GrayImage, rig: &'a StereoRig, params: PerceptionParams) -> Self {
        let disparity = block_match(left, right, &params);
        let mut cloud = CloudIndex::new(params.h_obs, params.h_max);
        for y in 0..disparity.height {
            for x in 0..disparity.width {
                if let Some(d) = disparity.get(x, y) {
                    let depth = rig.intrinsics.fx * rig.baseline / d as f64;
                    cloud.insert(rig, Pixel::new(x as f64, y as f64), depth);
                }
            }
        }
        Self { rig, params, disparity, cloud }
    }

    /// Reconstructed support near a ground query.
    pub fn neighborhood(&self, p: &Point3<f64>, radius: f64) -> Neighborhood {
        self.cloud.query(p, radius)
    }

    pub fn is_free(&self, p: &Point3<f64>, radius: f64) -> Result<bool> {
        if !disc_in_stereo_view(self.rig, p, radius, self.params.window) {
            return Err(Error::OutOfView);
        }
        let n = self.cloud.query(p, radius);
        Ok(n.obstacle < self.params.min_support && n.hole < self.params.min_support)
    }
}

/// Dense reconstruction check on a single query (runs the full matcher).
pub fn is_obstacle_free_dense(
    left: &GrayImage,
    right: &GrayImage,
    rig: &StereoRig,
    p: &Point3<f64>,
    radius: f64,
    params: &PerceptionParams,
) -> Result<bool> {
    DenseDetector::new(left, right, rig, *params).is_free(p, radius)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Free,
    Occupied,
    Skipped,
}

impl CellStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CellStatus::Free => "free",
            CellStatus::Occupied => "occupied",
            CellStatus::Skipped => "skipped",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObstacleGrid {
    pub spec: GridSpec,
    /// Row-major over [`GridSpec::points`].
    pub cells: Vec<CellStatus>,
}

impl ObstacleGrid {
    pub fn dims(&self) -> (usize, usize) {
        self.spec.dims()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,status\n");
        for (p, s) in self.spec.points().iter().zip(&self.cells) {
            out.push_str(&format!("{:.3},{:.3},{}\n", p.x, p.y, s.as_str()));
        }
        out
    }
}

pub fn build_obstacle_grid(
    backend: &PerceptionBackend,
    frame: &Frame,
    rig: &StereoRig,
    grid: &GridSpec,
) -> ObstacleGrid {
    let detector = backend.prepare(&frame.left, &frame.right, rig);
    let cells = grid
        .points()
        .iter()
        .map(|p| match detector.is_free(p, grid.radius) {
            Ok(true) => CellStatus::Free,
            Ok(false) => CellStatus::Occupied,
            Err(_) => CellStatus::Skipped,
        })
        .collect();
    ObstacleGrid { spec: *grid, cells }
}
