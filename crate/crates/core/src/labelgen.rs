//! Training labels from disagreements between a stereo backend and the depth
//! monitor, one per in-view lattice point, each paired with the left-image
//! patch around the point's projection.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::StereoRig;
use crate::image::GrayImage;
use crate::monitor::{DepthMonitor, GridSpec, MonitorParams};
use crate::perception::{BackendKind, PerceptionBackend};
use crate::worldsim::Frame;

pub const PATCH_SIZE: usize = 100;

/// Outcome of the stereo backend relative to the monitor. "Positive" means
/// an obstacle was reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OutcomeClass {
    TP,
    FP,
    FN,
    TN,
}

impl OutcomeClass {
    /// Fixed class order; also the network's output order.
    pub const ALL: [OutcomeClass; 4] = [OutcomeClass::TP, OutcomeClass::FP, OutcomeClass::FN, OutcomeClass::TN];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OutcomeClass::TP => "TP",
            OutcomeClass::FP => "FP",
            OutcomeClass::FN => "FN",
            OutcomeClass::TN => "TN",
        }
    }

    pub fn is_failure(self) -> bool {
        matches!(self, OutcomeClass::FP | OutcomeClass::FN)
    }
}

impl fmt::Display for OutcomeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OutcomeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::format("outcome class", format!("unknown class `{s}`")))
    }
}

/// `o_m`: the monitor says free. `o_s`: the stereo backend says free.
pub fn classify_outcome(o_m: bool, o_s: bool) -> OutcomeClass {
    match (o_m, o_s) {
        (true, true) => OutcomeClass::TN,
        (true, false) => OutcomeClass::FP,
        (false, true) => OutcomeClass::FN,
        (false, false) => OutcomeClass::TP,
    }
}

/// Top-left corner of the `size` x `size` window centered on (u, v), shifted
/// inward where it would leave the image.
pub fn patch_origin(width: usize, height: usize, u: i64, v: i64, size: usize) -> Result<(usize, usize)> {
    if width < size || height < size {
        return Err(Error::ImageTooSmall { width, height, min: size });
    }
    if u < 0 || v < 0 || u >= width as i64 || v >= height as i64 {
        return Err(Error::PixelOutsideImage { u, v, width, height });
    }
    let half = (size / 2) as i64;
    let x0 = (u - half).clamp(0, (width - size) as i64) as usize;
    let y0 = (v - half).clamp(0, (height - size) as i64) as usize;
    Ok((x0, y0))
}

pub fn extract_patch(image: &GrayImage, u: i64, v: i64, size: usize) -> Result<GrayImage> {
    let (x0, y0) = patch_origin(image.width(), image.height(), u, v, size)?;
    Ok(image.crop(x0, y0, size, size))
}

/// One labeled lattice point. `k` is the row-major lattice index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub frame_id: u32,
    pub k: u32,
    pub u: i64,
    pub v: i64,
    /// Query point in the robot frame.
    pub x: f64,
    pub y: f64,
    pub o_m: bool,
    pub o_s: bool,
    pub label: OutcomeClass,
    pub backend: BackendKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatch {
    pub record: LabelRecord,
    pub patch: GrayImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    MonitorOutOfView,
    BackendOutOfView,
    ProjectionOutsideImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skip {
    pub frame_id: u32,
    pub k: u32,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, Default)]
pub struct FrameLabels {
    pub patches: Vec<LabeledPatch>,
    pub skips: Vec<Skip>,
}

/// Runs the backend and the monitor on every lattice point of one frame.
pub fn generate_labels(
    frame: &Frame,
    rig: &StereoRig,
    grid: &GridSpec,
    backend: &PerceptionBackend,
    monitor: &MonitorParams,
) -> Result<FrameLabels> {
    grid.validate()?;
    let detector = backend.prepare(&frame.left, &frame.right, rig);
    let depth = DepthMonitor::new(&frame.depth, rig, monitor);
    let mut out = FrameLabels::default();
    for (k, p) in grid.points().into_iter().enumerate() {
        let skip = |reason| Skip { frame_id: frame.frame_id, k: k as u32, reason };
        let o_m = match depth.is_free(&p, grid.radius) {
            Ok(free) => free,
            Err(Error::OutOfView) => {
                out.skips.push(skip(SkipReason::MonitorOutOfView));
                continue;
            }
            Err(e) => return Err(e),
        };
        let o_s = match detector.is_free(&p, grid.radius) {
            Ok(free) => free,
            Err(Error::OutOfView) => {
                out.skips.push(skip(SkipReason::BackendOutOfView));
                continue;
            }
            Err(e) => return Err(e),
        };
        let Some(px) = rig.robot_to_left_pixel(&p) else {
            out.skips.push(skip(SkipReason::ProjectionOutsideImage));
            continue;
        };
        let (u, v) = px.rounded();
        let patch = match extract_patch(&frame.left, u, v, PATCH_SIZE) {
            Ok(patch) => patch,
            Err(Error::PixelOutsideImage { .. }) => {
                out.skips.push(skip(SkipReason::ProjectionOutsideImage));
                continue;
            }
            Err(e) => return Err(e),
        };
        let record = LabelRecord {
            frame_id: frame.frame_id,
            k: k as u32,
            u,
            v,
            x: p.x,
            y: p.y,
            o_m,
            o_s,
            label: classify_outcome(o_m, o_s),
            backend: backend.kind,
        };
        out.patches.push(LabeledPatch { record, patch });
    }
    Ok(out)
}

/// Per-class label counts plus skips.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    #[serde(rename = "TP")]
    pub tp: usize,
    #[serde(rename = "FP")]
    pub fp: usize,
    #[serde(rename = "FN")]
    pub fn_: usize,
    #[serde(rename = "TN")]
    pub tn: usize,
    pub skipped: usize,
}

impl LabelCounts {
    pub fn add(&mut self, class: OutcomeClass) {
        *self.get_mut(class) += 1;
    }

    pub fn get(&self, class: OutcomeClass) -> usize {
        match class {
            OutcomeClass::TP => self.tp,
            OutcomeClass::FP => self.fp,
            OutcomeClass::FN => self.fn_,
            OutcomeClass::TN => self.tn,
        }
    }

    fn get_mut(&mut self, class: OutcomeClass) -> &mut usize {
        match class {
            OutcomeClass::TP => &mut self.tp,
            OutcomeClass::FP => &mut self.fp,
            OutcomeClass::FN => &mut self.fn_,
            OutcomeClass::TN => &mut self.tn,
        }
    }

    pub fn labeled(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&mut self, other: &LabelCounts) {
        for c in OutcomeClass::ALL {
            *self.get_mut(c) += other.get(c);
        }
        self.skipped += other.skipped;
    }

    pub fn as_array(&self) -> [usize; 4] {
        OutcomeClass::ALL.map(|c| self.get(c))
    }
}

impl FrameLabels {
    pub fn counts(&self) -> LabelCounts {
        let mut c = LabelCounts { skipped: self.skips.len(), ..Default::default() };
        for p in &self.patches {
            c.add(p.record.label);
        }
        c
    }
}

impl fmt::Display for LabelCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TP={} FP={} FN={} TN={} skipped={}", self.tp, self.fp, self.fn_, self.tn, self.skipped)
    }
}

pub const LABELS_HEADER: &str = "frame_id,k,u,v,x,y,o_m,o_s,label,backend";

pub fn patch_file_name(frame_id: u32, k: u32) -> String {
    format!("{frame_id:05}_{k:04}.pgm")
}

pub fn labels_to_csv<'a>(records: impl IntoIterator<Item = &'a LabelRecord>) -> String {
    let mut out = String::from(LABELS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{:.4},{:.4},{},{},{},{}\n",
            r.frame_id,
            r.k,
            r.u,
            r.v,
            r.x,
            r.y,
            r.o_m as u8,
            r.o_s as u8,
            r.label,
            r.backend
        ));
    }
    out
}

pub fn parse_labels_csv(text: &str) -> Result<Vec<LabelRecord>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(LABELS_HEADER) {
        return Err(Error::format("labels.csv", format!("expected header `{LABELS_HEADER}`")));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |what: &str| Error::format("labels.csv", format!("line {}: bad {what}", i + 2));
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 10 {
            return Err(bad("column count"));
        }
        let flag = |s: &str, what| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(bad(what)),
        };
        let record = LabelRecord {
            frame_id: f[0].parse().map_err(|_| bad("frame_id"))?,
            k: f[1].parse().map_err(|_| bad("k"))?,
            u: f[2].parse().map_err(|_| bad("u"))?,
            v: f[3].parse().map_err(|_| bad("v"))?,
            x: f[4].parse().map_err(|_| bad("x"))?,
            y: f[5].parse().map_err(|_| bad("y"))?,
            o_m: flag(f[6], "o_m")?,
            o_s: flag(f[7], "o_s")?,
            label: f[8].parse().map_err(|_| bad("label"))?,
            backend: f[9].parse().map_err(|_| bad("backend"))?,
        };
        if record.label != classify_outcome(record.o_m, record.o_s) {
            return Err(bad("label (inconsistent with o_m/o_s)"));
        }
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truth_table() {
        assert_eq!(classify_outcome(true, true), OutcomeClass::TN);
        assert_eq!(classify_outcome(true, false), OutcomeClass::FP);
        assert_eq!(classify_outcome(false, true), OutcomeClass::FN);
        assert_eq!(classify_outcome(false, false), OutcomeClass::TP);
    }

    #[test]
    fn patch_windows() {
        assert_eq!(patch_origin(960, 600, 480, 300, 100).unwrap(), (430, 250));
        assert_eq!(patch_origin(960, 600, 0, 0, 100).unwrap(), (0, 0));
        assert_eq!(patch_origin(960, 600, 959, 599, 100).unwrap(), (860, 500));
        assert!(matches!(patch_origin(99, 600, 10, 10, 100), Err(Error::ImageTooSmall { .. })));
        assert!(matches!(patch_origin(960, 600, 960, 10, 100), Err(Error::PixelOutsideImage { .. })));
        assert!(matches!(patch_origin(960, 600, -1, 10, 100), Err(Error::PixelOutsideImage { .. })));
    }

    #[test]
    fn csv_round_trip() {
        let r = LabelRecord {
            frame_id: 3,
            k: 17,
            u: 412,
            v: 388,
            x: 1.3,
            y: -0.2,
            o_m: true,
            o_s: false,
            label: OutcomeClass::FP,
            backend: BackendKind::SparseConvex,
        };
        let csv = labels_to_csv([&r]);
        assert_eq!(csv.lines().nth(1).unwrap(), "3,17,412,388,1.3000,-0.2000,1,0,FP,sparse");
        assert_eq!(parse_labels_csv(&csv).unwrap(), vec![r]);
        let tampered = csv.replace(",FP,", ",TN,");
        assert!(parse_labels_csv(&tampered).is_err());
    }
}
