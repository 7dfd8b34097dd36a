//! Browser bindings: render a synthetic stereo frame, overlay the outcome
//! labels of one perception backend, and show its dense disparity map.

use introspect::geometry::{CameraIntrinsics, Mount, StereoRig};
use introspect::image::GrayImage;
use introspect::labelgen::{generate_labels, LabelCounts};
use introspect::monitor::{GridSpec, MonitorParams};
use introspect::perception::{block_match, BackendKind, PerceptionBackend, PerceptionParams};
use introspect::worldsim::{make_session, Frame, RenderParams, SceneTemplate, Session, SessionConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn default_rig() -> Result<StereoRig, JsError> {
    let intr = CameraIntrinsics::new(500.0, 500.0, 480.0, 300.0, 960, 600).map_err(js_err)?;
    StereoRig::mounted(intr, 0.25, Mount { height: 0.7, pitch_deg: 15.0, forward: 0.0, lateral: 0.0 }).map_err(js_err)
}

fn gray_to_rgba(img: &GrayImage) -> Vec<u8> {
    img.raw().iter().flat_map(|&g| [g, g, g, 255]).collect()
}

#[derive(Serialize)]
struct Point {
    u: i64,
    v: i64,
    x: f64,
    y: f64,
    label: String,
}

#[derive(Serialize)]
struct Overlay {
    backend: BackendKind,
    counts: LabelCounts,
    points: Vec<Point>,
}

/// One generated session and its currently rendered frame.
#[wasm_bindgen]
pub struct Demo {
    session: Session,
    rig: StereoRig,
    grid: GridSpec,
    frame: Frame,
}

#[wasm_bindgen]
impl Demo {
    /// `template` is one of benign, reflective, textureless, dark_stripe, mixed.
    #[wasm_bindgen(constructor)]
    pub fn new(template: &str, seed: u64, frames: usize) -> Result<Demo, JsError> {
        let template: SceneTemplate = serde_json::from_value(serde_json::Value::String(template.into()))
            .map_err(|_| js_err(format!("unknown template `{template}`")))?;
        let grid = GridSpec::default();
        let config = SessionConfig { name: "demo".into(), template, frames, step: 0.1, seed, plants: vec![] };
        let session = make_session(&config, &grid, seed).map_err(js_err)?;
        let rig = default_rig()?;
        let frame = session.render(0, &rig, &Self::render_params()).map_err(js_err)?;
        Ok(Demo { session, rig, grid, frame })
    }

    // single-sample rendering keeps the page responsive
    fn render_params() -> RenderParams {
        RenderParams { supersample: 1, ..RenderParams::default() }
    }

    pub fn frames(&self) -> usize {
        self.session.len()
    }

    pub fn width(&self) -> usize {
        self.frame.left.width()
    }

    pub fn height(&self) -> usize {
        self.frame.left.height()
    }

    /// Renders frame `index` and returns its left image as RGBA.
    pub fn render(&mut self, index: usize) -> Result<Vec<u8>, JsError> {
        if index >= self.session.len() {
            return Err(js_err(format!("frame {index} out of range")));
        }
        self.frame = self.session.render(index, &self.rig, &Self::render_params()).map_err(js_err)?;
        Ok(gray_to_rgba(&self.frame.left))
    }

    /// Outcome labels of `backend` (sparse or dense) on the current
    /// frame as JSON: per-class counts and one entry per labeled lattice point.
    pub fn labels(&self, backend: &str) -> Result<String, JsError> {
        let kind: BackendKind = backend.parse().map_err(js_err)?;
        let perception = PerceptionBackend::new(kind, PerceptionParams::default()).map_err(js_err)?;
        let labels = generate_labels(&self.frame, &self.rig, &self.grid, &perception, &MonitorParams::default())
            .map_err(js_err)?;
        let overlay = Overlay {
            backend: kind,
            counts: labels.counts(),
            points: labels
                .patches
                .iter()
                .map(|p| Point {
                    u: p.record.u,
                    v: p.record.v,
                    x: p.record.x,
                    y: p.record.y,
                    label: p.record.label.to_string(),
                })
                .collect(),
        };
        serde_json::to_string(&overlay).map_err(js_err)
    }

    /// Dense block-matching disparity of the current frame as RGBA: brighter
    /// is nearer, red marks pixels where matching failed.
    pub fn disparity(&self) -> Vec<u8> {
        let params = PerceptionParams::default();
        let map = block_match(&self.frame.left, &self.frame.right, &params);
        let scale = 255.0 / params.max_disparity as f64;
        map.values
            .iter()
            .flat_map(|d| match d {
                Some(d) => {
                    let g = (*d as f64 * scale).min(255.0) as u8;
                    [g, g, g, 255]
                }
                None => [160, 30, 30, 255],
            })
            .collect()
    }
}
