//! The single JSON configuration file. Every section except `sessions` has
//! defaults; unknown keys are rejected.

use std::path::Path;

use introspect::geometry::{CameraIntrinsics, Mount, StereoRig};
use introspect::introspection::derive_seed;
use introspect::monitor::{GridSpec, MonitorParams};
use introspect::network::{NetworkSpec, TrainParams};
use introspect::perception::{BackendKind, PerceptionParams};
use introspect::worldsim::{RenderParams, SessionConfig};
use introspect::{io, Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub rig: RigConfig,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub render: RenderParams,
    #[serde(default)]
    pub monitor: MonitorParams,
    pub sessions: Sessions,
    #[serde(default)]
    pub perception: PerceptionConfig,
    #[serde(default)]
    pub network: NetworkSpec,
    #[serde(default)]
    pub train: TrainParams,
    #[serde(default)]
    pub inference: InferenceParams,
    #[serde(default)]
    pub analysis: AnalysisParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigConfig {
    pub intrinsics: CameraIntrinsics,
    pub baseline: f64,
    pub mount: Mount,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics { fx: 500.0, fy: 500.0, cx: 480.0, cy: 300.0, width: 960, height: 600 },
            baseline: 0.25,
            mount: Mount { height: 0.7, pitch_deg: 15.0, forward: 0.0, lateral: 0.0 },
        }
    }
}

impl RigConfig {
    pub fn build(&self) -> Result<StereoRig> {
        StereoRig::mounted(self.intrinsics, self.baseline, self.mount)
    }
}

/// Training sessions feed the model; test sessions are held out for
/// inference, evaluation and clustering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sessions {
    pub train: Vec<SessionConfig>,
    pub test: Vec<SessionConfig>,
}

impl Sessions {
    pub fn all(&self) -> impl Iterator<Item = &SessionConfig> {
        self.train.iter().chain(&self.test)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptionConfig {
    /// Backends the pipeline is run against, each end to end.
    pub backends: Vec<BackendKind>,
    pub params: PerceptionParams,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self { backends: BackendKind::ALL.to_vec(), params: PerceptionParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceParams {
    /// Stochastic passes per patch.
    pub passes: usize,
    /// Mean-filter kernel over heatmap cells.
    pub kernel: usize,
    /// Abstain where uncertainty is at or above this; `null` disables it.
    pub u_max: Option<f64>,
    /// Heatmaps are built for every n-th test frame.
    pub heatmap_every: usize,
    pub seed: u64,
}

impl Default for InferenceParams {
    fn default() -> Self {
        Self { passes: 20, kernel: 3, u_max: None, heatmap_every: 5, seed: 0 }
    }
}

impl InferenceParams {
    pub fn u_max(&self) -> f64 {
        self.u_max.unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisParams {
    /// Retained fractions at which the uncertainty sweep is reported.
    pub retention: Vec<f64>,
    /// Explicit sweep thresholds; overrides `retention` when non-empty.
    pub thresholds: Vec<f64>,
    pub top_fraction: f64,
    pub clusters: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for AnalysisParams {
    fn default() -> Self {
        Self {
            retention: (1..=10).map(|i| i as f64 / 10.0).collect(),
            thresholds: vec![],
            top_fraction: 0.5,
            clusters: 2,
            max_iter: 100,
            seed: 0,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.rig.build()?;
        self.grid.validate()?;
        self.render.validate()?;
        self.perception.params.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        if self.perception.backends.is_empty() {
            return Err(Error::invalid("perception.backends", "list at least one backend"));
        }
        if self.sessions.train.is_empty() || self.sessions.test.is_empty() {
            return Err(Error::invalid("sessions", "need at least one train and one test session"));
        }
        let mut names: Vec<&str> = self.sessions.all().map(|s| s.name.as_str()).collect();
        for s in self.sessions.all() {
            if s.name.is_empty() || !s.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(Error::invalid("sessions.name", format!("`{}`: use [A-Za-z0-9_-]", s.name)));
            }
            if s.frames == 0 {
                return Err(Error::invalid("sessions.frames", format!("session `{}` has no frames", s.name)));
            }
        }
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("sessions.name", "session names must be unique"));
        }
        let inf = &self.inference;
        if inf.passes == 0 {
            return Err(Error::invalid("inference.passes", "must be at least 1"));
        }
        if inf.kernel == 0 || inf.kernel % 2 == 0 {
            return Err(Error::invalid("inference.kernel", "must be odd"));
        }
        if inf.u_max.is_some_and(|u| !(u >= 0.0)) {
            return Err(Error::invalid("inference.u_max", "must be non-negative"));
        }
        if inf.heatmap_every == 0 {
            return Err(Error::invalid("inference.heatmap_every", "must be at least 1"));
        }
        let a = &self.analysis;
        if !(a.top_fraction > 0.0 && a.top_fraction <= 1.0) {
            return Err(Error::invalid("analysis.top_fraction", "must be in (0, 1]"));
        }
        if a.clusters == 0 {
            return Err(Error::invalid("analysis.clusters", "must be at least 1"));
        }
        if a.thresholds.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid("analysis.thresholds", "must be sorted ascending"));
        }
        Ok(())
    }

    /// Replaces every module seed with one derived from `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        for (i, s) in self.sessions.train.iter_mut().chain(self.sessions.test.iter_mut()).enumerate() {
            s.seed = derive_seed(seed, 1, i as u64);
        }
        self.train.seed = derive_seed(seed, 2, 0);
        self.inference.seed = derive_seed(seed, 3, 0);
        self.analysis.seed = derive_seed(seed, 4, 0);
    }

    pub fn session(&self, name: &str) -> Result<&SessionConfig> {
        self.sessions
            .all()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::invalid("session", format!("no session named `{name}` in the config")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "sessions": {
            "train": [{"name": "a", "template": "benign", "frames": 2}],
            "test": [{"name": "b", "template": "benign", "frames": 1}]
        }
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = Config::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.rig.baseline, 0.25);
        assert_eq!(cfg.inference.passes, 20);
        assert_eq!(cfg.perception.backends.len(), 2);
    }

    #[test]
    fn missing_and_unknown_keys_are_named() {
        let err = Config::from_json("{}").unwrap_err().to_string();
        assert!(err.contains("sessions"), "{err}");
        let err = Config::from_json(&MINIMAL.replacen('{', "{\"bogus\": 1,", 1)).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn seed_override_touches_every_module() {
        let mut cfg = Config::from_json(MINIMAL).unwrap();
        cfg.override_seed(7);
        assert_ne!(cfg.sessions.train[0].seed, cfg.sessions.test[0].seed);
        assert_eq!(cfg.seed, 7);
        assert_ne!(cfg.train.seed, 0);
    }
}
