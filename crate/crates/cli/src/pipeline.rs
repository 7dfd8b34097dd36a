//! The subcommands as library functions over an output tree:
//!
//! ```text
//! <out>/config.json                       resolved configuration
//! <out>/sessions/<name>/session.json      scene, poses, planted extents
//! <out>/sessions/<name>/{left,right}/NNNNN.pgm, depth/NNNNN.depth
//! <out>/<backend>/labels/<name>/          labels.csv, dataset.json, patches/
//! <out>/<backend>/model/                  weights.bin, train.json
//! <out>/<backend>/heatmaps/<name>/        NNNNN.csv, NNNNN_<class>.pgm
//! <out>/<backend>/eval/                   records.csv, report.json, sweep.csv
//! <out>/<backend>/cluster/                clusters.csv, summary.json
//! ```
//!
//! Every file is a pure function of the config, so reruns are byte-identical.

use std::path::{Path, PathBuf};

use introspect::analysis::{
    clusters_to_csv, default_pca_dim, evaluate, extract_embedding, kmeans, pca_reduce, purity, retention_thresholds,
    select_failures, sweep_to_csv, uncertainty_sweep, ClusterRow, EvalRecord, EvalReport, KMeans, Pca, SweepPoint,
};
use introspect::geometry::StereoRig;
use introspect::image::{DepthImage, GrayImage};
use introspect::introspection::{
    build_heatmap, decide, derive_seed, load_weights, mean_filter, predict_mc, save_weights, Decision, PatchSet,
};
use introspect::io::{read_json, read_to_string, require, write_atomic, write_json};
use introspect::labelgen::{
    generate_labels, labels_to_csv, parse_labels_csv, patch_file_name, LabelCounts, LabelRecord, OutcomeClass,
    PATCH_SIZE,
};
use introspect::network::{train, Network, TrainReport};
use introspect::perception::{BackendKind, PerceptionBackend};
use introspect::worldsim::{make_session, Frame, Session, SurfaceKind};
use introspect::{par, Error, Result};
use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::config::Config;

pub struct Pipeline {
    pub cfg: Config,
    pub out: PathBuf,
    pub quiet: bool,
    rig: StereoRig,
}

fn frame_name(i: usize) -> String {
    format!("{i:05}")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetManifest {
    session: String,
    backend: BackendKind,
    perception: introspect::perception::PerceptionParams,
    monitor: introspect::monitor::MonitorParams,
    grid: introspect::monitor::GridSpec,
    rig: StereoRig,
    session_seed: u64,
    frames: usize,
    counts: LabelCounts,
}

#[derive(Debug, Clone, Serialize)]
struct TrainSummary<'a> {
    backend: BackendKind,
    network: &'a introspect::network::NetworkSpec,
    train: &'a introspect::network::TrainParams,
    sessions: Vec<&'a str>,
    patches: usize,
    report: &'a TrainReport,
}

/// An evaluation record plus where it came from.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub session: String,
    pub record: EvalRecord,
    /// Planted failure surface within the query radius, if any.
    pub planted: Option<SurfaceKind>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub sweep: Vec<SweepPoint>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClusterSummary {
    pub selected: usize,
    pub embedding_dim: usize,
    pub pca_dim: usize,
    pub objective_history: Vec<f64>,
    pub iterations: usize,
    /// Cluster purity against the planted surface kind (reflective versus
    /// textureless or dark stripe), over selected points near one.
    pub planted_purity: Option<f64>,
    pub attributed: usize,
}

#[derive(Debug, Clone)]
pub struct ClusterOutput {
    pub summary: ClusterSummary,
    pub kmeans: KMeans,
    pub pca: Option<Pca>,
}

impl Pipeline {
    pub fn new(cfg: Config, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let rig = cfg.rig.build()?;
        Ok(Self { cfg, out: out.into(), quiet: false, rig })
    }

    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    pub fn rig(&self) -> &StereoRig {
        &self.rig
    }

    pub fn session_dir(&self, name: &str) -> PathBuf {
        self.out.join("sessions").join(name)
    }

    pub fn backend_dir(&self, backend: BackendKind) -> PathBuf {
        self.out.join(backend.name())
    }

    pub fn labels_dir(&self, backend: BackendKind, session: &str) -> PathBuf {
        self.backend_dir(backend).join("labels").join(session)
    }

    pub fn weights_path(&self, backend: BackendKind) -> PathBuf {
        self.backend_dir(backend).join("model").join("weights.bin")
    }

    fn echo_config(&self) -> Result<()> {
        write_json(&self.out.join("config.json"), &self.cfg)
    }

    /// Renders every configured session. Returns (name, frame count) pairs.
    pub fn gen(&self) -> Result<Vec<(String, usize)>> {
        self.echo_config()?;
        let mut out = Vec::new();
        for sc in self.cfg.sessions.all() {
            let session = make_session(sc, &self.cfg.grid, sc.seed)?;
            let dir = self.session_dir(&sc.name);
            write_json(&dir.join("session.json"), &session)?;
            let written = par::map_range(session.len(), |i| -> Result<()> {
                let f = session.render(i, &self.rig, &self.cfg.render)?;
                let name = frame_name(i);
                f.left.save_pgm(&dir.join("left").join(format!("{name}.pgm")))?;
                f.right.save_pgm(&dir.join("right").join(format!("{name}.pgm")))?;
                f.depth.save(&dir.join("depth").join(format!("{name}.depth")))
            });
            written.into_iter().collect::<Result<()>>()?;
            self.note(format!("gen {}: {} frames", sc.name, session.len()));
            out.push((sc.name.clone(), session.len()));
        }
        Ok(out)
    }

    pub fn load_session(&self, name: &str) -> Result<Session> {
        read_json(&self.session_dir(name).join("session.json"))
    }

    pub fn load_left(&self, session: &str, i: usize) -> Result<GrayImage> {
        let path = self.session_dir(session).join("left").join(format!("{}.pgm", frame_name(i)));
        require(&path)?;
        GrayImage::load_pgm(&path)
    }

    pub fn load_frame(&self, session: &Session, i: usize) -> Result<Frame> {
        let dir = self.session_dir(&session.name);
        let name = frame_name(i);
        let paths = [
            dir.join("left").join(format!("{name}.pgm")),
            dir.join("right").join(format!("{name}.pgm")),
            dir.join("depth").join(format!("{name}.depth")),
        ];
        for p in &paths {
            require(p)?;
        }
        Ok(Frame {
            left: GrayImage::load_pgm(&paths[0])?,
            right: GrayImage::load_pgm(&paths[1])?,
            depth: DepthImage::load(&paths[2])?,
            pose: session.poses[i],
            frame_id: i as u32,
        })
    }

    /// Labels one session (or all when `session` is `None`) for `backend`.
    pub fn label(&self, backend: BackendKind, session: Option<&str>) -> Result<Vec<(String, LabelCounts)>> {
        let names: Vec<String> = match session {
            Some(name) => vec![self.cfg.session(name)?.name.clone()],
            None => self.cfg.sessions.all().map(|s| s.name.clone()).collect(),
        };
        let perception = PerceptionBackend::new(backend, self.cfg.perception.params)?;
        let mut results = Vec::new();
        for name in names {
            let session = self.load_session(&name)?;
            let dir = self.labels_dir(backend, &name);
            let frames = par::map_range(session.len(), |i| -> Result<_> {
                let frame = self.load_frame(&session, i)?;
                let labels = generate_labels(&frame, &self.rig, &self.cfg.grid, &perception, &self.cfg.monitor)?;
                for p in &labels.patches {
                    p.patch.save_pgm(&dir.join("patches").join(patch_file_name(p.record.frame_id, p.record.k)))?;
                }
                Ok(labels)
            });
            let mut counts = LabelCounts::default();
            let mut records = Vec::new();
            for f in frames {
                let f = f?;
                counts.merge(&f.counts());
                records.extend(f.patches.into_iter().map(|p| p.record));
            }
            write_atomic(&dir.join("labels.csv"), labels_to_csv(&records).as_bytes())?;
            let manifest = DatasetManifest {
                session: name.clone(),
                backend,
                perception: self.cfg.perception.params,
                monitor: self.cfg.monitor,
                grid: self.cfg.grid,
                rig: self.rig.clone(),
                session_seed: session.seed,
                frames: session.len(),
                counts,
            };
            write_json(&dir.join("dataset.json"), &manifest)?;
            self.note(format!("label {name} [{backend}]: {counts}"));
            results.push((name, counts));
        }
        Ok(results)
    }

    pub fn load_labels(&self, backend: BackendKind, session: &str) -> Result<Vec<LabelRecord>> {
        parse_labels_csv(&read_to_string(&self.labels_dir(backend, session).join("labels.csv"))?)
    }

    /// Patches of the listed sessions, cut from their stored left frames.
    pub fn patch_set(&self, backend: BackendKind, sessions: &[&str]) -> Result<(PatchSet, Vec<(String, LabelRecord)>)> {
        let mut set = PatchSet::new(PATCH_SIZE);
        let mut refs = Vec::new();
        for &name in sessions {
            let records = self.load_labels(backend, name)?;
            let session = self.load_session(name)?;
            let mut image_of = vec![None; session.len()];
            for r in records {
                let i = r.frame_id as usize;
                if i >= session.len() {
                    return Err(Error::format("labels.csv", format!("frame {i} outside session `{name}`")));
                }
                let img = match image_of[i] {
                    Some(img) => img,
                    None => {
                        let img = set.add_image(self.load_left(name, i)?);
                        image_of[i] = Some(img);
                        img
                    }
                };
                set.push(img, r.u, r.v, r.label)?;
                refs.push((name.to_string(), r));
            }
        }
        Ok((set, refs))
    }

    pub fn train(&self, backend: BackendKind) -> Result<(Network<f32>, TrainReport)> {
        let names: Vec<&str> = self.cfg.sessions.train.iter().map(|s| s.name.as_str()).collect();
        let (set, _) = self.patch_set(backend, &names)?;
        self.note(format!("train [{backend}]: {} patches, class counts {:?}", set.items.len(), {
            use introspect::network::PatchSource;
            set.class_counts()
        }));
        let mut net = Network::init(self.cfg.network.clone(), self.cfg.train.seed)?;
        let report = train(&mut net, &set, &self.cfg.train, |e, loss| self.note(format!("  epoch {e}: loss {loss:.4}")))?;
        let dir = self.backend_dir(backend).join("model");
        save_weights(&dir.join("weights.bin"), &net, self.cfg.train.seed)?;
        let summary = TrainSummary {
            backend,
            network: &self.cfg.network,
            train: &self.cfg.train,
            sessions: names,
            patches: set.items.len(),
            report: &report,
        };
        write_json(&dir.join("train.json"), &summary)?;
        self.echo_config()?;
        Ok((net, report))
    }

    fn load_net(&self, backend: BackendKind) -> Result<Network<f32>> {
        Ok(load_weights(&self.weights_path(backend))?.0)
    }

    /// Filtered heatmaps for every `heatmap_every`-th test frame. Returns the
    /// number written.
    pub fn infer(&self, backend: BackendKind) -> Result<usize> {
        let net = self.load_net(backend)?;
        let inf = &self.cfg.inference;
        let mut written = 0;
        for (si, sc) in self.cfg.sessions.test.iter().enumerate() {
            let dir = self.backend_dir(backend).join("heatmaps").join(&sc.name);
            for i in (0..sc.frames).step_by(inf.heatmap_every) {
                let left = self.load_left(&sc.name, i)?;
                let seed = derive_seed(inf.seed, si as u64, i as u64);
                let hm = mean_filter(&build_heatmap(&net, &left, inf.passes, seed)?, inf.kernel)?;
                let name = frame_name(i);
                write_atomic(&dir.join(format!("{name}.csv")), hm.to_csv().as_bytes())?;
                for c in OutcomeClass::ALL {
                    hm.class_image(c).save_pgm(&dir.join(format!("{name}_{}.pgm", c.name().to_lowercase())))?;
                }
                written += 1;
            }
        }
        self.echo_config()?;
        self.note(format!("infer [{backend}]: {written} heatmaps"));
        Ok(written)
    }

    /// MC predictions for every labeled test patch.
    pub fn eval_rows(&self, backend: BackendKind, net: &Network<f32>) -> Result<Vec<EvalRow>> {
        let inf = &self.cfg.inference;
        let mut rows = Vec::new();
        for (si, sc) in self.cfg.sessions.test.iter().enumerate() {
            let (set, refs) = self.patch_set(backend, &[sc.name.as_str()])?;
            let session = self.load_session(&sc.name)?;
            let preds = par::map_range(refs.len(), |j| {
                let r = &refs[j].1;
                let seed = derive_seed(inf.seed ^ si as u64, r.frame_id as u64, r.k as u64);
                predict_mc(net, &set.patch(j), inf.passes, seed)
            });
            for ((_, r), p) in refs.iter().zip(preds) {
                let p = p?;
                let mut record = EvalRecord::new(r.label, &p, decide(&p, inf.u_max()));
                (record.x, record.y, record.frame_id, record.k) = (r.x, r.y, r.frame_id, r.k);
                let planted = planted_kind(&session, r, self.cfg.grid.radius);
                rows.push(EvalRow { session: sc.name.clone(), record, planted });
            }
        }
        Ok(rows)
    }

    pub fn eval(&self, backend: BackendKind) -> Result<EvalOutput> {
        let net = self.load_net(backend)?;
        let rows = self.eval_rows(backend, &net)?;
        let records: Vec<EvalRecord> = rows.iter().map(|r| r.record).collect();
        let report = evaluate(&records)?;
        let a = &self.cfg.analysis;
        let thresholds =
            if a.thresholds.is_empty() { retention_thresholds(&records, &a.retention) } else { a.thresholds.clone() };
        let sweep = uncertainty_sweep(&records, &thresholds);
        let dir = self.backend_dir(backend).join("eval");
        write_atomic(&dir.join("records.csv"), records_to_csv(&rows).as_bytes())?;
        write_json(&dir.join("report.json"), &report)?;
        write_atomic(&dir.join("sweep.csv"), sweep_to_csv(&sweep).as_bytes())?;
        self.echo_config()?;
        self.note(format!("eval [{backend}]: accuracy {:?}", report.accuracy));
        Ok(EvalOutput { report, sweep })
    }

    /// Embeds the most confident predicted failures among the test records
    /// and splits them with k-means.
    pub fn cluster(&self, backend: BackendKind) -> Result<ClusterOutput> {
        let net = self.load_net(backend)?;
        let rows = self.eval_rows(backend, &net)?;
        let records: Vec<EvalRecord> = rows.iter().map(|r| r.record).collect();
        let a = &self.cfg.analysis;
        let selected = select_failures(&records, a.top_fraction)?;
        let mut embeddings = Vec::with_capacity(selected.len());
        for &i in &selected {
            let row = &rows[i];
            let left = self.load_left(&row.session, row.record.frame_id as usize)?;
            let (u, v) = self.locate(&row.record)?;
            let patch = introspect::labelgen::extract_patch(&left, u, v, PATCH_SIZE)?;
            embeddings.push(extract_embedding(&net, &patch.to_f32())?);
        }
        if embeddings.len() < a.clusters {
            return Err(Error::invalid("analysis.clusters", "fewer selected failures than clusters"));
        }
        let km = kmeans(&embeddings, a.clusters, a.seed, a.max_iter)?;
        let d = net.embedding_len();
        let pca_dim = default_pca_dim(d);
        let viz = if embeddings.len() >= 2 { Some(pca_reduce(&embeddings, pca_dim.max(2).min(d))?) } else { None };
        let cluster_rows: Vec<ClusterRow> = selected
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                let r = &rows[i].record;
                let (viz_x, viz_y) = viz.as_ref().map_or((0.0, 0.0), |p| (p.projected[j][0], p.projected[j][1]));
                ClusterRow {
                    frame_id: r.frame_id,
                    k: r.k,
                    predicted: r.predicted.class().unwrap(),
                    confidence: r.confidence,
                    cluster: km.assignments[j],
                    viz_x,
                    viz_y,
                }
            })
            .collect();
        let (mut assigned, mut kinds) = (vec![], vec![]);
        for (j, &i) in selected.iter().enumerate() {
            if let Some(k) = rows[i].planted {
                assigned.push(km.assignments[j]);
                kinds.push((k != SurfaceKind::ReflectiveGround) as usize);
            }
        }
        let summary = ClusterSummary {
            selected: selected.len(),
            embedding_dim: d,
            pca_dim,
            objective_history: km.history.clone(),
            iterations: km.iterations,
            planted_purity: (!assigned.is_empty()).then(|| purity(&assigned, &kinds)),
            attributed: assigned.len(),
        };
        let dir = self.backend_dir(backend).join("cluster");
        write_atomic(&dir.join("clusters.csv"), clusters_to_csv(&cluster_rows).as_bytes())?;
        write_json(&dir.join("summary.json"), &summary)?;
        self.echo_config()?;
        self.note(format!("cluster [{backend}]: {} failures, purity {:?}", summary.selected, summary.planted_purity));
        Ok(ClusterOutput { summary, kmeans: km, pca: viz })
    }

    fn locate(&self, r: &EvalRecord) -> Result<(i64, i64)> {
        let px = self.rig.robot_to_left_pixel(&Point3::new(r.x, r.y, 0.0)).ok_or(Error::OutOfView)?;
        Ok(px.rounded())
    }

    pub fn backends(&self, only: Option<BackendKind>) -> Vec<BackendKind> {
        match only {
            Some(b) => vec![b],
            None => self.cfg.perception.backends.clone(),
        }
    }

    /// gen, then label/train/infer/eval/cluster for each backend.
    pub fn all(&self, only: Option<BackendKind>) -> Result<()> {
        self.gen()?;
        for backend in self.backends(only) {
            self.label(backend, None)?;
            self.train(backend)?;
            self.infer(backend)?;
            self.eval(backend)?;
            match self.cluster(backend) {
                Err(Error::NothingToCluster) => self.note(format!("cluster [{backend}]: no predicted failures")),
                other => {
                    other?;
                }
            }
        }
        Ok(())
    }
}

/// Failure surface whose footprint comes within `radius` of the record's
/// query point.
fn planted_kind(session: &Session, r: &LabelRecord, radius: f64) -> Option<SurfaceKind> {
    let pose = session.poses.get(r.frame_id as usize)?;
    let w = pose.robot_to_world(&Point3::new(r.x, r.y, 0.0));
    session.failure_extents().find(|e| e.footprint.distance(w.x, w.y) <= radius).map(|e| e.kind)
}

fn records_to_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from("session,frame_id,k,x,y,truth,predicted,confidence,uncertainty,planted\n");
    for row in rows {
        let r = &row.record;
        let pred = match r.predicted {
            Decision::Class(c) => c.name(),
            Decision::Abstain => "abstain",
        };
        let planted = row.planted.map_or("none".to_string(), |k| {
            serde_json::to_value(k).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
        });
        out.push_str(&format!(
            "{},{},{},{:.4},{:.4},{},{},{:.6},{:.8e},{}\n",
            row.session, r.frame_id, r.k, r.x, r.y, r.truth, pred, r.confidence, r.uncertainty, planted
        ));
    }
    out
}

/// Loads the bundled or a user config, applying a seed override.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<Config> {
    let mut cfg = Config::load(path)?;
    if let Some(s) = seed {
        cfg.override_seed(s);
    }
    Ok(cfg)
}
