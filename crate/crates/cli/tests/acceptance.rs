//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. The heavy criteria (3, 4, 7, 8) share one run
//! of the library pipeline on `configs/acceptance.json`; expect it to take
//! tens of minutes on one core.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use introspect::analysis::{EvalReport, SweepPoint};
use introspect::geometry::{back_project, Pixel, StereoRig};
use introspect::introspection::{build_heatmap, mean_filter, predict_mc, Heatmap};
use introspect::labelgen::{classify_outcome, generate_labels, OutcomeClass};
use introspect::monitor::{geometric_oracle, DepthMonitor, GridSpec, MonitorParams};
use introspect::network::{ConvSpec, Network, NetworkSpec};
use introspect::perception::{BackendKind, PerceptionBackend, PerceptionParams};
use introspect::worldsim::{make_session, ray_cast_depth, RenderParams, SceneTemplate, Session, SessionConfig, SurfaceKind};
use introspect::Error;
use introspect_cli::config::Config;
use introspect_cli::pipeline::{ClusterOutput, EvalOutput, Pipeline};
use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Res<T> = std::result::Result<T, Box<dyn std::error::Error>>;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn progress(msg: impl AsRef<str>) {
    eprintln!("[acceptance] {}", msg.as_ref());
}

fn fmt_acc(acc: &[Option<f64>; 4]) -> String {
    OutcomeClass::ALL
        .iter()
        .zip(acc)
        .map(|(c, a)| format!("{c}={}", a.map_or("n/a".into(), |a| format!("{a:.3}"))))
        .collect::<Vec<_>>()
        .join(" ")
}

fn all_at_least(acc: &[Option<f64>; 4], min: f64) -> bool {
    acc.iter().all(|a| a.is_some_and(|a| a >= min))
}

fn world_xy(session: &Session, frame: usize, x: f64, y: f64) -> (f64, f64) {
    let w = session.poses[frame].robot_to_world(&Point3::new(x, y, 0.0));
    (w.x, w.y)
}

// ---------------------------------------------------------------------------
// 1. Oracle equivalence

fn oracle_equivalence(cfg: &Config, rig: &StereoRig) -> Res<Verdict> {
    let t = Instant::now();
    let sc = SessionConfig {
        name: "benign".into(),
        template: SceneTemplate::Benign,
        frames: 20,
        step: 0.1,
        seed: 31,
        plants: vec![],
    };
    let session = make_session(&sc, &cfg.grid, sc.seed)?;
    let render = RenderParams { depth_noise_sigma: 0.0, ..cfg.render };
    let backends = [
        PerceptionBackend::new(BackendKind::SparseConvex, cfg.perception.params)?,
        PerceptionBackend::new(BackendKind::DenseBm, cfg.perception.params)?,
    ];
    // [monitor, sparse, dense] x (agree, total)
    let mut tally = [(0usize, 0usize); 3];
    let mut occupied = 0;
    for i in 0..session.len() {
        let f = session.render(i, rig, &render)?;
        let monitor = DepthMonitor::new(&f.depth, rig, &cfg.monitor);
        let detectors: Vec<_> = backends.iter().map(|b| b.prepare(&f.left, &f.right, rig)).collect();
        for p in cfg.grid.points() {
            let w = f.pose.robot_to_world(&p);
            let truth = geometric_oracle(&session.scene, w.x, w.y, cfg.grid.radius);
            let answers = [
                monitor.is_free(&p, cfg.grid.radius),
                detectors[0].is_free(&p, cfg.grid.radius),
                detectors[1].is_free(&p, cfg.grid.radius),
            ];
            // in view means the monitor can see the ground there: points in
            // an occlusion shadow have no observable answer for any sensor
            if matches!(answers[0], Err(Error::OutOfView)) {
                continue;
            }
            occupied += !truth as usize;
            for (slot, a) in tally.iter_mut().zip(answers) {
                match a {
                    Ok(free) => {
                        slot.0 += (free == truth) as usize;
                        slot.1 += 1;
                    }
                    Err(Error::OutOfView) => {}
                    Err(e) => return Err(e.into()),
                }
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let rate = |(a, n): (usize, usize)| if n == 0 { 0.0 } else { a as f64 / n as f64 };
    let pass = tally[0].1 > 0
        && tally[0].0 == tally[0].1
        && rate(tally[1]) >= 0.99
        && rate(tally[2]) >= 0.99
        && occupied > 0
        && secs < 120.0;
    Ok(verdict(
        pass,
        format!(
            "20 benign frames: monitor {}/{}, sparse {:.4} of {}, dense {:.4} of {} ({} occupied queries), {secs:.1}s",
            tally[0].0,
            tally[0].1,
            rate(tally[1]),
            tally[1].1,
            rate(tally[2]),
            tally[2].1,
            occupied
        ),
    ))
}

// ---------------------------------------------------------------------------
// 2. Label correctness

/// Label counts for lattice points whose world position lies inside a planted
/// extent of `kind`.
fn labels_inside(
    cfg: &Config,
    rig: &StereoRig,
    session: &Session,
    backend: BackendKind,
    kind: SurfaceKind,
) -> Res<BTreeMap<OutcomeClass, usize>> {
    let perception = PerceptionBackend::new(backend, cfg.perception.params)?;
    let mut counts = BTreeMap::new();
    for i in 0..session.len() {
        let f = session.render(i, rig, &cfg.render)?;
        let labels = generate_labels(&f, rig, &cfg.grid, &perception, &cfg.monitor)?;
        for p in &labels.patches {
            let (x, y) = world_xy(session, i, p.record.x, p.record.y);
            if session.failure_extents().any(|e| e.kind == kind && e.footprint.contains(x, y)) {
                *counts.entry(p.record.label).or_insert(0) += 1;
            }
        }
    }
    Ok(counts)
}

fn fraction(counts: &BTreeMap<OutcomeClass, usize>, class: OutcomeClass) -> (f64, usize) {
    let total: usize = counts.values().sum();
    let hit = counts.get(&class).copied().unwrap_or(0);
    (if total == 0 { 0.0 } else { hit as f64 / total as f64 }, total)
}

fn label_correctness(cfg: &Config, rig: &StereoRig) -> Res<Verdict> {
    let table = [
        ((true, true), OutcomeClass::TN),
        ((true, false), OutcomeClass::FP),
        ((false, true), OutcomeClass::FN),
        ((false, false), OutcomeClass::TP),
    ];
    let truth_ok = table.iter().all(|&((m, s), c)| classify_outcome(m, s) == c);

    let planted = |template, seed| {
        let sc = SessionConfig { name: "planted".into(), template, frames: 10, step: 0.1, seed, plants: vec![] };
        make_session(&sc, &cfg.grid, seed)
    };
    let reflective = planted(SceneTemplate::Reflective, 41)?;
    let textureless = planted(SceneTemplate::Textureless, 42)?;

    let fp = labels_inside(cfg, rig, &reflective, BackendKind::SparseConvex, SurfaceKind::ReflectiveGround)?;
    let (fp_rate, fp_n) = fraction(&fp, OutcomeClass::FP);
    let mut detail = format!("truth table {}; reflective/sparse FP {fp_rate:.3} of {fp_n}", if truth_ok { "ok" } else { "WRONG" });
    let mut pass = truth_ok && fp_n > 0 && fp_rate >= 0.9;
    for backend in BackendKind::ALL {
        let fn_ = labels_inside(cfg, rig, &textureless, backend, SurfaceKind::Textureless)?;
        let (rate, n) = fraction(&fn_, OutcomeClass::FN);
        detail.push_str(&format!("; textureless/{backend} FN {rate:.3} of {n}"));
        pass &= n > 0 && rate >= 0.9;
    }
    Ok(verdict(pass, detail))
}

// ---------------------------------------------------------------------------
// 5. MC-dropout identities

fn random_patch(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    (0..len).map(|_| rng.gen::<f32>()).collect()
}

fn mc_identities() -> Res<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let len = NetworkSpec::default().input_len();

    let det = Network::<f32>::init(NetworkSpec { p_drop: 0.0, ..NetworkSpec::default() }, 52)?;
    let mut exact = true;
    for i in 0..20 {
        let patch = random_patch(&mut rng, len);
        let pred = predict_mc(&det, &patch, 20, i)?;
        let fwd = det.forward(&patch, None)?;
        exact &= pred.variance == [0.0; 4] && pred.uncertainty == 0.0;
        exact &= pred.mean.iter().zip(fwd).all(|(&m, f)| m == f as f64);
    }

    let net = Network::<f32>::init(NetworkSpec::default(), 53)?;
    let mut worst = 0.0f64;
    for i in 0..10_000u64 {
        let patch = random_patch(&mut rng, len);
        let pred = predict_mc(&net, &patch, 20, i)?;
        worst = worst.max((pred.mean.iter().sum::<f64>() - 1.0).abs());
    }

    let image = introspect::image::GrayImage::from_f32(960, 600, &random_patch(&mut rng, 960 * 600))?;
    let with_threads = |n: usize| -> Res<Heatmap> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
        Ok(pool.install(|| build_heatmap(&net, &image, 20, 54))?)
    };
    let serial = with_threads(1)?;
    let parallel = with_threads(4)?;
    let same = serial == parallel && serial.cells.len() == 26 * 44;

    let pass = exact && worst <= 1e-6 && same;
    Ok(verdict(
        pass,
        format!(
            "p_drop=0 exact {exact}; max |sum-1| over 10k patches {worst:.2e}; 26x44 heatmap 1 vs 4 threads identical {same}"
        ),
    ))
}

// ---------------------------------------------------------------------------
// 6. Gradient check

fn random_spec(rng: &mut ChaCha8Rng) -> NetworkSpec {
    loop {
        let convs = rng.gen_range(1..=2);
        let conv = (0..convs)
            .map(|_| ConvSpec {
                out_channels: rng.gen_range(2..=4),
                kernel: [3, 5][rng.gen_range(0..2)],
                stride: rng.gen_range(1..=2),
                padding: rng.gen_range(0..=1),
                pool: rng.gen_bool(0.5),
            })
            .collect();
        let spec = NetworkSpec {
            input_size: rng.gen_range(10..=16),
            conv,
            fc: vec![rng.gen_range(4..=8), rng.gen_range(4..=8), 4],
            p_drop: 0.5,
        };
        if spec.validate().is_ok() {
            return spec;
        }
    }
}

fn gradient_check() -> Res<Verdict> {
    const H: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0usize, 0usize);
    for seed in 0..5 {
        let spec = random_spec(&mut rng);
        let mut net = Network::<f64>::init(spec, seed)?;
        let input = random_patch(&mut rng, net.spec().input_len());
        let label = OutcomeClass::ALL[rng.gen_range(0..4)];
        let weight = rng.gen_range(0.5..3.0);
        let masks = net.sample_masks(&mut rng);
        let mut grad = vec![0.0; net.num_params()];
        net.loss_and_grad(&input, label, weight, masks.as_ref(), &mut grad)?;
        let pattern = net.activation_pattern(&input, masks.as_ref())?;
        let mut scratch = vec![0.0; net.num_params()];
        for i in 0..net.num_params() {
            let p0 = net.params()[i];
            let mut at = |v: f64, net: &mut Network<f64>| -> Res<(f64, bool)> {
                net.params_mut()[i] = v;
                let loss = net.loss_and_grad(&input, label, weight, masks.as_ref(), &mut scratch)?;
                Ok((loss, net.activation_pattern(&input, masks.as_ref())? == pattern))
            };
            let (lp, same_p) = at(p0 + H, &mut net)?;
            let (lm, same_m) = at(p0 - H, &mut net)?;
            net.params_mut()[i] = p0;
            // a ReLU or pooling switch inside the stencil makes the finite
            // difference meaningless
            if !(same_p && same_m) {
                skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * H);
            let rel = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    Ok(verdict(
        worst < 1e-4 && checked > 0,
        format!("5 random nets, {checked} parameters checked ({skipped} at kinks skipped), max relative error {worst:.2e}"),
    ))
}

// ---------------------------------------------------------------------------
// Shared pipeline run for 3, 4, 7, 8

struct BackendRun {
    eval: EvalOutput,
    cluster: Option<ClusterOutput>,
    train_frames: usize,
    train_patches: usize,
    /// gen + label + train + eval, for the first backend only.
    seconds: f64,
}

fn run_backend(pipe: &Pipeline, backend: BackendKind, gen_seconds: f64) -> Res<BackendRun> {
    let t = Instant::now();
    progress(format!("label [{backend}]"));
    let counts = pipe.label(backend, None)?;
    let train_names: Vec<&str> = pipe.cfg.sessions.train.iter().map(|s| s.name.as_str()).collect();
    let train_patches =
        counts.iter().filter(|(n, _)| train_names.contains(&n.as_str())).map(|(_, c)| c.labeled()).sum();
    let train_frames = pipe.cfg.sessions.train.iter().map(|s| s.frames).sum();
    progress(format!("train [{backend}]: {train_patches} patches from {train_frames} frames"));
    pipe.train(backend)?;
    progress(format!("eval [{backend}]"));
    let eval = pipe.eval(backend)?;
    let seconds = gen_seconds + t.elapsed().as_secs_f64();
    progress(format!("infer + cluster [{backend}]"));
    pipe.infer(backend)?;
    let cluster = match pipe.cluster(backend) {
        Ok(c) => Some(c),
        Err(Error::NothingToCluster) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(BackendRun { eval, cluster, train_frames, train_patches, seconds })
}

fn learnability(run: &BackendRun) -> Verdict {
    let acc = &run.eval.report.accuracy;
    let pass = all_at_least(acc, 0.8) && run.train_frames >= 200 && run.train_patches >= 50_000 && run.seconds < 1800.0;
    verdict(
        pass,
        format!(
            "sparse backend, {} training frames, {} training patches; held-out {}; {:.0}s",
            run.train_frames,
            run.train_patches,
            fmt_acc(acc),
            run.seconds
        ),
    )
}

fn sweep_shape(sweep: &[SweepPoint]) -> Verdict {
    // loosest threshold first
    let mut points: Vec<&SweepPoint> = sweep.iter().filter(|p| p.accuracy.is_some()).collect();
    points.sort_by(|a, b| b.threshold.total_cmp(&a.threshold));
    let Some(full) = points.first().filter(|p| p.threshold.is_infinite()) else {
        return verdict(false, "sweep has no unfiltered point");
    };
    let mut worst_drop = 0.0f64;
    for w in points.windows(2) {
        worst_drop = worst_drop.max(w[0].accuracy.unwrap() - w[1].accuracy.unwrap());
    }
    let at70 = points.iter().min_by(|a, b| (a.retained - 0.7).abs().total_cmp(&(b.retained - 0.7).abs())).unwrap();
    let (a_full, a70) = (full.accuracy.unwrap(), at70.accuracy.unwrap());
    let pass = points.len() >= 3 && worst_drop <= 0.01 && (at70.retained - 0.7).abs() < 0.05 && a70 > a_full;
    verdict(
        pass,
        format!(
            "{} thresholds, largest drop while tightening {:.4}; mean accuracy {a_full:.4} unfiltered, {a70:.4} at {:.0}% retained",
            points.len(),
            worst_drop.max(0.0),
            at70.retained * 100.0
        ),
    )
}

fn clustering(run: &BackendRun) -> Verdict {
    let Some(c) = &run.cluster else { return verdict(false, "no predicted failures to cluster") };
    let s = &c.summary;
    let monotone = c.kmeans.history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12));
    let mut ortho = 0.0f64;
    if let Some(pca) = &c.pca {
        for (i, a) in pca.components.iter().enumerate() {
            for (j, b) in pca.components.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                ortho = ortho.max((dot - (i == j) as u8 as f64).abs());
            }
        }
    }
    let purity = s.planted_purity.unwrap_or(0.0);
    let pass = purity >= 0.9 && monotone && c.pca.is_some() && ortho <= 1e-9;
    verdict(
        pass,
        format!(
            "{} failures selected, {} near a planted surface, purity {purity:.3}; objective non-increasing over {} steps {monotone}; PCA max |QᵀQ-I| {ortho:.1e}",
            s.selected,
            s.attributed,
            c.kmeans.history.len()
        ),
    )
}

/// Surface kind seen at a left-image pixel, if it is an obstacle face.
fn surface_at(session: &Session, rig: &StereoRig, frame: usize, u: f64, v: f64) -> Option<SurfaceKind> {
    let pose = &session.poses[frame];
    let z = ray_cast_depth(&session.scene, rig, pose, u, v)?;
    let cam = back_project(Pixel::new(u, v), z, &rig.intrinsics);
    let w = pose.robot_to_world(&rig.left_cam_to_robot(&cam));
    if w.z < 0.01 {
        return None;
    }
    session
        .scene
        .obstacles
        .iter()
        .find(|b| w.z <= b.max[2] + 1e-6 && w.z >= b.min[2] - 1e-6 && b.footprint().distance(w.x, w.y) < 1e-3)
        .map(|b| b.kind)
}

struct SurfaceStats {
    /// Share of labels inside the surface's extents that are FN.
    miss_rate: f64,
    labels: usize,
    /// Mean filtered FN probability over heatmap cells centered on the surface.
    fn_mass: f64,
    cells: usize,
}

fn surface_stats(pipe: &Pipeline, backend: BackendKind, kind: SurfaceKind) -> Res<SurfaceStats> {
    let net = introspect::introspection::load_weights(&pipe.weights_path(backend))?.0;
    let inf = &pipe.cfg.inference;
    let (mut fn_labels, mut labels, mut mass, mut cells) = (0, 0, 0.0, 0);
    for sc in &pipe.cfg.sessions.test {
        let session = pipe.load_session(&sc.name)?;
        for r in pipe.load_labels(backend, &sc.name)? {
            let (x, y) = world_xy(&session, r.frame_id as usize, r.x, r.y);
            if session.failure_extents().any(|e| e.kind == kind && e.footprint.contains(x, y)) {
                labels += 1;
                fn_labels += (r.label == OutcomeClass::FN) as usize;
            }
        }
        for i in (0..sc.frames).step_by(inf.heatmap_every * 2) {
            let left = pipe.load_left(&sc.name, i)?;
            let grid = introspect::introspection::PatchGrid::for_image(&left)?;
            let on: Vec<(usize, usize)> = (0..grid.rows)
                .flat_map(|r| (0..grid.cols).map(move |c| (r, c)))
                .filter(|&(r, c)| {
                    let (x0, y0) = grid.origin(r, c);
                    let half = grid.patch as f64 / 2.0;
                    surface_at(&session, pipe.rig(), i, x0 as f64 + half, y0 as f64 + half) == Some(kind)
                })
                .collect();
            if on.len() < 10 {
                continue;
            }
            let hm = mean_filter(&build_heatmap(&net, &left, inf.passes, inf.seed ^ i as u64)?, inf.kernel)?;
            for (r, c) in on {
                mass += hm.get(r, c).mean[OutcomeClass::FN.index()];
                cells += 1;
            }
        }
    }
    Ok(SurfaceStats {
        miss_rate: if labels == 0 { 0.0 } else { fn_labels as f64 / labels as f64 },
        labels,
        fn_mass: if cells == 0 { 0.0 } else { mass / cells as f64 },
        cells,
    })
}

fn model_agnostic(pipe: &Pipeline, runs: &[(BackendKind, &EvalReport)]) -> Res<Verdict> {
    let mut pass = true;
    let mut parts = vec![];
    for &(backend, report) in runs {
        pass &= all_at_least(&report.accuracy, 0.8);
        parts.push(format!("{backend}: {}", fmt_acc(&report.accuracy)));
    }
    for &(backend, _) in runs {
        progress(format!("surface heatmaps [{backend}]"));
        let t = surface_stats(pipe, backend, SurfaceKind::Textureless)?;
        let d = surface_stats(pipe, backend, SurfaceKind::DarkStripe)?;
        let misses = t.labels > 0 && t.miss_rate >= 0.5;
        if misses {
            pass &= t.cells > 0 && t.fn_mass >= 0.5;
        }
        parts.push(format!(
            "{backend} textureless: miss {:.2} of {}, FN mass {:.2} over {} cells; dark stripe (info): miss {:.2} of {}, FN mass {:.2} over {} cells",
            t.miss_rate, t.labels, t.fn_mass, t.cells, d.miss_rate, d.labels, d.fn_mass, d.cells
        ));
    }
    Ok(verdict(pass, parts.join("; ")))
}

// ---------------------------------------------------------------------------
// 9. Determinism

fn collect_tree(root: &Path) -> std::io::Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path)?);
            }
        }
    }
    Ok(out)
}

fn determinism() -> Res<Verdict> {
    let t = Instant::now();
    let tmp = tempfile::tempdir()?;
    let mut trees = vec![];
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_introspect"))
            .args(["--quiet", "--seed", "17", "--out"])
            .arg(&out)
            .arg("all")
            .stdout(std::process::Stdio::null())
            .status()
            ?;
        if !status.success() {
            return Ok(verdict(false, format!("`introspect all` exited with {status}")));
        }
        trees.push(collect_tree(&out)?);
    }
    let (a, b) = (&trees[0], &trees[1]);
    let differing = a.iter().filter(|(k, v)| b.get(*k) != Some(v)).count() + b.keys().filter(|k| !a.contains_key(*k)).count();
    let bytes: usize = a.values().map(Vec::len).sum();
    Ok(verdict(
        differing == 0 && !a.is_empty(),
        format!(
            "smoke config, seed 17, two runs: {} files ({:.1} MB), {differing} differ, {:.0}s",
            a.len(),
            bytes as f64 / 1e6,
            t.elapsed().as_secs_f64()
        ),
    ))
}

// ---------------------------------------------------------------------------

fn main() {
    let manifest = env!("CARGO_MANIFEST_DIR");
    let cfg = Config::load(&Path::new(manifest).join("configs/acceptance.json")).expect("acceptance config");
    let rig = cfg.rig.build().expect("rig");
    assert_eq!(cfg.grid, GridSpec::default());
    assert_eq!(cfg.monitor, MonitorParams::default());
    assert_eq!(cfg.perception.params, PerceptionParams::default());

    let mut results: Vec<(usize, &str, Res<Verdict>)> = vec![];

    progress("1: oracle equivalence");
    results.push((1, "oracle equivalence", oracle_equivalence(&cfg, &rig)));
    progress("2: label correctness");
    results.push((2, "label correctness", label_correctness(&cfg, &rig)));
    progress("5: MC-dropout identities");
    results.push((5, "MC-dropout identities", mc_identities()));
    progress("6: gradient check");
    results.push((6, "gradient check", gradient_check()));

    let tmp = tempfile::tempdir().expect("temp dir");
    let pipeline = (|| -> Res<_> {
        let mut pipe = Pipeline::new(cfg.clone(), tmp.path())?;
        pipe.quiet = true;
        let t = Instant::now();
        progress("pipeline: gen");
        pipe.gen()?;
        let gen_seconds = t.elapsed().as_secs_f64();
        let sparse = run_backend(&pipe, BackendKind::SparseConvex, gen_seconds)?;
        let dense = run_backend(&pipe, BackendKind::DenseBm, gen_seconds)?;
        Ok((pipe, sparse, dense))
    })();
    match pipeline {
        Ok((pipe, sparse, dense)) => {
            results.push((3, "introspection learnability", Ok(learnability(&sparse))));
            results.push((4, "uncertainty sweep shape", Ok(sweep_shape(&sparse.eval.sweep))));
            results.push((7, "failure clustering", Ok(clustering(&sparse))));
            let runs =
                [(BackendKind::SparseConvex, &sparse.eval.report), (BackendKind::DenseBm, &dense.eval.report)];
            results.push((8, "model agnosticism", model_agnostic(&pipe, &runs)));
            progress(format!(
                "dense: {} training patches, sweep {}",
                dense.train_patches,
                sweep_shape(&dense.eval.sweep).detail
            ));
        }
        Err(e) => {
            for (id, name) in [(3, "introspection learnability"), (4, "uncertainty sweep shape"), (7, "failure clustering"), (8, "model agnosticism")] {
                results.push((id, name, Err(format!("pipeline failed: {e}").into())));
            }
        }
    }

    progress("9: determinism");
    results.push((9, "end-to-end determinism", determinism()));

    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (id, name, r) in &results {
        let (pass, detail) = match r {
            Ok(v) => (v.pass, v.detail.clone()),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += !pass as usize;
        println!("[{}] {id}. {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", results.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", results.len());
}
