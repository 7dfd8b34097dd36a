use introspect::geometry::{CameraIntrinsics, Mount, StereoRig};
use introspect::labelgen::{generate_labels, OutcomeClass};
use introspect::monitor::{geometric_oracle, GridSpec, MonitorParams};
use introspect::perception::{BackendKind, PerceptionBackend, PerceptionParams};
use introspect::worldsim::{make_session, RenderParams, SceneTemplate, SessionConfig};

fn rig() -> StereoRig {
    let intr = CameraIntrinsics::new(500.0, 500.0, 480.0, 300.0, 960, 600).unwrap();
    StereoRig::mounted(intr, 0.25, Mount { height: 0.7, pitch_deg: 15.0, forward: 0.0, lateral: 0.0 }).unwrap()
}

#[test]
fn benign_labels_partition_the_lattice_and_match_the_oracle() {
    let grid = GridSpec::default();
    let cfg = SessionConfig { name: "b".into(), template: SceneTemplate::Benign, frames: 3, step: 0.3, seed: 4, plants: vec![] };
    let session = make_session(&cfg, &grid, cfg.seed).unwrap();
    let rig = rig();
    let backend = PerceptionBackend::new(BackendKind::SparseConvex, PerceptionParams::default()).unwrap();
    let (mut occupied, mut agree, mut total) = (0, 0, 0);
    for i in 0..session.len() {
        let frame = session.render(i, &rig, &RenderParams::default()).unwrap();
        let labels = generate_labels(&frame, &rig, &grid, &backend, &MonitorParams::default()).unwrap();
        let counts = labels.counts();
        assert_eq!(counts.labeled() + counts.skipped, grid.len());
        let ks: Vec<u32> = labels.patches.iter().map(|p| p.record.k).collect();
        assert!(ks.windows(2).all(|w| w[0] < w[1]), "row-major order");
        for p in &labels.patches {
            let r = &p.record;
            let w = frame.pose.robot_to_world(&nalgebra::Point3::new(r.x, r.y, 0.0));
            let free = geometric_oracle(&session.scene, w.x, w.y, grid.radius);
            assert_eq!(r.o_m, free, "monitor must match the oracle at k={}", r.k);
            occupied += !free as usize;
            total += 1;
            agree += matches!(r.label, OutcomeClass::TN | OutcomeClass::TP) as usize;
            assert_eq!((p.patch.width(), p.patch.height()), (100, 100));
        }
    }
    assert!(occupied > 0, "the benign scene should put an obstacle on the lattice");
    assert!(agree as f64 >= 0.99 * total as f64, "{agree}/{total}");
}
