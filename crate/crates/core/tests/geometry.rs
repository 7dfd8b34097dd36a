use introspect::geometry::{back_project, project_to_camera, CameraIntrinsics, Mount, Pixel, StereoRig};
use nalgebra::Point3;
use proptest::prelude::*;

fn intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(500.0, 500.0, 480.0, 300.0, 960, 600).unwrap()
}

fn rig(pitch: f64) -> StereoRig {
    StereoRig::mounted(intrinsics(), 0.25, Mount { height: 0.7, pitch_deg: pitch, forward: 0.1, lateral: -0.05 }).unwrap()
}

proptest! {
    #[test]
    fn back_projection_round_trips(u in 0.0..960.0f64, v in 0.0..600.0f64, z in 0.1..50.0f64) {
        let p = back_project(Pixel::new(u, v), z, &intrinsics());
        let px = project_to_camera(&p, &intrinsics()).unwrap();
        prop_assert!((px.u - u).abs() < 1e-9 && (px.v - v).abs() < 1e-9);
    }

    #[test]
    fn rectified_rows_agree(x in 0.5..10.0f64, y in -3.0..3.0f64, z in -0.5..2.0f64, pitch in 0.0..40.0f64) {
        let rig = rig(pitch);
        let p = Point3::new(x, y, z);
        if let (Ok(l), Ok(r)) = (rig.project_left_unbounded(&p), rig.project_right_unbounded(&p)) {
            prop_assert!((l.v - r.v).abs() < 1e-9);
            prop_assert!(l.u >= r.u);
        }
    }

    #[test]
    fn rig_transform_is_rigid(a in prop::array::uniform3(-5.0..5.0f64), b in prop::array::uniform3(-5.0..5.0f64)) {
        let rig = rig(15.0);
        let (pa, pb) = (Point3::from(a), Point3::from(b));
        let before = (pa - pb).norm();
        let after = (rig.robot_to_left_cam(&pa) - rig.robot_to_left_cam(&pb)).norm();
        prop_assert!((before - after).abs() < 1e-9);
        let back = rig.left_cam_to_robot(&rig.robot_to_left_cam(&pa));
        prop_assert!((back - pa).norm() < 1e-9);
    }
}

#[test]
fn disparity_of_reconstructed_ground_matches_depth() {
    let rig = rig(15.0);
    let p = Point3::new(1.5, 0.2, 0.0);
    let (l, r) = (rig.robot_to_left_pixel(&p).unwrap(), rig.robot_to_right_pixel(&p).unwrap());
    let z = rig.robot_to_left_cam(&p).z;
    assert!((rig.disparity_to_depth(l.u - r.u).unwrap() - z).abs() < 1e-9);
}
