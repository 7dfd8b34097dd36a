//! Pinhole cameras, the rectified stereo rig, and rigid frames.
//!
//! Frame conventions: the robot frame is x forward, y left, z up; camera
//! frames are z forward, x right, y down. Pixel coordinates are real-valued
//! with integer values at pixel centers.

use nalgebra::{Isometry3, Matrix3, Point3, Rotation3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let intr = Self { fx, fy, cx, cy, width, height };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("intrinsics.fx/fy", "focal lengths must be positive"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(Error::invalid("intrinsics.cx", "principal point outside image"));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::invalid("intrinsics.cy", "principal point outside image"));
        }
        Ok(())
    }

    /// True when the pixel can be sampled without leaving the image.
    pub fn contains(&self, px: Pixel) -> bool {
        px.u >= 0.0
            && px.v >= 0.0
            && px.u <= (self.width - 1) as f64
            && px.v <= (self.height - 1) as f64
    }

    /// Like [`contains`](Self::contains) but with a border of `margin` pixels.
    pub fn contains_with_margin(&self, px: Pixel, margin: f64) -> bool {
        px.u >= margin
            && px.v >= margin
            && px.u <= (self.width - 1) as f64 - margin
            && px.v <= (self.height - 1) as f64 - margin
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn rounded(self) -> (i64, i64) {
        (self.u.round() as i64, self.v.round() as i64)
    }
}

/// Projects a camera-frame point onto the image plane.
pub fn project_to_camera(point: &Point3<f64>, intr: &CameraIntrinsics) -> Result<Pixel> {
    if !(point.z > 0.0) {
        return Err(Error::BehindCamera { z: point.z });
    }
    Ok(Pixel {
        u: intr.cx + intr.fx * point.x / point.z,
        v: intr.cy + intr.fy * point.y / point.z,
    })
}

/// Inverse of [`project_to_camera`] for a known depth along the optical axis.
pub fn back_project(px: Pixel, depth: f64, intr: &CameraIntrinsics) -> Point3<f64> {
    Point3::new(
        (px.u - intr.cx) * depth / intr.fx,
        (px.v - intr.cy) * depth / intr.fy,
        depth,
    )
}

/// Rotation taking robot-frame vectors into a camera frame pitched down by
/// `pitch` radians (positive looks toward the ground).
pub fn camera_rotation_from_robot(pitch: f64) -> Rotation3<f64> {
    let (s, c) = pitch.sin_cos();
    let right = Vector3::new(0.0, -1.0, 0.0);
    let down = Vector3::new(-s, 0.0, -c);
    let forward = Vector3::new(c, 0.0, -s);
    Rotation3::from_matrix_unchecked(Matrix3::from_rows(&[
        right.transpose(),
        down.transpose(),
        forward.transpose(),
    ]))
}

/// Where the left camera sits on the robot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mount {
    /// Optical center height above the ground plane (m).
    pub height: f64,
    /// Downward tilt of the optical axis (degrees).
    pub pitch_deg: f64,
    /// Forward offset of the optical center from the robot origin (m).
    #[serde(default)]
    pub forward: f64,
    /// Lateral offset (m, positive left).
    #[serde(default)]
    pub lateral: f64,
}

/// A rectified stereo pair. The right camera is the left camera translated
/// by `baseline` along the camera x axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StereoRig {
    pub intrinsics: CameraIntrinsics,
    pub baseline: f64,
    pub cam_from_robot: Isometry3<f64>,
}

impl StereoRig {
    pub fn new(intrinsics: CameraIntrinsics, baseline: f64, cam_from_robot: Isometry3<f64>) -> Result<Self> {
        intrinsics.validate()?;
        if !(baseline > 0.0) {
            return Err(Error::invalid("rig.baseline", "must be positive"));
        }
        let r = cam_from_robot.rotation.to_rotation_matrix();
        let m = r.matrix();
        if ((m * m.transpose()) - Matrix3::identity()).norm() > 1e-9 || (m.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("rig.cam_from_robot", "rotation is not proper orthonormal"));
        }
        Ok(Self { intrinsics, baseline, cam_from_robot })
    }

    pub fn mounted(intrinsics: CameraIntrinsics, baseline: f64, mount: Mount) -> Result<Self> {
        let rot = camera_rotation_from_robot(mount.pitch_deg.to_radians());
        let center = Vector3::new(mount.forward, mount.lateral, mount.height);
        // p_cam = R (p_robot - c)
        let translation = Translation3::from(-(rot * center));
        let iso = Isometry3::from_parts(translation, UnitQuaternion::from_rotation_matrix(&rot));
        Self::new(intrinsics, baseline, iso)
    }

    pub fn robot_to_left_cam(&self, p: &Point3<f64>) -> Point3<f64> {
        self.cam_from_robot * p
    }

    pub fn left_cam_to_robot(&self, p: &Point3<f64>) -> Point3<f64> {
        self.cam_from_robot.inverse_transform_point(p)
    }

    pub fn robot_to_right_cam(&self, p: &Point3<f64>) -> Point3<f64> {
        let c = self.robot_to_left_cam(p);
        Point3::new(c.x - self.baseline, c.y, c.z)
    }

    /// Left-camera optical center in the robot frame.
    pub fn left_center_robot(&self) -> Point3<f64> {
        self.left_cam_to_robot(&Point3::origin())
    }

    pub fn right_center_robot(&self) -> Point3<f64> {
        self.left_cam_to_robot(&Point3::new(self.baseline, 0.0, 0.0))
    }

    /// Unit ray direction in the robot frame through a left-image pixel.
    pub fn left_ray_robot(&self, px: Pixel) -> Vector3<f64> {
        let d = back_project(px, 1.0, &self.intrinsics).coords;
        (self.cam_from_robot.rotation.inverse() * d).normalize()
    }

    pub fn right_ray_robot(&self, px: Pixel) -> Vector3<f64> {
        self.left_ray_robot(px)
    }

    /// Intersection of a left-image pixel ray with the ground plane z = 0.
    pub fn left_pixel_ground_point(&self, px: Pixel) -> Option<Point3<f64>> {
        let o = self.left_center_robot();
        let d = self.left_ray_robot(px);
        if d.z >= -1e-12 {
            return None;
        }
        let t = -o.z / d.z;
        Some(o + d * t)
    }

    /// Projects a robot-frame point into the left image; `None` when the point
    /// is behind the camera or outside the image rectangle.
    pub fn robot_to_left_pixel(&self, p: &Point3<f64>) -> Option<Pixel> {
        let c = self.robot_to_left_cam(p);
        project_to_camera(&c, &self.intrinsics).ok().filter(|px| self.intrinsics.contains(*px))
    }

    pub fn robot_to_right_pixel(&self, p: &Point3<f64>) -> Option<Pixel> {
        let c = self.robot_to_right_cam(p);
        project_to_camera(&c, &self.intrinsics).ok().filter(|px| self.intrinsics.contains(*px))
    }

    /// Left-image projection without the image-bounds check.
    pub fn project_left_unbounded(&self, p: &Point3<f64>) -> Result<Pixel> {
        project_to_camera(&self.robot_to_left_cam(p), &self.intrinsics)
    }

    pub fn project_right_unbounded(&self, p: &Point3<f64>) -> Result<Pixel> {
        project_to_camera(&self.robot_to_right_cam(p), &self.intrinsics)
    }

    pub fn disparity_to_depth(&self, d: f64) -> Result<f64> {
        disparity_to_depth(d, self)
    }
}

pub fn robot_to_left_pixel(p: &Point3<f64>, rig: &StereoRig) -> Option<Pixel> {
    rig.robot_to_left_pixel(p)
}

/// Depth along the optical axis for a rectified-pair disparity.
pub fn disparity_to_depth(d: f64, rig: &StereoRig) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::InvalidDisparity(d));
    }
    Ok(rig.intrinsics.fx * rig.baseline / d)
}

/// Planar robot pose, stored as the robot-from-world transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub robot_from_world: Isometry3<f64>,
}

impl Pose {
    /// Robot at world position (x, y) on the ground, heading `yaw` radians.
    pub fn planar(x: f64, y: f64, yaw: f64) -> Self {
        let world_from_robot = Isometry3::new(Vector3::new(x, y, 0.0), Vector3::z() * yaw);
        Self { robot_from_world: world_from_robot.inverse() }
    }

    pub fn world_from_robot(&self) -> Isometry3<f64> {
        self.robot_from_world.inverse()
    }

    pub fn robot_to_world(&self, p: &Point3<f64>) -> Point3<f64> {
        self.robot_from_world.inverse_transform_point(p)
    }

    pub fn world_to_robot(&self, p: &Point3<f64>) -> Point3<f64> {
        self.robot_from_world * p
    }

    /// Robot origin in world coordinates.
    pub fn position(&self) -> Point3<f64> {
        self.robot_to_world(&Point3::origin())
    }
}
