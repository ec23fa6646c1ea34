//! Pinhole camera model and the projection / back-projection pair.
//!
//! Conventions, fixed across the whole crate:
//! - extrinsics map world to camera: `x_cam = R * x_world + t`;
//! - the camera looks along +z in its own frame, +x is image-right,
//!   +y is image-down;
//! - pixel origin is the top-left corner, pixel centers sit at integer
//!   coordinates, so pixel `(u, v)` covers `[u-0.5, u+0.5) x [v-0.5, v+0.5)`;
//! - depth is the camera-space z coordinate in meters, not ray length.

use crate::{Error, Result};

use super::{validate_rotation, Mat3, Vec3};

/// Pinhole intrinsics and world-to-camera extrinsics for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Mat3,
    /// World-to-camera translation.
    pub translation: Vec3,
    pub width: u32,
    pub height: u32,
}

/// Result of projecting a world point: continuous pixel coordinates plus
/// camera-space depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl CameraModel {
    /// Checks focal lengths, raster size, extrinsic rotation, and finiteness.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("fx", self.fx), ("fy", self.fy), ("cx", self.cx), ("cy", self.cy)] {
            if !v.is_finite() {
                return Err(Error::InvalidCamera(format!("{name} = {v} not finite")));
            }
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera(format!(
                "raster size {}x{} must be positive",
                self.width, self.height
            )));
        }
        if !self.translation.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidCamera("translation not finite".into()));
        }
        validate_rotation(&self.rotation).map_err(Error::InvalidCamera)
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, world: &Vec3) -> Vec3 {
        self.rotation * world + self.translation
    }

    pub fn camera_to_world(&self, cam: &Vec3) -> Vec3 {
        self.rotation.transpose() * (cam - self.translation)
    }

    /// Projects a world point. Returns `None` for points at or behind the
    /// camera plane; the returned pixel may lie outside the raster.
    pub fn project(&self, world: &Vec3) -> Option<Projection> {
        let c = self.world_to_camera(world);
        if c.z <= 0.0 {
            return None;
        }
        Some(Projection {
            u: self.fx * c.x / c.z + self.cx,
            v: self.fy * c.y / c.z + self.cy,
            depth: c.z,
        })
    }

    /// Lifts a pixel with known depth back to a world point.
    ///
    /// The pixel must fall inside the raster (`[-0.5, width-0.5)` x
    /// `[-0.5, height-0.5)`, pixel centers at integers) and the depth must be
    /// positive and finite.
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Result<Vec3> {
        if !depth.is_finite() || depth <= 0.0 {
            return Err(Error::InvalidDepth(depth));
        }
        if !self.pixel_in_bounds(u, v) {
            return Err(Error::PixelOutOfBounds {
                u,
                v,
                width: self.width,
                height: self.height,
            });
        }
        Ok(self.backproject_unchecked(u, v, depth))
    }

    /// Back-projection without bounds or depth checks, for inner loops that
    /// have already validated their pixels against the raster.
    pub(crate) fn backproject_unchecked(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        let cam = Vec3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        );
        self.camera_to_world(&cam)
    }

    pub fn pixel_in_bounds(&self, u: f64, v: f64) -> bool {
        u >= -0.5 && u < self.width as f64 - 0.5 && v >= -0.5 && v < self.height as f64 - 0.5
    }

    /// Camera at `center` looking toward `target`, with `up` fixing the roll
    /// so that image-up is world-up as closely as possible. `center` and
    /// `target` must not coincide and the view direction must not be parallel
    /// to `up`.
    pub fn look_at(
        center: Vec3,
        target: Vec3,
        up: Vec3,
        fx: f64,
        fy: f64,
        width: u32,
        height: u32,
    ) -> Result<CameraModel> {
        let forward = target - center;
        if forward.norm() < 1e-12 {
            return Err(Error::InvalidCamera("look_at center equals target".into()));
        }
        let z = forward.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-9 {
            return Err(Error::InvalidCamera("look_at direction parallel to up".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        // Rows of the world-to-camera rotation are the camera axes.
        let rotation = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let cam = CameraModel {
            fx,
            fy,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            rotation,
            translation: -(rotation * center),
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }
}
