//! Pinhole cameras. Camera space looks down `-z` with `+y` up; pixel rows
//! run top to bottom.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::math::{DMat4, DVec3};
use crate::scene::Ray;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Row-major 4x4 world-from-camera rigid transform.
    pub world_from_camera: [[f64; 4]; 4],
    /// Vertical field of view in degrees.
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraFile {
    pub cameras: Vec<Camera>,
}

impl Camera {
    pub fn new(pose: DMat4, fov_y: f64, width: usize, height: usize) -> Result<Self> {
        let rows = pose.transpose().to_cols_array_2d();
        let cam = Camera {
            world_from_camera: rows,
            fov_y,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`.
    pub fn look_at(
        eye: DVec3,
        target: DVec3,
        up: DVec3,
        fov_y: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let f = (target - eye)
            .try_normalize()
            .ok_or_else(|| Error::InvalidCamera("eye equals target".into()))?;
        let mut r = f.cross(up);
        if r.length_squared() < 1e-12 {
            r = f.cross(if f.z.abs() < 0.9 { DVec3::Z } else { DVec3::X });
        }
        let r = r.normalize();
        let u = r.cross(f);
        let pose = DMat4::from_cols(r.extend(0.0), u.extend(0.0), (-f).extend(0.0), eye.extend(1.0));
        Camera::new(pose, fov_y, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov_y > 0.0 && self.fov_y < 180.0) {
            return Err(Error::InvalidCamera(format!("fov_y {} not in (0, 180)", self.fov_y)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("resolution must be at least 1x1".into()));
        }
        let m = self.pose();
        if !m.is_finite() {
            return Err(Error::InvalidCamera("pose is not finite".into()));
        }
        Ok(())
    }

    pub fn pose(&self) -> DMat4 {
        DMat4::from_cols_array_2d(&self.world_from_camera).transpose()
    }

    pub fn position(&self) -> DVec3 {
        self.pose().w_axis.truncate()
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Ray through pixel `(x, y)` offset by `jitter` in `[0,1)^2`;
    /// `(0.5, 0.5)` is the pixel center.
    pub fn primary_ray(&self, x: usize, y: usize, jitter: (f64, f64)) -> Result<Ray> {
        if x >= self.width || y >= self.height {
            return Err(Error::PixelOutOfBounds {
                x,
                y,
                width: self.width,
                height: self.height,
            });
        }
        Ok(self.ray_unchecked(x, y, jitter))
    }

    #[inline]
    pub(crate) fn ray_unchecked(&self, x: usize, y: usize, jitter: (f64, f64)) -> Ray {
        let tan_half = (0.5 * self.fov_y.to_radians()).tan();
        let aspect = self.width as f64 / self.height as f64;
        let sx = 2.0 * (x as f64 + jitter.0) / self.width as f64 - 1.0;
        let sy = 1.0 - 2.0 * (y as f64 + jitter.1) / self.height as f64;
        let local = DVec3::new(sx * tan_half * aspect, sy * tan_half, -1.0);
        let pose = self.pose();
        Ray::new(
            pose.w_axis.truncate(),
            pose.transform_vector3(local).normalize(),
            0.0,
        )
    }
}

/// `count` points on a sphere by the golden-angle spiral.
pub fn fibonacci_sphere(count: usize) -> Vec<DVec3> {
    fibonacci_sphere_phase(count, 0.0)
}

/// Golden-angle spiral with every azimuth shifted by `phase` radians.
pub fn fibonacci_sphere_phase(count: usize, phase: f64) -> Vec<DVec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64 + phase;
            DVec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Cameras on a sphere of `radius` around `center`, all looking at it.
pub fn orbit_cameras(
    center: DVec3,
    radius: f64,
    count: usize,
    fov_y: f64,
    width: usize,
    height: usize,
) -> Result<Vec<Camera>> {
    orbit_cameras_phase(center, radius, count, 0.0, fov_y, width, height)
}

/// As [`orbit_cameras`] with the spiral rotated by `phase` radians, which
/// yields a disjoint set of poses for the same count.
pub fn orbit_cameras_phase(
    center: DVec3,
    radius: f64,
    count: usize,
    phase: f64,
    fov_y: f64,
    width: usize,
    height: usize,
) -> Result<Vec<Camera>> {
    fibonacci_sphere_phase(count, phase)
        .into_iter()
        .map(|d| Camera::look_at(center + radius * d, center, DVec3::Z, fov_y, width, height))
        .collect()
}

pub fn load_cameras(path: impl AsRef<Path>) -> Result<Vec<Camera>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CameraFile =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    for c in &file.cameras {
        c.validate()?;
    }
    Ok(file.cameras)
}

pub fn save_cameras(path: impl AsRef<Path>, cameras: &[Camera]) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(&CameraFile {
        cameras: cameras.to_vec(),
    })?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(fov: f64, w: usize, h: usize) -> Camera {
        Camera::new(DMat4::IDENTITY, fov, w, h).unwrap()
    }

    #[test]
    fn center_ray_is_optical_axis() {
        let cam = identity(60.0, 5, 5);
        let r = cam.primary_ray(2, 2, (0.5, 0.5)).unwrap();
        assert!((r.dir - DVec3::new(0.0, 0.0, -1.0)).length() < 1e-15);
        assert_eq!(r.origin, DVec3::ZERO);
    }

    #[test]
    fn corner_rays_mirror() {
        let cam = identity(50.0, 8, 6);
        let a = cam.primary_ray(0, 0, (0.5, 0.5)).unwrap().dir;
        let b = cam.primary_ray(7, 5, (0.5, 0.5)).unwrap().dir;
        assert!((a.x + b.x).abs() < 1e-15 && (a.y + b.y).abs() < 1e-15);
        assert!((a.z - b.z).abs() < 1e-15);
    }

    #[test]
    fn pinhole_row_elevation() {
        // fov 90 and 2 rows: the first row center sits at y = tan(45deg) / 2.
        let cam = identity(90.0, 1, 2);
        let d = cam.primary_ray(0, 0, (0.5, 0.5)).unwrap().dir;
        let elevation = d.y.atan2(-d.z).to_degrees();
        assert!((elevation - 0.5f64.atan().to_degrees()).abs() < 1e-12);
        assert!((elevation - 26.565051177077990).abs() < 1e-9);
    }

    #[test]
    fn out_of_bounds_pixel() {
        let cam = identity(60.0, 4, 4);
        assert!(cam.primary_ray(4, 0, (0.5, 0.5)).is_err());
    }

    #[test]
    fn invalid_intrinsics() {
        assert!(Camera::new(DMat4::IDENTITY, 180.0, 4, 4).is_err());
        assert!(Camera::new(DMat4::IDENTITY, 45.0, 0, 4).is_err());
    }

    #[test]
    fn look_at_points_forward() {
        let cam = Camera::look_at(DVec3::new(0.0, -3.0, 1.0), DVec3::ZERO, DVec3::Z, 40.0, 9, 9).unwrap();
        let r = cam.primary_ray(4, 4, (0.5, 0.5)).unwrap();
        let want = (DVec3::ZERO - cam.position()).normalize();
        assert!((r.dir - want).length() < 1e-12);
    }
}
