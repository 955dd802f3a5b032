//! Flat-port camera geometry.
//!
//! Rays leave the optical center inside the housing, cross the planar lens
//! case at distance `s` along the interface normal and bend into the water
//! according to Snell's law. Everything here works in the camera frame
//! (x right, y down, z forward) unless a [`Pose`] is applied.

mod rectify;

pub use rectify::{distort_image, rectify_image, RectifyMode};

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this norm the Rodrigues axis `d × g` is treated as zero.
const AXIS_EPS: f64 = 1e-12;

/// Pinhole intrinsics plus the flat-port parameters.
///
/// Pixel coordinates are continuous; pixel `(i, j)` covers
/// `[i, i + 1) × [j, j + 1)` and its center is `(i + 0.5, j + 0.5)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Perpendicular distance from the optical center to the interface.
    pub s: f64,
    /// Refractive index inside the housing.
    pub n_a: f64,
    /// Refractive index of the surrounding medium.
    pub n_w: f64,
    /// Unit interface normal in the camera frame, pointing into the water.
    pub normal: Vector3<f64>,
}

impl CameraModel {
    /// Centered pinhole with a fronto-parallel port at `s = 0`, air inside
    /// and water (n = 1.333) outside.
    pub fn pinhole(width: usize, height: usize, focal: f64) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            s: 0.0,
            n_a: 1.0,
            n_w: 1.333,
            normal: Vector3::z(),
        }
    }

    /// Pinhole whose horizontal field of view is `fov_deg` degrees.
    pub fn with_fov(width: usize, height: usize, fov_deg: f64) -> Self {
        let focal = width as f64 / 2.0 / (fov_deg.to_radians() / 2.0).tan();
        Self::pinhole(width, height, focal)
    }

    pub fn with_port(mut self, s: f64, n_a: f64, n_w: f64) -> Self {
        self.s = s;
        self.n_a = n_a;
        self.n_w = n_w;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::OutOfBounds(format!("camera: {msg}")));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image must be non-empty");
        }
        if !(self.s >= 0.0) {
            return bad("s must be >= 0");
        }
        if !(self.n_a > 0.0 && self.n_w > 0.0) {
            return bad("refractive indices must be positive");
        }
        if (self.normal.norm() - 1.0).abs() > 1e-9 {
            return bad("interface normal must be unit length");
        }
        if !(0.0..=self.width as f64).contains(&self.cx) || !(0.0..=self.height as f64).contains(&self.cy) {
            return bad("principal point outside the image");
        }
        Ok(())
    }

    /// Continuous coordinate of the center of pixel `(i, j)`.
    pub fn pixel_center(i: usize, j: usize) -> Vector2<f64> {
        Vector2::new(i as f64 + 0.5, j as f64 + 0.5)
    }

    /// Normalized image-plane coordinates `((u - cx)/fx, (v - cy)/fy)`.
    pub fn normalized(&self, pixel: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy)
    }

    pub fn from_normalized(&self, p: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new(p.x * self.fx + self.cx, p.y * self.fy + self.cy)
    }

    pub fn index_ratio(&self) -> f64 {
        self.n_a / self.n_w
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    /// Ray over `[0, inf)`; the direction is normalized here.
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
            t_near: 0.0,
            t_far: f64::INFINITY,
        }
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }

    pub fn transformed(&self, pose: &Pose) -> Self {
        Self {
            origin: pose.transform_point(&self.origin),
            direction: pose.rotation * self.direction,
            ..*self
        }
    }
}

/// Camera-to-world rigid transform: `p_world = R p_cam + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self { rotation, translation };
        pose.validate()?;
        Ok(pose)
    }

    /// Camera at `eye` looking at `target`; image y points away from `up`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < AXIS_EPS {
            return Err(Error::OutOfBounds("look_at: eye and target coincide".into()));
        }
        let forward = forward.normalize();
        let right = forward.cross(&up);
        if right.norm() < AXIS_EPS {
            return Err(Error::OutOfBounds("look_at: up is parallel to the view direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        Self::new(Matrix3::from_columns(&[right, down, forward]), eye)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::OutOfBounds("pose rotation is not a proper rotation".into()));
        }
        Ok(())
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn position(&self) -> Vector3<f64> {
        self.translation
    }
}

/// Pinhole back-projection: unrefracted ray from the optical center.
pub fn pixel_ray(camera: &CameraModel, pixel: &Vector2<f64>) -> Ray {
    let n = camera.normalized(pixel);
    Ray::new(Vector3::zeros(), Vector3::new(n.x, n.y, 1.0))
}

/// Snell's law, `arcsin((n_from / n_to) sin(phi_in))`.
pub fn snell_angle(phi_in: f64, n_from: f64, n_to: f64) -> Result<f64> {
    if n_from == n_to {
        return Ok(phi_in);
    }
    let ratio = n_from / n_to * phi_in.sin();
    if ratio > 1.0 {
        return Err(Error::TotalInternalReflection { ratio });
    }
    Ok(ratio.asin())
}

/// Angle between a unit direction and the unit interface normal.
pub fn incidence_angle(direction: &Vector3<f64>, normal: &Vector3<f64>) -> f64 {
    direction.cross(normal).norm().atan2(direction.dot(normal))
}

/// Rotate `d_in` about `d_in × g` by `phi_in - phi_out` (Rodrigues), so the
/// result makes angle `phi_out` with `g` in the incidence plane.
pub fn refract_direction(d_in: &Vector3<f64>, g: &Vector3<f64>, phi_in: f64, phi_out: f64) -> Vector3<f64> {
    let axis = d_in.cross(g);
    let axis_norm = axis.norm();
    if axis_norm < AXIS_EPS {
        return *d_in;
    }
    let theta = phi_in - phi_out;
    if theta == 0.0 {
        return *d_in;
    }
    let u = axis / axis_norm;
    let (sin, cos) = theta.sin_cos();
    let d = d_in * cos + u.cross(d_in) * sin + u * (u.dot(d_in) * (1.0 - cos));
    d.normalize()
}

/// Ray in the water for a pixel, in the camera frame.
///
/// Origin is where the housing ray meets the interface,
/// `o + s / cos(phi_a) * d_a`; direction is `d_a` bent to the in-water angle.
pub fn refracted_ray(camera: &CameraModel, pixel: &Vector2<f64>) -> Result<Ray> {
    let inner = pixel_ray(camera, pixel);
    let d_a = inner.direction;
    let g = &camera.normal;
    let phi_a = incidence_angle(&d_a, g);
    let phi_w = snell_angle(phi_a, camera.n_a, camera.n_w)?;
    let origin = inner.origin + d_a * (camera.s / phi_a.cos());
    let direction = refract_direction(&d_a, g, phi_a, phi_w);
    Ok(Ray {
        origin,
        direction,
        t_near: 0.0,
        t_far: f64::INFINITY,
    })
}

/// Radial scale `h` mapping an underwater pixel to its in-air position for a
/// scene point at perpendicular distance `z` from the optical center.
pub fn remap_factor(camera: &CameraModel, pixel: &Vector2<f64>, z: f64) -> Result<f64> {
    let d_a = pixel_ray(camera, pixel).direction;
    let phi_a = incidence_angle(&d_a, &camera.normal);
    remap_factor_for_angle(phi_a, camera.s, z, camera.n_a, camera.n_w)
}

pub(crate) fn remap_factor_for_angle(phi_a: f64, s: f64, z: f64, n_a: f64, n_w: f64) -> Result<f64> {
    let phi_w = snell_angle(phi_a, n_a, n_w)?;
    let tan_a = phi_a.tan();
    if tan_a.abs() < 1e-12 {
        return Ok((s + (z - s) * n_a / n_w) / z);
    }
    Ok((s * tan_a + (z - s) * phi_w.tan()) / (z * tan_a))
}
