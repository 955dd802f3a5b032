//! Geometric rectification of flat-port images by radial pixel remapping.

use nalgebra::Vector2;

use super::{remap_factor_for_angle, snell_angle, CameraModel};
use crate::error::{Error, Result};
use crate::raster::ImageBuffer;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RectifyMode {
    /// Port at the optical center; `h` does not depend on depth.
    SZero,
    /// Every scene point at the same perpendicular distance `z`.
    UniformZ(f64),
    /// Depth varies per pixel; needs a depth map and is not supported.
    PerPixelDepth,
}

impl RectifyMode {
    fn port_and_depth(self, camera: &CameraModel) -> Result<(f64, f64)> {
        match self {
            RectifyMode::SZero => Ok((0.0, 1.0)),
            RectifyMode::UniformZ(z) if z > camera.s => Ok((camera.s, z)),
            RectifyMode::UniformZ(z) => Err(Error::OutOfBounds(format!("uniform depth z = {z} must exceed s = {}", camera.s))),
            RectifyMode::PerPixelDepth => Err(Error::UnsupportedGeometry(
                "per-pixel depth rectification requires a depth map".into(),
            )),
        }
    }
}

fn check_inputs(image: &ImageBuffer, camera: &CameraModel) -> Result<()> {
    if image.width != camera.width || image.height != camera.height {
        return Err(Error::DegenerateInput(format!(
            "image is {}x{} but camera is {}x{}",
            image.width, image.height, camera.width, camera.height
        )));
    }
    if (camera.normal - nalgebra::Vector3::z()).norm() > 1e-9 {
        return Err(Error::UnsupportedGeometry(
            "radial remapping assumes a fronto-parallel port".into(),
        ));
    }
    if camera.fx != camera.fy {
        return Err(Error::UnsupportedGeometry("radial remapping needs square pixels".into()));
    }
    Ok(())
}

/// In-air normalized radius `h · tan(phi_a)` of a housing ray at angle `phi_a`.
fn rectified_radius(phi_a: f64, s: f64, z: f64, n_a: f64, n_w: f64) -> Result<f64> {
    Ok(remap_factor_for_angle(phi_a, s, z, n_a, n_w)? * phi_a.tan())
}

/// Housing angle whose rectified radius equals `target`, or `None` if no
/// ray through the port lands there.
fn solve_housing_angle(target: f64, s: f64, z: f64, n_a: f64, n_w: f64) -> Option<f64> {
    let mut hi = std::f64::consts::FRAC_PI_2 - 1e-9;
    if n_a > n_w {
        hi = hi.min((n_w / n_a).asin() - 1e-12);
    }
    if rectified_radius(hi, s, z, n_a, n_w).ok()? < target {
        return None;
    }
    let mut lo = 0.0;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if rectified_radius(mid, s, z, n_a, n_w).ok()? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Map an underwater image to its in-air geometry.
///
/// Each output pixel `x'` is looked up at the underwater position `x` with
/// `x' = h(x) · x` (coordinates relative to the principal point), using
/// bilinear interpolation. Output pixels with no source are zero and masked.
pub fn rectify_image(image: &ImageBuffer, camera: &CameraModel, mode: RectifyMode) -> Result<ImageBuffer> {
    check_inputs(image, camera)?;
    let (s, z) = mode.port_and_depth(camera)?;
    let (n_a, n_w) = (camera.n_a, camera.n_w);
    let h0 = remap_factor_for_angle(0.0, s, z, n_a, n_w)?;

    let mut out = ImageBuffer::new(image.width, image.height);
    for j in 0..image.height {
        for i in 0..image.width {
            let q = camera.normalized(&CameraModel::pixel_center(i, j));
            let rho_out = q.norm();
            let scale = if rho_out < 1e-12 {
                Some(1.0 / h0)
            } else {
                solve_housing_angle(rho_out, s, z, n_a, n_w).map(|phi| phi.tan() / rho_out)
            };
            let src = scale.map(|k| camera.from_normalized(&(q * k)));
            let value = src.and_then(|p| source_value(image, &p));
            let k = out.index(i, j);
            match value {
                Some(v) => out.data[k] = v,
                None => out.mask[k] = false,
            }
        }
    }
    Ok(out)
}

/// Forward model of [`rectify_image`]: synthesize the underwater view of an
/// in-air image by sampling it at `h(x) · x` for every underwater pixel `x`.
pub fn distort_image(image: &ImageBuffer, camera: &CameraModel, mode: RectifyMode) -> Result<ImageBuffer> {
    check_inputs(image, camera)?;
    let (s, z) = mode.port_and_depth(camera)?;
    let mut out = ImageBuffer::new(image.width, image.height);
    for j in 0..image.height {
        for i in 0..image.width {
            let q = camera.normalized(&CameraModel::pixel_center(i, j));
            let phi_a = q.norm().atan();
            let value = snell_angle(phi_a, camera.n_a, camera.n_w)
                .ok()
                .and_then(|_| remap_factor_for_angle(phi_a, s, z, camera.n_a, camera.n_w).ok())
                .and_then(|h| source_value(image, &camera.from_normalized(&(q * h))));
            let k = out.index(i, j);
            match value {
                Some(v) => out.data[k] = v,
                None => out.mask[k] = false,
            }
        }
    }
    Ok(out)
}

fn source_value(image: &ImageBuffer, p: &Vector2<f64>) -> Option<[f64; 3]> {
    let v = image.sample_bilinear(p.x, p.y)?;
    let i = (p.x.floor() as usize).min(image.width - 1);
    let j = (p.y.floor() as usize).min(image.height - 1);
    image.is_valid(i, j).then_some(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::psnr;

    fn smooth_pattern(w: usize, h: usize) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, |i, j| {
            let (x, y) = (i as f64 / w as f64, j as f64 / h as f64);
            [
                0.5 + 0.4 * (6.0 * x).sin(),
                0.5 + 0.4 * (5.0 * y).cos(),
                0.5 + 0.3 * (4.0 * (x + y)).sin(),
            ]
        })
    }

    #[test]
    fn matched_indices_are_identity() {
        let cam = CameraModel::with_fov(40, 30, 70.0).with_port(0.0, 1.0, 1.0);
        let img = smooth_pattern(40, 30);
        let out = rectify_image(&img, &cam, RectifyMode::SZero).unwrap();
        assert!(out.mask.iter().all(|&m| m));
        for (a, b) in out.data.iter().zip(&img.data) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn distort_then_rectify_roundtrip() {
        let cam = CameraModel::with_fov(96, 96, 80.0).with_port(0.0, 1.0, 1.333);
        let img = smooth_pattern(96, 96);
        for mode in [RectifyMode::SZero, RectifyMode::UniformZ(2.0)] {
            let cam = if let RectifyMode::UniformZ(_) = mode { cam.clone().with_port(0.1, 1.0, 1.333) } else { cam.clone() };
            let under = distort_image(&img, &cam, mode).unwrap();
            let back = rectify_image(&under, &cam, mode).unwrap();
            let p = psnr(&back, &img, None).unwrap();
            assert!(p > 35.0, "{mode:?}: {p}");
        }
    }

    #[test]
    fn wide_angle_corners_are_masked() {
        let cam = CameraModel::with_fov(64, 64, 110.0).with_port(0.0, 1.0, 1.333);
        let img = ImageBuffer::filled(64, 64, [0.5; 3]);
        let out = rectify_image(&img, &cam, RectifyMode::SZero).unwrap();
        assert!(!out.is_valid(0, 0) && !out.is_valid(63, 63));
        assert!(out.is_valid(32, 32));
        assert_eq!(out.get(0, 0), [0.0; 3]);
    }

    #[test]
    fn per_pixel_depth_is_rejected() {
        let cam = CameraModel::pinhole(8, 8, 10.0);
        let img = ImageBuffer::new(8, 8);
        assert!(matches!(
            rectify_image(&img, &cam, RectifyMode::PerPixelDepth),
            Err(Error::UnsupportedGeometry(_))
        ));
    }
}
