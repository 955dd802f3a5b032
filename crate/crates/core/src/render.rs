//! Forward rendering of the underwater formation model.
//!
//! Along a ray with object samples `(sigma_i, c_i)` over intervals of width
//! `dt_i`:
//!
//! ```text
//! T_i = exp(-sum_{j<i} sigma_j dt_j)
//! w_i = (1 - exp(-sigma_i dt_i)) T_i
//! J   = sum_i w_i c_i
//! I_c = exp(-beta_c d) J_c + (1 - exp(-beta_c d)) A_c
//! ```
//!
//! where `d` is the distance to the first opaque sample, or `t_far` when the
//! ray sees only water.

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ImageBuffer, Rgb};
use crate::refraction::{pixel_ray, refracted_ray, CameraModel, Pose, Ray};
use crate::scene::{sample_scene, surface_depth, RaySamples, SamplingConfig, VoxelScene};

/// Uniform water: per-channel attenuation and global background light.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediumParams {
    #[serde(rename = "A")]
    pub a: Rgb,
    pub beta: Rgb,
}

impl Default for MediumParams {
    /// Starting point of the estimator: `A = 0.9`, `beta = (0.4, 0.2, 0.2)`.
    fn default() -> Self {
        Self {
            a: [0.9; 3],
            beta: [0.4, 0.2, 0.2],
        }
    }
}

impl MediumParams {
    pub fn new(a: Rgb, beta: Rgb) -> Self {
        Self { a, beta }
    }

    /// No attenuation and no back-scatter.
    pub fn clear() -> Self {
        Self {
            a: [0.0; 3],
            beta: [0.0; 3],
        }
    }

    /// `exp(-beta_c d)` per channel.
    pub fn transmission(&self, d: f64) -> Rgb {
        self.beta.map(|b| (-b * d).exp())
    }

    /// Underwater color for direct radiance `j` behind a water column `d`.
    pub fn apply(&self, j: &Rgb, d: f64) -> Rgb {
        let t = self.transmission(d);
        [0, 1, 2].map(|c| t[c] * j[c] + (1.0 - t[c]) * self.a[c])
    }
}

/// Box constraints on the medium parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediumBounds {
    pub a: (f64, f64),
    pub beta: (f64, f64),
}

impl Default for MediumBounds {
    fn default() -> Self {
        Self {
            a: (0.0, 1.0),
            beta: (0.1, 1.0),
        }
    }
}

impl MediumBounds {
    /// Lets `beta` reach zero for clear-water degeneracy checks.
    pub fn relaxed() -> Self {
        Self {
            beta: (0.0, 1.0),
            ..Self::default()
        }
    }

    pub fn project(&self, m: &MediumParams) -> MediumParams {
        MediumParams {
            a: m.a.map(|v| v.clamp(self.a.0, self.a.1)),
            beta: m.beta.map(|v| v.clamp(self.beta.0, self.beta.1)),
        }
    }

    pub fn check(&self, m: &MediumParams) -> Result<()> {
        let inside = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        if !m.a.iter().all(|&v| inside(v, self.a)) {
            return Err(Error::OutOfBounds(format!("A = {:?} outside {:?}", m.a, self.a)));
        }
        if !m.beta.iter().all(|&v| inside(v, self.beta)) {
            return Err(Error::OutOfBounds(format!("beta = {:?} outside {:?}", m.beta, self.beta)));
        }
        Ok(())
    }
}

/// Sampling plus the density threshold that defines the surface depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    pub sampling: SamplingConfig,
    pub sigma_thresh: f64,
}

impl RenderSettings {
    /// Threshold at half the scene's peak density.
    pub fn for_scene(scene: &VoxelScene, sampling: SamplingConfig) -> Self {
        Self {
            sampling,
            sigma_thresh: 0.5 * scene.sigma_max(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderMode {
    /// Refracted ray, full medium model.
    Underwater,
    /// Pinhole ray, no medium.
    InAir,
    /// Pinhole ray, full medium model.
    GeoOnly,
}

impl std::str::FromStr for RenderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "underwater" => Ok(Self::Underwater),
            "inair" | "in_air" => Ok(Self::InAir),
            "geo" | "geo_only" => Ok(Self::GeoOnly),
            other => Err(Error::OutOfBounds(format!("unknown render mode '{other}'"))),
        }
    }
}

/// Everything computed along one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RayRadiance {
    /// Underwater color.
    pub i: Rgb,
    /// Unattenuated object radiance.
    pub j: Rgb,
    pub depth: Option<f64>,
    pub weights: Vec<f64>,
    pub transmittance: Vec<f64>,
}

/// Object weights `w_i` and transmittances `T_i`.
pub fn transmittance_weights(samples: &RaySamples) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len();
    let mut weights = Vec::with_capacity(n);
    let mut trans = Vec::with_capacity(n);
    let mut optical_depth = 0.0_f64;
    for i in 0..n {
        let tau = samples.sigma[i] * samples.width(i);
        let t = (-optical_depth).exp();
        trans.push(t);
        weights.push((1.0 - (-tau).exp()) * t);
        optical_depth += tau;
    }
    (weights, trans)
}

/// Composite samples into a [`RayRadiance`]; `medium = None` means in air.
pub fn composite(samples: &RaySamples, medium: Option<&MediumParams>, settings: &RenderSettings) -> RayRadiance {
    let (weights, transmittance) = transmittance_weights(samples);
    let mut j = [0.0; 3];
    for (w, c) in weights.iter().zip(&samples.color) {
        for ch in 0..3 {
            j[ch] += w * c[ch];
        }
    }
    let depth = surface_depth(samples, settings.sigma_thresh);
    let i = match medium {
        Some(m) => m.apply(&j, depth.unwrap_or(settings.sampling.t_far)),
        None => j,
    };
    RayRadiance {
        i,
        j,
        depth,
        weights,
        transmittance,
    }
}

/// Stream index of the per-pixel generator.
pub fn ray_index(camera: &CameraModel, pixel: &Vector2<f64>) -> u64 {
    let i = pixel.x.floor().clamp(0.0, (camera.width - 1) as f64) as u64;
    let j = pixel.y.floor().clamp(0.0, (camera.height - 1) as f64) as u64;
    j * camera.width as u64 + i
}

/// World-space ray for a pixel: refracted when `refract`, pinhole otherwise.
pub fn world_ray(camera: &CameraModel, pose: &Pose, pixel: &Vector2<f64>, refract: bool) -> Result<Ray> {
    let ray = if refract {
        refracted_ray(camera, pixel)?
    } else {
        pixel_ray(camera, pixel)
    };
    Ok(ray.transformed(pose))
}

/// Sample the scene along a pixel's world ray.
pub fn trace_pixel(
    scene: &VoxelScene,
    camera: &CameraModel,
    pose: &Pose,
    pixel: &Vector2<f64>,
    refract: bool,
    settings: &RenderSettings,
) -> Result<(Ray, RaySamples)> {
    let ray = world_ray(camera, pose, pixel, refract)?;
    let mut rng = settings.sampling.ray_rng(ray_index(camera, pixel));
    let samples = sample_scene(scene, &ray, &settings.sampling, &mut rng);
    Ok((ray, samples))
}

pub fn render_underwater(
    scene: &VoxelScene,
    medium: &MediumParams,
    camera: &CameraModel,
    pose: &Pose,
    pixel: &Vector2<f64>,
    settings: &RenderSettings,
) -> Result<RayRadiance> {
    let (_, samples) = trace_pixel(scene, camera, pose, pixel, true, settings)?;
    Ok(composite(&samples, Some(medium), settings))
}

/// In-air radiance `sum_k w_k c_k` along the pinhole ray.
pub fn render_inair(
    scene: &VoxelScene,
    camera: &CameraModel,
    pose: &Pose,
    pixel: &Vector2<f64>,
    settings: &RenderSettings,
) -> Rgb {
    let (_, samples) = trace_pixel(scene, camera, pose, pixel, false, settings).expect("pinhole rays cannot fail");
    composite(&samples, None, settings).i
}

/// Medium model along the pinhole ray: color cast kept, refraction removed.
pub fn render_geo_only(
    scene: &VoxelScene,
    medium: &MediumParams,
    camera: &CameraModel,
    pose: &Pose,
    pixel: &Vector2<f64>,
    settings: &RenderSettings,
) -> RayRadiance {
    let (_, samples) = trace_pixel(scene, camera, pose, pixel, false, settings).expect("pinhole rays cannot fail");
    composite(&samples, Some(medium), settings)
}

pub fn render_pixel(
    scene: &VoxelScene,
    medium: &MediumParams,
    camera: &CameraModel,
    pose: &Pose,
    pixel: &Vector2<f64>,
    mode: RenderMode,
    settings: &RenderSettings,
) -> Result<Rgb> {
    match mode {
        RenderMode::Underwater => render_underwater(scene, medium, camera, pose, pixel, settings).map(|r| r.i),
        RenderMode::InAir => Ok(render_inair(scene, camera, pose, pixel, settings)),
        RenderMode::GeoOnly => Ok(render_geo_only(scene, medium, camera, pose, pixel, settings).i),
    }
}

/// Render every pixel center; pixels that hit total internal reflection are
/// black and masked invalid.
pub fn render_image(
    scene: &VoxelScene,
    medium: &MediumParams,
    camera: &CameraModel,
    pose: &Pose,
    mode: RenderMode,
    settings: &RenderSettings,
) -> ImageBuffer {
    let (w, h) = (camera.width, camera.height);
    let rows: Vec<Vec<Option<Rgb>>> = (0..h)
        .into_par_iter()
        .map(|j| {
            (0..w)
                .map(|i| {
                    let px = CameraModel::pixel_center(i, j);
                    render_pixel(scene, medium, camera, pose, &px, mode, settings).ok()
                })
                .collect()
        })
        .collect();
    let mut img = ImageBuffer::new(w, h);
    for (k, v) in rows.into_iter().flatten().enumerate() {
        match v {
            Some(rgb) => img.data[k] = rgb,
            None => img.mask[k] = false,
        }
    }
    img
}

/// Optical parameters to replace when synthesizing a new view.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub pose: Option<Pose>,
    pub n_w: Option<f64>,
    pub s: Option<f64>,
    pub a: Option<Rgb>,
    pub beta: Option<Rgb>,
}

impl Overrides {
    /// Apply to a base configuration, rejecting values outside `bounds`.
    pub fn resolve(
        &self,
        camera: &CameraModel,
        pose: &Pose,
        medium: &MediumParams,
        bounds: &MediumBounds,
    ) -> Result<(CameraModel, Pose, MediumParams)> {
        let mut cam = camera.clone();
        if let Some(n_w) = self.n_w {
            cam.n_w = n_w;
        }
        if let Some(s) = self.s {
            cam.s = s;
        }
        cam.validate()?;
        let pose = self.pose.unwrap_or(*pose);
        pose.validate()?;
        let m = MediumParams {
            a: self.a.unwrap_or(medium.a),
            beta: self.beta.unwrap_or(medium.beta),
        };
        bounds.check(&m)?;
        Ok((cam, pose, m))
    }
}

/// Underwater render with some optical parameters replaced.
pub fn synthesize_novel(
    scene: &VoxelScene,
    camera: &CameraModel,
    pose: &Pose,
    medium: &MediumParams,
    overrides: &Overrides,
    bounds: &MediumBounds,
    settings: &RenderSettings,
) -> Result<ImageBuffer> {
    let (cam, pose, m) = overrides.resolve(camera, pose, medium, bounds)?;
    Ok(render_image(scene, &m, &cam, &pose, RenderMode::Underwater, settings))
}
