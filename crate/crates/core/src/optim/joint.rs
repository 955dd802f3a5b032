//! Joint fit of a voxel object field and the medium.
//!
//! Gradients flow from the per-ray reconstruction loss into the voxel
//! colors and densities through the compositing weights and the trilinear
//! interpolation. The surface depth and the loss denominators are stop
//! gradients, re-read from the current state every iteration.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{gradient_step, non_finite, sample_batch, CaptureSet, LossBreakdown, OptimConfig, TraceRow};
use crate::error::{Error, Result};
use crate::loss::{cast_loss, cast_loss_grad, recon_denominator};
use crate::raster::Rgb;
use crate::refraction::{CameraModel, Ray};
use crate::render::{transmittance_weights, world_ray, MediumParams, RenderSettings};
use crate::scene::{sample_ray, surface_depth, RaySamples, VoxelScene};

const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointConfig {
    pub resolution: [usize; 3],
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub init_density: f64,
    pub init_color: Rgb,
    /// Step size multipliers relative to the medium learning rate schedule.
    pub density_lr: f64,
    pub color_lr: f64,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            resolution: [16; 3],
            min: [-1.0; 3],
            max: [1.0; 3],
            init_density: 0.5,
            init_color: [0.5; 3],
            density_lr: 1.0,
            color_lr: 1.0,
        }
    }
}

impl JointConfig {
    pub fn initial_scene(&self) -> Result<VoxelScene> {
        if !(self.init_density >= 0.0) || self.init_color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidSpec("joint initial density/color out of range".into()));
        }
        let mut s = VoxelScene::new(Vector3::from(self.min), Vector3::from(self.max), self.resolution)?;
        s.density.fill(self.init_density);
        s.color.fill(self.init_color);
        Ok(s)
    }
}

/// World-space refracted ray of one capture pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointRay {
    pub ray: Ray,
    pub obs: Rgb,
    /// Generator stream for jittered sampling.
    pub stream: u64,
}

pub fn prepare_joint_rays(captures: &CaptureSet) -> Vec<JointRay> {
    let cam = &captures.camera;
    let per_view = (cam.width * cam.height) as u64;
    let mut out = Vec::new();
    for (v, view) in captures.views.iter().enumerate() {
        for j in 0..cam.height {
            for i in 0..cam.width {
                if !view.image.is_valid(i, j) {
                    continue;
                }
                let px = CameraModel::pixel_center(i, j);
                if let Ok(ray) = world_ray(cam, &view.pose, &px, true) {
                    out.push(JointRay {
                        ray,
                        obs: view.image.get(i, j),
                        stream: v as u64 * per_view + (j * cam.width + i) as u64,
                    });
                }
            }
        }
    }
    out
}

/// Gradient of the batch loss w.r.t. every voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrad {
    pub density: Vec<f64>,
    pub color: Vec<Rgb>,
}

impl SceneGrad {
    pub fn zeros(n: usize) -> Self {
        Self {
            density: vec![0.0; n],
            color: vec![[0.0; 3]; n],
        }
    }

    fn add(&mut self, other: &SceneGrad) {
        for (a, b) in self.density.iter_mut().zip(&other.density) {
            *a += b;
        }
        for (a, b) in self.color.iter_mut().zip(&other.color) {
            for c in 0..3 {
                a[c] += b[c];
            }
        }
    }

    fn scale(&mut self, k: f64) {
        self.density.iter_mut().for_each(|v| *v *= k);
        self.color.iter_mut().flatten().for_each(|v| *v *= k);
    }

    pub fn is_finite(&self) -> bool {
        self.density.iter().chain(self.color.iter().flatten()).all(|v| v.is_finite())
    }
}

/// Stop-gradient values for a batch, one entry per batch position.
#[derive(Debug, Clone, PartialEq)]
pub struct JointFrozen {
    pub denominators: Vec<Rgb>,
    pub depths: Vec<f64>,
}

struct Forward {
    samples: RaySamples,
    weights: Vec<f64>,
    trans: Vec<f64>,
    j: Rgb,
    depth: f64,
}

fn forward(scene: &VoxelScene, ray: &JointRay, settings: &RenderSettings) -> Forward {
    let cfg = &settings.sampling;
    let mut samples = sample_ray(cfg, &mut cfg.ray_rng(ray.stream));
    samples.evaluate(scene, &ray.ray);
    let (weights, trans) = transmittance_weights(&samples);
    let mut j = [0.0; 3];
    for (w, c) in weights.iter().zip(&samples.color) {
        for ch in 0..3 {
            j[ch] += w * c[ch];
        }
    }
    let depth = surface_depth(&samples, settings.sigma_thresh).unwrap_or(cfg.t_far);
    Forward {
        samples,
        weights,
        trans,
        j,
        depth,
    }
}

/// Scatter `dL/dJ` of one ray into the voxel gradients.
fn backward(f: &Forward, d_j: &Rgb, grad: &mut SceneGrad) {
    let s = &f.samples;
    // sum_{k > i} w_k c_k, built back to front
    let mut behind = [0.0; 3];
    for i in (0..s.len()).rev() {
        let Some(corners) = &s.corners[i] else {
            continue;
        };
        let dt = s.width(i);
        let w = f.weights[i];
        let c = s.color[i];
        let t_next = f.trans[i] * (-s.sigma[i] * dt).exp();
        let mut d_sigma = 0.0;
        for ch in 0..3 {
            d_sigma += d_j[ch] * dt * (t_next * c[ch] - behind[ch]);
        }
        for &(idx, wt) in corners {
            grad.density[idx] += wt * d_sigma;
            let gc = &mut grad.color[idx];
            for ch in 0..3 {
                gc[ch] += wt * w * d_j[ch];
            }
        }
        for ch in 0..3 {
            behind[ch] += w * c[ch];
        }
    }
}

/// Batch-mean loss with medium gradients and, when `want_grad`, voxel
/// gradients. `frozen` replaces the stop-gradient values read from the
/// current state.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss(
    scene: &VoxelScene,
    medium: &MediumParams,
    rays: &[JointRay],
    batch: &[usize],
    gamma: &Rgb,
    cfg: &OptimConfig,
    settings: &RenderSettings,
    frozen: Option<&JointFrozen>,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<SceneGrad>)> {
    let n_cells = scene.cell_count();
    let partials: Vec<Result<(LossBreakdown, Option<SceneGrad>)>> = batch
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut acc = LossBreakdown::default();
            let mut grad = want_grad.then(|| SceneGrad::zeros(n_cells));
            for (k, &idx) in chunk.iter().enumerate() {
                let pos = ci * CHUNK + k;
                let ray = &rays[idx];
                let f = forward(scene, ray, settings);
                let depth = frozen.map_or(f.depth, |fr| fr.depths[pos]);
                let pred = medium.apply(&f.j, depth);
                let denom = frozen.map_or_else(|| recon_denominator(&pred, cfg.epsilon), |fr| fr.denominators[pos]);
                let t = medium.transmission(depth);
                let mut d_j = [0.0; 3];
                for c in 0..3 {
                    let r = (pred[c] - ray.obs[c]) / denom[c];
                    acc.recon += r * r;
                    let g = 2.0 * r / denom[c];
                    acc.recon_grad_a[c] += g * (1.0 - t[c]);
                    acc.recon_grad_beta[c] -= g * depth * t[c] * (f.j[c] - medium.a[c]);
                    d_j[c] = g * t[c];
                }
                acc.cast += cast_loss(&medium.a, &medium.beta, depth, gamma)?;
                let (ga, gb) = cast_loss_grad(&medium.a, &medium.beta, depth, gamma)?;
                for c in 0..3 {
                    acc.cast_grad_a[c] += ga[c];
                    acc.cast_grad_beta[c] += gb[c];
                }
                if let Some(g) = grad.as_mut() {
                    backward(&f, &d_j, g);
                }
            }
            Ok((acc, grad))
        })
        .collect();
    let mut loss = LossBreakdown::default();
    let mut grad = want_grad.then(|| SceneGrad::zeros(n_cells));
    for p in partials {
        let (l, g) = p?;
        loss.accumulate(&l);
        if let (Some(total), Some(g)) = (grad.as_mut(), g) {
            total.add(&g);
        }
    }
    let n = batch.len().max(1);
    if let Some(g) = grad.as_mut() {
        g.scale(1.0 / n as f64);
    }
    Ok((loss.finish(n, cfg.lambda), grad))
}

/// Read the stop-gradient values for a batch at the current state.
pub fn freeze_joint(
    scene: &VoxelScene,
    medium: &MediumParams,
    rays: &[JointRay],
    batch: &[usize],
    cfg: &OptimConfig,
    settings: &RenderSettings,
) -> JointFrozen {
    let (denominators, depths) = batch
        .par_iter()
        .map(|&idx| {
            let f = forward(scene, &rays[idx], settings);
            let pred = medium.apply(&f.j, f.depth);
            (recon_denominator(&pred, cfg.epsilon), f.depth)
        })
        .unzip();
    JointFrozen { denominators, depths }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointFit {
    pub scene: VoxelScene,
    pub medium: MediumParams,
    pub trace: Vec<TraceRow>,
}

/// Fit voxel densities, colors and the medium to the captures.
///
/// Starts from `init` when given, otherwise from the uniform grid described
/// by `joint`. Densities are projected to `>= 0`, colors to `[0, 1]`, and the
/// medium to `cfg.bounds`; the medium moves from `cfg.medium_start` on.
pub fn optimize_joint(
    captures: &CaptureSet,
    settings: &RenderSettings,
    cfg: &OptimConfig,
    joint: &JointConfig,
    init: Option<VoxelScene>,
) -> Result<JointFit> {
    captures.validate()?;
    cfg.validate()?;
    let gamma = super::color_cast_ratio(captures)?;
    let rays = prepare_joint_rays(captures);
    let mut scene = match init {
        Some(s) => s,
        None => joint.initial_scene()?,
    };
    let mut medium = cfg.bounds.project(&cfg.init);
    let mut rng = cfg.batch_rng();
    let mut trace = Vec::with_capacity(cfg.iterations);
    for k in 0..cfg.iterations {
        let batch = sample_batch(&mut rng, rays.len(), cfg.batch_size);
        let lr = cfg.learning_rate(k);
        let (loss, grad) = match joint_loss(&scene, &medium, &rays, &batch, &gamma, cfg, settings, None, true) {
            Ok((l, Some(g))) if l.is_finite() && g.is_finite() => (l, g),
            _ => return Err(non_finite(k, &medium, trace)),
        };
        trace.push(TraceRow::new(k, lr, &loss, &medium));
        let decay = lr / cfg.lr_start;
        let (ks, kc) = (joint.density_lr * decay, joint.color_lr * decay);
        for (s, g) in scene.density.iter_mut().zip(&grad.density) {
            *s = (*s - ks * g).max(0.0);
        }
        for (c, g) in scene.color.iter_mut().zip(&grad.color) {
            for ch in 0..3 {
                c[ch] = (c[ch] - kc * g[ch]).clamp(0.0, 1.0);
            }
        }
        if k >= cfg.medium_start {
            medium = gradient_step(&medium, &loss, lr, &cfg.bounds);
        }
    }
    Ok(JointFit { scene, medium, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{finite_diff_check, optimize_medium};
    use crate::refraction::Pose;
    use crate::scene::{make_test_scene, SamplingConfig, SceneSpec};

    fn setup() -> (VoxelScene, CaptureSet, RenderSettings) {
        let scene = make_test_scene(&SceneSpec::Sphere {
            center: [0.0; 3],
            radius: 0.6,
            color: [0.8, 0.5, 0.3],
            stripe_color: [0.2, 0.4, 0.7],
            stripes: 4,
            sigma_max: 8.0,
            resolution: 6,
        })
        .unwrap();
        let cam = CameraModel::with_fov(12, 12, 40.0);
        let settings = RenderSettings::for_scene(&scene, SamplingConfig::new(1.5, 4.5, 48));
        let poses = [
            Pose::look_at(Vector3::new(0.0, 0.0, -3.0), Vector3::zeros(), Vector3::y()).unwrap(),
            Pose::look_at(Vector3::new(2.5, 0.5, -1.5), Vector3::zeros(), Vector3::y()).unwrap(),
        ];
        let truth = MediumParams::new([0.8, 0.85, 0.9], [0.45, 0.25, 0.2]);
        let caps = CaptureSet::synthesize(&scene, &truth, &cam, &poses, &settings);
        (scene, caps, settings)
    }

    #[test]
    fn voxel_gradients_match_finite_differences() {
        let (truth, caps, settings) = setup();
        let mut scene = truth.clone();
        // perturb so the loss is away from its minimum
        for (i, s) in scene.density.iter_mut().enumerate() {
            *s = 0.7 * *s + 0.3 * (i % 5) as f64;
        }
        for (i, c) in scene.color.iter_mut().enumerate() {
            c[i % 3] = 0.5 * c[i % 3] + 0.2;
        }
        let rays = prepare_joint_rays(&caps);
        let batch: Vec<usize> = (0..rays.len()).collect();
        let cfg = OptimConfig::default();
        let gamma = crate::optim::color_cast_ratio(&caps).unwrap();
        let medium = MediumParams::default();
        let (_, grad) = joint_loss(&scene, &medium, &rays, &batch, &gamma, &cfg, &settings, None, true).unwrap();
        let grad = grad.unwrap();
        let frozen = freeze_joint(&scene, &medium, &rays, &batch, &cfg, &settings);
        let eval = |s: &VoxelScene| {
            joint_loss(s, &medium, &rays, &batch, &gamma, &cfg, &settings, Some(&frozen), false)
                .unwrap()
                .0
                .total
        };

        let touched: Vec<usize> = (0..scene.cell_count()).filter(|&i| grad.color[i][0].abs() > 1e-6).collect();
        assert!(touched.len() > 20);
        let colors: Vec<f64> = touched.iter().map(|&i| scene.color[i][0]).collect();
        let analytic: Vec<f64> = touched.iter().map(|&i| grad.color[i][0]).collect();
        let f = |v: &[f64]| {
            let mut s = scene.clone();
            for (k, &i) in touched.iter().enumerate() {
                s.color[i][0] = v[k];
            }
            eval(&s)
        };
        let r = finite_diff_check(f, &colors, &analytic, 1e-4);
        assert!(r.max_rel_error < 1e-4, "color: {r:?}");

        let dens: Vec<usize> = (0..scene.cell_count()).filter(|&i| grad.density[i].abs() > 1e-5).take(40).collect();
        let values: Vec<f64> = dens.iter().map(|&i| scene.density[i]).collect();
        let analytic: Vec<f64> = dens.iter().map(|&i| grad.density[i]).collect();
        let f = |v: &[f64]| {
            let mut s = scene.clone();
            for (k, &i) in dens.iter().enumerate() {
                s.density[i] = v[k];
            }
            eval(&s)
        };
        let r = finite_diff_check(f, &values, &analytic, 1e-5);
        assert!(r.max_rel_error < 1e-4, "density: {r:?}");
    }

    #[test]
    fn frozen_scene_reduces_to_medium_fit() {
        let (truth, caps, settings) = setup();
        let cfg = OptimConfig {
            iterations: 200,
            medium_start: 0,
            lr_start: 0.02,
            lr_end: 0.02,
            lr_span: 0,
            batch_size: 100,
            seed: 4,
            ..Default::default()
        };
        let joint = JointConfig {
            density_lr: 0.0,
            color_lr: 0.0,
            ..Default::default()
        };
        let a = optimize_joint(&caps, &settings, &cfg, &joint, Some(truth.clone())).unwrap();
        let b = optimize_medium(&truth, &caps, &settings, &cfg).unwrap();
        assert_eq!(a.scene, truth);
        for c in 0..3 {
            assert!((a.medium.a[c] - b.medium.a[c]).abs() < 1e-12);
            assert!((a.medium.beta[c] - b.medium.beta[c]).abs() < 1e-12);
        }
    }
}
