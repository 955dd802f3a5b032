//! Gradient verification on a random subset of capture rays: analytic
//! gradients of the total loss against central differences, per parameter
//! group, with the stop-gradient quantities frozen at the evaluation point.

use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::fd::{finite_diff_check, FdReport};
use super::joint::{freeze_joint, joint_loss, prepare_joint_rays};
use super::{color_cast_ratio, CaptureSet, OptimConfig};
use crate::error::{Error, Result};
use crate::render::{MediumBounds, MediumParams, RenderSettings};
use crate::scene::VoxelScene;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub rays: usize,
    pub step: f64,
    pub seed: u64,
    /// Voxel parameters per group are capped to keep the check fast.
    pub max_voxels: usize,
    /// Flip the sign of the analytic `A` gradient. Exists so the harness can
    /// be shown to catch a wrong gradient.
    pub inject_sign_flip: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            rays: 512,
            step: 1e-5,
            seed: 0,
            max_voxels: 48,
            inject_sign_flip: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub name: &'static str,
    pub report: FdReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.report.max_rel_error < self.tolerance)
    }

    pub fn worst(&self) -> Option<&GroupReport> {
        self.groups
            .iter()
            .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
    }
}

/// Move the evaluation point away from the captures' optimum so every group
/// has gradients well above roundoff.
pub fn perturbed_state(scene: &VoxelScene, medium: &MediumParams) -> (VoxelScene, MediumParams) {
    let mut s = scene.clone();
    for (i, d) in s.density.iter_mut().enumerate() {
        *d = 0.7 * *d + 0.3 * (i % 5) as f64;
    }
    for (i, c) in s.color.iter_mut().enumerate() {
        c[i % 3] = 0.5 * c[i % 3] + 0.2;
    }
    let m = MediumParams::new(
        medium.a.map(|a| 0.85 * a + 0.1),
        medium.beta.map(|b| 1.25 * b + 0.05),
    );
    (s, MediumBounds::default().project(&m))
}

/// Check `A`, `beta`, voxel colors and voxel densities at `(scene, medium)`.
pub fn gradient_check(
    scene: &VoxelScene,
    medium: &MediumParams,
    captures: &CaptureSet,
    settings: &RenderSettings,
    cfg: &OptimConfig,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let rays = prepare_joint_rays(captures);
    if rays.is_empty() {
        return Err(Error::DegenerateInput("no valid capture rays".into()));
    }
    let gamma = color_cast_ratio(captures)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut batch = sample(&mut rng, rays.len(), opts.rays.min(rays.len())).into_vec();
    batch.sort_unstable();

    let (loss, grad) = joint_loss(scene, medium, &rays, &batch, &gamma, cfg, settings, None, true)?;
    let grad = grad.expect("gradient requested");
    let frozen = freeze_joint(scene, medium, &rays, &batch, cfg, settings);
    let eval = |s: &VoxelScene, m: &MediumParams| -> f64 {
        joint_loss(s, m, &rays, &batch, &gamma, cfg, settings, Some(&frozen), false)
            .map(|(l, _)| l.total)
            .unwrap_or(f64::NAN)
    };

    let mut groups = Vec::new();
    let mut grad_a = loss.grad_a().to_vec();
    if opts.inject_sign_flip {
        grad_a.iter_mut().for_each(|g| *g = -*g);
    }
    let report = finite_diff_check(
        |v| eval(scene, &MediumParams::new([v[0], v[1], v[2]], medium.beta)),
        &medium.a,
        &grad_a,
        opts.step,
    );
    groups.push(GroupReport { name: "A", report });
    let report = finite_diff_check(
        |v| eval(scene, &MediumParams::new(medium.a, [v[0], v[1], v[2]])),
        &medium.beta,
        &loss.grad_beta(),
        opts.step,
    );
    groups.push(GroupReport { name: "beta", report });

    // voxels the batch actually sees, as (cell, channel) pairs
    let colors: Vec<(usize, usize)> = (0..scene.cell_count())
        .flat_map(|i| (0..3).map(move |c| (i, c)))
        .filter(|&(i, c)| grad.color[i][c].abs() > 1e-9)
        .take(opts.max_voxels)
        .collect();
    if !colors.is_empty() {
        let values: Vec<f64> = colors.iter().map(|&(i, c)| scene.color[i][c]).collect();
        let analytic: Vec<f64> = colors.iter().map(|&(i, c)| grad.color[i][c]).collect();
        let f = |v: &[f64]| {
            let mut s = scene.clone();
            for (k, &(i, c)) in colors.iter().enumerate() {
                s.color[i][c] = v[k];
            }
            eval(&s, medium)
        };
        groups.push(GroupReport {
            name: "c_o",
            report: finite_diff_check(f, &values, &analytic, opts.step),
        });
    }
    let dens: Vec<usize> = (0..scene.cell_count())
        .filter(|&i| grad.density[i].abs() > 1e-9)
        .take(opts.max_voxels)
        .collect();
    if !dens.is_empty() {
        let values: Vec<f64> = dens.iter().map(|&i| scene.density[i]).collect();
        let analytic: Vec<f64> = dens.iter().map(|&i| grad.density[i]).collect();
        let f = |v: &[f64]| {
            let mut s = scene.clone();
            for (k, &i) in dens.iter().enumerate() {
                s.density[i] = v[k];
            }
            eval(&s, medium)
        };
        groups.push(GroupReport {
            name: "sigma",
            report: finite_diff_check(f, &values, &analytic, opts.step),
        });
    }
    Ok(GradCheckReport { groups, tolerance: 1e-4 })
}
