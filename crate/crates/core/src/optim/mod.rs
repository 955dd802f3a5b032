//! Inverse estimation of the medium (and optionally the object field) from
//! posed underwater captures by projected gradient descent.

mod check;
mod fd;
pub mod joint;
mod medium;

pub use check::{gradient_check, perturbed_state, GradCheckOptions, GradCheckReport, GroupReport};
pub use fd::{finite_diff_check, relative_error, FdReport};
pub use joint::{
    freeze_joint, joint_loss, optimize_joint, prepare_joint_rays, JointConfig, JointFit, JointFrozen, JointRay,
    SceneGrad,
};
pub use medium::{medium_gradients, medium_loss, optimize_medium, prepare_medium_rays, MediumFit, RayRecord};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::pooled_channel_means;
use crate::raster::{ImageBuffer, Rgb};
use crate::refraction::{CameraModel, Pose};
use crate::render::{render_image, MediumBounds, MediumParams, RenderMode, RenderSettings};
use crate::scene::VoxelScene;

/// One posed linear-light image.
#[derive(Debug, Clone, PartialEq)]
pub struct Capture {
    pub pose: Pose,
    pub image: ImageBuffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptureSet {
    pub camera: CameraModel,
    pub views: Vec<Capture>,
    /// Ground truth, when known, for evaluation only.
    pub truth: Option<MediumParams>,
}

impl CaptureSet {
    /// Noiseless underwater renders of `scene` from each pose.
    pub fn synthesize(
        scene: &VoxelScene,
        medium: &MediumParams,
        camera: &CameraModel,
        poses: &[Pose],
        settings: &RenderSettings,
    ) -> Self {
        let views = poses
            .iter()
            .map(|pose| Capture {
                pose: *pose,
                image: render_image(scene, medium, camera, pose, RenderMode::Underwater, settings),
            })
            .collect();
        Self {
            camera: camera.clone(),
            views,
            truth: Some(*medium),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::DegenerateInput("capture set has no views".into()));
        }
        self.camera.validate()?;
        for v in &self.views {
            if v.image.width != self.camera.width || v.image.height != self.camera.height {
                return Err(Error::DegenerateInput("capture size does not match the camera".into()));
            }
            v.pose.validate()?;
        }
        Ok(())
    }
}

/// Per-channel mean over all pixels of all captures.
pub fn color_cast_ratio(captures: &CaptureSet) -> Result<Rgb> {
    if captures.views.is_empty() {
        return Err(Error::DegenerateInput("capture set has no views".into()));
    }
    pooled_channel_means(captures.views.iter().map(|v| &v.image))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub init: MediumParams,
    pub bounds: MediumBounds,
    /// Weight of the color-cast term.
    pub lambda: f64,
    /// Stabilizer in the reconstruction denominator.
    pub epsilon: f64,
    pub iterations: usize,
    /// Rays per step; a value >= the number of rays means full batch.
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Iterations over which the rate decays log-linearly.
    pub lr_span: usize,
    /// First iteration at which the medium parameters move.
    pub medium_start: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            init: MediumParams::default(),
            bounds: MediumBounds::default(),
            lambda: 1e-3,
            epsilon: 1e-3,
            iterations: 150_000,
            batch_size: 2048,
            lr_start: 2.5e-4,
            lr_end: 2.5e-5,
            lr_span: 50_000,
            medium_start: 35_000,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::OutOfBounds(format!("optimization: {m}")));
        self.bounds.check(&self.init)?;
        if !(self.lr_start > 0.0 && self.lr_end > 0.0 && self.lr_end <= self.lr_start) {
            return bad("learning rates must be positive and non-increasing");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        Ok(())
    }

    /// `lr_start (lr_end / lr_start)^(k / span)`, held at `lr_end` after the span.
    pub fn learning_rate(&self, iteration: usize) -> f64 {
        if self.lr_span == 0 {
            return self.lr_end;
        }
        let frac = iteration.min(self.lr_span) as f64 / self.lr_span as f64;
        self.lr_start * (self.lr_end / self.lr_start).powf(frac)
    }

    pub(crate) fn batch_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Ray indices for one step: everything in order for a full batch, uniform
/// draws with replacement otherwise.
pub fn sample_batch<R: Rng>(rng: &mut R, n_rays: usize, batch_size: usize) -> Vec<usize> {
    if batch_size >= n_rays {
        return (0..n_rays).collect();
    }
    (0..batch_size).map(|_| rng.random_range(0..n_rays)).collect()
}

/// Loss terms and their gradients w.r.t. the medium, averaged over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub recon: f64,
    pub cast: f64,
    pub total: f64,
    pub recon_grad_a: Rgb,
    pub recon_grad_beta: Rgb,
    pub cast_grad_a: Rgb,
    pub cast_grad_beta: Rgb,
    /// Weight applied to the cast term in `total` and the total gradients.
    pub lambda: f64,
}

impl LossBreakdown {
    pub(crate) fn finish(mut self, n: usize, lambda: f64) -> Self {
        let k = 1.0 / n.max(1) as f64;
        self.recon *= k;
        self.cast *= k;
        for c in 0..3 {
            self.recon_grad_a[c] *= k;
            self.recon_grad_beta[c] *= k;
            self.cast_grad_a[c] *= k;
            self.cast_grad_beta[c] *= k;
        }
        self.total = self.recon + lambda * self.cast;
        self.lambda = lambda;
        self
    }

    pub(crate) fn accumulate(&mut self, other: &LossBreakdown) {
        self.recon += other.recon;
        self.cast += other.cast;
        for c in 0..3 {
            self.recon_grad_a[c] += other.recon_grad_a[c];
            self.recon_grad_beta[c] += other.recon_grad_beta[c];
            self.cast_grad_a[c] += other.cast_grad_a[c];
            self.cast_grad_beta[c] += other.cast_grad_beta[c];
        }
    }

    pub fn grad_a(&self) -> Rgb {
        [0, 1, 2].map(|c| self.recon_grad_a[c] + self.lambda * self.cast_grad_a[c])
    }

    pub fn grad_beta(&self) -> Rgb {
        [0, 1, 2].map(|c| self.recon_grad_beta[c] + self.lambda * self.cast_grad_beta[c])
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self
                .grad_a()
                .iter()
                .chain(self.grad_beta().iter())
                .all(|v| v.is_finite())
    }
}

/// One line of the optimization trace; parameters are those at which the
/// loss was evaluated, before the step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub lr: f64,
    pub recon: f64,
    pub cast: f64,
    pub total: f64,
    pub medium: MediumParams,
}

impl TraceRow {
    pub(crate) fn new(iteration: usize, lr: f64, loss: &LossBreakdown, medium: &MediumParams) -> Self {
        Self {
            iteration,
            lr,
            recon: loss.recon,
            cast: loss.cast,
            total: loss.total,
            medium: *medium,
        }
    }
}

pub(crate) fn gradient_step(medium: &MediumParams, loss: &LossBreakdown, lr: f64, bounds: &MediumBounds) -> MediumParams {
    let (ga, gb) = (loss.grad_a(), loss.grad_beta());
    let stepped = MediumParams {
        a: [0, 1, 2].map(|c| medium.a[c] - lr * ga[c]),
        beta: [0, 1, 2].map(|c| medium.beta[c] - lr * gb[c]),
    };
    bounds.project(&stepped)
}

pub(crate) fn non_finite(iteration: usize, medium: &MediumParams, trace: Vec<TraceRow>) -> Error {
    Error::NonFiniteLoss {
        iteration,
        params: *medium,
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_log_linear() {
        let cfg = OptimConfig::default();
        assert_eq!(cfg.learning_rate(0), 2.5e-4);
        assert!((cfg.learning_rate(50_000) - 2.5e-5).abs() < 1e-18);
        assert_eq!(cfg.learning_rate(90_000), cfg.learning_rate(50_000));
        for k in [1usize, 777, 25_000, 49_999] {
            let expect = 2.5e-4 * (0.1f64).powf(k as f64 / 50_000.0);
            assert!((cfg.learning_rate(k) - expect).abs() < 1e-12);
            assert!(cfg.learning_rate(k) < cfg.learning_rate(k - 1));
        }
    }

    #[test]
    fn default_config_is_valid() {
        OptimConfig::default().validate().unwrap();
        let bad = OptimConfig {
            init: MediumParams::new([0.9; 3], [0.05, 0.2, 0.2]),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn full_batch_is_ordered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_batch(&mut rng, 5, 8), vec![0, 1, 2, 3, 4]);
        let b = sample_batch(&mut rng, 100, 10);
        assert_eq!(b.len(), 10);
        assert!(b.iter().all(|&i| i < 100));
    }

    #[test]
    fn cast_ratio_needs_views() {
        let cs = CaptureSet {
            camera: CameraModel::pinhole(2, 2, 2.0),
            views: vec![],
            truth: None,
        };
        assert!(matches!(color_cast_ratio(&cs), Err(Error::DegenerateInput(_))));
        let img = ImageBuffer::filled(2, 2, [0.4; 3]);
        let cs = CaptureSet {
            views: vec![Capture { pose: Pose::identity(), image: img }],
            ..cs
        };
        assert_eq!(color_cast_ratio(&cs).unwrap(), [0.4; 3]);
    }
}
