use rayon::prelude::*;

use super::{gradient_step, non_finite, sample_batch, CaptureSet, LossBreakdown, OptimConfig, TraceRow};
use crate::error::Result;
use crate::loss::{cast_loss, cast_loss_grad, recon_denominator};
use crate::raster::Rgb;
use crate::refraction::CameraModel;
use crate::render::{composite, trace_pixel, MediumParams, RenderSettings};
use crate::scene::VoxelScene;

/// Rays reduced per work item; fixed so sums do not depend on thread count.
const CHUNK: usize = 256;

/// A capture pixel with its object radiance and surface depth already
/// computed from a known scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayRecord {
    pub obs: Rgb,
    pub j: Rgb,
    /// Surface depth, or `t_far` for rays that only see water.
    pub depth: f64,
}

/// Trace every valid capture pixel through `scene` along its refracted ray.
pub fn prepare_medium_rays(scene: &VoxelScene, captures: &CaptureSet, settings: &RenderSettings) -> Vec<RayRecord> {
    let cam = &captures.camera;
    let per_view: Vec<Vec<RayRecord>> = captures
        .views
        .par_iter()
        .map(|view| {
            let mut out = Vec::new();
            for j in 0..cam.height {
                for i in 0..cam.width {
                    if !view.image.is_valid(i, j) {
                        continue;
                    }
                    let px = CameraModel::pixel_center(i, j);
                    let Ok((_, samples)) = trace_pixel(scene, cam, &view.pose, &px, true, settings) else {
                        continue;
                    };
                    let r = composite(&samples, None, settings);
                    out.push(RayRecord {
                        obs: view.image.get(i, j),
                        j: r.j,
                        depth: r.depth.unwrap_or(settings.sampling.t_far),
                    });
                }
            }
            out
        })
        .collect();
    per_view.into_iter().flatten().collect()
}

fn ray_terms(
    rec: &RayRecord,
    medium: &MediumParams,
    gamma: &Rgb,
    cfg: &OptimConfig,
    denom: Option<&Rgb>,
) -> Result<LossBreakdown> {
    let pred = medium.apply(&rec.j, rec.depth);
    let denom = denom.copied().unwrap_or_else(|| recon_denominator(&pred, cfg.epsilon));
    let t = medium.transmission(rec.depth);
    let mut out = LossBreakdown::default();
    for c in 0..3 {
        let r = (pred[c] - rec.obs[c]) / denom[c];
        out.recon += r * r;
        let g = 2.0 * r / denom[c];
        out.recon_grad_a[c] = g * (1.0 - t[c]);
        out.recon_grad_beta[c] = -g * rec.depth * t[c] * (rec.j[c] - medium.a[c]);
    }
    out.cast = cast_loss(&medium.a, &medium.beta, rec.depth, gamma)?;
    let (ga, gb) = cast_loss_grad(&medium.a, &medium.beta, rec.depth, gamma)?;
    out.cast_grad_a = ga;
    out.cast_grad_beta = gb;
    Ok(out)
}

/// Batch-mean loss `recon + lambda * cast` and its gradients w.r.t. the
/// medium. `frozen` optionally supplies the reconstruction denominators
/// (one per batch entry) instead of reading them from the prediction.
pub fn medium_loss(
    records: &[RayRecord],
    batch: &[usize],
    medium: &MediumParams,
    gamma: &Rgb,
    cfg: &OptimConfig,
    frozen: Option<&[Rgb]>,
) -> Result<LossBreakdown> {
    let partials: Vec<Result<LossBreakdown>> = batch
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut acc = LossBreakdown::default();
            for (k, &idx) in chunk.iter().enumerate() {
                let denom = frozen.map(|f| &f[ci * CHUNK + k]);
                acc.accumulate(&ray_terms(&records[idx], medium, gamma, cfg, denom)?);
            }
            Ok(acc)
        })
        .collect();
    let mut total = LossBreakdown::default();
    for p in partials {
        total.accumulate(&p?);
    }
    Ok(total.finish(batch.len(), cfg.lambda))
}

/// `(dL/dA, dL/dbeta)` of the total loss over a batch.
pub fn medium_gradients(
    records: &[RayRecord],
    batch: &[usize],
    medium: &MediumParams,
    gamma: &Rgb,
    cfg: &OptimConfig,
) -> Result<(Rgb, Rgb)> {
    let l = medium_loss(records, batch, medium, gamma, cfg, None)?;
    Ok((l.grad_a(), l.grad_beta()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MediumFit {
    pub medium: MediumParams,
    pub trace: Vec<TraceRow>,
}

/// Fit `A` and `beta` to the captures of a known scene.
pub fn optimize_medium(
    scene: &VoxelScene,
    captures: &CaptureSet,
    settings: &RenderSettings,
    cfg: &OptimConfig,
) -> Result<MediumFit> {
    captures.validate()?;
    cfg.validate()?;
    let gamma = super::color_cast_ratio(captures)?;
    let records = prepare_medium_rays(scene, captures, settings);
    optimize_records(&records, &gamma, cfg)
}

pub(crate) fn optimize_records(records: &[RayRecord], gamma: &Rgb, cfg: &OptimConfig) -> Result<MediumFit> {
    let mut rng = cfg.batch_rng();
    let mut medium = cfg.bounds.project(&cfg.init);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for k in 0..cfg.iterations {
        let batch = sample_batch(&mut rng, records.len(), cfg.batch_size);
        let lr = cfg.learning_rate(k);
        let loss = match medium_loss(records, &batch, &medium, gamma, cfg, None) {
            Ok(l) if l.is_finite() => l,
            _ => return Err(non_finite(k, &medium, trace)),
        };
        trace.push(TraceRow::new(k, lr, &loss, &medium));
        if k >= cfg.medium_start {
            medium = gradient_step(&medium, &loss, lr, &cfg.bounds);
        }
    }
    Ok(MediumFit { medium, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{finite_diff_check, CaptureSet};
    use crate::error::Error;
    use crate::refraction::Pose;
    use crate::render::MediumBounds;
    use crate::scene::{make_test_scene, SamplingConfig, SceneKind, SceneSpec};
    use nalgebra::Vector3;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn random_records(n: usize, seed: u64) -> Vec<RayRecord> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let truth = MediumParams::new([0.8, 0.85, 0.9], [0.45, 0.25, 0.2]);
        (0..n)
            .map(|_| {
                let j = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
                let depth = rng.random_range(1.0..4.0);
                RayRecord {
                    obs: truth.apply(&j, depth),
                    j,
                    depth,
                }
            })
            .collect()
    }

    fn as_vec(m: &MediumParams) -> Vec<f64> {
        m.a.iter().chain(m.beta.iter()).copied().collect()
    }

    fn from_vec(v: &[f64]) -> MediumParams {
        MediumParams::new([v[0], v[1], v[2]], [v[3], v[4], v[5]])
    }

    #[test]
    fn gradient_is_zero_where_medium_matches_object() {
        // J_c = A_c makes beta_c unobservable
        let rec = RayRecord {
            obs: [0.2; 3],
            j: [0.9; 3],
            depth: 2.0,
        };
        let l = ray_terms(&rec, &MediumParams::default(), &[0.3, 0.4, 0.5], &OptimConfig::default(), None).unwrap();
        assert_eq!(l.recon_grad_beta, [0.0; 3]);
        let shallow = RayRecord { depth: 0.0, ..rec };
        let l = ray_terms(&shallow, &MediumParams::default(), &[0.3, 0.4, 0.5], &OptimConfig::default(), None);
        // zero water column: no back-scatter, so the cast ratio is undefined
        assert!(l.is_err());
        let t = MediumParams::default().transmission(0.0);
        assert_eq!(t.map(|t| 1.0 - t), [0.0; 3]);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let records = random_records(512, 3);
        let batch: Vec<usize> = (0..records.len()).collect();
        let cfg = OptimConfig::default();
        let gamma = [0.35, 0.45, 0.55];
        let m = MediumParams::new([0.7, 0.75, 0.95], [0.6, 0.3, 0.15]);
        let base = medium_loss(&records, &batch, &m, &gamma, &cfg, None).unwrap();
        let denoms: Vec<Rgb> = batch
            .iter()
            .map(|&i| recon_denominator(&m.apply(&records[i].j, records[i].depth), cfg.epsilon))
            .collect();
        let f = |v: &[f64]| {
            medium_loss(&records, &batch, &from_vec(v), &gamma, &cfg, Some(&denoms))
                .unwrap()
                .total
        };
        let analytic: Vec<f64> = base.grad_a().iter().chain(base.grad_beta().iter()).copied().collect();
        let report = finite_diff_check(f, &as_vec(&m), &analytic, 1e-5);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn batch_order_does_not_change_gradients() {
        let records = random_records(1000, 9);
        let m = MediumParams::default();
        let cfg = OptimConfig::default();
        let gamma = [0.3, 0.4, 0.5];
        let fwd: Vec<usize> = (0..records.len()).collect();
        let rev: Vec<usize> = fwd.iter().rev().copied().collect();
        let a = medium_loss(&records, &fwd, &m, &gamma, &cfg, None).unwrap();
        let b = medium_loss(&records, &rev, &m, &gamma, &cfg, None).unwrap();
        for c in 0..3 {
            assert!((a.grad_a()[c] - b.grad_a()[c]).abs() < 1e-12);
            assert!((a.grad_beta()[c] - b.grad_beta()[c]).abs() < 1e-12);
        }
        assert!((a.total - b.total).abs() < 1e-12);
    }

    #[test]
    fn projection_keeps_parameters_in_bounds() {
        let records = random_records(64, 5);
        let cfg = OptimConfig {
            iterations: 50,
            medium_start: 0,
            lr_start: 5.0,
            lr_end: 5.0,
            lr_span: 0,
            batch_size: 16,
            ..Default::default()
        };
        // a step this large can land on A_c = 0, where the cast ratio is undefined;
        // every iterate visited before that must still be in bounds
        let trace = match optimize_records(&records, &[0.3, 0.4, 0.5], &cfg) {
            Ok(fit) => fit.trace,
            Err(Error::NonFiniteLoss { trace, .. }) => trace,
            Err(e) => panic!("{e}"),
        };
        assert!(trace.len() > 1);
        for row in &trace {
            assert!(row.medium.a.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(row.medium.beta.iter().all(|v| (0.1..=1.0).contains(v)));
        }
    }

    #[test]
    fn parameters_hold_until_start_iteration() {
        let records = random_records(64, 5);
        let cfg = OptimConfig {
            iterations: 20,
            medium_start: 10,
            lr_start: 0.1,
            lr_end: 0.1,
            lr_span: 0,
            ..Default::default()
        };
        let fit = optimize_records(&records, &[0.3, 0.4, 0.5], &cfg).unwrap();
        assert!(fit.trace[..=10].iter().all(|r| r.medium == cfg.init));
        assert_ne!(fit.trace[11].medium, cfg.init);
    }

    #[test]
    fn non_finite_loss_aborts_with_trace() {
        let mut records = random_records(8, 1);
        records[3].obs = [f64::NAN; 3];
        let cfg = OptimConfig {
            iterations: 5,
            medium_start: 0,
            ..Default::default()
        };
        match optimize_records(&records, &[0.3, 0.4, 0.5], &cfg) {
            Err(crate::Error::NonFiniteLoss { iteration, trace, .. }) => {
                assert_eq!(iteration, 0);
                assert!(trace.is_empty());
            }
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn truth_below_lower_bound_pins_beta_to_the_bound() {
        let scene = make_test_scene(&SceneSpec::default_for(SceneKind::CheckerBox)).unwrap();
        let cam = crate::refraction::CameraModel::with_fov(24, 24, 50.0);
        let settings = RenderSettings::for_scene(&scene, SamplingConfig::new(0.5, 6.0, 128));
        let truth = MediumParams::new([0.8, 0.85, 0.9], [0.05, 0.3, 0.35]);
        let poses = [
            Pose::identity(),
            Pose::look_at(Vector3::new(0.3, 0.0, -0.5), Vector3::new(0.0, 0.0, 2.0), -Vector3::y()).unwrap(),
        ];
        let caps = CaptureSet::synthesize(&scene, &truth, &cam, &poses, &settings);
        let cfg = OptimConfig {
            iterations: 1500,
            medium_start: 0,
            lr_start: 0.05,
            lr_end: 0.01,
            lr_span: 1500,
            batch_size: 4096,
            bounds: MediumBounds::default(),
            ..Default::default()
        };
        let fit = optimize_medium(&scene, &caps, &settings, &cfg).unwrap();
        assert_eq!(fit.medium.beta[0], 0.1);
    }
}
