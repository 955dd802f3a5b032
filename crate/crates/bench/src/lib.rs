//! Shared fixtures for the benchmarks.

use pumpout_core::optim::CaptureSet;
use pumpout_core::scene::{make_test_scene, SceneKind};
use pumpout_core::{CameraModel, MediumParams, Pose, RenderSettings, SamplingConfig, SceneSpec, Vector3, VoxelScene};

pub fn camera(size: usize) -> CameraModel {
    CameraModel::with_fov(size, size, 50.0).with_port(0.01, 1.0, 1.333)
}

pub fn scene(kind: SceneKind) -> VoxelScene {
    make_test_scene(&SceneSpec::default_for(kind)).expect("reference scenes are valid")
}

pub fn settings(scene: &VoxelScene, samples: usize) -> RenderSettings {
    RenderSettings::for_scene(scene, SamplingConfig::new(1.2, 4.8, samples))
}

/// `n` views on a ring of radius 3 around the origin.
pub fn ring(n: usize) -> Vec<Pose> {
    (0..n)
        .map(|k| {
            let t = k as f64 * std::f64::consts::TAU / n as f64;
            Pose::look_at(
                Vector3::new(3.0 * t.sin(), 0.0, -3.0 * t.cos()),
                Vector3::zeros(),
                Vector3::new(0.0, -1.0, 0.0),
            )
            .expect("ring poses are valid")
        })
        .collect()
}

pub fn sphere_captures(size: usize, views: usize, samples: usize) -> (VoxelScene, CaptureSet, RenderSettings) {
    let scene = scene(SceneKind::Sphere);
    let settings = settings(&scene, samples);
    let truth = MediumParams::new([0.3, 0.5, 0.6], [0.35, 0.2, 0.15]);
    let caps = CaptureSet::synthesize(&scene, &truth, &camera(size), &ring(views), &settings);
    (scene, caps, settings)
}
