//! Experiment manifests: one TOML file describing camera, scene, medium,
//! views, sampling and optimization settings. Unknown keys are rejected.
//!
//! ```toml
//! [camera]
//! width = 64
//! height = 64
//! fx = 70.0
//! fy = 70.0
//! cx = 32.0
//! cy = 32.0
//! s = 0.0
//! n_a = 1.0
//! n_w = 1.333
//!
//! [scene]
//! kind = "slab"
//! z = 2.0
//! thickness = 0.2
//! color = [1.0, 0.0, 0.0]
//! sigma_max = 200.0
//! half_extent = 4.0
//!
//! [medium]
//! A = [0.9, 0.9, 0.9]
//! beta = [0.4, 0.2, 0.2]
//!
//! [sampling]
//! t_near = 0.0
//! t_far = 4.0
//! samples = 256
//!
//! [[views]]
//! position = [0.0, 0.0, 0.0]
//! look_at = [0.0, 0.0, 1.0]
//! ```

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_pfm;
use crate::optim::joint::JointConfig;
use crate::optim::{Capture, CaptureSet, OptimConfig};
use crate::refraction::{CameraModel, Pose};
use crate::render::{MediumBounds, MediumParams, RenderSettings};
use crate::scene::{make_test_scene, SamplingConfig, SceneSpec, VoxelScene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraBlock {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub s: f64,
    pub n_a: f64,
    pub n_w: f64,
    #[serde(default = "default_normal")]
    pub normal: [f64; 3],
}

fn default_normal() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

impl From<&CameraModel> for CameraBlock {
    fn from(c: &CameraModel) -> Self {
        Self {
            width: c.width,
            height: c.height,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            s: c.s,
            n_a: c.n_a,
            n_w: c.n_w,
            normal: c.normal.into(),
        }
    }
}

impl CameraBlock {
    /// Read the `[camera]` table of a manifest (or any TOML file that has
    /// one); other tables are ignored.
    pub fn load(path: &Path) -> Result<CameraModel> {
        let mut table: toml::Table = toml::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Manifest(e.message().to_string()))?;
        let block: CameraBlock = table
            .remove("camera")
            .ok_or_else(|| Error::Manifest(format!("{} has no [camera] table", path.display())))?
            .try_into()
            .map_err(|e: toml::de::Error| Error::Manifest(e.message().to_string()))?;
        let cam = block.to_camera();
        cam.validate()?;
        Ok(cam)
    }

    pub fn to_camera(&self) -> CameraModel {
        CameraModel {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            s: self.s,
            n_a: self.n_a,
            n_w: self.n_w,
            normal: Vector3::from(self.normal),
        }
    }
}

/// A camera placement, and optionally the capture taken from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewBlock {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    /// World direction that appears toward the top of the image.
    #[serde(default = "default_up")]
    pub up: [f64; 3],
    /// Linear PFM capture, relative to the manifest's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
}

fn default_up() -> [f64; 3] {
    [0.0, -1.0, 0.0]
}

impl ViewBlock {
    pub fn new(position: [f64; 3], look_at: [f64; 3]) -> Self {
        Self {
            position,
            look_at,
            up: default_up(),
            image: None,
        }
    }

    pub fn pose(&self) -> Result<Pose> {
        Pose::look_at(Vector3::from(self.position), Vector3::from(self.look_at), Vector3::from(self.up))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderBlock {
    /// Density at which a sample counts as the opaque surface; defaults to
    /// half the scene's peak density.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_thresh: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub camera: CameraBlock,
    pub scene: SceneSpec,
    pub medium: MediumParams,
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub render: RenderBlock,
    #[serde(default)]
    pub views: Vec<ViewBlock>,
    #[serde(default)]
    pub optimization: OptimConfig,
    #[serde(default)]
    pub joint: JointConfig,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Manifest = toml::from_str(text).map_err(|e| Error::Manifest(e.message().to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Manifest(e.to_string()))
    }

    /// Parse, validate, and check that referenced capture files exist.
    pub fn load(path: &Path) -> Result<Self> {
        let m = Self::parse(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for v in &m.views {
            if let Some(img) = &v.image {
                let p = base.join(img);
                if !p.is_file() {
                    return Err(Error::Manifest(format!("capture '{}' does not exist", p.display())));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.camera().validate()?;
        self.sampling.validate()?;
        MediumBounds::relaxed().check(&self.medium)?;
        self.optimization.validate()?;
        if let Some(t) = self.render.sigma_thresh {
            if !(t > 0.0) {
                return Err(Error::OutOfBounds("sigma_thresh must be positive".into()));
            }
        }
        for v in &self.views {
            v.pose()?;
        }
        make_test_scene(&self.scene)?;
        Ok(())
    }

    pub fn camera(&self) -> CameraModel {
        self.camera.to_camera()
    }

    pub fn scene(&self) -> Result<VoxelScene> {
        make_test_scene(&self.scene)
    }

    pub fn poses(&self) -> Result<Vec<Pose>> {
        self.views.iter().map(ViewBlock::pose).collect()
    }

    pub fn pose(&self, view: usize) -> Result<Pose> {
        match self.views.get(view) {
            Some(v) => v.pose(),
            None if self.views.is_empty() && view == 0 => Ok(Pose::identity()),
            None => Err(Error::Manifest(format!("no view {view} (manifest has {})", self.views.len()))),
        }
    }

    pub fn settings(&self, scene: &VoxelScene) -> RenderSettings {
        let mut s = RenderSettings::for_scene(scene, self.sampling);
        if let Some(t) = self.render.sigma_thresh {
            s.sigma_thresh = t;
        }
        s
    }

    /// Load every view's capture; all views must reference an image.
    pub fn captures(&self, base: &Path) -> Result<CaptureSet> {
        let mut views = Vec::with_capacity(self.views.len());
        for (k, v) in self.views.iter().enumerate() {
            let rel = v
                .image
                .as_ref()
                .ok_or_else(|| Error::Manifest(format!("view {k} has no capture image")))?;
            views.push(Capture {
                pose: v.pose()?,
                image: read_pfm(&base.join(rel))?,
            });
        }
        let set = CaptureSet {
            camera: self.camera(),
            views,
            truth: None,
        };
        set.validate()?;
        Ok(set)
    }
}
