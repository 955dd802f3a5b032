//! Voxel object fields, stratified ray sampling and surface-depth lookup.

use std::str::FromStr;

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Rgb;
use crate::refraction::Ray;

/// Regular grid of densities and colors sampled at cell centers.
///
/// Queries interpolate trilinearly between cell centers, clamp to the
/// outermost centers inside the bounds, and return empty space outside.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelScene {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
    pub resolution: [usize; 3],
    pub density: Vec<f64>,
    pub color: Vec<Rgb>,
}

/// The eight grid cells surrounding a point and their trilinear weights.
pub type Corners = [(usize, f64); 8];

impl VoxelScene {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>, resolution: [usize; 3]) -> Result<Self> {
        if resolution.iter().any(|&n| n < 2) {
            return Err(Error::InvalidSpec("grid resolution must be >= 2 per axis".into()));
        }
        if (0..3).any(|a| !(max[a] > min[a])) {
            return Err(Error::InvalidSpec("grid bounds are empty".into()));
        }
        let n = resolution.iter().product();
        Ok(Self {
            min,
            max,
            resolution,
            density: vec![0.0; n],
            color: vec![[0.0; 3]; n],
        })
    }

    pub fn cell_count(&self) -> usize {
        self.density.len()
    }

    pub fn cell_size(&self) -> Vector3<f64> {
        let r = self.resolution;
        (self.max - self.min).component_div(&Vector3::new(r[0] as f64, r[1] as f64, r[2] as f64))
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.resolution[1] + j) * self.resolution[0] + i
    }

    pub fn cell_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        let c = self.cell_size();
        self.min + Vector3::new((i as f64 + 0.5) * c.x, (j as f64 + 0.5) * c.y, (k as f64 + 0.5) * c.z)
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn sigma_max(&self) -> f64 {
        self.density.iter().copied().fold(0.0, f64::max)
    }

    /// Check the density and color invariants.
    pub fn validate(&self) -> Result<()> {
        if self.density.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
            return Err(Error::InvalidSpec("densities must be finite and >= 0".into()));
        }
        if self.color.iter().flatten().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(Error::InvalidSpec("colors must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn corners(&self, p: &Vector3<f64>) -> Option<Corners> {
        if !self.contains(p) {
            return None;
        }
        let cell = self.cell_size();
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let n = self.resolution[a];
            let f = ((p[a] - self.min[a]) / cell[a] - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = (f.floor() as usize).min(n - 2);
            base[a] = i0;
            frac[a] = f - i0 as f64;
        }
        let mut out = [(0usize, 0.0); 8];
        for (c, slot) in out.iter_mut().enumerate() {
            let (di, dj, dk) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            let w = (if di == 1 { frac[0] } else { 1.0 - frac[0] })
                * (if dj == 1 { frac[1] } else { 1.0 - frac[1] })
                * (if dk == 1 { frac[2] } else { 1.0 - frac[2] });
            *slot = (self.index(base[0] + di, base[1] + dj, base[2] + dk), w);
        }
        Some(out)
    }

    /// Density and color at `p`.
    pub fn query(&self, p: &Vector3<f64>) -> (f64, Rgb) {
        match self.corners(p) {
            Some(corners) => self.blend(&corners),
            None => (0.0, [0.0; 3]),
        }
    }

    pub fn blend(&self, corners: &Corners) -> (f64, Rgb) {
        let mut sigma = 0.0;
        let mut rgb = [0.0; 3];
        for &(idx, w) in corners {
            sigma += w * self.density[idx];
            let c = self.color[idx];
            for ch in 0..3 {
                rgb[ch] += w * c[ch];
            }
        }
        (sigma, rgb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub t_near: f64,
    pub t_far: f64,
    pub samples: usize,
    #[serde(default)]
    pub jitter: bool,
    #[serde(default)]
    pub seed: u64,
}

impl SamplingConfig {
    pub fn new(t_near: f64, t_far: f64, samples: usize) -> Self {
        Self {
            t_near,
            t_far,
            samples,
            jitter: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_near >= 0.0 && self.t_near < self.t_far && self.t_far.is_finite()) {
            return Err(Error::OutOfBounds("sampling: need 0 <= t_near < t_far < inf".into()));
        }
        if self.samples < 2 {
            return Err(Error::OutOfBounds("sampling: need at least 2 samples per ray".into()));
        }
        Ok(())
    }

    /// Deterministic per-ray generator: the seed picks the key, the ray index
    /// picks the stream.
    pub fn ray_rng(&self, ray_index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(ray_index);
        rng
    }
}

/// Ordered samples along one ray.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RaySamples {
    /// Interval boundaries `t_0 < ... < t_N`.
    pub bounds: Vec<f64>,
    /// Evaluation distance inside each interval.
    pub mids: Vec<f64>,
    pub sigma: Vec<f64>,
    pub color: Vec<Rgb>,
    /// Trilinear corners of each evaluation point, `None` outside the grid.
    pub corners: Vec<Option<Corners>>,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.mids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mids.is_empty()
    }

    pub fn width(&self, i: usize) -> f64 {
        self.bounds[i + 1] - self.bounds[i]
    }

    /// Fill densities and colors by querying `scene` along `ray`.
    pub fn evaluate(&mut self, scene: &VoxelScene, ray: &Ray) {
        self.corners = self.mids.iter().map(|&t| scene.corners(&ray.at(t))).collect();
        self.sigma.clear();
        self.color.clear();
        for c in &self.corners {
            let (s, rgb) = c.as_ref().map_or((0.0, [0.0; 3]), |c| scene.blend(c));
            self.sigma.push(s);
            self.color.push(rgb);
        }
    }
}

/// Partition `[t_near, t_far]` into equal strata and place one evaluation
/// point per stratum: the center, or a uniform draw when jittering.
pub fn sample_ray<R: Rng>(cfg: &SamplingConfig, rng: &mut R) -> RaySamples {
    let n = cfg.samples;
    let step = (cfg.t_far - cfg.t_near) / n as f64;
    let bounds: Vec<f64> = (0..=n).map(|i| cfg.t_near + step * i as f64).collect();
    let mids = (0..n)
        .map(|i| {
            let u = if cfg.jitter { rng.random::<f64>() } else { 0.5 };
            bounds[i] + u * (bounds[i + 1] - bounds[i])
        })
        .collect();
    RaySamples {
        bounds,
        mids,
        ..Default::default()
    }
}

/// Sample `ray` and evaluate the scene at each sample.
pub fn sample_scene<R: Rng>(scene: &VoxelScene, ray: &Ray, cfg: &SamplingConfig, rng: &mut R) -> RaySamples {
    let mut s = sample_ray(cfg, rng);
    s.evaluate(scene, ray);
    s
}

/// Distance of the first sample whose density reaches `sigma_thresh`.
pub fn surface_depth(samples: &RaySamples, sigma_thresh: f64) -> Option<f64> {
    samples
        .sigma
        .iter()
        .position(|&s| s >= sigma_thresh)
        .map(|i| samples.mids[i])
}

/// Procedural scene descriptions with known analytic surfaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SceneSpec {
    /// Fronto-parallel slab `z ∈ [z, z + thickness]`, `|x|, |y| <= half_extent`.
    Slab {
        z: f64,
        thickness: f64,
        color: Rgb,
        sigma_max: f64,
        half_extent: f64,
    },
    /// Sphere voxelized on a cubic grid; `stripes > 0` paints alternating
    /// latitude bands of `color` and `stripe_color`.
    Sphere {
        center: [f64; 3],
        radius: f64,
        color: Rgb,
        #[serde(default)]
        stripe_color: Rgb,
        #[serde(default)]
        stripes: usize,
        sigma_max: f64,
        resolution: usize,
    },
    /// Solid box whose cells alternate between two colors by index parity.
    CheckerBox {
        min: [f64; 3],
        max: [f64; 3],
        cells: [usize; 3],
        colors: [Rgb; 2],
        sigma_max: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    Slab,
    Sphere,
    CheckerBox,
}

impl FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slab" => Ok(Self::Slab),
            "sphere" => Ok(Self::Sphere),
            "checker_box" | "checker-box" | "checker" => Ok(Self::CheckerBox),
            other => Err(Error::InvalidSpec(format!("unknown scene kind '{other}'"))),
        }
    }
}

impl SceneSpec {
    /// Reference scene of the given kind, sized for a camera a few units away.
    pub fn default_for(kind: SceneKind) -> Self {
        match kind {
            SceneKind::Slab => SceneSpec::Slab {
                z: 2.0,
                thickness: 0.2,
                color: [1.0, 0.0, 0.0],
                sigma_max: 200.0,
                half_extent: 4.0,
            },
            SceneKind::Sphere => SceneSpec::Sphere {
                center: [0.0, 0.0, 0.0],
                radius: 0.7,
                color: [0.85, 0.55, 0.2],
                stripe_color: [0.2, 0.45, 0.8],
                stripes: 6,
                sigma_max: 40.0,
                resolution: 16,
            },
            SceneKind::CheckerBox => SceneSpec::CheckerBox {
                min: [-1.5, -1.5, 2.0],
                max: [1.5, 1.5, 2.2],
                cells: [12, 12, 2],
                colors: [[0.9, 0.8, 0.2], [0.1, 0.3, 0.7]],
                sigma_max: 200.0,
            },
        }
    }

    pub fn kind(&self) -> SceneKind {
        match self {
            SceneSpec::Slab { .. } => SceneKind::Slab,
            SceneSpec::Sphere { .. } => SceneKind::Sphere,
            SceneSpec::CheckerBox { .. } => SceneKind::CheckerBox,
        }
    }
}

fn check_color(c: &Rgb) -> Result<()> {
    if c.iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(Error::InvalidSpec(format!("color {c:?} outside [0, 1]")))
    }
}

/// Voxelize a procedural scene.
pub fn make_test_scene(spec: &SceneSpec) -> Result<VoxelScene> {
    let scene = match spec {
        &SceneSpec::Slab {
            z,
            thickness,
            color,
            sigma_max,
            half_extent,
        } => {
            check_color(&color)?;
            if !(thickness > 0.0 && half_extent > 0.0 && sigma_max > 0.0) {
                return Err(Error::InvalidSpec("slab needs positive thickness, extent and density".into()));
            }
            // the grid is the slab, so density is sigma_max everywhere inside
            let mut s = VoxelScene::new(
                Vector3::new(-half_extent, -half_extent, z),
                Vector3::new(half_extent, half_extent, z + thickness),
                [2, 2, 2],
            )?;
            s.density.fill(sigma_max);
            s.color.fill(color);
            s
        }
        &SceneSpec::Sphere {
            center,
            radius,
            color,
            stripe_color,
            stripes,
            sigma_max,
            resolution,
        } => {
            check_color(&color)?;
            check_color(&stripe_color)?;
            if !(radius > 0.0 && sigma_max > 0.0) || resolution < 2 {
                return Err(Error::InvalidSpec("sphere needs positive radius and density, resolution >= 2".into()));
            }
            let c = Vector3::from(center);
            let half = radius * 1.25;
            let mut s = VoxelScene::new(c.add_scalar(-half), c.add_scalar(half), [resolution; 3])?;
            for k in 0..resolution {
                for j in 0..resolution {
                    for i in 0..resolution {
                        let p = s.cell_center(i, j, k) - c;
                        let idx = s.index(i, j, k);
                        if p.norm() <= radius {
                            s.density[idx] = sigma_max;
                        }
                        let band = ((p.y / radius + 1.0) * 0.5 * stripes as f64).floor() as i64;
                        s.color[idx] = if stripes > 0 && band.rem_euclid(2) == 1 { stripe_color } else { color };
                    }
                }
            }
            s
        }
        &SceneSpec::CheckerBox {
            min,
            max,
            cells,
            colors,
            sigma_max,
        } => {
            check_color(&colors[0])?;
            check_color(&colors[1])?;
            if !(sigma_max > 0.0) {
                return Err(Error::InvalidSpec("checker box needs positive density".into()));
            }
            let mut s = VoxelScene::new(Vector3::from(min), Vector3::from(max), cells)?;
            s.density.fill(sigma_max);
            for k in 0..cells[2] {
                for j in 0..cells[1] {
                    for i in 0..cells[0] {
                        let idx = s.index(i, j, k);
                        s.color[idx] = colors[(i + j + k) % 2];
                    }
                }
            }
            s
        }
    };
    scene.validate()?;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_scene() -> VoxelScene {
        let mut s = VoxelScene::new(Vector3::zeros(), Vector3::new(4.0, 4.0, 4.0), [4, 4, 4]).unwrap();
        for k in 0..4 {
            for j in 0..4 {
                for i in 0..4 {
                    let idx = s.index(i, j, k);
                    s.density[idx] = (i + 2 * j + 3 * k) as f64;
                    s.color[idx] = [i as f64 / 4.0, j as f64 / 4.0, k as f64 / 4.0];
                }
            }
        }
        s
    }

    #[test]
    fn query_examples() {
        let s = ramp_scene();
        let (sigma, c) = s.query(&s.cell_center(1, 2, 3));
        assert!((sigma - 14.0).abs() < 1e-12);
        assert_eq!(c, [0.25, 0.5, 0.75]);
        assert_eq!(s.query(&Vector3::new(-0.1, 1.0, 1.0)), (0.0, [0.0; 3]));
        assert_eq!(s.query(&Vector3::new(1.0, 1.0, 4.5)), (0.0, [0.0; 3]));
        // halfway between cells (1,2,3) and (2,2,3)
        let (sigma, c) = s.query(&Vector3::new(2.0, 2.5, 3.5));
        assert!((sigma - 14.5).abs() < 1e-12);
        assert!((c[0] - 0.375).abs() < 1e-12);
    }

    #[test]
    fn stratified_centers() {
        let cfg = SamplingConfig::new(0.0, 1.0, 2);
        let s = sample_ray(&cfg, &mut cfg.ray_rng(0));
        assert_eq!(s.mids, vec![0.25, 0.75]);
        assert_eq!(s.bounds, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn jittered_samples_are_deterministic_and_stratified() {
        let cfg = SamplingConfig {
            jitter: true,
            seed: 42,
            ..SamplingConfig::new(0.5, 3.5, 64)
        };
        let a = sample_ray(&cfg, &mut cfg.ray_rng(7));
        let b = sample_ray(&cfg, &mut cfg.ray_rng(7));
        let c = sample_ray(&cfg, &mut cfg.ray_rng(8));
        assert_eq!(a, b);
        assert_ne!(a.mids, c.mids);
        for i in 0..64 {
            assert!(a.mids[i] >= a.bounds[i] && a.mids[i] < a.bounds[i + 1]);
            assert!(a.width(i) > 0.0);
        }
    }

    #[test]
    fn surface_depth_examples() {
        let cfg = SamplingConfig::new(0.0, 4.0, 400);
        let ray = Ray::new(Vector3::zeros(), Vector3::z());
        let empty = VoxelScene::new(Vector3::zeros(), Vector3::new(1.0, 1.0, 1.0), [2, 2, 2]).unwrap();
        let s = sample_scene(&empty, &ray, &cfg, &mut cfg.ray_rng(0));
        assert_eq!(surface_depth(&s, 0.5), None);

        let slab = make_test_scene(&SceneSpec::default_for(SceneKind::Slab)).unwrap();
        let s = sample_scene(&slab, &ray, &cfg, &mut cfg.ray_rng(0));
        let d = surface_depth(&s, 100.0).unwrap();
        assert!(d >= 2.0 && d - 2.0 <= 4.0 / 400.0, "{d}");
    }

    #[test]
    fn raising_threshold_never_decreases_depth() {
        let s = ramp_scene();
        let cfg = SamplingConfig::new(0.0, 6.0, 128);
        let ray = Ray::new(Vector3::new(0.2, 0.3, 0.1), Vector3::new(1.0, 0.7, 0.5));
        let samples = sample_scene(&s, &ray, &cfg, &mut cfg.ray_rng(0));
        let mut prev = 0.0;
        for k in 1..30 {
            match surface_depth(&samples, k as f64) {
                Some(d) => {
                    assert!(d >= prev);
                    prev = d;
                }
                None => prev = f64::INFINITY,
            }
        }
    }

    #[test]
    fn surface_depth_ignores_samples_after_the_hit() {
        let mut s = RaySamples {
            bounds: vec![0.0, 1.0, 2.0, 3.0],
            mids: vec![0.5, 1.5, 2.5],
            sigma: vec![0.0, 3.0, 0.0],
            color: vec![[0.0; 3]; 3],
            corners: vec![None; 3],
        };
        let d = surface_depth(&s, 1.0);
        s.bounds.push(4.0);
        s.mids.push(3.5);
        s.sigma.push(9.0);
        assert_eq!(surface_depth(&s, 1.0), d);
    }

    #[test]
    fn scene_constructors() {
        let slab = make_test_scene(&SceneSpec::default_for(SceneKind::Slab)).unwrap();
        assert_eq!(slab.query(&Vector3::new(0.3, -0.2, 2.1)), (200.0, [1.0, 0.0, 0.0]));
        assert_eq!(slab.query(&Vector3::new(0.3, -0.2, 1.99)).0, 0.0);
        assert_eq!(slab.query(&Vector3::new(0.3, -0.2, 2.21)).0, 0.0);

        let sphere = SceneSpec::Sphere {
            center: [0.5, 0.0, 3.0],
            radius: 0.5,
            color: [0.2, 0.7, 0.3],
            stripe_color: [0.0; 3],
            stripes: 0,
            sigma_max: 10.0,
            resolution: 12,
        };
        let s = make_test_scene(&sphere).unwrap();
        let (sigma, c) = s.query(&Vector3::new(0.5, 0.0, 3.0));
        assert_eq!(sigma, 10.0);
        for ch in 0..3 {
            assert!((c[ch] - [0.2, 0.7, 0.3][ch]).abs() < 1e-12);
        }

        let checker = make_test_scene(&SceneSpec::default_for(SceneKind::CheckerBox)).unwrap();
        let [nx, ny, nz] = checker.resolution;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let c = checker.color[checker.index(i, j, k)];
                    if i + 1 < nx {
                        assert_ne!(c, checker.color[checker.index(i + 1, j, k)]);
                    }
                    if j + 1 < ny {
                        assert_ne!(c, checker.color[checker.index(i, j + 1, k)]);
                    }
                }
            }
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(matches!("torus".parse::<SceneKind>(), Err(Error::InvalidSpec(_))));
        let bad = SceneSpec::Slab {
            z: 1.0,
            thickness: 0.1,
            color: [1.5, 0.0, 0.0],
            sigma_max: 1.0,
            half_extent: 1.0,
        };
        assert!(matches!(make_test_scene(&bad), Err(Error::InvalidSpec(_))));
    }

    proptest! {
        #[test]
        fn query_is_continuous(x in 0.6f64..3.4, y in 0.6f64..3.4, z in 0.6f64..3.4) {
            let s = ramp_scene();
            let p = Vector3::new(x, y, z);
            let eps = 1e-6;
            let (a, ca) = s.query(&p);
            let (b, cb) = s.query(&(p + Vector3::new(eps, -eps, eps)));
            // Lipschitz bound of the ramp grid is 6 per unit along each axis
            prop_assert!((a - b).abs() <= 1e-4 * 6.0);
            for ch in 0..3 {
                prop_assert!((ca[ch] - cb[ch]).abs() <= 1e-4);
            }
        }

        #[test]
        fn unjittered_sampling_is_midpoint_quadrature(t0 in 0.0f64..2.0, len in 0.1f64..5.0, n in 2usize..50) {
            let cfg = SamplingConfig::new(t0, t0 + len, n);
            let s = sample_ray(&cfg, &mut cfg.ray_rng(0));
            for i in 0..n {
                prop_assert!((s.mids[i] - 0.5 * (s.bounds[i] + s.bounds[i + 1])).abs() < 1e-12);
            }
            let integral: f64 = (0..n).map(|i| s.mids[i] * s.width(i)).sum();
            let exact = ((t0 + len).powi(2) - t0 * t0) / 2.0;
            prop_assert!((integral - exact).abs() < 1e-9 * exact.max(1.0));
        }
    }
}
