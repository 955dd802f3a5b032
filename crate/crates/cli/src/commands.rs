use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pumpout_core::io::{read_pfm, read_png_rgb8, write_mask_png, write_params, write_pfm, write_png, write_trace_file};
use pumpout_core::manifest::{CameraBlock, Manifest, RenderBlock, ViewBlock};
use pumpout_core::optim::{
    gradient_check, optimize_joint, optimize_medium, perturbed_state, CaptureSet, GradCheckOptions, OptimConfig,
};
use pumpout_core::raster::srgb_to_linear;
use pumpout_core::refraction::{rectify_image, RectifyMode};
use pumpout_core::render::{render_image, synthesize_novel, Overrides};
use pumpout_core::scene::{make_test_scene, SceneKind};
use pumpout_core::{
    CameraModel, Error, ImageBuffer, MediumBounds, MediumParams, Pose, RenderMode, Rgb, SamplingConfig, SceneSpec,
    Vector3,
};

use crate::record::RunRecord;
use crate::Command;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, manifest or input files.
    Input(String),
    /// The command ran but its output failed a check.
    Verify(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Verify(_) => 1,
            CliError::Input(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) | CliError::Verify(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFiniteLoss { .. } => CliError::Verify(e.to_string()),
            e => CliError::Input(e.to_string()),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

/// Size the global pool from `PUMPOUT_THREADS`, if set.
pub fn init_threads() -> CliResult {
    let Ok(v) = std::env::var("PUMPOUT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| CliError::Input(format!("PUMPOUT_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Input(e.to_string()))
}

pub fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::MakeScene {
            kind,
            out,
            preview,
            width,
            height,
            fov,
        } => make_scene(&kind, &out, preview, width, height, fov),
        Command::Render {
            manifest,
            mode,
            out,
            view,
            relax_bounds,
        } => render(&manifest, &mode, &out, view, relax_bounds),
        Command::Rectify {
            image,
            camera,
            mode,
            depth,
            out,
        } => rectify(&image, &camera, &mode, depth, &out),
        Command::Estimate {
            manifest,
            joint,
            out_dir,
        } => estimate(&manifest, joint, &out_dir),
        Command::Synth {
            manifest,
            overrides,
            views,
            out_dir,
            relax_bounds,
        } => synth(&manifest, &overrides, &views, &out_dir, relax_bounds),
        Command::Gradcheck {
            manifest,
            rays,
            step,
            seed,
            inject_sign_flip,
        } => gradcheck(&manifest, rays, step, seed, inject_sign_flip),
    }
}

fn bounds(relax: bool) -> MediumBounds {
    if relax {
        MediumBounds::relaxed()
    } else {
        MediumBounds::default()
    }
}

fn load_manifest(path: &Path, relax: bool) -> CliResult<Manifest> {
    let m = Manifest::load(path)?;
    bounds(relax).check(&m.medium)?;
    Ok(m)
}

fn base_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

fn write_pair(out: &Path, img: &ImageBuffer) -> CliResult<Vec<PathBuf>> {
    let png = out.with_extension("png");
    write_pfm(out, img)?;
    write_png(&png, img)?;
    Ok(vec![out.to_path_buf(), png])
}

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))
}

/// Reference manifest for a procedural scene kind.
pub fn default_manifest(kind: SceneKind, width: usize, height: usize, fov: f64) -> Manifest {
    let camera = CameraModel::with_fov(width, height, fov).with_port(0.01, 1.0, 1.333);
    let (views, sampling) = match kind {
        SceneKind::Slab | SceneKind::CheckerBox => (
            vec![ViewBlock::new([0.0; 3], [0.0, 0.0, 1.0])],
            SamplingConfig::new(0.0, 4.0, 128),
        ),
        SceneKind::Sphere => {
            let views = (0..8)
                .map(|k| {
                    let t = k as f64 * std::f64::consts::TAU / 8.0;
                    ViewBlock::new([3.0 * t.sin(), 0.0, -3.0 * t.cos()], [0.0; 3])
                })
                .collect();
            (views, SamplingConfig::new(1.2, 4.8, 96))
        }
    };
    Manifest {
        camera: CameraBlock::from(&camera),
        scene: SceneSpec::default_for(kind),
        medium: MediumParams::default(),
        sampling,
        render: RenderBlock::default(),
        views,
        optimization: OptimConfig::default(),
        joint: Default::default(),
    }
}

fn make_scene(kind: &str, out: &Path, preview: Option<PathBuf>, w: usize, h: usize, fov: f64) -> CliResult {
    let kind: SceneKind = kind.parse()?;
    if !(fov > 0.0 && fov < 180.0) {
        return Err(CliError::Input(format!("field of view must be in (0, 180) degrees, got {fov}")));
    }
    let m = default_manifest(kind, w, h, fov);
    m.validate()?;
    m.save(out)?;
    let scene = m.scene()?;
    let img = render_image(
        &scene,
        &m.medium,
        &m.camera(),
        &m.pose(0)?,
        RenderMode::Underwater,
        &m.settings(&scene),
    );
    let preview = preview.unwrap_or_else(|| out.with_extension("png"));
    write_png(&preview, &img)?;
    println!("wrote {} and {}", out.display(), preview.display());
    Ok(())
}

fn render(manifest: &Path, mode: &str, out: &Path, view: usize, relax: bool) -> CliResult {
    let m = load_manifest(manifest, relax)?;
    let mode: RenderMode = mode.parse()?;
    let scene = m.scene()?;
    let img = render_image(&scene, &m.medium, &m.camera(), &m.pose(view)?, mode, &m.settings(&scene));
    let invalid = img.mask.len() - img.valid_count();
    if 2 * invalid > img.mask.len() {
        return Err(CliError::Verify(format!(
            "{invalid} of {} pixels hit total internal reflection; refusing to write a mostly empty frame",
            img.mask.len()
        )));
    }
    let files = write_pair(out, &img)?;
    println!("wrote {}", files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "));
    Ok(())
}

fn read_image(path: &Path) -> CliResult<ImageBuffer> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    if ext == "png" {
        let (w, h, bytes) = read_png_rgb8(path)?;
        Ok(ImageBuffer::from_fn(w, h, |i, j| {
            let k = 3 * (j * w + i);
            [0, 1, 2].map(|c| srgb_to_linear(bytes[k + c] as f64 / 255.0))
        }))
    } else {
        Ok(read_pfm(path)?)
    }
}

fn rectify(image: &Path, camera: &Path, mode: &str, depth: Option<f64>, out: &Path) -> CliResult {
    let img = read_image(image)?;
    let cam = CameraBlock::load(camera)?;
    let mode = match (mode, depth) {
        ("s_zero", _) => RectifyMode::SZero,
        ("uniform_z", Some(z)) => RectifyMode::UniformZ(z),
        ("uniform_z", None) => return Err(CliError::Input("uniform_z needs --depth".into())),
        ("per_pixel", _) => RectifyMode::PerPixelDepth,
        (other, _) => {
            return Err(CliError::Input(format!(
                "unknown rectify mode '{other}' (expected s_zero, uniform_z or per_pixel)"
            )))
        }
    };
    let rect = rectify_image(&img, &cam, mode)?;
    let mut files = write_pair(out, &rect)?;
    let mask = out.with_extension("mask.png");
    write_mask_png(&mask, &rect)?;
    files.push(mask);
    println!(
        "wrote {} ({} of {} pixels valid)",
        files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "),
        rect.valid_count(),
        rect.mask.len()
    );
    Ok(())
}

fn estimate(manifest: &Path, joint: bool, out_dir: &Path) -> CliResult {
    let start = Instant::now();
    let m = load_manifest(manifest, false)?;
    let captures = m.captures(base_dir(manifest))?;
    let known = m.scene()?;
    let settings = m.settings(&known);
    create_dir(out_dir)?;
    let trace_path = out_dir.join("trace.csv");
    let params_path = out_dir.join("params.txt");
    let mut outputs = vec![params_path.clone(), trace_path.clone()];

    let fit = if joint {
        optimize_joint(&captures, &settings, &m.optimization, &m.joint, None).map(|f| {
            let renders: Vec<ImageBuffer> = captures
                .views
                .iter()
                .map(|v| render_image(&f.scene, &f.medium, &captures.camera, &v.pose, RenderMode::InAir, &settings))
                .collect();
            (f.medium, f.trace, renders)
        })
    } else {
        optimize_medium(&known, &captures, &settings, &m.optimization).map(|f| (f.medium, f.trace, vec![]))
    };
    let (medium, trace, renders) = match fit {
        Ok(v) => v,
        Err(Error::NonFiniteLoss {
            iteration,
            params,
            trace,
        }) => {
            // keep what we have for diagnosis
            write_trace_file(&trace_path, &trace)?;
            return Err(CliError::Verify(format!(
                "loss became non-finite at iteration {iteration} (A = {:?}, beta = {:?}); partial trace in {}",
                params.a,
                params.beta,
                trace_path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    write_params(&params_path, &medium)?;
    write_trace_file(&trace_path, &trace)?;
    for (k, img) in renders.iter().enumerate() {
        outputs.extend(write_pair(&out_dir.join(format!("inair_{k:03}.pfm")), img)?);
    }
    let record_path = out_dir.join("run.json");
    outputs.push(record_path.clone());
    RunRecord::new(
        if joint { "estimate --joint" } else { "estimate" },
        &m,
        outputs,
        start.elapsed(),
    )
    .save(&record_path)?;
    if let Some(last) = trace.last() {
        println!("final loss {:.6e} after {} iterations", last.total, trace.len());
    }
    print!("{}", pumpout_core::io::format_params(&medium));
    Ok(())
}

fn parse_triplet(key: &str, v: &str) -> CliResult<Rgb> {
    let nums: Vec<f64> = v
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CliError::Input(format!("bad number in override {key}={v}")))?;
    match nums.as_slice() {
        [x] => Ok([*x; 3]),
        [r, g, b] => Ok([*r, *g, *b]),
        _ => Err(CliError::Input(format!("override {key} takes one value or three (r,g,b)"))),
    }
}

fn parse_scalar(key: &str, v: &str) -> CliResult<f64> {
    v.trim()
        .parse()
        .map_err(|_| CliError::Input(format!("bad number in override {key}={v}")))
}

/// Parsed `--override` flags: optical overrides plus an optional camera move.
#[derive(Debug, Default)]
pub struct SynthOverrides {
    pub optics: Overrides,
    pub position: Option<[f64; 3]>,
    pub look_at: Option<[f64; 3]>,
}

pub fn parse_overrides(args: &[String], base: &MediumParams) -> CliResult<SynthOverrides> {
    let mut out = SynthOverrides::default();
    let mut a = None;
    let mut beta = None;
    for arg in args {
        let (k, v) = arg
            .split_once('=')
            .ok_or_else(|| CliError::Input(format!("override '{arg}' is not key=value")))?;
        let k = k.trim();
        let channel = |name: &str| match name {
            "r" => Some(0),
            "g" => Some(1),
            "b" => Some(2),
            _ => None,
        };
        match k {
            "n_w" => out.optics.n_w = Some(parse_scalar(k, v)?),
            "s" => out.optics.s = Some(parse_scalar(k, v)?),
            "A" => a = Some(parse_triplet(k, v)?),
            "beta" => beta = Some(parse_triplet(k, v)?),
            "position" => out.position = Some(parse_triplet(k, v)?),
            "look_at" => out.look_at = Some(parse_triplet(k, v)?),
            _ => {
                let (field, c) = k
                    .rsplit_once('_')
                    .and_then(|(f, c)| channel(c).map(|c| (f, c)))
                    .ok_or_else(|| CliError::Input(format!("unknown override key '{k}'")))?;
                let x = parse_scalar(k, v)?;
                match field {
                    "A" => a.get_or_insert(base.a)[c] = x,
                    "beta" => beta.get_or_insert(base.beta)[c] = x,
                    _ => return Err(CliError::Input(format!("unknown override key '{k}'"))),
                }
            }
        }
    }
    out.optics.a = a;
    out.optics.beta = beta;
    Ok(out)
}

fn synth(manifest: &Path, overrides: &[String], views: &[usize], out_dir: &Path, relax: bool) -> CliResult {
    let m = load_manifest(manifest, relax)?;
    let ov = parse_overrides(overrides, &m.medium)?;
    let scene = m.scene()?;
    let settings = m.settings(&scene);
    let bounds = bounds(relax);
    let views: Vec<usize> = if views.is_empty() {
        (0..m.views.len().max(1)).collect()
    } else {
        views.to_vec()
    };
    create_dir(out_dir)?;
    for v in views {
        let mut pose = m.pose(v)?;
        if ov.position.is_some() || ov.look_at.is_some() {
            let base = m.views.get(v).cloned().unwrap_or_else(|| ViewBlock::new([0.0; 3], [0.0, 0.0, 1.0]));
            pose = Pose::look_at(
                Vector3::from(ov.position.unwrap_or(base.position)),
                Vector3::from(ov.look_at.unwrap_or(base.look_at)),
                Vector3::from(base.up),
            )?;
        }
        let img = synthesize_novel(&scene, &m.camera(), &pose, &m.medium, &ov.optics, &bounds, &settings)?;
        let files = write_pair(&out_dir.join(format!("synth_{v:03}.pfm")), &img)?;
        println!("wrote {}", files[0].display());
    }
    Ok(())
}

fn gradcheck(manifest: &Path, rays: usize, step: f64, seed: u64, inject_sign_flip: bool) -> CliResult {
    if !(step > 0.0) {
        return Err(CliError::Input("--step must be positive".into()));
    }
    let m = load_manifest(manifest, true)?;
    let scene = make_test_scene(&m.scene)?;
    let settings = m.settings(&scene);
    let poses = if m.views.is_empty() {
        vec![Pose::identity()]
    } else {
        m.poses()?
    };
    let captures = CaptureSet::synthesize(&scene, &m.medium, &m.camera(), &poses, &settings);
    let (s, medium) = perturbed_state(&scene, &m.medium);
    let opts = GradCheckOptions {
        rays,
        step,
        seed,
        inject_sign_flip,
        ..Default::default()
    };
    let report = gradient_check(&s, &medium, &captures, &settings, &m.optimization, &opts)?;
    println!("{:<8} {:>6} {:>14}", "group", "params", "max rel error");
    for g in &report.groups {
        let ok = if g.report.max_rel_error < report.tolerance { "ok" } else { "FAIL" };
        println!(
            "{:<8} {:>6} {:>14.3e}  {ok}",
            g.name,
            g.report.analytic.len(),
            g.report.max_rel_error
        );
    }
    if report.passed() {
        return Ok(());
    }
    let w = report.worst().expect("at least one group");
    let i = w.report.worst_index;
    Err(CliError::Verify(format!(
        "gradient check failed: worst is {}[{i}] analytic {:.6e} vs numeric {:.6e} (rel. error {:.3e} >= {:.0e})",
        w.name, w.report.analytic[i], w.report.numeric[i], w.report.max_rel_error, report.tolerance
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_parse_channels_and_triplets() {
        let base = MediumParams::default();
        let o = parse_overrides(&args(&["A=0.5", "beta_g=0.3", "n_w=1.0", "position=0,0,-1"]), &base).unwrap();
        assert_eq!(o.optics.a, Some([0.5; 3]));
        assert_eq!(o.optics.beta, Some([0.4, 0.3, 0.2]));
        assert_eq!(o.optics.n_w, Some(1.0));
        assert_eq!(o.position, Some([0.0, 0.0, -1.0]));
        let o = parse_overrides(&args(&["beta=0.1,0.2,0.3"]), &base).unwrap();
        assert_eq!(o.optics.beta, Some([0.1, 0.2, 0.3]));
    }

    #[test]
    fn bad_overrides_are_input_errors() {
        let base = MediumParams::default();
        for bad in ["gamma=1", "A", "A=0.1,0.2", "beta_x=0.2", "n_w=abc"] {
            let e = parse_overrides(&args(&[bad]), &base).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{bad}");
        }
    }

    #[test]
    fn default_manifests_validate() {
        for kind in [SceneKind::Slab, SceneKind::Sphere, SceneKind::CheckerBox] {
            default_manifest(kind, 16, 16, 50.0).validate().unwrap();
        }
    }
}
