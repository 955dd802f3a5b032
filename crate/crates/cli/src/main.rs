mod commands;
mod record;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Render, rectify and invert underwater scenes seen through a flat port.
#[derive(Debug, Parser)]
#[command(name = "pumpout", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a manifest for a procedural scene, plus a PNG preview.
    MakeScene {
        /// slab, sphere or checker_box
        #[arg(long)]
        kind: String,
        #[arg(long)]
        out: PathBuf,
        /// Preview path; defaults to the manifest path with a .png extension.
        #[arg(long)]
        preview: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        /// Horizontal field of view in degrees.
        #[arg(long, default_value_t = 50.0)]
        fov: f64,
    },
    /// Render one view to a linear PFM and a display PNG.
    Render {
        #[arg(long)]
        manifest: PathBuf,
        /// underwater, inair or geo
        #[arg(long, default_value = "underwater")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        view: usize,
        /// Allow beta down to 0 in the manifest medium.
        #[arg(long)]
        relax_bounds: bool,
    },
    /// Undo the flat-port distortion of an image.
    Rectify {
        /// PFM (linear) or PNG (display-encoded) input.
        #[arg(long)]
        image: PathBuf,
        /// Manifest (or any TOML file) with a [camera] table.
        #[arg(long)]
        camera: PathBuf,
        /// s_zero, uniform_z or per_pixel
        #[arg(long, default_value = "s_zero")]
        mode: String,
        /// Scene depth for uniform_z.
        #[arg(long)]
        depth: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the medium (and with --joint the object field) from captures.
    Estimate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        joint: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Render novel views with optical parameters replaced.
    Synth {
        #[arg(long)]
        manifest: PathBuf,
        /// key=value with keys n_w, s, A, beta, A_r..A_b, beta_r..beta_b;
        /// colors take one value or r,g,b.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Comma-separated view indices; all views by default.
        #[arg(long, value_delimiter = ',')]
        views: Vec<usize>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        relax_bounds: bool,
    },
    /// Compare analytic loss gradients against finite differences.
    Gradcheck {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 512)]
        rays: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = commands::init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
