//! Subcommand definitions and dispatch.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use dn4dgs::gradcheck::{self, Scope, TOLERANCE};
use dn4dgs::imageio::write_image;
use dn4dgs::synthdata::{generate, ImageFormat, SceneConfig, MANIFEST_FILE};
use dn4dgs::Scalar;
use sha2::{Digest, Sha256};

use crate::ablate::{cells, parse_grids, run_cells, ABLATION_HEADER};
use crate::config::{Precision, RunConfig};
use crate::error::{CliError, CliResult};
use crate::run::{evaluate, load_run, load_source, read_run_config, train, Split};

#[derive(Debug, Parser)]
#[command(name = "dn4dgs", version, about = "Dynamic gaussian splatting with two-stage denoising deformation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dynamic scene.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "toy")]
        preset: String,
        #[arg(long)]
        out: PathBuf,
        /// Initial-cloud jitter as a fraction of the scene extent.
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long, value_parser = parse_format)]
        format: Option<ImageFormat>,
    },
    /// Train a model into a run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory; the config's scene is generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one view from a checkpoint.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        camera: usize,
        #[arg(long)]
        t: f64,
        /// Output image; `.png` or PPM otherwise.
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-frame and mean PSNR/SSIM, plus chamfer to the true positions when known.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Holdout)]
        split: Split,
    },
    /// Train a grid of model variants and tabulate holdout metrics.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated subset of design, k, dt, ydim, stage1, or `all`.
        #[arg(long, default_value = "design")]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients against central finite differences.
    GradCheck {
        /// rasterizer, encoders, tam, dsam, end2end or all.
        #[arg(long, default_value = "all")]
        scope: String,
    },
}

fn parse_format(s: &str) -> Result<ImageFormat, String> {
    match s {
        "ppm" => Ok(ImageFormat::Ppm),
        "png" => Ok(ImageFormat::Png),
        _ => Err(format!("unknown image format {s:?}; expected ppm or png")),
    }
}

/// Applies `DN4DGS_THREADS` to the global thread pool. `1` gives a single
/// worker thread.
pub fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("DN4DGS_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("DN4DGS_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes a dataset to `out` and returns the manifest's SHA-256.
pub fn gen_data(
    seed: u64,
    preset: &str,
    out: &Path,
    noise: Option<f64>,
    format: Option<ImageFormat>,
) -> CliResult<String> {
    let mut cfg = SceneConfig::preset(preset).map_err(CliError::config)?;
    if let Some(n) = noise {
        cfg.noise_frac = n;
    }
    if let Some(f) = format {
        cfg.image_format = f;
    }
    cfg.validate().map_err(CliError::config)?;
    let g = generate(seed, &cfg).map_err(CliError::config)?;
    g.write(out).map_err(|e| match e {
        dn4dgs::Error::Io(s) => CliError::io(out, s),
        other => other.into(),
    })?;
    let path = out.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn parse_scopes(s: &str) -> CliResult<Vec<Scope>> {
    if s == "all" {
        return Ok(Scope::ALL.to_vec());
    }
    s.split(',')
        .map(|x| x.trim().parse().map_err(|e| CliError::Config(format!("{e}"))))
        .collect()
}

/// Prints one CSV row per parameter group; fails if any exceeds the tolerance.
pub fn grad_check(scopes: &[Scope], out: &mut dyn Write) -> CliResult<()> {
    let w = |out: &mut dyn Write, s: String| writeln!(out, "{s}").map_err(|e| CliError::io(Path::new("<stdout>"), e));
    w(out, "scope,group,max_rel_err,status".into())?;
    let mut failed = Vec::new();
    for &scope in scopes {
        for g in gradcheck::run(scope)? {
            let status = if g.passed() { "ok" } else { "FAIL" };
            w(out, format!("{},{},{:e},{status}", scope.name(), g.group, g.max_rel_err))?;
            if !g.passed() {
                failed.push(format!("{}/{}", scope.name(), g.group));
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "relative error above {TOLERANCE:e} in {}",
            failed.join(", ")
        )))
    }
}

fn write_line(out: &mut dyn Write, s: &str) -> CliResult<()> {
    writeln!(out, "{s}").map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

fn train_cmd<T: Scalar>(cfg: &RunConfig, data: Option<&Path>, out_dir: &Path, out: &mut dyn Write) -> CliResult<()> {
    let source = load_source::<T>(cfg, data)?;
    let s = train(cfg, &source, out_dir)?;
    write_line(
        out,
        &format!(
            "holdout_psnr={} holdout_ssim={} seconds={:.1}",
            s.holdout_psnr, s.holdout_ssim, s.seconds
        ),
    )
}

fn render_cmd<T: Scalar>(ckpt: &Path, camera: usize, t: f64, path: &Path) -> CliResult<()> {
    let run = load_run::<T>(ckpt)?;
    let img = run.render_view(camera, t)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    write_image(path, &img).map_err(|e| match e {
        dn4dgs::Error::Io(s) => CliError::io(path, s),
        other => other.into(),
    })
}

fn eval_cmd<T: Scalar>(ckpt: &Path, data: Option<&Path>, split: Split, out: &mut dyn Write) -> CliResult<()> {
    let run = load_run::<T>(ckpt)?;
    let source = load_source::<T>(&run.cfg, data)?;
    let report = evaluate(&run, &source, split)?;
    out.write_all(report.csv().as_bytes())
        .map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

fn ablate_cmd<T: Scalar>(
    base: &RunConfig,
    data: Option<&Path>,
    grid: &str,
    dir: &Path,
    out: &mut dyn Write,
) -> CliResult<()> {
    let grids = parse_grids(grid)?;
    let source = load_source::<T>(base, data)?;
    let cells = cells(base, &grids);
    for c in &cells {
        c.cfg.validate()?;
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    base.echo(dir)?;
    write_line(out, ABLATION_HEADER)?;
    let mut line_err = None;
    let rows = run_cells(&cells, &source, dir, |r| {
        if let Err(e) = write_line(out, &r.csv()) {
            line_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = line_err {
        return Err(e);
    }
    let mut csv = format!("{ABLATION_HEADER}\n");
    for r in &rows {
        csv += &r.csv();
        csv.push('\n');
    }
    let path = dir.join("ablation.csv");
    fs::write(&path, csv).map_err(|e| CliError::io(&path, e))
}

macro_rules! with_precision {
    ($p:expr, $f:ident ( $($arg:expr),* )) => {
        match $p {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

/// Runs one subcommand, writing tables and summaries to `out`.
pub fn execute(command: &Command, out: &mut dyn Write) -> CliResult<()> {
    match command {
        Command::GenData {
            seed,
            preset,
            out: dir,
            noise,
            format,
        } => {
            let hash = gen_data(*seed, preset, dir, *noise, *format)?;
            write_line(out, &format!("manifest_sha256={hash}"))
        }
        Command::Train { config, data, out: dir } => {
            let cfg = RunConfig::load(config.as_deref())?;
            with_precision!(cfg.precision, train_cmd(&cfg, data.as_deref(), dir, out))
        }
        Command::Render {
            ckpt,
            camera,
            t,
            out: path,
        } => {
            let p = read_run_config(ckpt)?.precision;
            with_precision!(p, render_cmd(ckpt, *camera, *t, path))
        }
        Command::Eval { ckpt, data, split } => {
            let p = read_run_config(ckpt)?.precision;
            with_precision!(p, eval_cmd(ckpt, data.as_deref(), *split, out))
        }
        Command::Ablate {
            config,
            data,
            grid,
            out: dir,
        } => {
            let cfg = RunConfig::load(config.as_deref())?;
            with_precision!(cfg.precision, ablate_cmd(&cfg, data.as_deref(), grid, dir, out))
        }
        Command::GradCheck { scope } => grad_check(&parse_scopes(scope)?, out),
    }
}
