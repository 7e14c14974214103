//! Run directories: training into one, and rendering or evaluating from its checkpoints.
//!
//! A run directory holds `config.toml` (the effective config), `run.toml`
//! (cameras, time count and background of the training data), `init.toml`
//! (the initial cloud), `log.csv` and the checkpoints.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use dn4dgs::deformnet::{DeformModel, Phase};
use dn4dgs::rasterizer::render;
use dn4dgs::synthdata::{
    chamfer, generate, load_dataset, read_cloud_file, write_cloud_file, CameraRecord, SceneTruth,
};
use dn4dgs::training::checkpoint::load_store;
use dn4dgs::training::{psnr, ssim, Frame, LogRow, TrainData, Trainer};
use dn4dgs::{Array, Camera, Error, GaussianCloud, Scalar};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, CONFIG_FILE};
use crate::error::{CliError, CliResult};

pub const META_FILE: &str = "run.toml";
pub const INIT_FILE: &str = "init.toml";
pub const LOG_FILE: &str = "log.csv";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const META_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMeta {
    pub version: u32,
    /// Dataset directory, or `generated:<preset>:<seed>`.
    pub data: String,
    pub n_times: usize,
    pub background: [f64; 3],
    pub cameras: Vec<CameraRecord>,
}

/// Training data with its initial cloud and, for synthetic scenes, the truth.
#[derive(Clone, Debug)]
pub struct Source<T> {
    pub label: String,
    pub data: TrainData<T>,
    pub init: GaussianCloud<T>,
    pub truth: Option<SceneTruth>,
}

fn core_err(path: &Path) -> impl Fn(Error) -> CliError + '_ {
    move |e| match e {
        Error::Io(s) => CliError::io(path, s),
        other => CliError::config(other),
    }
}

/// Loads `dir`, or generates the config's scene in memory when `dir` is `None`.
pub fn load_source<T: Scalar>(cfg: &RunConfig, dir: Option<&Path>) -> CliResult<Source<T>> {
    match dir {
        Some(dir) => {
            let ds = load_dataset::<T>(dir).map_err(core_err(dir))?;
            let init = ds
                .init
                .ok_or_else(|| CliError::Config(format!("{}: dataset has no initial cloud", dir.display())))?;
            Ok(Source {
                label: dir.display().to_string(),
                data: ds.data,
                init,
                truth: ds.truth,
            })
        }
        None => {
            let scene = cfg.scene.scene_config()?;
            let g = generate(cfg.scene.seed, &scene).map_err(CliError::config)?;
            Ok(Source {
                label: format!("generated:{}:{}", cfg.scene.preset, cfg.scene.seed),
                data: g.train_data()?,
                init: g.init.cast(),
                truth: Some(g.truth),
            })
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub rows: Vec<LogRow>,
    pub holdout_psnr: f64,
    pub holdout_ssim: f64,
    pub seconds: f64,
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Trains into `out`, which is created if needed.
pub fn train<T: Scalar>(cfg: &RunConfig, source: &Source<T>, out: &Path) -> CliResult<TrainSummary> {
    cfg.validate()?;
    create_dir(out)?;
    cfg.echo(out)?;
    let meta = RunMeta {
        version: META_VERSION,
        data: source.label.clone(),
        n_times: source.data.n_times,
        background: source.data.background,
        cameras: source
            .data
            .cameras
            .iter()
            .map(|c| CameraRecord::from_camera(&c.cast()))
            .collect(),
    };
    write_text(
        &out.join(META_FILE),
        &toml::to_string(&meta).map_err(|e| CliError::Config(e.to_string()))?,
    )?;
    write_cloud_file(&out.join(INIT_FILE), &source.init).map_err(core_err(out))?;

    let model = DeformModel::new(&cfg.model, &source.init, source.data.n_times, cfg.train.schedule.seed)
        .map_err(CliError::config)?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), &source.data).map_err(CliError::config)?;
    let log_path = out.join(LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?);
    let start = Instant::now();
    let rows = trainer.run(&source.data, &mut log, Some(out))?;
    let seconds = start.elapsed().as_secs_f64();
    log.flush().map_err(|e| CliError::io(&log_path, e))?;
    let phase = trainer.current_phase();
    let (holdout_psnr, holdout_ssim) = holdout_metrics(&trainer.model, &source.data, phase)?;
    Ok(TrainSummary {
        rows,
        holdout_psnr,
        holdout_ssim,
        seconds,
    })
}

/// Mean PSNR and SSIM over the holdout frames.
pub fn holdout_metrics<T: Scalar>(model: &DeformModel<T>, data: &TrainData<T>, phase: Phase) -> CliResult<(f64, f64)> {
    let rows = frame_metrics(model, &data.cameras, data.background, &data.holdout, phase)?;
    Ok(mean_metrics(&rows))
}

/// A trained model restored from a checkpoint.
pub struct LoadedRun<T> {
    pub dir: PathBuf,
    pub cfg: RunConfig,
    pub meta: RunMeta,
    pub model: DeformModel<T>,
    pub phase: Phase,
    pub cameras: Vec<Camera<T>>,
}

/// Completed iterations encoded in a checkpoint file name.
fn completed_iters(ckpt: &Path, total: usize) -> usize {
    let stem = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    stem.strip_prefix("iter_")
        .and_then(|n| n.parse().ok())
        .unwrap_or(total)
}

pub fn read_run_config(ckpt: &Path) -> CliResult<RunConfig> {
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    RunConfig::load(Some(&dir.join(CONFIG_FILE)))
}

pub fn load_run<T: Scalar>(ckpt: &Path) -> CliResult<LoadedRun<T>> {
    let dir = ckpt.parent().unwrap_or(Path::new(".")).to_path_buf();
    let cfg = read_run_config(ckpt)?;
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| CliError::io(&meta_path, e))?;
    let meta: RunMeta =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", meta_path.display())))?;
    if meta.version != META_VERSION {
        return Err(Error::VersionMismatch {
            expected: META_VERSION,
            found: meta.version,
        }
        .into());
    }
    let init = read_cloud_file::<T>(&dir.join(INIT_FILE)).map_err(core_err(&dir))?;
    let mut model =
        DeformModel::new(&cfg.model, &init, meta.n_times, cfg.train.schedule.seed).map_err(CliError::config)?;
    if !ckpt.exists() {
        return Err(CliError::io(ckpt, std::io::ErrorKind::NotFound.into()));
    }
    load_store(ckpt, &mut model.store).map_err(core_err(ckpt))?;
    let done = completed_iters(ckpt, cfg.train.schedule.total_iters);
    let phase = if done > cfg.train.schedule.stage1_iters && model.has_stage2() {
        Phase::TwoStage
    } else {
        Phase::Stage1Only
    };
    let cameras = meta
        .cameras
        .iter()
        .map(|c| Ok(c.to_camera()?.cast()))
        .collect::<dn4dgs::Result<Vec<_>>>()
        .map_err(CliError::config)?;
    Ok(LoadedRun {
        dir,
        cfg,
        meta,
        model,
        phase,
        cameras,
    })
}

impl<T: Scalar> LoadedRun<T> {
    /// Renders camera `camera` at time `t ∈ [0, 1]`.
    pub fn render_view(&self, camera: usize, t: f64) -> CliResult<Array<T>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(CliError::Config(format!("t = {t} outside [0, 1]")));
        }
        let cam = self.cameras.get(camera).ok_or_else(|| {
            CliError::Config(format!("camera {camera} not in run ({} cameras)", self.cameras.len()))
        })?;
        let (_, cloud) = self.model.deform(T::lit(t), self.phase)?;
        Ok(render(&cloud, cam, self.meta.background.map(T::lit))?.rgb)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameMetrics {
    pub frame: usize,
    pub t: f64,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn frame_metrics<T: Scalar>(
    model: &DeformModel<T>,
    cameras: &[Camera<T>],
    background: [f64; 3],
    frames: &[Frame<T>],
    phase: Phase,
) -> CliResult<Vec<FrameMetrics>> {
    frames
        .iter()
        .map(|f| {
            let (_, cloud) = model.deform(T::lit(f.t), phase)?;
            let cam = cameras
                .get(f.camera)
                .ok_or_else(|| CliError::Config(format!("frame {} uses unknown camera {}", f.id, f.camera)))?;
            let img = render(&cloud, cam, background.map(T::lit))?.rgb;
            Ok(FrameMetrics {
                frame: f.id,
                t: f.t,
                psnr: psnr(&img, &f.image)?,
                ssim: ssim(&img, &f.image)?,
            })
        })
        .collect()
}

fn mean_metrics(rows: &[FrameMetrics]) -> (f64, f64) {
    if rows.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = rows.len() as f64;
    (
        rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        rows.iter().map(|r| r.ssim).sum::<f64>() / n,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Holdout,
    Train,
    All,
}

/// Symmetric chamfer distance to the true positions at one time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChamferRow {
    pub t: f64,
    pub canonical: f64,
    pub stage1: f64,
    pub deformed: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub frames: Vec<FrameMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub chamfer: Option<Vec<ChamferRow>>,
}

pub const EVAL_HEADER: &str = "frame,t,psnr,ssim";
pub const CHAMFER_HEADER: &str = "t,chamfer_canonical,chamfer_stage1,chamfer_deformed";

impl EvalReport {
    pub fn csv(&self) -> String {
        let mut s = format!("{EVAL_HEADER}\n");
        for r in &self.frames {
            s += &format!("{},{},{},{}\n", r.frame, r.t, r.psnr, r.ssim);
        }
        s += &format!("mean,,{},{}\n", self.mean_psnr, self.mean_ssim);
        if let Some(rows) = &self.chamfer {
            s += &format!("\n{CHAMFER_HEADER}\n");
            for r in rows {
                s += &format!("{},{},{},{}\n", r.t, r.canonical, r.stage1, r.deformed);
            }
        }
        s
    }
}

fn positions_f64<T: Scalar>(c: &GaussianCloud<T>) -> Vec<[f64; 3]> {
    c.positions().iter().map(|p| p.map(|v| v.to_f64_lossy())).collect()
}

pub fn evaluate<T: Scalar>(run: &LoadedRun<T>, source: &Source<T>, split: Split) -> CliResult<EvalReport> {
    let data = &source.data;
    let frames: Vec<Frame<T>> = match split {
        Split::Holdout => data.holdout.clone(),
        Split::Train => data.train.clone(),
        Split::All => {
            let mut all: Vec<Frame<T>> = data.train.iter().chain(&data.holdout).cloned().collect();
            all.sort_by_key(|f| f.id);
            all
        }
    };
    let rows = frame_metrics(&run.model, &data.cameras, data.background, &frames, run.phase)?;
    let (mean_psnr, mean_ssim) = mean_metrics(&rows);
    let chamfer = match &source.truth {
        Some(truth) => {
            let canonical = positions_f64(&run.model.canonical());
            let mut out = Vec::new();
            for &t in &truth.times {
                let gt = truth.positions_at(t)?;
                let (s1, fin) = run.model.deform(T::lit(t), run.phase)?;
                out.push(ChamferRow {
                    t,
                    canonical: chamfer(&canonical, &gt)?,
                    stage1: chamfer(&positions_f64(&s1), &gt)?,
                    deformed: chamfer(&positions_f64(&fin), &gt)?,
                });
            }
            Some(out)
        }
        None => None,
    };
    Ok(EvalReport {
        frames: rows,
        mean_psnr,
        mean_ssim,
        chamfer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iteration_counts_from_checkpoint_names() {
        assert_eq!(completed_iters(Path::new("r/iter_000040.ckpt"), 100), 40);
        assert_eq!(completed_iters(Path::new("r/final.ckpt"), 100), 100);
        assert_eq!(completed_iters(Path::new("diverged.ckpt"), 7), 7);
    }

    #[test]
    fn csv_layout() {
        let r = EvalReport {
            frames: vec![FrameMetrics {
                frame: 3,
                t: 0.5,
                psnr: 30.0,
                ssim: 0.9,
            }],
            mean_psnr: 30.0,
            mean_ssim: 0.9,
            chamfer: None,
        };
        assert_eq!(r.csv(), "frame,t,psnr,ssim\n3,0.5,30,0.9\nmean,,30,0.9\n");
    }
}
