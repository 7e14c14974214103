//! Synthetic dynamic scenes with known trajectories.
//!
//! A scene is a few rigid clusters of gaussians, each translating with a
//! constant velocity plus a sinusoid. Frames are rendered with the crate's
//! own rasterizer at 64-bit and written as 8-bit images next to a TOML
//! manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::Array;
use crate::error::{Error, Result};
use crate::gaussians::{sh::SH_C0, Camera, GaussianCloud};
use crate::imageio::{quantize, read_image, write_image};
use crate::rasterizer::render;
use crate::scalar::Scalar;
use crate::training::{Frame, TrainData};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const TRUTH_FILE: &str = "truth.toml";
pub const INIT_FILE: &str = "init.toml";
pub const MANIFEST_VERSION: u32 = 1;

pub const PRESETS: &[&str] = &["toy", "static", "tiny"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Ppm,
    Png,
}

impl ImageFormat {
    fn extension(self) -> &'static str {
        match self {
            ImageFormat::Ppm => "ppm",
            ImageFormat::Png => "png",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub n_gaussians: usize,
    pub n_clusters: usize,
    pub n_times: usize,
    pub n_cameras: usize,
    pub width: usize,
    pub height: usize,
    /// Camera indices whose frames are held out.
    pub holdout_cameras: Vec<usize>,
    /// Focal length in pixels.
    pub focal: f64,
    pub camera_radius: f64,
    pub camera_height: f64,
    /// Radius of each cluster's ball.
    pub cluster_radius: f64,
    /// Distance of cluster centres from the origin.
    pub cluster_offset: f64,
    /// Mean per-axis standard deviation of a gaussian.
    pub gaussian_scale: f64,
    pub opacity: f64,
    /// Half-width of the uniform per-gaussian colour perturbation.
    pub color_jitter: f64,
    pub max_speed: f64,
    pub max_amplitude: f64,
    pub min_frequency: f64,
    pub max_frequency: f64,
    /// Position jitter of the initial cloud as a fraction of [`SceneTruth::extent`].
    pub noise_frac: f64,
    pub sh_degree: usize,
    pub background: [f64; 3],
    pub image_format: ImageFormat,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_gaussians: 200,
            n_clusters: 2,
            n_times: 10,
            n_cameras: 4,
            width: 32,
            height: 32,
            holdout_cameras: vec![3],
            focal: 40.0,
            camera_radius: 4.0,
            camera_height: 1.5,
            cluster_radius: 0.5,
            cluster_offset: 0.6,
            gaussian_scale: 0.08,
            opacity: 0.8,
            color_jitter: 0.15,
            max_speed: 0.3,
            max_amplitude: 0.2,
            min_frequency: 0.5,
            max_frequency: 1.0,
            noise_frac: 0.1,
            sh_degree: 0,
            background: [0.0; 3],
            image_format: ImageFormat::Ppm,
        }
    }
}

impl SceneConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        match name {
            "toy" => Ok(base),
            "static" => Ok(Self {
                max_speed: 0.0,
                max_amplitude: 0.0,
                ..base
            }),
            "tiny" => Ok(Self {
                n_gaussians: 24,
                n_times: 3,
                n_cameras: 3,
                holdout_cameras: vec![2],
                width: 16,
                height: 16,
                focal: 20.0,
                gaussian_scale: 0.15,
                ..base
            }),
            other => Err(Error::InvalidArgument(format!(
                "unknown preset {other:?}; expected one of {PRESETS:?}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.n_gaussians == 0 {
            return bad("n_gaussians must be at least 1");
        }
        if self.n_clusters == 0 || self.n_clusters > self.n_gaussians {
            return bad("n_clusters must lie in 1..=n_gaussians");
        }
        if self.n_times == 0 || self.n_cameras == 0 || self.width == 0 || self.height == 0 {
            return bad("n_times, n_cameras, width and height must be positive");
        }
        if self.holdout_cameras.iter().any(|&c| c >= self.n_cameras) {
            return bad("holdout camera index out of range");
        }
        if self.holdout_cameras.len() >= self.n_cameras {
            return bad("at least one camera must be used for training");
        }
        if self.sh_degree > crate::gaussians::sh::MAX_SH_DEGREE {
            return bad("sh_degree must be at most 2");
        }
        if !(self.opacity > 0.0 && self.opacity < 1.0) {
            return bad("opacity must lie in (0, 1)");
        }
        if !(self.focal > 0.0 && self.gaussian_scale > 0.0 && self.camera_radius > 0.0) {
            return bad("focal, gaussian_scale and camera_radius must be positive");
        }
        if self.min_frequency > self.max_frequency || self.noise_frac < 0.0 {
            return bad("frequency range or noise_frac invalid");
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        self.n_cameras * self.n_times
    }
}

/// Rigid motion of one cluster: `velocity·t + amplitude·sin(2πf·t + phase)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterMotion {
    pub center: [f64; 3],
    pub velocity: [f64; 3],
    pub amplitude: [f64; 3],
    pub frequency: f64,
    pub phase: f64,
}

impl ClusterMotion {
    pub fn still(center: [f64; 3]) -> Self {
        Self {
            center,
            velocity: [0.0; 3],
            amplitude: [0.0; 3],
            frequency: 0.0,
            phase: 0.0,
        }
    }

    pub fn offset(&self, t: f64) -> [f64; 3] {
        let s = (2.0 * std::f64::consts::PI * self.frequency * t + self.phase).sin();
        [0, 1, 2].map(|k| self.velocity[k] * t + self.amplitude[k] * s)
    }
}

/// Ground truth of a generated scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneTruth {
    pub base: GaussianCloud<f64>,
    /// Cluster of every gaussian.
    pub cluster: Vec<usize>,
    pub motions: Vec<ClusterMotion>,
    pub times: Vec<f64>,
    pub cameras: Vec<Camera<f64>>,
    pub background: [f64; 3],
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t = {t} outside [0, 1]")));
    }
    Ok(())
}

impl SceneTruth {
    pub fn positions_at(&self, t: f64) -> Result<Vec<[f64; 3]>> {
        check_t(t)?;
        let offsets: Vec<[f64; 3]> = self.motions.iter().map(|m| m.offset(t)).collect();
        Ok(self
            .base
            .positions()
            .into_iter()
            .zip(&self.cluster)
            .map(|(p, &c)| [0, 1, 2].map(|k| p[k] + offsets[c][k]))
            .collect())
    }

    pub fn cloud_at(&self, t: f64) -> Result<GaussianCloud<f64>> {
        let pos = self.positions_at(t)?;
        let mut cloud = self.base.clone();
        cloud.mu = Array::new(vec![pos.len(), 3], pos.concat())?;
        Ok(cloud)
    }

    /// Largest distance of a `t = 0` position from their centroid.
    pub fn extent(&self) -> f64 {
        let pos = self.positions_at(0.0).expect("0 is a valid time");
        bounding_radius(&pos)
    }

    pub fn render_frame(&self, camera: usize, t: f64) -> Result<Array<f64>> {
        Ok(render(&self.cloud_at(t)?, &self.cameras[camera], self.background)?.rgb)
    }
}

pub fn positions_at(truth: &SceneTruth, t: f64) -> Result<Vec<[f64; 3]>> {
    truth.positions_at(t)
}

/// Largest distance from the centroid.
pub fn bounding_radius(points: &[[f64; 3]]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let n = points.len() as f64;
    let c = [0, 1, 2].map(|k| points.iter().map(|p| p[k]).sum::<f64>() / n);
    points.iter().map(|p| dist(p, &c)).fold(0.0, f64::max)
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn mean_nearest_brute(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let sum: f64 = a
        .iter()
        .map(|p| b.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
        .sum();
    sum / a.len() as f64
}

/// Symmetric mean nearest-neighbor distance by exhaustive search.
pub fn chamfer_brute_force(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    check_sets(a, b)?;
    Ok(0.5 * (mean_nearest_brute(a, b) + mean_nearest_brute(b, a)))
}

fn check_sets(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("chamfer needs nonempty point sets".into()));
    }
    Ok(())
}

/// Mean distance from each point of `a` to its nearest point in `b`, with a
/// sweep over `b` sorted by x.
fn mean_nearest_sweep(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let mut sorted: Vec<[f64; 3]> = b.to_vec();
    sorted.sort_by(|p, q| p[0].total_cmp(&q[0]));
    let xs: Vec<f64> = sorted.iter().map(|p| p[0]).collect();
    let nearest: Vec<f64> = a
        .par_iter()
        .map(|p| {
            let start = xs.partition_point(|&x| x < p[0]);
            let mut best = f64::INFINITY;
            let mut hi = start;
            let mut lo = start;
            loop {
                let up = (hi < xs.len()).then(|| xs[hi] - p[0]);
                let down = (lo > 0).then(|| p[0] - xs[lo - 1]);
                match (up, down) {
                    (Some(u), d) if d.is_none_or(|d| u <= d) => {
                        if u > best {
                            break;
                        }
                        best = best.min(dist(p, &sorted[hi]));
                        hi += 1;
                    }
                    (_, Some(d)) => {
                        if d > best {
                            break;
                        }
                        best = best.min(dist(p, &sorted[lo - 1]));
                        lo -= 1;
                    }
                    _ => break,
                }
            }
            best
        })
        .collect();
    nearest.iter().sum::<f64>() / a.len() as f64
}

/// Symmetric mean nearest-neighbor distance.
pub fn chamfer(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    check_sets(a, b)?;
    Ok(0.5 * (mean_nearest_sweep(a, b) + mean_nearest_sweep(b, a)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub world_to_camera: [[f64; 4]; 4],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraRecord {
    pub fn from_camera(c: &Camera<f64>) -> Self {
        Self {
            world_to_camera: c.world_to_camera,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
        }
    }

    pub fn to_camera(&self) -> Result<Camera<f64>> {
        Camera::new(
            self.world_to_camera,
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub id: usize,
    pub camera: usize,
    pub time_index: usize,
    pub t: f64,
    /// Path relative to the dataset directory.
    pub image: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub background: [f64; 3],
    pub times: Vec<f64>,
    pub train: Vec<usize>,
    pub holdout: Vec<usize>,
    pub truth: Option<String>,
    pub init: Option<String>,
    pub scene: SceneConfig,
    pub cameras: Vec<CameraRecord>,
    pub frames: Vec<FrameRecord>,
}

impl Manifest {
    pub fn n_times(&self) -> usize {
        self.times.len()
    }
}

/// Plain-array form of a cloud for text files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudRecord {
    pub n: usize,
    pub sh_count: usize,
    pub embed_dim: usize,
    pub mu: Vec<f64>,
    pub q: Vec<f64>,
    pub s: Vec<f64>,
    pub sigma_logit: Vec<f64>,
    pub h: Vec<f64>,
    pub embed: Vec<f64>,
}

impl CloudRecord {
    pub fn from_cloud<T: Scalar>(c: &GaussianCloud<T>) -> Self {
        let v = |a: &Array<T>| a.data().iter().map(|x| x.to_f64_lossy()).collect();
        Self {
            n: c.len(),
            sh_count: c.sh_count(),
            embed_dim: c.embed_dim(),
            mu: v(&c.mu),
            q: v(&c.q),
            s: v(&c.s),
            sigma_logit: v(&c.sigma_logit),
            h: v(&c.h),
            embed: v(&c.embed),
        }
    }

    pub fn to_cloud<T: Scalar>(&self) -> Result<GaussianCloud<T>> {
        let n = self.n;
        let a = |shape: Vec<usize>, d: &[f64]| Array::new(shape, d.iter().map(|&x| T::lit(x)).collect());
        let cloud = GaussianCloud {
            mu: a(vec![n, 3], &self.mu)?,
            q: a(vec![n, 4], &self.q)?,
            s: a(vec![n, 3], &self.s)?,
            sigma_logit: a(vec![n, 1], &self.sigma_logit)?,
            h: a(vec![n, self.sh_count, 3], &self.h)?,
            embed: a(vec![n, self.embed_dim], &self.embed)?,
        };
        cloud.validate()?;
        Ok(cloud)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthRecord {
    cluster: Vec<usize>,
    motions: Vec<ClusterMotion>,
    base: CloudRecord,
}

/// A generated scene held in memory.
#[derive(Clone, Debug)]
pub struct Generated {
    pub truth: SceneTruth,
    /// Truth positions at `t = 0` plus isotropic jitter.
    pub init: GaussianCloud<f64>,
    pub noise_sigma: f64,
    pub manifest: Manifest,
    /// 64-bit renders in manifest frame order.
    pub images: Vec<Array<f64>>,
}

fn ring_cameras(cfg: &SceneConfig) -> Result<Vec<Camera<f64>>> {
    (0..cfg.n_cameras)
        .map(|i| {
            let a = std::f64::consts::TAU * (i as f64 + 0.5) / cfg.n_cameras as f64;
            let eye = [
                cfg.camera_radius * a.cos(),
                cfg.camera_radius * a.sin(),
                cfg.camera_height,
            ];
            Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], cfg.focal, cfg.width, cfg.height)
        })
        .collect()
}

fn unit_ball(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let p = [0; 3].map(|_| rng.random_range(-1.0..1.0));
        if p.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            return p;
        }
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Builds the ground-truth scene, renders every frame and draws the noisy
/// initial cloud.
pub fn generate(seed: u64, cfg: &SceneConfig) -> Result<Generated> {
    generate_with_noise(seed, cfg, cfg.noise_frac)
}

/// [`generate`] with an explicit jitter fraction.
pub fn generate_with_noise(seed: u64, cfg: &SceneConfig, noise_frac: f64) -> Result<Generated> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.n_gaussians;
    let k = cfg.n_clusters;

    let angle0 = rng.random_range(0.0..std::f64::consts::TAU);
    let motions: Vec<ClusterMotion> = (0..k)
        .map(|c| {
            let a = angle0 + std::f64::consts::TAU * c as f64 / k as f64;
            let off = if k == 1 { 0.0 } else { cfg.cluster_offset };
            let center = [off * a.cos(), off * a.sin(), rng.random_range(-0.2..0.2)];
            let dir = unit_ball(&mut rng);
            let amp_dir = unit_ball(&mut rng);
            ClusterMotion {
                center,
                velocity: dir.map(|v| v * cfg.max_speed),
                amplitude: amp_dir.map(|v| v * cfg.max_amplitude),
                frequency: rng.random_range(cfg.min_frequency..=cfg.max_frequency),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect();
    let palette: Vec<[f64; 3]> = (0..k)
        .map(|_| [0; 3].map(|_| rng.random_range(0.25..0.95)))
        .collect();

    let cluster: Vec<usize> = (0..n).map(|i| i * k / n).collect();
    let b = crate::gaussians::sh::basis_count(cfg.sh_degree);
    let mut mu = Vec::with_capacity(n * 3);
    let mut q = Vec::with_capacity(n * 4);
    let mut s = Vec::with_capacity(n * 3);
    let mut h = vec![0.0; n * b * 3];
    for (i, &c) in cluster.iter().enumerate() {
        let p = unit_ball(&mut rng);
        let center = motions[c].center;
        mu.extend((0..3).map(|a| center[a] + cfg.cluster_radius * p[a]));
        let quat: [f64; 4] = [0; 4].map(|_| StandardNormal.sample(&mut rng));
        q.extend(quat);
        s.extend((0..3).map(|_| (cfg.gaussian_scale * rng.random_range(0.7..1.3)).ln()));
        for ch in 0..3 {
            let color: f64 = (palette[c][ch] + rng.random_range(-cfg.color_jitter..=cfg.color_jitter)).clamp(0.05, 1.0);
            h[i * b * 3 + ch] = (color - 0.5) / SH_C0;
        }
    }
    let base = GaussianCloud {
        mu: Array::new(vec![n, 3], mu)?,
        q: Array::new(vec![n, 4], q)?,
        s: Array::new(vec![n, 3], s)?,
        sigma_logit: Array::full(vec![n, 1], logit(cfg.opacity)),
        h: Array::new(vec![n, b, 3], h)?,
        embed: Array::zeros(vec![n, 0]),
    };
    let times: Vec<f64> = (0..cfg.n_times)
        .map(|i| if cfg.n_times > 1 { i as f64 / (cfg.n_times - 1) as f64 } else { 0.0 })
        .collect();
    let cameras = ring_cameras(cfg)?;
    let truth = SceneTruth {
        base,
        cluster,
        motions,
        times: times.clone(),
        cameras,
        background: cfg.background,
    };

    let noise_sigma = noise_frac * truth.extent();
    let mut init = truth.cloud_at(0.0)?;
    for v in init.mu.data_mut() {
        let e: f64 = StandardNormal.sample(&mut rng);
        *v += noise_sigma * e;
    }

    let ext = cfg.image_format.extension();
    let mut frames = Vec::new();
    let (mut train, mut holdout) = (Vec::new(), Vec::new());
    for cam in 0..cfg.n_cameras {
        for (ti, &t) in times.iter().enumerate() {
            let id = frames.len();
            frames.push(FrameRecord {
                id,
                camera: cam,
                time_index: ti,
                t,
                image: format!("frames/cam{cam:02}_t{ti:03}.{ext}"),
            });
            if cfg.holdout_cameras.contains(&cam) {
                holdout.push(id);
            } else {
                train.push(id);
            }
        }
    }
    let images = frames
        .par_iter()
        .map(|f| truth.render_frame(f.camera, f.t))
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed,
        background: cfg.background,
        times,
        train,
        holdout,
        truth: Some(TRUTH_FILE.into()),
        init: Some(INIT_FILE.into()),
        scene: cfg.clone(),
        cameras: truth.cameras.iter().map(CameraRecord::from_camera).collect(),
        frames,
    };
    Ok(Generated {
        truth,
        init,
        noise_sigma,
        manifest,
        images,
    })
}

fn to_toml<S: Serialize>(v: &S) -> Result<String> {
    toml::to_string(v).map_err(|e| Error::InvalidArgument(format!("serialization failed: {e}")))
}

fn from_toml<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

impl Generated {
    /// Writes the manifest, truth, initial cloud and 8-bit frames under `dir`,
    /// creating it if needed.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("frames"))?;
        for (f, img) in self.manifest.frames.iter().zip(&self.images) {
            write_image(&dir.join(&f.image), img)?;
        }
        let truth = TruthRecord {
            cluster: self.truth.cluster.clone(),
            motions: self.truth.motions.clone(),
            base: CloudRecord::from_cloud(&self.truth.base),
        };
        fs::write(dir.join(TRUTH_FILE), to_toml(&truth)?)?;
        fs::write(dir.join(INIT_FILE), to_toml(&CloudRecord::from_cloud(&self.init))?)?;
        fs::write(dir.join(MANIFEST_FILE), to_toml(&self.manifest)?)?;
        Ok(())
    }

    /// Frames as the 8-bit images that [`Generated::write`] stores.
    pub fn quantized_images(&self) -> Result<Vec<Array<f64>>> {
        self.images
            .iter()
            .map(|img| {
                let bytes = quantize(img)?;
                Array::new(img.shape().to_vec(), bytes.iter().map(|&b| crate::imageio::from_u8(b)).collect())
            })
            .collect()
    }

    /// In-memory training data over the 8-bit frames.
    pub fn train_data<T: Scalar>(&self) -> Result<TrainData<T>> {
        let images = self.quantized_images()?;
        build_train_data(&self.manifest, |i| Ok(images[i].cast()))
    }
}

fn build_train_data<T: Scalar>(
    m: &Manifest,
    mut image: impl FnMut(usize) -> Result<Array<T>>,
) -> Result<TrainData<T>> {
    let cameras = m
        .cameras
        .iter()
        .map(|c| Ok(c.to_camera()?.cast()))
        .collect::<Result<Vec<Camera<T>>>>()?;
    let mut frame = |id: usize| -> Result<Frame<T>> {
        let rec = m
            .frames
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("frame id {id} not in manifest")))?;
        let cam = cameras
            .get(rec.camera)
            .ok_or_else(|| Error::InvalidArgument(format!("camera {} not in manifest", rec.camera)))?;
        let img = image(id)?;
        if img.shape() != [cam.height, cam.width, 3] {
            return Err(Error::shape(
                "dataset frame",
                img.shape(),
                &[cam.height, cam.width, 3],
            ));
        }
        Ok(Frame {
            id,
            camera: rec.camera,
            t: rec.t,
            image: img,
        })
    };
    let train = m.train.iter().map(|&i| frame(i)).collect::<Result<Vec<_>>>()?;
    let holdout = m.holdout.iter().map(|&i| frame(i)).collect::<Result<Vec<_>>>()?;
    Ok(TrainData {
        cameras,
        train,
        holdout,
        n_times: m.n_times(),
        background: m.background,
    })
}

/// A dataset read back from disk.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub data: TrainData<T>,
    pub init: Option<GaussianCloud<T>>,
    pub truth: Option<SceneTruth>,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = from_toml(&dir.join(MANIFEST_FILE))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::VersionMismatch {
            expected: MANIFEST_VERSION,
            found: m.version,
        });
    }
    Ok(m)
}

pub fn read_cloud_file<T: Scalar>(path: &Path) -> Result<GaussianCloud<T>> {
    from_toml::<CloudRecord>(path)?.to_cloud()
}

pub fn write_cloud_file<T: Scalar>(path: &Path, cloud: &GaussianCloud<T>) -> Result<()> {
    fs::write(path, to_toml(&CloudRecord::from_cloud(cloud))?)?;
    Ok(())
}

/// Loads manifest, frames, and the optional truth and initial cloud.
pub fn load_dataset<T: Scalar>(dir: &Path) -> Result<Dataset<T>> {
    let manifest = read_manifest(dir)?;
    let data = build_train_data(&manifest, |i| read_image(&dir.join(&manifest.frames[i].image)))?;
    let init = manifest
        .init
        .as_ref()
        .map(|f| read_cloud_file(&dir.join(f)))
        .transpose()?;
    let truth = match &manifest.truth {
        Some(f) => {
            let rec: TruthRecord = from_toml(&dir.join(f))?;
            Some(SceneTruth {
                base: rec.base.to_cloud()?,
                cluster: rec.cluster,
                motions: rec.motions,
                times: manifest.times.clone(),
                cameras: manifest
                    .cameras
                    .iter()
                    .map(CameraRecord::to_camera)
                    .collect::<Result<_>>()?,
                background: manifest.background,
            })
        }
        None => None,
    };
    Ok(Dataset {
        dir: dir.to_path_buf(),
        manifest,
        data,
        init,
        truth,
    })
}
