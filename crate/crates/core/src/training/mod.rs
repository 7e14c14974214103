//! Photometric loss, metrics, Adam, the learning-rate schedule and the
//! two-phase training loop.

pub mod checkpoint;
pub mod ssim;

pub use ssim::{effective_window, ssim_on_tape, ssim_value, SsimParams};

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deformnet::{DeformModel, KnnSource, KnnTable, Phase, CLOUD_PREFIX, STAGE1_PREFIX, STAGE2_PREFIX};
use crate::diffcore::{Array, Tape, Var};
use crate::error::{Error, Result};
use crate::gaussians::Camera;
use crate::nn::{Param, ParamKind};
use crate::rasterizer::{render, render_on_tape};
use crate::scalar::Scalar;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of L1 against D-SSIM.
    pub lambda: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Weight of the grid total-variation term.
    pub tv_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.9,
            ssim_window: 11,
            ssim_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            tv_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn ssim_params(&self) -> SsimParams {
        SsimParams {
            window: self.ssim_window,
            sigma: self.ssim_sigma,
            k1: self.k1,
            k2: self.k2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument("loss.lambda must lie in [0, 1]".into()));
        }
        if self.ssim_window == 0 || !(self.ssim_sigma > 0.0) || !(self.tv_weight >= 0.0) {
            return Err(Error::InvalidArgument(
                "ssim window/sigma must be positive and tv_weight nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub total_iters: usize,
    pub stage1_iters: usize,
    /// Network learning rate, decayed to `lr_final`.
    pub lr0: f64,
    pub lr_final: f64,
    /// Grid learning rate, decayed to `grid_lr_final`.
    pub grid_lr0: f64,
    pub grid_lr_final: f64,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            total_iters: 3000,
            stage1_iters: 1000,
            lr0: 1.6e-4,
            lr_final: 1.6e-6,
            grid_lr0: 1.6e-3,
            grid_lr_final: 1.6e-5,
            seed: 0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_iters > self.total_iters {
            return Err(Error::InvalidArgument(
                "schedule.stage1_iters exceeds total_iters".into(),
            ));
        }
        for v in [self.lr0, self.lr_final, self.grid_lr0, self.grid_lr_final] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument("learning rates must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Per-attribute learning rates of the canonical cloud. Position rates are
/// multiplied by the camera extent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianLr {
    pub position: f64,
    pub position_final: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
    pub embedding: f64,
}

impl Default for GaussianLr {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            position_final: 1.6e-6,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 5e-2,
            sh_dc: 2.5e-3,
            sh_rest: 2.5e-3 / 20.0,
            embedding: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub loss: LossConfig,
    pub gaussian_lr: GaussianLr,
    /// Iterations between metric rows.
    pub log_every: usize,
    /// Iterations between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            loss: LossConfig::default(),
            gaussian_lr: GaussianLr::default(),
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

/// `lr0·(lr_final/lr0)^(i/total)`.
pub fn decayed_lr(lr0: f64, lr_final: f64, iter: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * (lr_final / lr0).powf(iter as f64 / total as f64)
}

/// One observed image.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame<T> {
    /// Index in the dataset manifest.
    pub id: usize,
    pub camera: usize,
    pub t: f64,
    pub image: Array<T>,
}

/// Images and cameras ready for training.
#[derive(Clone, Debug)]
pub struct TrainData<T> {
    pub cameras: Vec<Camera<T>>,
    pub train: Vec<Frame<T>>,
    pub holdout: Vec<Frame<T>>,
    pub n_times: usize,
    pub background: [f64; 3],
}

impl<T: Scalar> TrainData<T> {
    /// `1.1 ×` the largest camera distance from the mean camera centre.
    pub fn camera_extent(&self) -> f64 {
        let centers: Vec<[f64; 3]> = self
            .cameras
            .iter()
            .map(|c| c.center().map(|v| v.to_f64_lossy()))
            .collect();
        if centers.is_empty() {
            return 1.0;
        }
        let n = centers.len() as f64;
        let mean = [0, 1, 2].map(|k| centers.iter().map(|c| c[k]).sum::<f64>() / n);
        let r = centers
            .iter()
            .map(|c| ((c[0] - mean[0]).powi(2) + (c[1] - mean[1]).powi(2) + (c[2] - mean[2]).powi(2)).sqrt())
            .fold(0.0, f64::max);
        1.1 * r.max(1e-6)
    }

    pub fn background_t(&self) -> [T; 3] {
        self.background.map(T::lit)
    }
}

/// Loss node and its components.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub l1: f64,
    pub dssim: f64,
    pub tv: f64,
}

/// `λ·L1 + (1−λ)·(1−SSIM)/2 + tv_weight·tv`.
pub fn loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    rendered: Var,
    target: Var,
    tv: Option<Var>,
    cfg: &LossConfig,
) -> Result<LossParts> {
    if tape.shape(rendered) != tape.shape(target) {
        return Err(Error::shape("loss", tape.shape(rendered), tape.shape(target)));
    }
    let diff = tape.sub(rendered, target)?;
    let abs = tape.abs(diff)?;
    let l1 = tape.mean_all(abs)?;
    let s = ssim_on_tape(tape, rendered, target, &cfg.ssim_params())?;
    let half = tape.scalar(T::lit(0.5))?;
    let neg = tape.scale(s, T::lit(-0.5))?;
    let dssim = tape.add(neg, half)?;
    let a = tape.scale(l1, T::lit(cfg.lambda))?;
    let b = tape.scale(dssim, T::lit(1.0 - cfg.lambda))?;
    let mut total = tape.add(a, b)?;
    let mut tv_value = 0.0;
    if let Some(tv) = tv {
        tv_value = tape.value(tv).item().to_f64_lossy();
        if cfg.tv_weight != 0.0 {
            let w = tape.scale(tv, T::lit(cfg.tv_weight))?;
            total = tape.add(total, w)?;
        }
    }
    Ok(LossParts {
        total,
        l1: tape.value(l1).item().to_f64_lossy(),
        dssim: tape.value(dssim).item().to_f64_lossy(),
        tv: tv_value,
    })
}

/// Loss of two images with a precomputed TV value.
pub fn loss_value<T: Scalar>(rendered: &Array<T>, target: &Array<T>, tv: T, cfg: &LossConfig) -> Result<T> {
    let mut tape = Tape::new();
    let r = tape.constant(rendered.clone())?;
    let t = tape.constant(target.clone())?;
    let tv = tape.scalar(tv)?;
    let parts = loss_on_tape(&mut tape, r, t, Some(tv), cfg)?;
    Ok(tape.value(parts.total).item())
}

pub fn mse<T: Scalar>(a: &Array<T>, b: &Array<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mse", a.shape(), b.shape()));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.to_f64_lossy() - y.to_f64_lossy();
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// `10·log10(1/MSE)`, capped at [`PSNR_CAP`].
pub fn psnr<T: Scalar>(a: &Array<T>, b: &Array<T>) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// Mean SSIM with the standard window and constants.
pub fn ssim<T: Scalar>(a: &Array<T>, b: &Array<T>) -> Result<f64> {
    Ok(ssim_value(a, b, &SsimParams::default())?.to_f64_lossy())
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    step: i32,
}

/// Adam with per-parameter step counts.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: Vec<Option<Moments<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            state: vec![None; n_params],
        }
    }

    /// Applies one update to `value` in place.
    pub fn update(&mut self, slot: usize, value: &mut Array<T>, grad: &Array<T>, lr: f64) -> Result<()> {
        if value.shape() != grad.shape() {
            return Err(Error::shape("adam", value.shape(), grad.shape()));
        }
        let st = self.state[slot].get_or_insert_with(|| Moments {
            m: vec![T::zero(); grad.len()],
            v: vec![T::zero(); grad.len()],
            step: 0,
        });
        st.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let one = T::one();
        let c1 = one - T::lit(self.beta1.powi(st.step));
        let c2 = one - T::lit(self.beta2.powi(st.step));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        for (((p, &g), m), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(st.m.iter_mut())
            .zip(st.v.iter_mut())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + eps);
        }
        Ok(())
    }

    pub fn steps(&self, slot: usize) -> i32 {
        self.state[slot].as_ref().map_or(0, |s| s.step)
    }
}

/// Losses of one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub iter: usize,
    pub phase: Phase,
    pub loss: f64,
    pub l1: f64,
    pub dssim: f64,
    pub tv: f64,
}

/// One metrics-log row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub stats: StepStats,
    pub psnr_holdout: f64,
}

pub const LOG_HEADER: &str = "iter,phase,loss,l1,dssim,tv,psnr_holdout";

pub fn phase_label(p: Phase) -> &'static str {
    match p {
        Phase::Stage1Only => "stage1",
        Phase::TwoStage => "two_stage",
    }
}

impl LogRow {
    pub fn csv(&self) -> String {
        let s = &self.stats;
        format!(
            "{},{},{},{},{},{},{}",
            s.iter,
            phase_label(s.phase),
            s.loss,
            s.l1,
            s.dssim,
            s.tv,
            self.psnr_holdout
        )
    }
}

fn diverged(e: Error, iter: usize) -> Error {
    match e {
        Error::NonFiniteValue { .. } => Error::DivergedLoss { iter },
        other => other,
    }
}

/// Model, optimizer state and sampling RNG.
pub struct Trainer<T> {
    pub model: DeformModel<T>,
    pub cfg: TrainConfig,
    adam: Adam<T>,
    rng: ChaCha8Rng,
    iter: usize,
    knn_cache: Option<(KnnTable, KnnSource, usize)>,
    extent: f64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: DeformModel<T>, cfg: TrainConfig, data: &TrainData<T>) -> Result<Self> {
        cfg.schedule.validate()?;
        cfg.loss.validate()?;
        if data.train.is_empty() {
            return Err(Error::InvalidArgument("no training frames".into()));
        }
        let n = model.store.len();
        Ok(Self {
            model,
            adam: Adam::new(n),
            rng: ChaCha8Rng::seed_from_u64(cfg.schedule.seed),
            iter: 0,
            knn_cache: None,
            extent: data.camera_extent(),
            cfg,
        })
    }

    /// Completed iterations.
    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn phase_at(&self, iter: usize) -> Phase {
        if iter < self.cfg.schedule.stage1_iters || !self.model.has_stage2() {
            Phase::Stage1Only
        } else {
            Phase::TwoStage
        }
    }

    /// Phase of the most recent iteration.
    pub fn current_phase(&self) -> Phase {
        self.phase_at(self.iter.saturating_sub(1))
    }

    pub fn lr(&self, kind: ParamKind, iter: usize) -> f64 {
        let s = &self.cfg.schedule;
        let g = &self.cfg.gaussian_lr;
        let total = s.total_iters;
        match kind {
            ParamKind::Network => decayed_lr(s.lr0, s.lr_final, iter, total),
            ParamKind::Grid => decayed_lr(s.grid_lr0, s.grid_lr_final, iter, total),
            ParamKind::Position => decayed_lr(g.position, g.position_final, iter, total) * self.extent,
            ParamKind::Rotation => g.rotation,
            ParamKind::Scale => g.scale,
            ParamKind::Opacity => g.opacity,
            ParamKind::ShDc => g.sh_dc,
            ParamKind::ShRest => g.sh_rest,
            ParamKind::Embedding => g.embedding,
        }
    }

    /// Whether `p` is updated during `phase`.
    pub fn is_trainable(&self, p: &Param<T>, phase: Phase) -> bool {
        if p.name.starts_with(CLOUD_PREFIX) {
            return true;
        }
        if p.name.starts_with(STAGE1_PREFIX) {
            return phase == Phase::Stage1Only || !self.model.cfg.freeze_stage1;
        }
        p.name.starts_with(STAGE2_PREFIX) && phase == Phase::TwoStage
    }

    fn cached_knn(&self, source: KnnSource) -> Option<&KnnTable> {
        match &self.knn_cache {
            Some((table, s, built))
                if *s == source && self.iter - built < self.model.cfg.dsam.knn_refresh =>
            {
                Some(table)
            }
            _ => None,
        }
    }

    /// Forward pass on one frame; returns the tape, loss parts and any
    /// neighbor table that was built.
    fn frame_forward(
        &self,
        data: &TrainData<T>,
        frame: &Frame<T>,
        phase: Phase,
        knn_table: Option<&KnnTable>,
        trainable: &dyn Fn(&Param<T>) -> bool,
    ) -> Result<(Tape<T>, crate::nn::Bound, LossParts, Option<KnnTable>)> {
        let mut tape = Tape::new();
        let bound = self.model.store.bind(&mut tape, trainable)?;
        let out = self
            .model
            .forward(&mut tape, &bound, T::lit(frame.t), phase, knn_table)?;
        let cam = &data.cameras[frame.camera];
        let (img, _) = render_on_tape(&mut tape, &out.output, cam, data.background_t())?;
        let target = tape.constant(frame.image.clone())?;
        let mut tv: Option<Var> = None;
        for (enc, optimized) in self.model.regularized_encoders(phase) {
            if let Some(mut v) = enc.tv_loss(&mut tape, &bound)? {
                if !optimized {
                    v = tape.constant(tape.value(v).clone())?;
                }
                tv = Some(match tv {
                    Some(acc) => tape.add(acc, v)?,
                    None => v,
                });
            }
        }
        let parts = loss_on_tape(&mut tape, img, target, tv, &self.cfg.loss)?;
        Ok((tape, bound, parts, out.built_knn))
    }

    /// Runs one optimization step on a randomly drawn training frame.
    pub fn step(&mut self, data: &TrainData<T>) -> Result<StepStats> {
        let iter = self.iter;
        let phase = self.phase_at(iter);
        let frame = &data.train[self.rng.random_range(0..data.train.len())];
        let source = self.model.knn_source(phase);
        let cached = self.cached_knn(source).cloned();
        let trainable = |p: &Param<T>| self.is_trainable(p, phase);
        let (mut tape, bound, parts, built) = self
            .frame_forward(data, frame, phase, cached.as_ref(), &trainable)
            .map_err(|e| diverged(e, iter))?;
        let loss = tape.value(parts.total).item().to_f64_lossy();
        if !loss.is_finite() {
            return Err(Error::DivergedLoss { iter });
        }
        tape.backward(parts.total).map_err(|e| diverged(e, iter))?;
        let updates: Vec<_> = self
            .model
            .store
            .iter()
            .filter(|(_, p)| self.is_trainable(p, phase))
            .map(|(id, p)| (id, p.kind))
            .collect();
        for (id, kind) in updates {
            let grad = tape.grad_or_zeros(bound.var(id));
            let lr = self.lr(kind, iter);
            let value = self.model.store.value_mut(id);
            self.adam.update(id.index(), value, &grad, lr)?;
        }
        if let Some(table) = built {
            self.knn_cache = Some((table, source, iter));
        }
        self.iter += 1;
        Ok(StepStats {
            iter: self.iter,
            phase,
            loss,
            l1: parts.l1,
            dssim: parts.dssim,
            tv: parts.tv,
        })
    }

    /// Loss and every parameter's gradient on one frame, without updating.
    /// All parameters are differentiable leaves, whatever the phase.
    pub fn gradients(&self, data: &TrainData<T>, frame: &Frame<T>, phase: Phase) -> Result<(f64, Vec<Array<T>>)> {
        let (mut tape, bound, parts, _) = self.frame_forward(data, frame, phase, None, &|_| true)?;
        tape.backward(parts.total)?;
        let grads = self
            .model
            .store
            .ids()
            .map(|id| tape.grad_or_zeros(bound.var(id)))
            .collect();
        Ok((tape.value(parts.total).item().to_f64_lossy(), grads))
    }

    /// Loss on one frame with a fresh neighbor table.
    pub fn frame_loss(&self, data: &TrainData<T>, frame: &Frame<T>, phase: Phase) -> Result<f64> {
        let (tape, _, parts, _) = self.frame_forward(data, frame, phase, None, &|_| false)?;
        Ok(tape.value(parts.total).item().to_f64_lossy())
    }

    /// Mean PSNR over the holdout frames in the current phase.
    pub fn holdout_psnr(&self, data: &TrainData<T>) -> Result<f64> {
        holdout_psnr(&self.model, data, self.current_phase())
    }

    /// Trains to `total_iters`, writing the metrics log to `log` and
    /// checkpoints to `run_dir`. On divergence the last good parameters are
    /// saved as `diverged.ckpt` before the error is returned.
    pub fn run(&mut self, data: &TrainData<T>, log: &mut dyn Write, run_dir: Option<&Path>) -> Result<Vec<LogRow>> {
        if self.iter == 0 {
            writeln!(log, "{LOG_HEADER}")?;
        }
        let total = self.cfg.schedule.total_iters;
        let mut rows = Vec::new();
        while self.iter < total {
            let stats = match self.step(data) {
                Ok(s) => s,
                Err(e @ Error::DivergedLoss { .. }) => {
                    if let Some(dir) = run_dir {
                        checkpoint::save_store(&dir.join("diverged.ckpt"), &self.model.store)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let every = self.cfg.log_every.max(1);
            if stats.iter % every == 0 || stats.iter == total {
                let row = LogRow {
                    stats,
                    psnr_holdout: self.holdout_psnr(data)?,
                };
                writeln!(log, "{}", row.csv())?;
                rows.push(row);
            }
            if let Some(dir) = run_dir {
                let every = self.cfg.checkpoint_every;
                if every > 0 && stats.iter % every == 0 && stats.iter != total {
                    checkpoint::save_store(&dir.join(format!("iter_{:06}.ckpt", stats.iter)), &self.model.store)?;
                }
            }
        }
        if let Some(dir) = run_dir {
            checkpoint::save_store(&dir.join("final.ckpt"), &self.model.store)?;
        }
        log.flush()?;
        Ok(rows)
    }
}

/// Renders frame `frame` from the fully deformed model.
pub fn render_frame<T: Scalar>(
    model: &DeformModel<T>,
    data: &TrainData<T>,
    frame: &Frame<T>,
    phase: Phase,
) -> Result<Array<T>> {
    let (_, cloud) = model.deform(T::lit(frame.t), phase)?;
    Ok(render(&cloud, &data.cameras[frame.camera], data.background_t())?.rgb)
}

/// Mean PSNR over holdout frames.
pub fn holdout_psnr<T: Scalar>(model: &DeformModel<T>, data: &TrainData<T>, phase: Phase) -> Result<f64> {
    if data.holdout.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for f in &data.holdout {
        total += psnr(&render_frame(model, data, f, phase)?, &f.image)?;
    }
    Ok(total / data.holdout.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_form() {
        let a = Array::<f64>::zeros(vec![10, 10, 1]);
        let mut b = a.clone();
        for i in [3, 17, 55, 98] {
            b.data_mut()[i] = 0.5;
        }
        assert_eq!(psnr(&a, &b).unwrap(), 20.0);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    }

    #[test]
    fn identical_images_have_zero_loss() {
        let a = Array::from_fn(vec![12, 12, 3], |i| ((i * 7) % 11) as f64 / 11.0);
        assert_eq!(loss_value(&a, &a, 0.0, &LossConfig::default()).unwrap(), 0.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn lambda_one_is_pure_l1() {
        let a = Array::from_fn(vec![12, 12, 3], |i| ((i * 7) % 11) as f64 / 11.0);
        let b = a.map(|v| (v + 0.1).min(1.0));
        let cfg = LossConfig {
            lambda: 1.0,
            ..Default::default()
        };
        let l1 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        assert!((loss_value(&a, &b, 0.0, &cfg).unwrap() - l1).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::<f64>::new(1);
        let mut v = Array::full(vec![3], 1.0);
        let g = Array::new(vec![3], vec![2.0, -0.5, 0.0]).unwrap();
        adam.update(0, &mut v, &g, 0.1).unwrap();
        assert!((v.data()[0] - 0.9).abs() < 1e-12);
        assert!((v.data()[1] - 1.1).abs() < 1e-12);
        assert_eq!(v.data()[2], 1.0);
        assert_eq!(adam.steps(0), 1);
    }

    #[test]
    fn decay_endpoints() {
        assert_eq!(decayed_lr(1.6e-4, 1.6e-6, 0, 3000), 1.6e-4);
        assert!((decayed_lr(1.6e-4, 1.6e-6, 3000, 3000) - 1.6e-6).abs() < 1e-18);
        assert!((decayed_lr(1.6e-4, 1.6e-6, 1500, 3000) - 1.6e-5).abs() < 1e-17);
    }
}
