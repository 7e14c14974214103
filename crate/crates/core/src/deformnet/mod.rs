//! Two-stage deformation of the canonical cloud.
//!
//! Stage 1 encodes each canonical gaussian at `t−dt`, `t`, `t+dt`, pools the
//! stack and concatenates the centre feature and the learnable embedding
//! (temporal aggregation) before a head predicts attribute offsets. Stage 2
//! starts from the stage-1 positions, encodes them with a separate encoder,
//! gathers the features of each gaussian's `K` nearest deformed neighbors
//! and pools them (spatial aggregation) before a second head refines the
//! result.

pub mod knn;

pub use knn::{knn, knn_brute_force, KnnTable};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Tape, Var};
use crate::encoders::{Aabb, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::gaussians::{CloudVars, GaussianCloud};
use crate::nn::{Bound, Linear, Mlp, ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Stage1Only,
    TwoStage,
}

/// Per-gaussian attribute offsets, shaped like the cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationDelta<T> {
    pub d_mu: Array<T>,
    pub d_r: Array<T>,
    pub d_s: Array<T>,
    pub d_sigma: Array<T>,
    pub d_h: Array<T>,
}

impl<T: Scalar> DeformationDelta<T> {
    pub fn zeros_like(cloud: &GaussianCloud<T>) -> Self {
        Self {
            d_mu: Array::zeros(cloud.mu.shape().to_vec()),
            d_r: Array::zeros(cloud.q.shape().to_vec()),
            d_s: Array::zeros(cloud.s.shape().to_vec()),
            d_sigma: Array::zeros(cloud.sigma_logit.shape().to_vec()),
            d_h: Array::zeros(cloud.h.shape().to_vec()),
        }
    }

    fn from_vars(tape: &Tape<T>, d: &DeltaVars) -> Self {
        Self {
            d_mu: tape.value(d.mu).clone(),
            d_r: tape.value(d.r).clone(),
            d_s: tape.value(d.s).clone(),
            d_sigma: tape.value(d.sigma).clone(),
            d_h: tape.value(d.h).clone(),
        }
    }
}

/// Adds `delta` to a copy of `cloud`; the embedding is carried over.
pub fn apply_delta<T: Scalar>(
    cloud: &GaussianCloud<T>,
    delta: &DeformationDelta<T>,
) -> Result<GaussianCloud<T>> {
    let add = |a: &Array<T>, d: &Array<T>, op: &'static str| -> Result<Array<T>> {
        if a.shape() != d.shape() {
            return Err(Error::shape(op, a.shape(), d.shape()));
        }
        a.zip_map(d, |x, y| x + y)
    };
    Ok(GaussianCloud {
        mu: add(&cloud.mu, &delta.d_mu, "apply_delta.mu")?,
        q: add(&cloud.q, &delta.d_r, "apply_delta.q")?,
        s: add(&cloud.s, &delta.d_s, "apply_delta.s")?,
        sigma_logit: add(&cloud.sigma_logit, &delta.d_sigma, "apply_delta.sigma")?,
        h: add(&cloud.h, &delta.d_h, "apply_delta.h")?,
        embed: cloud.embed.clone(),
    })
}

/// Tape handles of a delta.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeltaVars {
    pub mu: Var,
    pub r: Var,
    pub s: Var,
    pub sigma: Var,
    pub h: Var,
}

/// Tape counterpart of [`apply_delta`].
pub fn apply_delta_vars<T: Scalar>(
    tape: &mut Tape<T>,
    cloud: &CloudVars,
    d: &DeltaVars,
) -> Result<CloudVars> {
    Ok(CloudVars {
        mu: tape.add(cloud.mu, d.mu)?,
        q: tape.add(cloud.q, d.r)?,
        s: tape.add(cloud.s, d.s)?,
        sigma_logit: tape.add(cloud.sigma_logit, d.sigma)?,
        h: tape.add(cloud.h, d.h)?,
        embed: cloud.embed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TamConfig {
    pub enabled: bool,
    pub c2: usize,
    /// Offset in units of the frame interval.
    pub dt_multiplier: f64,
    /// Width of the per-gaussian embedding; 0 disables it.
    pub embed_dim: usize,
}

impl Default for TamConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            c2: 32,
            dt_multiplier: 1.0,
            embed_dim: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DsamConfig {
    pub enabled: bool,
    pub k: usize,
    pub c3: usize,
    /// Iterations between neighbor-table rebuilds during training.
    pub knn_refresh: usize,
}

impl Default for DsamConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            k: 16,
            c3: 32,
            knn_refresh: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub width: usize,
    pub depth: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { width: 64, depth: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Two sequential deformations; off means a single stage.
    pub nss: bool,
    /// Keep stage-1 networks fixed once stage 2 is trained.
    pub freeze_stage1: bool,
    pub encoder: EncoderConfig,
    pub encoder2: EncoderConfig,
    pub tam: TamConfig,
    pub dsam: DsamConfig,
    pub head: HeadConfig,
    /// Encoder box padding relative to the largest side of the initial cloud.
    pub aabb_pad: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            nss: true,
            freeze_stage1: false,
            encoder: EncoderConfig::default(),
            encoder2: EncoderConfig::default(),
            tam: TamConfig::default(),
            dsam: DsamConfig::default(),
            head: HeadConfig::default(),
            aabb_pad: 0.25,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.encoder2.validate()?;
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.tam.enabled && self.tam.c2 == 0 {
            return bad("tam.c2 must be positive");
        }
        if !(self.tam.dt_multiplier >= 0.0 && self.tam.dt_multiplier.is_finite()) {
            return bad("tam.dt_multiplier must be finite and nonnegative");
        }
        if self.dsam.enabled && (self.dsam.k == 0 || self.dsam.c3 == 0) {
            return bad("dsam.k and dsam.c3 must be positive");
        }
        if self.dsam.knn_refresh == 0 {
            return bad("dsam.knn_refresh must be at least 1");
        }
        if self.head.width == 0 {
            return bad("head.width must be positive");
        }
        Ok(())
    }
}

/// Shared trunk with one zero-initialized output layer per attribute group.
#[derive(Clone, Debug)]
struct Head {
    trunk: Mlp,
    out: [Linear; 5],
    sh_count: usize,
}

impl Head {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        cfg: &HeadConfig,
        sh_count: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut dims = vec![in_dim];
        dims.extend(std::iter::repeat_n(cfg.width, cfg.depth.max(1)));
        let trunk = Mlp::new(store, &format!("{name}.trunk"), &dims, false, rng);
        let w = cfg.width;
        let widths = [3, 4, 3, 1, 3 * sh_count];
        let labels = ["mu", "r", "s", "sigma", "h"];
        let out = [0, 1, 2, 3, 4]
            .map(|i| Linear::new(store, &format!("{name}.{}", labels[i]), w, widths[i], true, rng));
        Self { trunk, out, sh_count }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, feat: Var) -> Result<DeltaVars> {
        let h = self.trunk.forward(tape, bound, feat)?;
        let h = tape.relu(h)?;
        let n = tape.shape(feat)[0];
        let d: Vec<Var> = self
            .out
            .iter()
            .map(|l| l.forward(tape, bound, h))
            .collect::<Result<_>>()?;
        Ok(DeltaVars {
            mu: d[0],
            r: d[1],
            s: d[2],
            sigma: d[3],
            h: tape.reshape(d[4], vec![n, self.sh_count, 3])?,
        })
    }

    fn output_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.out.iter().flat_map(|l| [l.weight, l.bias])
    }
}

/// Intermediate tensors of temporal aggregation.
#[derive(Clone, Copy, Debug)]
pub struct TamOutput {
    /// `N×3×1×C1` encoder features at `t−dt`, `t`, `t+dt`.
    pub stack: Var,
    /// `N×1×C2` pooled feature.
    pub pooled: Var,
    /// `N×(C2+C1+D)` concatenation `[F_max, F_t, Y]`.
    pub feature: Var,
}

/// Intermediate tensors of spatial aggregation.
#[derive(Clone, Copy, Debug)]
pub struct DsamOutput {
    /// `N×1×K×C3` neighbor features.
    pub block: Var,
    /// `N×1×C3` pooled neighbor feature.
    pub pooled: Var,
    /// `N×(K·C3+C3+3)` concatenation `[F_n, F_nm, x′]`.
    pub feature: Var,
}

/// Encoder plus shared per-point layer used for neighbor features.
#[derive(Debug)]
pub struct SpatialBranch {
    pub encoder: Encoder,
    pub point: Linear,
}

impl SpatialBranch {
    /// Aggregates the features of each row's neighbors in `table`.
    pub fn aggregate<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        pos: Var,
        t: T,
        table: &KnnTable,
    ) -> Result<DsamOutput> {
        aggregate_neighbors(&self.encoder, &self.point, tape, bound, pos, t, table)
    }
}

#[derive(Debug)]
struct Stage1 {
    encoder: Encoder,
    tam: Option<Linear>,
    spatial: Option<SpatialBranch>,
    head: Head,
}

#[derive(Debug)]
struct Stage2 {
    encoder: Encoder,
    point: Option<Linear>,
    head: Head,
}

#[derive(Clone, Copy, Debug)]
struct CloudIds {
    mu: ParamId,
    q: ParamId,
    s: ParamId,
    sigma_logit: ParamId,
    h_dc: ParamId,
    h_rest: Option<ParamId>,
    embed: Option<ParamId>,
}

/// Where the neighbor table of a forward pass comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KnnSource {
    None,
    Canonical,
    Stage1,
}

/// Result of a full deformation pass.
#[derive(Clone, Debug)]
pub struct NssOutput {
    pub stage1: CloudVars,
    pub output: CloudVars,
    /// Table built during this pass when none was supplied.
    pub built_knn: Option<KnnTable>,
}

/// Canonical cloud, both stages and their parameters.
#[derive(Debug)]
pub struct DeformModel<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    cloud: CloudIds,
    stage1: Stage1,
    stage2: Option<Stage2>,
    dt: f64,
    sh_count: usize,
}

/// Parameter name prefixes.
pub const CLOUD_PREFIX: &str = "cloud.";
pub const STAGE1_PREFIX: &str = "stage1.";
pub const STAGE2_PREFIX: &str = "stage2.";

impl<T: Scalar> DeformModel<T> {
    /// Builds the model around `init`; `n_times` fixes the frame interval.
    pub fn new(cfg: &ModelConfig, init: &GaussianCloud<T>, n_times: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        init.validate()?;
        let n = init.len();
        if cfg.dsam.enabled && cfg.dsam.k >= n {
            return Err(Error::KTooLarge {
                k: cfg.dsam.k,
                available: n.saturating_sub(1),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let sh_count = init.sh_count();
        let h = &init.h;
        let h_dc = Array::from_fn(vec![n, 1, 3], |i| h.data()[(i / 3) * sh_count * 3 + i % 3]);
        let h_rest = (sh_count > 1).then(|| {
            let rest = (sh_count - 1) * 3;
            Array::from_fn(vec![n, sh_count - 1, 3], |i| {
                h.data()[(i / rest) * sh_count * 3 + 3 + i % rest]
            })
        });
        let d = cfg.tam.embed_dim;
        let embed = if cfg.tam.enabled && d > 0 {
            let value = if init.embed_dim() == d {
                init.embed.clone()
            } else {
                Array::zeros(vec![n, d])
            };
            Some(store.add("cloud.embed", ParamKind::Embedding, value))
        } else {
            None
        };
        let cloud = CloudIds {
            mu: store.add("cloud.mu", ParamKind::Position, init.mu.clone()),
            q: store.add("cloud.q", ParamKind::Rotation, init.q.clone()),
            s: store.add("cloud.s", ParamKind::Scale, init.s.clone()),
            sigma_logit: store.add("cloud.sigma_logit", ParamKind::Opacity, init.sigma_logit.clone()),
            h_dc: store.add("cloud.h_dc", ParamKind::ShDc, h_dc),
            h_rest: h_rest.map(|v| store.add("cloud.h_rest", ParamKind::ShRest, v)),
            embed,
        };

        let aabb = Aabb::around(&init.positions(), cfg.aabb_pad);
        let encoder = Encoder::new(&mut store, "stage1.enc", &cfg.encoder, aabb, &mut rng)?;
        let c1 = encoder.out_dim();
        let tam = cfg
            .tam
            .enabled
            .then(|| Linear::new(&mut store, "stage1.tam", c1, cfg.tam.c2, false, &mut rng));
        let mut width1 = if cfg.tam.enabled { cfg.tam.c2 + c1 + d } else { c1 };
        let spatial = if !cfg.nss && cfg.dsam.enabled {
            let encoder = Encoder::new(&mut store, "stage1.dsam_enc", &cfg.encoder2, aabb, &mut rng)?;
            let point = Linear::new(
                &mut store,
                "stage1.dsam_point",
                encoder.out_dim(),
                cfg.dsam.c3,
                false,
                &mut rng,
            );
            width1 += cfg.dsam.k * cfg.dsam.c3 + cfg.dsam.c3 + 3;
            Some(SpatialBranch { encoder, point })
        } else {
            None
        };
        let head = Head::new(&mut store, "stage1.head", width1, &cfg.head, sh_count, &mut rng);
        let stage1 = Stage1 {
            encoder,
            tam,
            spatial,
            head,
        };

        let stage2 = if cfg.nss {
            let encoder = Encoder::new(&mut store, "stage2.enc", &cfg.encoder2, aabb, &mut rng)?;
            let c = encoder.out_dim();
            let (point, width2) = if cfg.dsam.enabled {
                let p = Linear::new(&mut store, "stage2.point", c, cfg.dsam.c3, false, &mut rng);
                (Some(p), cfg.dsam.k * cfg.dsam.c3 + cfg.dsam.c3 + 3)
            } else {
                (None, c + 3)
            };
            let head = Head::new(&mut store, "stage2.head", width2, &cfg.head, sh_count, &mut rng);
            Some(Stage2 {
                encoder,
                point,
                head,
            })
        } else {
            None
        };
        let dt = if n_times > 1 {
            cfg.tam.dt_multiplier / (n_times - 1) as f64
        } else {
            0.0
        };
        Ok(Self {
            cfg: cfg.clone(),
            store,
            cloud,
            stage1,
            stage2,
            dt,
            sh_count,
        })
    }

    pub fn len(&self) -> usize {
        self.store.value(self.cloud.mu).shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Temporal offset in normalized time.
    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn has_stage2(&self) -> bool {
        self.stage2.is_some()
    }

    pub fn sh_count(&self) -> usize {
        self.sh_count
    }

    pub fn stage1_encoder(&self) -> &Encoder {
        &self.stage1.encoder
    }

    pub fn stage2_encoder(&self) -> Option<&Encoder> {
        self.stage2.as_ref().map(|s| &s.encoder)
    }

    /// Encoders whose grids are regularized during `phase`.
    /// Every grid-bearing encoder, paired with whether its TV term is
    /// optimized in `phase`. The stage-2 term is reported but detached before
    /// the switch.
    pub fn regularized_encoders(&self, phase: Phase) -> Vec<(&Encoder, bool)> {
        let mut v = vec![(&self.stage1.encoder, true)];
        if let Some(s) = &self.stage1.spatial {
            v.push((&s.encoder, true));
        }
        if let Some(s) = &self.stage2 {
            v.push((&s.encoder, phase == Phase::TwoStage));
        }
        v
    }

    /// Canonical cloud as stored.
    pub fn canonical(&self) -> GaussianCloud<T> {
        let s = &self.store;
        let n = self.len();
        let b = self.sh_count;
        let dc = s.value(self.cloud.h_dc).data();
        let h = Array::from_fn(vec![n, b, 3], |i| {
            let (g, j) = (i / (3 * b), i % (3 * b));
            if j < 3 {
                dc[g * 3 + j]
            } else {
                let rest = s.value(self.cloud.h_rest.expect("degree > 0")).data();
                rest[g * (b - 1) * 3 + j - 3]
            }
        });
        GaussianCloud {
            mu: s.value(self.cloud.mu).clone(),
            q: s.value(self.cloud.q).clone(),
            s: s.value(self.cloud.s).clone(),
            sigma_logit: s.value(self.cloud.sigma_logit).clone(),
            h,
            embed: self
                .cloud
                .embed
                .map_or_else(|| Array::zeros(vec![n, 0]), |id| s.value(id).clone()),
        }
    }

    /// Canonical attributes as tape nodes.
    pub fn cloud_vars(&self, tape: &mut Tape<T>, bound: &Bound) -> Result<CloudVars> {
        let h = match self.cloud.h_rest {
            Some(rest) => tape.concat(&[bound.var(self.cloud.h_dc), bound.var(rest)], 1)?,
            None => bound.var(self.cloud.h_dc),
        };
        Ok(CloudVars {
            mu: bound.var(self.cloud.mu),
            q: bound.var(self.cloud.q),
            s: bound.var(self.cloud.s),
            sigma_logit: bound.var(self.cloud.sigma_logit),
            h,
            embed: self.cloud.embed.map(|id| bound.var(id)),
        })
    }

    /// Stacks encoder features at the three times, pools, and appends the
    /// centre feature and the embedding.
    pub fn temporal_aggregate(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        cloud: &CloudVars,
        t: T,
    ) -> Result<TamOutput> {
        let tam = self
            .stage1
            .tam
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("temporal aggregation is disabled".into()))?;
        let enc = &self.stage1.encoder;
        let n = tape.shape(cloud.mu)[0];
        let c1 = enc.out_dim();
        let dt = T::lit(self.dt);
        let times = [
            (t - dt).max(T::zero()),
            t,
            (t + dt).min(T::one()),
        ];
        let f_t = enc.encode(tape, bound, cloud.mu, t)?;
        let mut slots = Vec::with_capacity(3);
        for &ti in &times {
            let f = if ti == t {
                f_t
            } else {
                enc.encode(tape, bound, cloud.mu, ti)?
            };
            slots.push(tape.reshape(f, vec![n, 1, 1, c1])?);
        }
        let stack = tape.concat(&slots, 1)?;
        let mapped = tam.forward(tape, bound, stack)?;
        let mapped = tape.relu(mapped)?;
        let pooled4 = tape.max_pool(mapped, 1)?;
        let pooled = tape.reshape(pooled4, vec![n, 1, tam.fan_out])?;
        let f_max = tape.reshape(pooled, vec![n, tam.fan_out])?;
        let mut parts = vec![f_max, f_t];
        if let Some(y) = cloud.embed {
            parts.push(y);
        }
        let feature = tape.concat(&parts, 1)?;
        Ok(TamOutput {
            stack,
            pooled,
            feature,
        })
    }

    /// Which positions the neighbor table of `phase` is built on.
    pub fn knn_source(&self, phase: Phase) -> KnnSource {
        if self.stage1.spatial.is_some() {
            KnnSource::Canonical
        } else if phase == Phase::TwoStage
            && self.stage2.as_ref().is_some_and(|s| s.point.is_some())
        {
            KnnSource::Stage1
        } else {
            KnnSource::None
        }
    }

    fn table_for(&self, tape: &Tape<T>, pos: Var, knn_table: Option<&KnnTable>) -> Result<Option<KnnTable>> {
        if knn_table.is_some() {
            return Ok(None);
        }
        let pts: Vec<[T; 3]> = tape.value(pos).data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        Ok(Some(knn(&pts, self.cfg.dsam.k)?))
    }

    /// Stage-1 offsets from the canonical attributes.
    pub fn stage1_delta_vars(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        cloud: &CloudVars,
        t: T,
        knn_table: Option<&KnnTable>,
    ) -> Result<(DeltaVars, Option<KnnTable>)> {
        let mut feat = if self.stage1.tam.is_some() {
            self.temporal_aggregate(tape, bound, cloud, t)?.feature
        } else {
            self.stage1.encoder.encode(tape, bound, cloud.mu, t)?
        };
        let mut built = None;
        if let Some(branch) = &self.stage1.spatial {
            built = self.table_for(tape, cloud.mu, knn_table)?;
            let table = knn_table.or(built.as_ref()).expect("table present");
            let out = branch.aggregate(tape, bound, cloud.mu, t, table)?;
            feat = tape.concat(&[feat, out.feature], 1)?;
        }
        Ok((self.stage1.head.forward(tape, bound, feat)?, built))
    }

    /// Stage-2 offsets from the stage-1 cloud.
    pub fn stage2_delta_vars(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        deformed: &CloudVars,
        t: T,
        knn_table: Option<&KnnTable>,
    ) -> Result<(DeltaVars, Option<KnnTable>)> {
        let s2 = self
            .stage2
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("model has a single stage".into()))?;
        let mut built = None;
        let feat = match &s2.point {
            Some(point) => {
                built = self.table_for(tape, deformed.mu, knn_table)?;
                let table = knn_table.or(built.as_ref()).expect("table present");
                aggregate_neighbors(&s2.encoder, point, tape, bound, deformed.mu, t, table)?.feature
            }
            None => {
                let f = s2.encoder.encode(tape, bound, deformed.mu, t)?;
                tape.concat(&[f, deformed.mu], 1)?
            }
        };
        Ok((s2.head.forward(tape, bound, feat)?, built))
    }

    /// Spatial aggregation of stage 2 over `table`.
    pub fn spatial_aggregate(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        deformed: &CloudVars,
        t: T,
        table: &KnnTable,
    ) -> Result<DsamOutput> {
        let s2 = self.stage2.as_ref();
        let point = s2
            .and_then(|s| s.point.as_ref())
            .ok_or_else(|| Error::InvalidArgument("stage 2 has no spatial aggregation".into()))?;
        let encoder = &s2.expect("checked").encoder;
        aggregate_neighbors(encoder, point, tape, bound, deformed.mu, t, table)
    }

    /// Deforms the canonical cloud to time `t`.
    ///
    /// `knn_table` is reused when given; otherwise a fresh table is built
    /// and returned in [`NssOutput::built_knn`].
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        t: T,
        phase: Phase,
        knn_table: Option<&KnnTable>,
    ) -> Result<NssOutput> {
        let canonical = self.cloud_vars(tape, bound)?;
        let (d1, built1) = self.stage1_delta_vars(tape, bound, &canonical, t, knn_table)?;
        let stage1 = apply_delta_vars(tape, &canonical, &d1)?;
        if phase == Phase::Stage1Only || self.stage2.is_none() {
            return Ok(NssOutput {
                stage1,
                output: stage1,
                built_knn: built1,
            });
        }
        let (d2, built2) = self.stage2_delta_vars(tape, bound, &stage1, t, knn_table)?;
        let output = apply_delta_vars(tape, &stage1, &d2)?;
        Ok(NssOutput {
            stage1,
            output,
            built_knn: built1.or(built2),
        })
    }

    /// Tape-free deformation with a freshly built neighbor table; returns
    /// the stage-1 and final clouds.
    pub fn deform(&self, t: T, phase: Phase) -> Result<(GaussianCloud<T>, GaussianCloud<T>)> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, |_| false)?;
        let out = self.forward(&mut tape, &bound, t, phase, None)?;
        Ok((read_cloud(&tape, &out.stage1), read_cloud(&tape, &out.output)))
    }

    /// Stage-1 offsets at `t` as plain arrays.
    pub fn stage1_delta(&self, t: T) -> Result<DeformationDelta<T>> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, |_| false)?;
        let canonical = self.cloud_vars(&mut tape, &bound)?;
        let (d, _) = self.stage1_delta_vars(&mut tape, &bound, &canonical, t, None)?;
        Ok(DeformationDelta::from_vars(&tape, &d))
    }

    /// Stage-2 offsets of an already deformed cloud at `t`.
    pub fn stage2_delta(&self, deformed: &GaussianCloud<T>, t: T) -> Result<DeformationDelta<T>> {
        let mut tape = Tape::new();
        let cv = CloudVars {
            mu: tape.constant(deformed.mu.clone())?,
            q: tape.constant(deformed.q.clone())?,
            s: tape.constant(deformed.s.clone())?,
            sigma_logit: tape.constant(deformed.sigma_logit.clone())?,
            h: tape.constant(deformed.h.clone())?,
            embed: None,
        };
        let bound = self.store.bind(&mut tape, |_| false)?;
        let (d, _) = self.stage2_delta_vars(&mut tape, &bound, &cv, t, None)?;
        Ok(DeformationDelta::from_vars(&tape, &d))
    }

    /// Parameters of the zero-initialized output layers.
    pub fn head_output_params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.stage1.head.output_params().collect();
        if let Some(s) = &self.stage2 {
            v.extend(s.head.output_params());
        }
        v
    }

    /// Sets every head output layer to zero.
    pub fn zero_heads(&mut self) {
        for id in self.head_output_params() {
            self.store.value_mut(id).data_mut().fill(T::zero());
        }
    }
}

fn aggregate_neighbors<T: Scalar>(
    encoder: &Encoder,
    point: &Linear,
    tape: &mut Tape<T>,
    bound: &Bound,
    pos: Var,
    t: T,
    table: &KnnTable,
) -> Result<DsamOutput> {
    let n = tape.shape(pos)[0];
    if table.len() != n || table.idx.len() != n * table.k {
        return Err(Error::StaleKnn {
            expected: n,
            got: table.len(),
        });
    }
    let k = table.k;
    let f = encoder.encode(tape, bound, pos, t)?;
    let f = point.forward(tape, bound, f)?;
    let f = tape.relu(f)?;
    let c3 = point.fan_out;
    let gathered = tape.gather(f, &table.idx)?;
    let block = tape.reshape(gathered, vec![n, 1, k, c3])?;
    let pooled = tape.max_pool(block, 2)?;
    let flat = tape.reshape(block, vec![n, k * c3])?;
    let pooled_flat = tape.reshape(pooled, vec![n, c3])?;
    let feature = tape.concat(&[flat, pooled_flat, pos], 1)?;
    Ok(DsamOutput {
        block,
        pooled,
        feature,
    })
}

/// Reads tape values back into a cloud.
pub fn read_cloud<T: Scalar>(tape: &Tape<T>, cv: &CloudVars) -> GaussianCloud<T> {
    let n = tape.shape(cv.mu)[0];
    GaussianCloud {
        mu: tape.value(cv.mu).clone(),
        q: tape.value(cv.q).clone(),
        s: tape.value(cv.s).clone(),
        sigma_logit: tape.value(cv.sigma_logit).clone(),
        h: tape.value(cv.h).clone(),
        embed: cv
            .embed
            .map_or_else(|| Array::zeros(vec![n, 0]), |e| tape.value(e).clone()),
    }
}
