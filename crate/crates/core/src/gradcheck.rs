//! Finite-difference audits of the hand-written gradients on tiny 64-bit
//! scenes.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::deformnet::{DeformModel, DsamConfig, HeadConfig, ModelConfig, Phase, TamConfig};
use crate::deformnet::knn::knn;
use crate::diffcore::{finite_difference_report, Array, ProbePlan, Tape, Var};
use crate::encoders::{Aabb, Backend, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::gaussians::{Camera, CloudVars, GaussianCloud};
use crate::nn::{Bound, ParamStore};
use crate::rasterizer::render_on_tape;
use crate::training::{loss_on_tape, LossConfig};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-6;
const MAX_PROBES: usize = 160;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scope {
    Rasterizer,
    Encoders,
    Tam,
    Dsam,
    End2end,
}

impl Scope {
    pub const ALL: [Scope; 5] = [
        Scope::Rasterizer,
        Scope::Encoders,
        Scope::Tam,
        Scope::Dsam,
        Scope::End2end,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Rasterizer => "rasterizer",
            Scope::Encoders => "encoders",
            Scope::Tam => "tam",
            Scope::Dsam => "dsam",
            Scope::End2end => "end2end",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown grad-check scope {s:?}")))
    }
}

/// Worst relative error of one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub scope: Scope,
    pub group: String,
    pub max_rel_err: f64,
}

impl GroupError {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn random_array(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Array<f64> {
    Array::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `Σ w ⊙ x` with fixed random weights.
fn probe_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_array(&mut rng, tape.shape(x).to_vec(), -1.0, 1.0);
    let w = tape.constant(w)?;
    let p = tape.mul(x, w)?;
    tape.sum_all(p)
}

fn run_groups<F>(scope: Scope, names: Vec<String>, params: &[Array<f64>], f: F) -> Result<Vec<GroupError>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let plan = ProbePlan {
        max_entries: Some(MAX_PROBES),
        seed: 7,
    };
    let errs = finite_difference_report(f, params, STEP, plan)?;
    Ok(names
        .into_iter()
        .zip(errs)
        .map(|(group, e)| GroupError {
            scope,
            group,
            max_rel_err: e,
        })
        .collect())
}

fn small_cloud(rng: &mut ChaCha8Rng, n: usize, sh_count: usize) -> GaussianCloud<f64> {
    GaussianCloud {
        mu: Array::from_fn(vec![n, 3], |i| {
            if i % 3 == 2 {
                rng.random_range(-0.3..0.3)
            } else {
                rng.random_range(-0.5..0.5)
            }
        }),
        q: random_array(rng, vec![n, 4], -1.0, 1.0),
        s: random_array(rng, vec![n, 3], -1.8, -1.2),
        sigma_logit: random_array(rng, vec![n, 1], -0.5, 1.5),
        h: random_array(rng, vec![n, sh_count, 3], -0.4, 0.4),
        embed: Array::zeros(vec![n, 0]),
    }
}

fn small_camera() -> Camera<f64> {
    Camera::look_at([0.3, -0.2, -3.0], [0.0; 3], [0.0, -1.0, 0.0], 9.0, 8, 8).expect("valid camera")
}

fn cloud_from(vars: &[Var]) -> CloudVars {
    CloudVars {
        mu: vars[0],
        q: vars[1],
        s: vars[2],
        sigma_logit: vars[3],
        h: vars[4],
        embed: None,
    }
}

fn rasterizer() -> Result<Vec<GroupError>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cloud = small_cloud(&mut rng, 5, 4);
    let cam = small_camera();
    let params = vec![cloud.mu, cloud.q, cloud.s, cloud.sigma_logit, cloud.h];
    let names = ["mu", "q", "s", "sigma_logit", "h"].map(String::from).to_vec();
    run_groups(Scope::Rasterizer, names, &params, |tape, v| {
        let (img, _) = render_on_tape(tape, &cloud_from(v), &cam, [0.1, 0.2, 0.3])?;
        probe_sum(tape, img, 3)
    })
}

fn encoder_config(backend: Backend) -> EncoderConfig {
    EncoderConfig {
        backend,
        c1: 5,
        l_xyz: 2,
        l_t: 2,
        width: 8,
        depth: 1,
        resolution: 5,
        channels: 3,
    }
}

fn store_groups(store: &ParamStore<f64>) -> (Vec<String>, Vec<Array<f64>>) {
    store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.clone()))
        .unzip()
}

fn encoders() -> Result<Vec<GroupError>> {
    let mut out = Vec::new();
    for backend in [Backend::FreqMlp, Backend::HexPlane] {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let aabb = Aabb {
            lo: [-1.0; 3],
            hi: [1.0; 3],
        };
        let enc = Encoder::new(&mut store, "enc", &encoder_config(backend), aabb, &mut rng)?;
        // move planes off their constant start so TV has a gradient
        for id in enc.planes() {
            for v in store.value_mut(id).data_mut() {
                *v = rng.random_range(0.2..1.0);
            }
        }
        let pos = random_array(&mut rng, vec![6, 3], -0.8, 0.8);
        let (mut names, mut params) = store_groups(&store);
        let n_store = params.len();
        names.push("positions".into());
        params.push(pos);
        let label = match backend {
            Backend::FreqMlp => "freq_mlp",
            Backend::HexPlane => "hexplane",
        };
        let names = names.into_iter().map(|n| format!("{label}/{n}")).collect();
        out.extend(run_groups(Scope::Encoders, names, &params, |tape, v| {
            let bound = Bound::from_vars(v[..n_store].to_vec());
            let f = enc.encode(tape, &bound, v[n_store], 0.37)?;
            let s = probe_sum(tape, f, 9)?;
            match enc.tv_loss(tape, &bound)? {
                Some(tv) => tape.add(s, tv),
                None => Ok(s),
            }
        })?);
    }
    Ok(out)
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        encoder: encoder_config(Backend::HexPlane),
        encoder2: encoder_config(Backend::HexPlane),
        tam: TamConfig {
            c2: 4,
            embed_dim: 3,
            ..TamConfig::default()
        },
        dsam: DsamConfig {
            k: 3,
            c3: 4,
            ..DsamConfig::default()
        },
        head: HeadConfig { width: 8, depth: 1 },
        ..ModelConfig::default()
    }
}

/// A tiny model with every parameter away from its initial value.
fn tiny_model(n: usize, seed: u64) -> Result<DeformModel<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = small_cloud(&mut rng, n, 4);
    let mut model = DeformModel::new(&tiny_model_config(), &cloud, 5, seed)?;
    let heads = model.head_output_params();
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.get(id).name.clone();
        let v = model.store.value_mut(id);
        if name == "cloud.embed" {
            v.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
        } else if heads.contains(&id) {
            v.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.05..0.05));
        } else if name.contains("plane_") {
            v.data_mut().iter_mut().for_each(|x| *x = rng.random_range(0.2..1.0));
        } else if name.ends_with(".bias") {
            // zero biases put relu inputs exactly on the kink
            v.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.1..0.1));
        }
    }
    Ok(model)
}

fn tam() -> Result<Vec<GroupError>> {
    let model = tiny_model(6, 21)?;
    let (names, params) = store_groups(&model.store);
    run_groups(Scope::Tam, names, &params, |tape, v| {
        let bound = Bound::from_vars(v.to_vec());
        let cloud = model.cloud_vars(tape, &bound)?;
        let out = model.temporal_aggregate(tape, &bound, &cloud, 0.45)?;
        probe_sum(tape, out.feature, 4)
    })
}

fn dsam() -> Result<Vec<GroupError>> {
    let model = tiny_model(8, 31)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pos = random_array(&mut rng, vec![8, 3], -0.6, 0.6);
    let pts: Vec<[f64; 3]> = pos.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    let table = knn(&pts, model.cfg.dsam.k)?;
    let (mut names, mut params) = store_groups(&model.store);
    let n_store = params.len();
    names.push("deformed.mu".into());
    params.push(pos);
    let n = 8;
    run_groups(Scope::Dsam, names, &params, |tape, v| {
        let bound = Bound::from_vars(v[..n_store].to_vec());
        let cv = CloudVars {
            mu: v[n_store],
            q: tape.constant(Array::zeros(vec![n, 4]))?,
            s: tape.constant(Array::zeros(vec![n, 3]))?,
            sigma_logit: tape.constant(Array::zeros(vec![n, 1]))?,
            h: tape.constant(Array::zeros(vec![n, 4, 3]))?,
            embed: None,
        };
        let out = model.spatial_aggregate(tape, &bound, &cv, 0.6, &table)?;
        probe_sum(tape, out.feature, 8)
    })
}

fn end2end() -> Result<Vec<GroupError>> {
    let model = tiny_model(8, 41)?;
    let cam = small_camera();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let target = random_array(&mut rng, vec![8, 8, 3], 0.0, 1.0);
    // table fixed at the unperturbed stage-1 positions
    let (stage1, _) = model.deform(0.3, Phase::Stage1Only)?;
    let table = knn(&stage1.positions(), model.cfg.dsam.k)?;
    let (names, params) = store_groups(&model.store);
    let loss_cfg = LossConfig::default();
    run_groups(Scope::End2end, names, &params, |tape, v| {
        let bound = Bound::from_vars(v.to_vec());
        let out = model.forward(tape, &bound, 0.3, Phase::TwoStage, Some(&table))?;
        let (img, _) = render_on_tape(tape, &out.output, &cam, [0.0; 3])?;
        let target = tape.constant(target.clone())?;
        let mut tv = None;
        for (enc, _) in model.regularized_encoders(Phase::TwoStage) {
            if let Some(t) = enc.tv_loss(tape, &bound)? {
                tv = Some(match tv {
                    Some(acc) => tape.add(acc, t)?,
                    None => t,
                });
            }
        }
        Ok(loss_on_tape(tape, img, target, tv, &loss_cfg)?.total)
    })
}

/// Checks every parameter group of `scope`.
pub fn run(scope: Scope) -> Result<Vec<GroupError>> {
    match scope {
        Scope::Rasterizer => rasterizer(),
        Scope::Encoders => encoders(),
        Scope::Tam => tam(),
        Scope::Dsam => dsam(),
        Scope::End2end => end2end(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_names_roundtrip() {
        for s in Scope::ALL {
            assert_eq!(s.name().parse::<Scope>().unwrap(), s);
        }
        assert!("everything".parse::<Scope>().is_err());
    }

    #[test]
    fn every_scope_within_tolerance() {
        for s in Scope::ALL {
            for g in run(s).unwrap() {
                assert!(g.passed(), "{}/{}: {}", g.scope, g.group, g.max_rel_err);
            }
        }
    }
}
