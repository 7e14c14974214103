//! Space-time feature encoders: sinusoidal features into an MLP, or a
//! six-plane factorized grid fused by an MLP.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Mlp, ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    FreqMlp,
    HexPlane,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub backend: Backend,
    /// Output feature width.
    pub c1: usize,
    pub l_xyz: usize,
    pub l_t: usize,
    /// Hidden width and count of the MLP.
    pub width: usize,
    pub depth: usize,
    /// Plane resolution and channels.
    pub resolution: usize,
    pub channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backend: Backend::HexPlane,
            c1: 32,
            l_xyz: 6,
            l_t: 4,
            width: 64,
            depth: 2,
            resolution: 32,
            channels: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c1 == 0 || self.width == 0 {
            return Err(Error::InvalidArgument("encoder widths must be positive".into()));
        }
        if self.backend == Backend::HexPlane && (self.resolution < 2 || self.channels == 0) {
            return Err(Error::InvalidArgument(
                "hexplane needs resolution >= 2 and channels >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Axis-aligned box used to normalize positions into `[0, 1]³`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Aabb {
    /// Bounding box of `points`, grown by `pad` times its largest side.
    pub fn around<T: Scalar>(points: &[[T; 3]], pad: f64) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for k in 0..3 {
                let v = p[k].to_f64_lossy();
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
        if points.is_empty() {
            return Self {
                lo: [-1.0; 3],
                hi: [1.0; 3],
            };
        }
        let side = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max).max(1e-3);
        for k in 0..3 {
            lo[k] -= pad * side;
            hi[k] += pad * side;
        }
        Self { lo, hi }
    }
}

/// Coordinate pairs of the six planes; index 3 is time.
pub const PLANE_AXES: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)];

#[derive(Debug)]
enum Kind {
    FreqMlp {
        l_xyz: usize,
        l_t: usize,
    },
    HexPlane {
        planes: [ParamId; 6],
        resolution: usize,
        aabb: Aabb,
    },
}

#[derive(Debug)]
pub struct Encoder {
    kind: Kind,
    mlp: Mlp,
    clamped: AtomicUsize,
}

impl Encoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &EncoderConfig,
        aabb: Aabb,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut dims = Vec::with_capacity(cfg.depth + 2);
        let kind = match cfg.backend {
            Backend::FreqMlp => {
                dims.push(6 * cfg.l_xyz + 2 * cfg.l_t);
                Kind::FreqMlp {
                    l_xyz: cfg.l_xyz,
                    l_t: cfg.l_t,
                }
            }
            Backend::HexPlane => {
                let (r, c) = (cfg.resolution, cfg.channels);
                let planes = PLANE_AXES.map(|(a, b)| {
                    let value = if b == 3 {
                        Array::full(vec![r, r, c], T::one())
                    } else {
                        Array::from_fn(vec![r, r, c], |_| T::lit(rng.random_range(0.1..0.5)))
                    };
                    store.add(format!("{name}.plane_{a}{b}"), ParamKind::Grid, value)
                });
                dims.push(2 * c);
                Kind::HexPlane {
                    planes,
                    resolution: r,
                    aabb,
                }
            }
        };
        dims.extend(std::iter::repeat_n(cfg.width, cfg.depth));
        dims.push(cfg.c1);
        let mlp = Mlp::new(store, &format!("{name}.mlp"), &dims, false, rng);
        Ok(Self {
            kind,
            mlp,
            clamped: AtomicUsize::new(0),
        })
    }

    pub fn out_dim(&self) -> usize {
        self.mlp.fan_out()
    }

    pub fn backend(&self) -> Backend {
        match self.kind {
            Kind::FreqMlp { .. } => Backend::FreqMlp,
            Kind::HexPlane { .. } => Backend::HexPlane,
        }
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    /// Grid parameters, empty for the sinusoidal backend.
    pub fn planes(&self) -> Vec<ParamId> {
        match &self.kind {
            Kind::HexPlane { planes, .. } => planes.to_vec(),
            Kind::FreqMlp { .. } => Vec::new(),
        }
    }

    /// Number of coordinates clamped into the box so far.
    pub fn clamped_queries(&self) -> usize {
        self.clamped.load(Ordering::Relaxed)
    }

    /// Features for the `N×3` positions `pos` at time `t`, shape `N×C1`.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, pos: Var, t: T) -> Result<Var> {
        let shape = tape.shape(pos).to_vec();
        if shape.len() != 2 || shape[1] != 3 {
            return Err(Error::shape("encode", &shape, &[shape.first().copied().unwrap_or(0), 3]));
        }
        if !(t >= T::zero() && t <= T::one()) {
            return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
        }
        let n = shape[0];
        let pre = match &self.kind {
            Kind::FreqMlp { l_xyz, l_t } => {
                let (l_xyz, l_t) = (*l_xyz, *l_t);
                let mut freq = Array::zeros(vec![3, 3 * l_xyz]);
                for c in 0..3 {
                    for k in 0..l_xyz {
                        freq.data_mut()[c * 3 * l_xyz + c * l_xyz + k] =
                            T::lit(2f64.powi(k as i32) * std::f64::consts::PI);
                    }
                }
                let f = tape.constant(freq)?;
                let proj = tape.matmul(pos, f)?;
                let s = tape.sin(proj)?;
                let c = tape.cos(proj)?;
                let mut tf = Vec::with_capacity(2 * l_t);
                for k in 0..l_t {
                    let w = T::lit(2f64.powi(k as i32) * std::f64::consts::PI) * t;
                    tf.push(w.sin());
                    tf.push(w.cos());
                }
                let tfeat = tape.constant(Array::from_fn(vec![n, 2 * l_t], |i| tf[i % (2 * l_t)]))?;
                tape.concat(&[s, c, tfeat], 1)?
            }
            Kind::HexPlane {
                planes,
                resolution,
                aabb,
                ..
            } => {
                let lo = tape.constant(Array::new(vec![3], aabb.lo.map(T::lit).to_vec())?)?;
                let inv = tape.constant(Array::new(
                    vec![3],
                    (0..3).map(|k| T::lit(1.0 / (aabb.hi[k] - aabb.lo[k]))).collect(),
                )?)?;
                let shifted = tape.sub(pos, lo)?;
                let unit = tape.mul(shifted, inv)?;
                let clamped = tape
                    .value(unit)
                    .data()
                    .iter()
                    .filter(|&&v| v < T::zero() || v > T::one())
                    .count();
                self.clamped.fetch_add(clamped, Ordering::Relaxed);
                let mut feats = Vec::with_capacity(6);
                for (p, &(a, b)) in planes.iter().zip(PLANE_AXES.iter()) {
                    feats.push(grid_sample(tape, bound.var(*p), unit, (a, b), t, *resolution)?);
                }
                let sp = tape.mul(feats[0], feats[1])?;
                let sp = tape.mul(sp, feats[2])?;
                let tm = tape.mul(feats[3], feats[4])?;
                let tm = tape.mul(tm, feats[5])?;
                tape.concat(&[sp, tm], 1)?
            }
        };
        self.mlp.forward(tape, bound, pre)
    }

    /// Total-variation penalty on the planes; `None` without a grid.
    pub fn tv_loss<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound) -> Result<Option<Var>> {
        match &self.kind {
            Kind::FreqMlp { .. } => Ok(None),
            Kind::HexPlane { planes, .. } => {
                let mut total: Option<Var> = None;
                for &p in planes {
                    let v = tv_plane(tape, bound.var(p))?;
                    total = Some(match total {
                        Some(acc) => tape.add(acc, v)?,
                        None => v,
                    });
                }
                let total = total.expect("six planes");
                Ok(Some(tape.scale(total, T::lit(1.0 / planes.len() as f64))?))
            }
        }
    }
}

/// Mean squared difference between axis-adjacent entries of an `R×R×C`
/// plane.
pub fn tv_plane<T: Scalar>(tape: &mut Tape<T>, plane: Var) -> Result<Var> {
    let s = tape.shape(plane).to_vec();
    let (r0, r1) = (s[0], s[1]);
    let mut terms = Vec::new();
    let mut count = 0usize;
    for (axis, len) in [(0, r0), (1, r1)] {
        if len < 2 {
            continue;
        }
        let hi = tape.slice(plane, axis, 1, len)?;
        let lo = tape.slice(plane, axis, 0, len - 1)?;
        let d = tape.sub(hi, lo)?;
        let d = tape.square(d)?;
        terms.push(tape.sum_all(d)?);
        count += tape.value(d).len();
    }
    if terms.is_empty() {
        return tape.scalar(T::zero());
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    tape.scale(total, T::one() / T::from_usize_lossy(count))
}

/// Bilinear lookup of plane `(a, b)` at unit coordinates taken from
/// columns of `unit` (`N×3`), with column 3 meaning the constant `t`.
/// Coordinates are clamped into `[0, 1]`; clamped coordinates get no
/// gradient.
pub fn grid_sample<T: Scalar>(
    tape: &mut Tape<T>,
    plane: Var,
    unit: Var,
    axes: (usize, usize),
    t: T,
    resolution: usize,
) -> Result<Var> {
    let ps = tape.shape(plane).to_vec();
    if ps.len() != 3 || ps[0] != resolution || ps[1] != resolution {
        return Err(Error::shape("grid_sample", &ps, &[resolution, resolution, 0]));
    }
    let channels = ps[2];
    let coords = tape.value(unit);
    let n = coords.shape()[0];
    let op = GridSample { axes, t, resolution };
    let pdata = tape.value(plane).data();
    let mut out = vec![T::zero(); n * channels];
    for i in 0..n {
        let cell = op.cell(coords.row(i));
        for (w, idx) in cell.corners() {
            let src = &pdata[idx * channels..(idx + 1) * channels];
            for (o, &v) in out[i * channels..(i + 1) * channels].iter_mut().zip(src) {
                *o += w * v;
            }
        }
    }
    let out = Array::new(vec![n, channels], out)?;
    tape.custom(&[plane, unit], out, Box::new(op))
}

struct GridSample<T> {
    axes: (usize, usize),
    t: T,
    resolution: usize,
}

#[derive(Clone, Copy)]
struct Cell<T> {
    i0: usize,
    j0: usize,
    fu: T,
    fv: T,
    res: usize,
    /// Whether each coordinate was inside `[0, 1]`.
    live: [bool; 2],
}

impl<T: Scalar> Cell<T> {
    fn corners(&self) -> [(T, usize); 4] {
        let one = T::one();
        let r = self.res;
        [
            ((one - self.fu) * (one - self.fv), self.i0 * r + self.j0),
            ((one - self.fu) * self.fv, self.i0 * r + self.j0 + 1),
            (self.fu * (one - self.fv), (self.i0 + 1) * r + self.j0),
            (self.fu * self.fv, (self.i0 + 1) * r + self.j0 + 1),
        ]
    }
}

impl<T: Scalar> GridSample<T> {
    fn coord(&self, row: &[T], axis: usize) -> T {
        if axis == 3 {
            self.t
        } else {
            row[axis]
        }
    }

    fn split(&self, u: T) -> (usize, T, bool) {
        let live = u >= T::zero() && u <= T::one();
        let u = u.max(T::zero()).min(T::one());
        let x = u * T::from_usize_lossy(self.resolution - 1);
        let i0 = (x.floor().to_f64_lossy() as usize).min(self.resolution - 2);
        (i0, x - T::from_usize_lossy(i0), live)
    }

    fn cell(&self, row: &[T]) -> Cell<T> {
        let (i0, fu, lu) = self.split(self.coord(row, self.axes.0));
        let (j0, fv, lv) = self.split(self.coord(row, self.axes.1));
        Cell {
            i0,
            j0,
            fu,
            fv,
            res: self.resolution,
            live: [lu, lv],
        }
    }
}

impl<T: Scalar> CustomOp<T> for GridSample<T> {
    fn name(&self) -> &'static str {
        "grid_sample"
    }

    fn backward(
        &self,
        inputs: &[&Array<T>],
        _output: &Array<T>,
        grad_output: &Array<T>,
    ) -> Result<Vec<Option<Array<T>>>> {
        let (plane, coords) = (inputs[0], inputs[1]);
        let c = plane.shape()[2];
        let n = coords.shape()[0];
        let pd = plane.data();
        let g = grad_output.data();
        let mut d_plane = vec![T::zero(); pd.len()];
        let mut d_coords = vec![T::zero(); coords.len()];
        let scale = T::from_usize_lossy(self.resolution - 1);
        let one = T::one();
        for i in 0..n {
            let cell = self.cell(coords.row(i));
            let gi = &g[i * c..(i + 1) * c];
            for (w, idx) in cell.corners() {
                for (d, &gv) in d_plane[idx * c..(idx + 1) * c].iter_mut().zip(gi) {
                    *d += w * gv;
                }
            }
            let [p00, p01, p10, p11] = cell.corners().map(|(_, idx)| &pd[idx * c..(idx + 1) * c]);
            let mut du = T::zero();
            let mut dv = T::zero();
            for k in 0..c {
                du += gi[k] * ((p10[k] - p00[k]) * (one - cell.fv) + (p11[k] - p01[k]) * cell.fv);
                dv += gi[k] * ((p01[k] - p00[k]) * (one - cell.fu) + (p11[k] - p10[k]) * cell.fu);
            }
            for (axis, d, live) in [(self.axes.0, du, cell.live[0]), (self.axes.1, dv, cell.live[1])] {
                if axis < 3 && live {
                    d_coords[i * 3 + axis] += d * scale;
                }
            }
        }
        Ok(vec![
            Some(Array::new(plane.shape().to_vec(), d_plane)?),
            Some(Array::new(coords.shape().to_vec(), d_coords)?),
        ])
    }
}
