//! Named parameter storage and the dense layers built on it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Array, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Optimizer group a parameter belongs to; selects its learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Network,
    Grid,
    Position,
    Rotation,
    Scale,
    Opacity,
    ShDc,
    ShRest,
    Embedding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Array<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Array<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, kind, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array<T> {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Ids whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter()
            .filter(move |(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
    }

    /// Records every parameter on `tape`; those rejected by `trainable`
    /// become constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&Param<T>) -> bool) -> Result<Bound> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable(p) {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    /// Overwrites values by name; every stored parameter must be present
    /// with its current shape.
    pub fn load_named(&mut self, arrays: &[(String, Array<T>)]) -> Result<()> {
        for p in &mut self.params {
            let (_, a) = arrays
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {}", p.name)))?;
            if a.shape() != p.value.shape() {
                return Err(Error::shape("load", a.shape(), p.value.shape()));
            }
            p.value = a.clone();
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps vars already recorded in parameter-store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// `y = x·W + b` over the last axis of `x`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Uniform `±1/√fan_in` weights, zero bias; all zero when `zero` is set.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        zero: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let w = if zero {
            Array::zeros(vec![fan_in, fan_out])
        } else {
            Array::from_fn(vec![fan_in, fan_out], |_| T::lit(rng.random_range(-bound..bound)))
        };
        Self {
            weight: store.add(format!("{name}.weight"), ParamKind::Network, w),
            bias: store.add(format!("{name}.bias"), ParamKind::Network, Array::zeros(vec![fan_out])),
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&self.fan_in) {
            return Err(Error::shape("linear", &shape, &[self.fan_in]));
        }
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let flat = if shape.len() == 2 {
            x
        } else {
            tape.reshape(x, vec![rows, self.fan_in])?
        };
        let y = tape.matmul(flat, bound.var(self.weight))?;
        let y = tape.add(y, bound.var(self.bias))?;
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out = shape;
        *out.last_mut().expect("nonempty shape") = self.fan_out;
        tape.reshape(y, out)
    }
}

/// Stack of [`Linear`] layers with relu between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`; `zero_last` zero-initializes the output
    /// layer.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: &[usize],
        zero_last: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                Linear::new(
                    store,
                    &format!("{name}.{i}"),
                    dims[i],
                    dims[i + 1],
                    zero_last && i + 1 == n,
                    rng,
                )
            })
            .collect();
        Self { layers }
    }

    pub fn fan_out(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, bound, x)?;
            if i + 1 < self.layers.len() {
                x = tape.relu(x)?;
            }
        }
        Ok(x)
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_handles_leading_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let l = Linear::new(&mut store, "l", 4, 3, false, &mut rng);
        let mut t = Tape::new();
        let b = store.bind(&mut t, |_| true).unwrap();
        let x = t.constant(Array::from_fn(vec![2, 5, 4], |i| i as f64 * 0.1)).unwrap();
        let y = l.forward(&mut t, &b, x).unwrap();
        assert_eq!(t.shape(y), &[2, 5, 3]);
        let xr = t.constant(Array::from_fn(vec![10, 4], |i| i as f64 * 0.1)).unwrap();
        let yr = l.forward(&mut t, &b, xr).unwrap();
        assert_eq!(t.value(y).data(), t.value(yr).data());
    }

    #[test]
    fn zero_last_layer_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f32>::new();
        let m = Mlp::new(&mut store, "m", &[3, 8, 2], true, &mut rng);
        let mut t = Tape::new();
        let b = store.bind(&mut t, |_| true).unwrap();
        let x = t.constant(Array::full(vec![4, 3], 0.7)).unwrap();
        let y = m.forward(&mut t, &b, x).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(store.len(), 4);
        assert!(store.find("m.1.weight").is_some());
    }
}
