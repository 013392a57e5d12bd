//! Named parameter storage and the small layer building blocks shared by the
//! model modules.

use std::collections::HashMap;
use std::ops::Index;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{bail, Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var, NORM_EPS};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal(0, std) truncated to ±2 std.
    TruncNormal(f64),
    Zeros,
    Full(f64),
}

/// Ordered, named parameters.
///
/// A store either materializes tensors as they are registered, drawing from
/// one seeded stream in registration order, or records shapes only (used for
/// exhaustive parameter enumeration of large configurations).
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
    values: Vec<Arc<Tensor<T>>>,
    index: HashMap<String, ParamId>,
    rng: Option<ChaCha8Rng>,
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self::with_rng(Some(ChaCha8Rng::seed_from_u64(seed)))
    }

    pub fn shapes_only() -> Self {
        Self::with_rng(None)
    }

    fn with_rng(rng: Option<ChaCha8Rng>) -> Self {
        Self {
            names: Vec::new(),
            shapes: Vec::new(),
            inits: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
            rng,
        }
    }

    pub fn is_materialized(&self) -> bool {
        self.rng.is_some()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "parameter `{name}` registered twice"
        );
        let id = ParamId(self.names.len());
        if let Some(rng) = self.rng.as_mut() {
            let n: usize = shape.iter().product();
            let data: Vec<T> = match init {
                Init::Zeros => vec![T::zero(); n],
                Init::Full(v) => vec![T::lit(v); n],
                Init::TruncNormal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..n)
                        .map(|_| loop {
                            let v: f64 = dist.sample(rng);
                            if v.abs() <= 2.0 * std {
                                break T::lit(v);
                            }
                        })
                        .collect()
                }
            };
            self.values.push(Arc::new(Tensor::from_parts(shape.to_vec(), data)));
        }
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        self.inits.push(init);
        id
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_elements(&self) -> u64 {
        self.shapes
            .iter()
            .map(|s| s.iter().product::<usize>() as u64)
            .sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn init(&self, id: ParamId) -> Init {
        self.inits[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    /// `(name, shape)` for every parameter in registration order.
    pub fn layout(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.names
            .iter()
            .zip(&self.shapes)
            .map(|(n, s)| (n.as_str(), s.as_slice()))
    }

    fn require_values(&self) -> Result<()> {
        if !self.is_materialized() {
            bail!(Contract, "parameter store holds shapes only");
        }
        Ok(())
    }

    pub fn get(&self, id: ParamId) -> Result<&Tensor<T>> {
        self.require_values()?;
        Ok(&self.values[id.0])
    }

    pub fn shared(&self, id: ParamId) -> Result<&Arc<Tensor<T>>> {
        self.require_values()?;
        Ok(&self.values[id.0])
    }

    pub fn get_mut(&mut self, id: ParamId) -> Result<&mut Tensor<T>> {
        self.require_values()?;
        Ok(Arc::make_mut(&mut self.values[id.0]))
    }

    /// Replaces a tensor, keeping its registered shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        self.require_values()?;
        if value.shape() != self.shapes[id.0].as_slice() {
            bail!(
                Shape,
                "tensor `{}`: expected shape {:?}, got {:?}",
                self.names[id.0],
                self.shapes[id.0],
                value.shape()
            );
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    /// Registers every parameter as a leaf of `tape`.
    pub fn bind(&self, tape: &Tape<T>) -> Result<Bound<T>> {
        self.require_values()?;
        Ok(Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        })
    }

    /// Snapshot of all tensors, e.g. for a gradient check in another precision.
    pub fn tensors(&self) -> Result<Vec<(String, Tensor<T>)>> {
        self.require_values()?;
        Ok(self
            .names
            .iter()
            .cloned()
            .zip(self.values.iter().map(|v| (**v).clone()))
            .collect())
    }
}

/// Parameters bound to one tape, indexed by [`ParamId`].
pub struct Bound<T: Real> {
    vars: Vec<Var<T>>,
}

impl<T: Real> Bound<T> {
    pub fn from_vars(vars: Vec<Var<T>>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }
}

impl<T: Real> Index<ParamId> for Bound<T> {
    type Output = Var<T>;

    fn index(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }
}

/// `y = x W + b` with `W: [d_in, d_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize) -> Self {
        Self::with_init(store, name, d_in, d_out, Init::TruncNormal(INIT_STD))
    }

    pub fn with_init<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        weight_init: Init,
    ) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), &[d_in, d_out], weight_init),
            bias: store.add(format!("{name}.bias"), &[d_out], Init::Zeros),
            d_in,
            d_out,
        }
    }

    pub fn num_params(d_in: usize, d_out: usize) -> u64 {
        (d_in * d_out + d_out) as u64
    }

    pub fn apply<T: Real>(&self, tape: &Tape<T>, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = tape.matmul(x, &p[self.weight])?;
        tape.add_row(&y, &p[self.bias])
    }
}

/// LayerNorm over the last axis, gain 1 and bias 0 at initialization.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), &[dim], Init::Full(1.0)),
            bias: store.add(format!("{name}.bias"), &[dim], Init::Zeros),
        }
    }

    pub fn num_params(dim: usize) -> u64 {
        2 * dim as u64
    }

    pub fn apply<T: Real>(&self, tape: &Tape<T>, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        tape.layer_norm(x, &p[self.gain], &p[self.bias], NORM_EPS)
    }
}

/// Largest group count not above 32 that divides `channels`.
pub fn group_count(channels: usize) -> usize {
    (1..=channels.min(32))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

/// Group count for GroupNorm over a single token's channels: the largest
/// `g ≤ 32` dividing `channels` that leaves at least four channels per group.
pub fn token_group_count(channels: usize) -> usize {
    (1..=channels.min(32))
        .rev()
        .find(|g| channels.is_multiple_of(*g) && channels / g >= 4)
        .unwrap_or(1)
}

/// GroupNorm over channels of a `[B, C, S]` tensor.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), &[channels], Init::Full(1.0)),
            bias: store.add(format!("{name}.bias"), &[channels], Init::Zeros),
            groups: group_count(channels),
        }
    }

    /// GroupNorm applied per token (`S = 1`), grouped by [`token_group_count`].
    pub fn per_token<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            groups: token_group_count(channels),
            ..Self::new(store, name, channels)
        }
    }

    pub fn apply<T: Real>(&self, tape: &Tape<T>, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        tape.group_norm(x, self.groups, &p[self.gain], &p[self.bias], NORM_EPS)
    }
}

/// Numeric error unless every value of `x` is finite.
pub(crate) fn check_finite<T: Real>(x: &Var<T>, what: impl FnOnce() -> String) -> Result<()> {
    if x.value().is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite activations in {}", what())))
    }
}
