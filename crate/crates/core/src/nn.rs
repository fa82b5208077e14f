//! Named parameters, layer building blocks and the optimizer.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BatchStats, ConvGeom, Gradients, NormStats, Tape, Var};
use crate::error::{RegoError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in ±1/sqrt(fan_in), fan_in taken from dims 1..4.
    FanIn,
    Zeros,
    Ones,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Running statistics and other non-optimized state.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: [usize; 4],
    pub init: Init,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub kind: ParamKind,
}

/// All tensors of a model keyed by dotted name. Iteration order is the key order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Materializes `specs` in order, drawing random initial values from `rng`.
    pub fn from_specs(specs: &[ParamSpec], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        for spec in specs {
            if store.params.contains_key(&spec.name) {
                return Err(RegoError::Config(format!("duplicate parameter `{}`", spec.name)));
            }
            let value = match spec.init {
                Init::Zeros => Tensor::zeros(spec.shape),
                Init::Ones => Tensor::full(spec.shape, 1.0),
                Init::FanIn => {
                    let fan_in = (spec.shape[1] * spec.shape[2] * spec.shape[3]).max(1);
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Tensor::from_fn(spec.shape, |_, _, _, _| rng.gen_range(-bound..bound))
                }
            };
            store.params.insert(
                spec.name.clone(),
                Param {
                    value,
                    kind: spec.kind,
                },
            );
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) {
        self.params.insert(name.into(), Param { value, kind });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| RegoError::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Copies every entry whose name starts with `prefix` from `other`.
    pub fn merge_prefixed(&mut self, other: &ParamStore, prefix: &str) {
        for (k, v) in other.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.params.insert(k.clone(), v.clone());
        }
    }

    /// Sets every trainable tensor under `prefix` to zero.
    pub fn zero_trainable(&mut self, prefix: &str) {
        for (k, p) in self.params.iter_mut() {
            if k.starts_with(prefix) && p.kind == ParamKind::Trainable {
                p.value = Tensor::zeros(p.value.shape());
            }
        }
    }

    /// Verifies that the store holds exactly the tensors of `specs` with matching shapes.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            let p = self.tensor(&spec.name)?;
            if p.shape() != spec.shape {
                return Err(RegoError::Shape(format!(
                    "parameter `{}` has shape {:?}, architecture expects {:?}",
                    spec.name,
                    p.shape(),
                    spec.shape
                )));
            }
        }
        if self.params.len() != specs.len() {
            let known: std::collections::BTreeSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
            let extra: Vec<&String> = self.params.keys().filter(|k| !known.contains(k.as_str())).collect();
            return Err(RegoError::Config(format!("unexpected parameters {extra:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running averages are collected for update.
    Batch,
    /// Stored running statistics. Deterministic and used for inference and gradient checks.
    Running,
}

/// Binds a [`ParamStore`] to a [`Tape`] for one forward pass.
pub struct Ctx<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    norm: NormMode,
    differentiable: bool,
    leaves: RefCell<BTreeMap<String, Var<'t>>>,
    stat_updates: RefCell<Vec<(String, BatchStats)>>,
}

impl<'t, 's> Ctx<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore, norm: NormMode) -> Self {
        Ctx {
            tape,
            store,
            norm,
            differentiable: true,
            leaves: RefCell::new(BTreeMap::new()),
            stat_updates: RefCell::new(Vec::new()),
        }
    }

    /// Parameters enter the tape as constants.
    pub fn frozen(mut self) -> Self {
        self.differentiable = false;
        self
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn norm_mode(&self) -> NormMode {
        self.norm
    }

    pub fn param(&self, name: &str) -> Result<Var<'t>> {
        if let Some(v) = self.leaves.borrow().get(name) {
            return Ok(*v);
        }
        let p = self
            .store
            .get(name)
            .ok_or_else(|| RegoError::Config(format!("missing parameter `{name}`")))?;
        let v = if self.differentiable && p.kind == ParamKind::Trainable {
            self.tape.var(p.value.clone())
        } else {
            self.tape.constant(p.value.clone())
        };
        self.leaves.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every trainable parameter touched during the pass.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.leaves
            .borrow()
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(*v)))
            .collect()
    }

    pub fn take_stat_updates(&self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.stat_updates.borrow_mut())
    }
}

/// Folds batch statistics into running averages, momentum 0.1.
pub fn apply_stat_updates(store: &mut ParamStore, updates: &[(String, BatchStats)]) -> Result<()> {
    const MOMENTUM: f64 = 0.1;
    for (prefix, stats) in updates {
        for (suffix, values) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let name = format!("{prefix}.{suffix}");
            let p = store
                .get_mut(&name)
                .ok_or_else(|| RegoError::Config(format!("missing buffer `{name}`")))?;
            for (r, v) in p.value.data_mut().iter_mut().zip(values.iter()) {
                *r = (1.0 - MOMENTUM) * *r + MOMENTUM * v;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub geom: ConvGeom,
    pub bias: bool,
    pub init: Init,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, geom: ConvGeom) -> Self {
        Conv2d {
            name: name.into(),
            cin,
            cout,
            geom,
            bias: true,
            init: Init::FanIn,
        }
    }

    pub fn zero_init(mut self) -> Self {
        self.init = Init::Zeros;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec {
            name: format!("{}.weight", self.name),
            shape: [self.cout, self.cin, self.geom.kh, self.geom.kw],
            init: self.init,
            kind: ParamKind::Trainable,
        });
        if self.bias {
            out.push(ParamSpec {
                name: format!("{}.bias", self.name),
                shape: [1, self.cout, 1, 1],
                init: Init::Zeros,
                kind: ParamKind::Trainable,
            });
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let w = ctx.param(&format!("{}.weight", self.name))?;
        let b = if self.bias {
            Some(ctx.param(&format!("{}.bias", self.name))?)
        } else {
            None
        };
        x.conv2d(&w, b.as_ref(), self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNorm2d {
            name: name.into(),
            channels,
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        let shape = [1, self.channels, 1, 1];
        for (suffix, init, kind) in [
            ("gamma", Init::Ones, ParamKind::Trainable),
            ("beta", Init::Zeros, ParamKind::Trainable),
            ("running_mean", Init::Zeros, ParamKind::Buffer),
            ("running_var", Init::Ones, ParamKind::Buffer),
        ] {
            out.push(ParamSpec {
                name: format!("{}.{suffix}", self.name),
                shape,
                init,
                kind,
            });
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let gamma = ctx.param(&format!("{}.gamma", self.name))?;
        let beta = ctx.param(&format!("{}.beta", self.name))?;
        match ctx.norm {
            NormMode::Batch => {
                let (y, stats) = x.batch_norm(&gamma, &beta, NormStats::Batch)?;
                if let Some(stats) = stats {
                    ctx.stat_updates.borrow_mut().push((self.name.clone(), stats));
                }
                Ok(y)
            }
            NormMode::Running => {
                let mean = ctx.store.tensor(&format!("{}.running_mean", self.name))?;
                let var = ctx.store.tensor(&format!("{}.running_var", self.name))?;
                let (y, _) = x.batch_norm(
                    &gamma,
                    &beta,
                    NormStats::Frozen {
                        mean: mean.data(),
                        var: var.data(),
                    },
                )?;
                Ok(y)
            }
        }
    }
}

/// Adaptive moment estimation over the trainable entries of a store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| RegoError::Config(format!("gradient for unknown parameter `{name}`")))?;
            if p.kind != ParamKind::Trainable {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            for (((w, gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn store_is_deterministic_per_seed() {
        let mut specs = Vec::new();
        Conv2d::new("a", 3, 4, ConvGeom::square(3, 1, 1)).specs(&mut specs);
        BatchNorm2d::new("bn", 4).specs(&mut specs);
        let s1 = ParamStore::from_specs(&specs, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let s2 = ParamStore::from_specs(&specs, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(s1, s2);
        s1.check_against(&specs).unwrap();
        assert_eq!(s1.tensor("bn.running_var").unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn check_against_reports_shape_mismatch() {
        let mut specs = Vec::new();
        Conv2d::new("a", 3, 4, ConvGeom::square(3, 1, 1)).specs(&mut specs);
        let mut store = ParamStore::from_specs(&specs, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        store.insert("a.weight", Tensor::zeros([4, 3, 1, 1]), ParamKind::Trainable);
        assert!(matches!(store.check_against(&specs), Err(RegoError::Shape(_))));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::full([1, 1, 1, 2], 3.0), ParamKind::Trainable);
        let mut opt = Adam::new(0.1, 0.9, 0.999);
        for _ in 0..300 {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store, NormMode::Running);
            let x = ctx.param("x").unwrap();
            let loss = x.mul(&x).unwrap().mean();
            let grads = tape.backward(loss).unwrap();
            let pg = ctx.param_grads(&grads);
            drop(ctx);
            opt.step(&mut store, &pg).unwrap();
        }
        assert!(store.tensor("x").unwrap().data().iter().all(|v| v.abs() < 0.05));
    }
}
