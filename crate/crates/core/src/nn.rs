//! Forward-pass context and the small set of layers the model is built from.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{BatchStats, ConvGeom, Real, Tape, Tensor, Var};

pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: the tape plus the parameter leaves pulled onto it.
pub struct Graph<'s, T: Real = f32> {
    pub tape: Tape<T>,
    store: &'s ParamStore,
    mode: Mode,
    leaves: HashMap<String, Var>,
    bn_updates: Vec<(String, BatchStats<T>)>,
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            store,
            mode,
            leaves: HashMap::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// The leaf for parameter `name`, created on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.leaves.get(name) {
            return Ok(v);
        }
        let p = self
            .store
            .param(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let v = self.tape.leaf(p.value.cast(), p.trainable);
        self.leaves.insert(name.to_string(), v);
        Ok(v)
    }

    /// Uses `var` wherever parameter `name` is requested. Lets gradient
    /// checks differentiate with respect to a single weight.
    pub fn bind(&mut self, name: &str, var: Var) -> Result<()> {
        let p = self
            .store
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if p.shape() != self.tape.shape(var) {
            return Err(Error::Param(format!(
                "binding `{name}` {:?} to a {:?} value",
                p.shape(),
                self.tape.shape(var)
            )));
        }
        self.leaves.insert(name.to_string(), var);
        Ok(())
    }

    fn buffer(&self, name: &str) -> Result<Vec<T>> {
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        Ok(t.data().iter().map(|&v| T::from_f32(v)).collect())
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    /// Gradients of every trainable parameter touched by this pass.
    pub fn gradients(&self) -> BTreeMap<String, Tensor<f32>> {
        let mut out = BTreeMap::new();
        for (name, &v) in &self.leaves {
            let trainable = self.store.param(name).is_some_and(|p| p.trainable);
            if !trainable {
                continue;
            }
            if let Some(g) = self.tape.grad(v) {
                out.insert(name.clone(), g.cast());
            }
        }
        out
    }

    pub fn take_bn_updates(&mut self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.bn_updates)
    }
}

/// Folds training batch statistics into the running averages.
pub fn apply_bn_updates<T: Real>(
    store: &mut ParamStore,
    updates: &[(String, BatchStats<T>)],
) -> Result<()> {
    for (prefix, stats) in updates {
        for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let name = format!("{prefix}.{suffix}");
            let p = store
                .get_mut(&name)
                .ok_or_else(|| Error::UnknownParam(name.clone()))?;
            for (r, &b) in p.value.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b.as_f32();
            }
        }
    }
    Ok(())
}

fn he_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let std = (2.0 / fan_in.max(1) as f32).sqrt();
    let dist = Normal::new(0.0f32, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

fn uniform_fan_in(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// `y = x W + b` on a `[rows, in]` matrix. Weight stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn declare(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let w = uniform_fan_in(rng, &[self.in_dim, self.out_dim], self.in_dim);
        store.insert(&self.weight_name(), w, true)?;
        store.insert(&self.bias_name(), Tensor::zeros(&[self.out_dim]), true)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight_name())?;
        let b = g.param(&self.bias_name())?;
        let y = g.tape.matmul(x, w)?;
        g.tape.add_bias(y, b)
    }
}

/// linear -> relu -> linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    /// Hidden width equal to the output width.
    pub fn new(name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::with_hidden(name, in_dim, out_dim, out_dim)
    }

    pub fn with_hidden(name: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Self {
            first: Linear::new(format!("{name}.fc1"), in_dim, hidden),
            second: Linear::new(format!("{name}.fc2"), hidden, out_dim),
        }
    }

    pub fn declare(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.first.declare(store, rng)?;
        self.second.declare(store, rng)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.first.forward(g, x)?;
        let h = g.tape.relu(h);
        self.second.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub geom: ConvGeom,
    pub bias: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            geom: ConvGeom::default(),
            bias: true,
        }
    }

    pub fn geom(mut self, geom: ConvGeom) -> Self {
        self.geom = geom;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn declare(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let k = self.kernel;
        let fan_in = self.in_ch * k * k;
        let w = he_normal(rng, &[self.out_ch, self.in_ch, k, k], fan_in);
        store.insert(&self.weight_name(), w, true)?;
        if self.bias {
            store.insert(&self.bias_name(), Tensor::zeros(&[self.out_ch]), true)?;
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight_name())?;
        let y = g.tape.conv2d(x, w, self.geom)?;
        if self.bias {
            let b = g.param(&self.bias_name())?;
            g.tape.add_bias(y, b)
        } else {
            Ok(y)
        }
    }
}

/// Batch norm over axis 1 with learnable affine and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }

    pub fn declare(&self, store: &mut ParamStore) -> Result<()> {
        let c = self.channels;
        store.insert(&format!("{}.gamma", self.name), Tensor::full(&[c], 1.0), true)?;
        store.insert(&format!("{}.beta", self.name), Tensor::zeros(&[c]), true)?;
        store.insert(&format!("{}.running_mean", self.name), Tensor::zeros(&[c]), false)?;
        store.insert(&format!("{}.running_var", self.name), Tensor::full(&[c], 1.0), false)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let gamma = g.param(&format!("{}.gamma", self.name))?;
        let beta = g.param(&format!("{}.beta", self.name))?;
        let eps = T::of(BN_EPS);
        if g.training() {
            let (y, stats) = g.tape.batch_norm(x, gamma, beta, None, eps)?;
            if let Some(stats) = stats {
                g.bn_updates.push((self.name.clone(), stats));
            }
            Ok(y)
        } else {
            let rm = g.buffer(&format!("{}.running_mean", self.name))?;
            let rv = g.buffer(&format!("{}.running_var", self.name))?;
            let (y, _) = g.tape.batch_norm(x, gamma, beta, Some((&rm, &rv)), eps)?;
            Ok(y)
        }
    }
}

/// conv (no bias) -> batch norm -> relu.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, kernel: usize, geom: ConvGeom) -> Self {
        Self {
            conv: Conv2d::new(format!("{name}.conv"), in_ch, out_ch, kernel)
                .geom(geom)
                .no_bias(),
            bn: BatchNorm::new(format!("{name}.bn"), out_ch),
        }
    }

    pub fn declare(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.conv.declare(store, rng)?;
        self.bn.declare(store)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        Ok(g.tape.relu(y))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn param_leaves_are_cached() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Linear::new("fc", 3, 2).declare(&mut store, &mut rng).unwrap();
        let mut g: Graph<f32> = Graph::new(&store, Mode::Train);
        let a = g.param("fc.weight").unwrap();
        let b = g.param("fc.weight").unwrap();
        assert_eq!(a, b);
        assert!(g.param("nope").is_err());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new("bn", 1);
        bn.declare(&mut store).unwrap();
        let updates = {
            let mut g: Graph<f32> = Graph::new(&store, Mode::Train);
            let x = g.constant(Tensor::new(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap());
            bn.forward(&mut g, x).unwrap();
            g.take_bn_updates()
        };
        apply_bn_updates(&mut store, &updates).unwrap();
        // batch mean 2, unbiased var 2
        assert!((store.get("bn.running_mean").unwrap().data()[0] - 0.2).abs() < 1e-6);
        assert!((store.get("bn.running_var").unwrap().data()[0] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn eval_batch_norm_is_bit_reproducible() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new("bn", 2);
        bn.declare(&mut store).unwrap();
        store
            .set("bn.running_mean", Tensor::new(&[2], vec![0.3, -0.1]).unwrap())
            .unwrap();
        let input = Tensor::from_fn(&[3, 2, 2, 2], |i| (i as f32 * 0.77).sin());
        let run = || {
            let mut g: Graph<f32> = Graph::new(&store, Mode::Eval);
            let x = g.constant(input.clone());
            let y = bn.forward(&mut g, x).unwrap();
            g.tape.value(y).clone()
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
