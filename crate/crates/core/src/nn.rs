//! Named parameter storage and the small layers built on it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Padding, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<S> {
    pub name: String,
    pub value: Tensor<S>,
}

/// Ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    entries: Vec<ParamEntry<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Records every parameter as a leaf on `g`; `trainable` selects which
    /// leaves track gradients.
    pub fn bind(&self, g: &mut Graph<S>, trainable: impl Fn(&str) -> bool) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|e| g.leaf(e.value.clone(), trainable(&e.name)))
                .collect(),
        }
    }

    pub fn bind_all(&self, g: &mut Graph<S>) -> Bound {
        self.bind(g, |_| true)
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                })
                .collect(),
        }
    }
}

/// Graph leaves for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps leaves created in [`ParamStore`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Registers parameters under a name prefix with seeded initialization.
pub struct Builder<'a, S> {
    pub store: &'a mut ParamStore<S>,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

/// Standard deviation of truncated-normal weight initialization.
pub const INIT_STD: f64 = 0.02;

impl<'a, S: Scalar> Builder<'a, S> {
    pub fn new(store: &'a mut ParamStore<S>, rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Builder<'_, S>) -> T) -> T {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let mut inner = Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        };
        f(&mut inner)
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<S>) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, value)
    }

    /// Normal(0, std) resampled outside two standard deviations.
    pub fn trunc_normal(&mut self, name: &str, shape: impl Into<Shape>, std: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_, _, _, _| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break S::lit(z * std);
            }
        });
        self.tensor(name, t)
    }

    pub fn uniform(&mut self, name: &str, shape: impl Into<Shape>, lo: f64, hi: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_, _, _, _| S::lit(rng.gen_range(lo..hi)));
        self.tensor(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: impl Into<Shape>) -> ParamId {
        self.tensor(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: impl Into<Shape>) -> ParamId {
        self.tensor(name, Tensor::ones(shape))
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum WeightInit {
    TruncNormal,
    Zeros,
}

/// Convolution layer; 1×1 kernels double as per-pixel linear maps.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        b: &mut Builder<'_, S>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
        init: WeightInit,
    ) -> Self {
        b.scope(name, |b| {
            let weight = match init {
                WeightInit::TruncNormal => b.trunc_normal("weight", [cout, cin, k, k], INIT_STD),
                WeightInit::Zeros => b.zeros("weight", [cout, cin, k, k]),
            };
            let bias = bias.then(|| b.zeros("bias", [1, cout, 1, 1]));
            Conv2d {
                weight,
                bias,
                stride,
                padding,
            }
        })
    }

    /// 1×1 convolution acting as a channel-wise linear map.
    pub fn linear<S: Scalar>(b: &mut Builder<'_, S>, name: &str, cin: usize, cout: usize, bias: bool, init: WeightInit) -> Self {
        Self::new(b, name, cin, cout, 1, 1, Padding::Valid, bias, init)
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.weight), self.bias.map(|b| p.var(b)), self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(b: &mut Builder<'_, S>, name: &str, channels: usize) -> Self {
        b.scope(name, |b| LayerNorm {
            gamma: b.ones("gamma", [1, channels, 1, 1]),
            beta: b.zeros("beta", [1, channels, 1, 1]),
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta))
    }
}
