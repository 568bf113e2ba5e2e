//! Named parameter storage and the handful of layers the network is built
//! from. Layers only hold [`ParamId`]s; values live in a [`ParamStore`] so
//! the same structure can run in `f32` or `f64`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::kernels::ConvSpec;
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a parameter; weight decay applies to [`ParamKind::Weight`] only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            kind,
            value,
        });
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

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
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

    /// Registers every parameter as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<Bound> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.param(p.value.clone()))
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }
}

/// Tape handles of a [`ParamStore`]'s parameters, in store order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Creates parameters with the network's initialization scheme under a
/// dotted name prefix.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Element> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A builder whose names are prefixed with `name.`.
    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Truncated normal at ±2σ.
    pub fn trunc_normal(&mut self, name: &str, shape: Vec<usize>, std: f64) -> ParamId {
        let normal = Normal::new(0.0, std).expect("positive std");
        let value = Tensor::from_fn(shape, |_| loop {
            let v: f64 = normal.sample(self.rng);
            if v.abs() <= 2.0 * std {
                break T::from_f64_lossy(v);
            }
        });
        self.store.push(self.full_name(name), ParamKind::Weight, value)
    }

    /// Normal with std `sqrt(2 / fan_out)`, `fan_out = k·k·C_out / groups`.
    pub fn conv_weight(&mut self, name: &str, shape: Vec<usize>, groups: usize) -> ParamId {
        let fan_out = shape[0] * shape[2] * shape[3] / groups;
        let normal = Normal::new(0.0, (2.0 / fan_out as f64).sqrt()).expect("positive std");
        let value = Tensor::from_fn(shape, |_| T::from_f64_lossy(normal.sample(self.rng)));
        self.store.push(self.full_name(name), ParamKind::Weight, value)
    }

    pub fn constant(&mut self, name: &str, kind: ParamKind, shape: Vec<usize>, value: f64) -> ParamId {
        self.store
            .push(self.full_name(name), kind, Tensor::full(shape, T::from_f64_lossy(value)))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn uniform_seed(&mut self) -> u64 {
        self.rng.gen()
    }
}

/// Token-wise affine map on an `n×in` matrix.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Element>(b: &mut ParamBuilder<'_, T>, name: &str, in_features: usize, out_features: usize) -> Self {
        let mut b = b.sub(name);
        let weight = b.trunc_normal("weight", vec![in_features, out_features], 0.02);
        let bias = b.constant("bias", ParamKind::Bias, vec![out_features], 0.0);
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        tape.add_bias(y, p.var(self.bias))
    }

    pub fn num_params(&self) -> usize {
        self.in_features * self.out_features + self.out_features
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
    ) -> Result<Self> {
        if spec.groups == 0 || in_channels % spec.groups != 0 || out_channels % spec.groups != 0 {
            return Err(Error::config(
                name,
                format!(
                    "{} groups incompatible with {in_channels}→{out_channels} channels",
                    spec.groups
                ),
            ));
        }
        let mut b = b.sub(name);
        let weight = b.conv_weight(
            "weight",
            vec![out_channels, in_channels / spec.groups, kernel, kernel],
            spec.groups,
        );
        let bias = bias.then(|| b.constant("bias", ParamKind::Bias, vec![out_channels], 0.0));
        Ok(Self {
            weight,
            bias,
            spec,
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.weight), self.bias.map(|b| p.var(b)), self.spec)
    }

    pub fn num_params(&self) -> usize {
        let w = self.out_channels * (self.in_channels / self.spec.groups) * self.kernel * self.kernel;
        w + if self.bias.is_some() { self.out_channels } else { 0 }
    }

    /// Multiply-accumulates for an `out_h × out_w` output grid.
    pub fn macs(&self, out_h: usize, out_w: usize) -> u64 {
        (self.out_channels * (self.in_channels / self.spec.groups) * self.kernel * self.kernel) as u64
            * (out_h * out_w) as u64
    }
}

/// Layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub features: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Element>(b: &mut ParamBuilder<'_, T>, name: &str, features: usize, eps: f64) -> Self {
        let mut b = b.sub(name);
        Self {
            gamma: b.constant("weight", ParamKind::Norm, vec![features], 1.0),
            beta: b.constant("bias", ParamKind::Norm, vec![features], 0.0),
            features,
            eps,
        }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta), self.eps)
    }

    pub fn num_params(&self) -> usize {
        2 * self.features
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new<T: Element>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
        groups: usize,
        eps: f64,
    ) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::config(
                "decoder.norm_groups",
                format!("{groups} groups do not divide {channels} channels"),
            ));
        }
        let mut b = b.sub(name);
        Ok(Self {
            gamma: b.constant("weight", ParamKind::Norm, vec![channels], 1.0),
            beta: b.constant("bias", ParamKind::Norm, vec![channels], 0.0),
            channels,
            groups,
            eps,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.group_norm(x, p.var(self.gamma), p.var(self.beta), self.groups, self.eps)
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }
}

/// `C×H×W` map to `(H·W)×C` tokens.
pub fn map_to_tokens<T: Element>(tape: &mut Tape<T>, map: Var) -> Result<Var> {
    let s = tape.shape(map).to_vec();
    if s.len() != 3 {
        return Err(Error::dim(format!("expected C×H×W map, got {s:?}")));
    }
    let flat = tape.reshape(map, &[s[0], s[1] * s[2]])?;
    tape.permute(flat, &[1, 0])
}

/// `(H·W)×C` tokens back to a `C×H×W` map.
pub fn tokens_to_map<T: Element>(tape: &mut Tape<T>, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 2 || s[0] != h * w {
        return Err(Error::dim(format!("{s:?} tokens do not form a {h}×{w} grid")));
    }
    let t = tape.permute(tokens, &[1, 0])?;
    tape.reshape(t, &[s[1], h, w])
}
