//! Named parameter containers and the small layer vocabulary the encoder and
//! decoder are built from.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// How a parameter is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal(0, σ) truncated at ±2σ.
    TruncNormal(f64),
    /// Normal(0, √(2/fan_in)).
    FanIn(usize),
    Constant(f64),
}

/// Declaration of one named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Named parameter map; ordered so iteration (and checkpoints) are deterministic.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Params<T = f32> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> Params<T> {
    pub fn new() -> Self {
        Params {
            map: BTreeMap::new(),
        }
    }

    /// Draw every declared parameter, in declaration order, from one seeded stream.
    pub fn init(decls: &[ParamDecl], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = BTreeMap::new();
        for d in decls {
            let n: usize = d.shape.iter().product();
            let data: Vec<T> = match d.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Constant(c) => vec![T::c(c); n],
                Init::TruncNormal(std) => {
                    let dist = Normal::new(0.0, std).expect("valid std");
                    (0..n)
                        .map(|_| loop {
                            let v: f64 = dist.sample(&mut rng);
                            if v.abs() <= 2.0 * std {
                                break T::c(v);
                            }
                        })
                        .collect()
                }
                Init::FanIn(fan_in) => {
                    let dist = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).expect("valid std");
                    (0..n).map(|_| T::c(dist.sample(&mut rng))).collect()
                }
            };
            map.insert(d.name.clone(), Tensor::from_parts(d.shape.clone(), data));
        }
        Params { map }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.map.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Float>(&self) -> Params<U> {
        Params {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Apply `f` to every tensor whose name starts with `prefix`.
    pub fn map_prefix(&mut self, prefix: &str, f: impl Fn(&str, &mut Tensor<T>)) {
        for (k, v) in self.map.iter_mut() {
            if k.starts_with(prefix) {
                f(k, v);
            }
        }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (k, v) in &self.map {
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
            for &d in v.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in v.data() {
                h.update(x.f64().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Check that names and shapes agree exactly with `decls`.
    pub fn check_against(&self, decls: &[ParamDecl]) -> std::result::Result<(), String> {
        if decls.len() != self.map.len() {
            return Err(format!(
                "{} parameters stored, configuration declares {}",
                self.map.len(),
                decls.len()
            ));
        }
        for d in decls {
            let t = self
                .map
                .get(&d.name)
                .ok_or_else(|| format!("parameter `{}` missing", d.name))?;
            if t.shape() != d.shape.as_slice() {
                return Err(format!(
                    "parameter `{}` has shape {:?}, configuration expects {:?}",
                    d.name,
                    t.shape(),
                    d.shape
                ));
            }
        }
        Ok(())
    }
}

/// Parameters bound into one graph, looked up by name.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Bind all parameters as gradient-receiving leaves (or constants when
    /// `trainable` is false).
    pub fn new<T: Float>(g: &mut Graph<T>, params: &Params<T>, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter `{name}` not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

pub(crate) fn join_name(prefix: &str, leaf: &str) -> String {
    format!("{prefix}.{leaf}")
}

/// Per-location linear map over the last axis (`x·W + b`).
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub bias: bool,
    pub init: Init,
}

impl Linear {
    /// Transformer-style projection (σ = 0.02, optional bias).
    pub fn proj(name: impl Into<String>, cin: usize, cout: usize, bias: bool) -> Self {
        Linear {
            name: name.into(),
            cin,
            cout,
            bias,
            init: Init::TruncNormal(0.02),
        }
    }

    /// 1×1 convolution (fan-in init, with bias).
    pub fn conv1x1(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Linear {
            name: name.into(),
            cin,
            cout,
            bias: true,
            init: Init::FanIn(cin),
        }
    }

    pub fn weight_name(&self) -> String {
        join_name(&self.name, "weight")
    }

    pub fn declare(&self, out: &mut Vec<ParamDecl>) {
        out.push(ParamDecl {
            name: self.weight_name(),
            shape: vec![self.cin, self.cout],
            init: self.init,
        });
        if self.bias {
            out.push(ParamDecl {
                name: join_name(&self.name, "bias"),
                shape: vec![self.cout],
                init: Init::Zeros,
            });
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.var(&self.weight_name())?;
        let b = if self.bias {
            Some(p.var(&join_name(&self.name, "bias"))?)
        } else {
            None
        };
        g.linear(x, w, b)
    }
}

/// Dense `k × k` convolution over a channels-last map.
#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(name: impl Into<String>, k: usize, cin: usize, cout: usize, stride: usize, pad: usize) -> Self {
        Conv {
            name: name.into(),
            k,
            cin,
            cout,
            stride,
            pad,
        }
    }

    /// 3×3, stride 1, same padding.
    pub fn same3(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self::new(name, 3, cin, cout, 1, 1)
    }

    pub fn declare(&self, out: &mut Vec<ParamDecl>) {
        out.push(ParamDecl {
            name: join_name(&self.name, "weight"),
            shape: vec![self.k, self.k, self.cin, self.cout],
            init: Init::FanIn(self.k * self.k * self.cin),
        });
        out.push(ParamDecl {
            name: join_name(&self.name, "bias"),
            shape: vec![self.cout],
            init: Init::Zeros,
        });
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.var(&join_name(&self.name, "weight"))?;
        let b = p.var(&join_name(&self.name, "bias"))?;
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Depthwise `k × k` convolution.
#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub name: String,
    pub k: usize,
    pub channels: usize,
}

impl DepthwiseConv {
    pub fn declare(&self, out: &mut Vec<ParamDecl>) {
        out.push(ParamDecl {
            name: join_name(&self.name, "weight"),
            shape: vec![self.k, self.k, self.channels],
            init: Init::FanIn(self.k * self.k),
        });
        out.push(ParamDecl {
            name: join_name(&self.name, "bias"),
            shape: vec![self.channels],
            init: Init::Zeros,
        });
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.var(&join_name(&self.name, "weight"))?;
        let b = p.var(&join_name(&self.name, "bias"))?;
        g.depthwise_conv(x, w, b)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub channels: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        LayerNorm {
            name: name.into(),
            channels,
        }
    }

    pub fn declare(&self, out: &mut Vec<ParamDecl>) {
        out.push(ParamDecl {
            name: join_name(&self.name, "gamma"),
            shape: vec![self.channels],
            init: Init::Ones,
        });
        out.push(ParamDecl {
            name: join_name(&self.name, "beta"),
            shape: vec![self.channels],
            init: Init::Zeros,
        });
    }

    pub fn affine(&self, p: &Bound) -> Result<(Var, Var)> {
        Ok((
            p.var(&join_name(&self.name, "gamma"))?,
            p.var(&join_name(&self.name, "beta"))?,
        ))
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let aff = self.affine(p)?;
        g.layer_norm(x, Some(aff), LAYER_NORM_EPS)
    }
}
