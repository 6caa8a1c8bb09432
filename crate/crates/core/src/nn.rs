//! Parameter containers and the small layer set the backbones are built from.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

/// A naming scope for parameters inside one forward pass.
#[derive(Clone)]
pub struct Scope<'g> {
    pub graph: &'g Graph,
    path: String,
    trainable: bool,
}

impl<'g> Scope<'g> {
    pub fn new(graph: &'g Graph, path: &str, trainable: bool) -> Self {
        Self {
            graph,
            path: path.to_string(),
            trainable,
        }
    }

    pub fn child(&self, name: &str) -> Scope<'g> {
        Scope {
            graph: self.graph,
            path: join(&self.path, name),
            trainable: self.trainable,
        }
    }

    /// Same path with trainability overridden.
    pub fn with_trainable(&self, trainable: bool) -> Scope<'g> {
        Scope {
            graph: self.graph,
            path: self.path.clone(),
            trainable,
        }
    }

    pub fn param(&self, name: &str, t: &Tensor) -> Var {
        self.graph.param(&join(&self.path, name), t, self.trainable)
    }

    pub fn path(&self) -> &str {
        &self.path
    }
}

pub fn join(path: &str, name: &str) -> String {
    if path.is_empty() {
        name.to_string()
    } else {
        format!("{path}.{name}")
    }
}

/// Anything holding named parameter tensors. Names produced by `visit` must
/// match the names used when the same component registers itself in a
/// [`Scope`].
pub trait Parameterized {
    fn visit(&self, path: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn named_params(&self, path: &str) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        self.visit(path, &mut |name, t| {
            out.insert(name.to_string(), t.clone());
        });
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    /// Hex SHA-256 over every parameter name, shape and value.
    fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        self.visit("", &mut |name, t| {
            hasher.update(name.as_bytes());
            t.checksum_into(&mut hasher);
        });
        format!("{:x}", hasher.finalize())
    }

    /// Copies values for every name present in `params` (keyed with `path`).
    fn load_params(&mut self, path: &str, params: &BTreeMap<String, Tensor>) -> crate::Result<()> {
        let mut err = None;
        self.visit_mut(path, &mut |name, t| match params.get(name) {
            Some(src) if src.shape() == t.shape() => *t = src.clone(),
            Some(src) => {
                err.get_or_insert_with(|| {
                    crate::Error::invalid(format!(
                        "parameter {name}: shape {:?} does not match {:?}",
                        src.shape(),
                        t.shape()
                    ))
                });
            }
            None => {
                err.get_or_insert_with(|| crate::Error::invalid(format!("missing parameter {name}")));
            }
        });
        err.map_or(Ok(()), Err)
    }
}

/// Affine layer `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, gain: f64, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[fan_in, fan_out], gain / (fan_in as f64).sqrt(), rng),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    /// `x: [rows, in]` -> `[rows, out]`.
    pub fn forward(&self, s: &Scope, x: Var) -> Var {
        let g = s.graph;
        let w = s.param("weight", &self.weight);
        let b = s.param("bias", &self.bias);
        g.add_row_bias(g.matmul(x, w), b)
    }
}

impl Parameterized for Linear {
    fn visit(&self, path: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(path, "weight"), &self.weight);
        f(&join(path, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(path, "weight"), &mut self.weight);
        f(&join(path, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv2d {
    /// He-normal initialisation.
    pub fn new<R: Rng + ?Sized>(spec: ConvSpec, rng: &mut R) -> Self {
        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
        Self {
            spec,
            weight: Tensor::randn(
                &[spec.out_channels, spec.in_channels, spec.kernel, spec.kernel],
                (2.0 / fan_in as f64).sqrt(),
                rng,
            ),
            bias: Tensor::zeros(&[spec.out_channels]),
        }
    }

    pub fn k3s2(in_channels: usize, out_channels: usize) -> ConvSpec {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 2,
            pad: 1,
        }
    }

    pub fn k3s1(in_channels: usize, out_channels: usize) -> ConvSpec {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 1,
            pad: 1,
        }
    }

    pub fn k1(in_channels: usize, out_channels: usize) -> ConvSpec {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: 1,
            stride: 1,
            pad: 0,
        }
    }

    /// `x: [in_channels, h, w]` -> `[out_channels, oh, ow]`.
    pub fn forward(&self, s: &Scope, x: Var) -> Var {
        let w = s.param("weight", &self.weight);
        let b = s.param("bias", &self.bias);
        s.graph.conv2d(x, w, b, self.spec.stride, self.spec.pad)
    }
}

impl Parameterized for Conv2d {
    fn visit(&self, path: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(path, "weight"), &self.weight);
        f(&join(path, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(path, "weight"), &mut self.weight);
        f(&join(path, "bias"), &mut self.bias);
    }
}

impl<T: Parameterized> Parameterized for Vec<T> {
    fn visit(&self, path: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(path, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(path, &i.to_string()), f);
        }
    }
}
