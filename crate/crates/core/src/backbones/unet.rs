use std::rc::Rc;

use rand::Rng;

use super::ModelConfig;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::gray::GrayImage;
use crate::nn::{join, Conv2d, Linear, Parameterized, Scope};
use crate::tensor::{ResampleMap, ResampleMode, Tensor};

/// Residual cross-attention from spatial positions to the implicit tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

impl CrossAttention {
    pub fn new<R: Rng + ?Sized>(channels: usize, d_t: usize, attn: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::new(channels, attn, 1.0, rng),
            key: Linear::new(d_t, attn, 1.0, rng),
            value: Linear::new(d_t, channels, 1.0, rng),
        }
    }

    /// `x: [c, h, w]`, `tokens: [K, d_t]` -> `[c, h, w]`.
    pub fn forward(&self, s: &Scope, x: Var, tokens: Var) -> Var {
        let g = s.graph;
        let shape = g.shape(x);
        let (c, hw) = (shape[0], shape[1] * shape[2]);
        let seq = g.transpose(g.reshape(x, &[c, hw]));
        let q = self.query.forward(&s.child("query"), seq);
        let k = self.key.forward(&s.child("key"), tokens);
        let v = self.value.forward(&s.child("value"), tokens);
        let scores = g.scale(g.matmul(q, g.transpose(k)), 1.0 / (self.query.fan_out() as f64).sqrt());
        let attended = g.matmul(g.softmax_rows(scores), v);
        let back = g.reshape(g.transpose(attended), &shape);
        g.add(x, back)
    }
}

impl Parameterized for CrossAttention {
    fn visit(&self, path: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.query.visit(&join(path, "query"), f);
        self.key.visit(&join(path, "key"), f);
        self.value.visit(&join(path, "value"), f);
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.query.visit_mut(&join(path, "query"), f);
        self.key.visit_mut(&join(path, "key"), f);
        self.value.visit_mut(&join(path, "value"), f);
    }
}

/// Small text-conditioned UNet. Two stride-2 stem convolutions bring the
/// image to quarter resolution, followed by two down and two up stages with
/// additive skips, each ending in a cross-attention block. Output is
/// `[d_f, ceil(H/4), ceil(W/4)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub stem: Vec<Conv2d>,
    pub down: Vec<Conv2d>,
    pub up: Vec<Conv2d>,
    pub attention: Vec<CrossAttention>,
    pub out: Conv2d,
    pub d_t: usize,
}

fn nearest_to(g: &Graph, x: Var, h: usize, w: usize) -> Var {
    let s = g.shape(x);
    if (s[1], s[2]) == (h, w) {
        return x;
    }
    g.resample(x, Rc::new(ResampleMap::new(ResampleMode::Nearest, s[1], s[2], h, w)))
}

impl FeatureExtractor {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let c = cfg.unet_channels;
        Self {
            stem: vec![Conv2d::new(Conv2d::k3s2(1, c), rng), Conv2d::new(Conv2d::k3s2(c, c), rng)],
            down: vec![Conv2d::new(Conv2d::k3s2(c, c), rng), Conv2d::new(Conv2d::k3s2(c, c), rng)],
            up: vec![Conv2d::new(Conv2d::k3s1(c, c), rng), Conv2d::new(Conv2d::k3s1(c, c), rng)],
            attention: (0..4).map(|_| CrossAttention::new(c, cfg.d_t, cfg.attention_dim, rng)).collect(),
            out: Conv2d::new(Conv2d::k1(c, cfg.d_f), rng),
            d_t: cfg.d_t,
        }
    }

    pub fn forward(&self, s: &Scope, image: Var, tokens: Var) -> Result<Var> {
        let g = s.graph;
        let ts = g.shape(tokens);
        if ts.len() != 2 || ts[1] != self.d_t {
            return Err(Error::invalid(format!("tokens must be [K, {}], got {:?}", self.d_t, ts)));
        }
        if g.shape(image)[0] != 1 {
            return Err(Error::invalid("feature extractor expects a single-channel image"));
        }
        let conv = |i: &str, c: &Conv2d, x: Var| g.relu(c.forward(&s.child(i), x));
        let attn = |i: usize, x: Var| self.attention[i].forward(&s.child(&format!("attention.{i}")), x, tokens);

        let x0 = conv("stem.0", &self.stem[0], image);
        let quarter = conv("stem.1", &self.stem[1], x0);
        let d1 = attn(0, conv("down.0", &self.down[0], quarter));
        let d2 = attn(1, conv("down.1", &self.down[1], d1));
        let s1 = g.shape(d1);
        let u1 = g.add(nearest_to(g, d2, s1[1], s1[2]), d1);
        let u1 = attn(2, conv("up.0", &self.up[0], u1));
        let sq = g.shape(quarter);
        let u2 = g.add(nearest_to(g, u1, sq[1], sq[2]), quarter);
        let u2 = attn(3, conv("up.1", &self.up[1], u2));
        Ok(self.out.forward(&s.child("out"), u2))
    }

    /// Plain-tensor convenience wrapper: `tokens: [K, d_t]`.
    pub fn extract(&self, image: &GrayImage, tokens: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let x = g.constant(image.to_tensor());
        let t = g.constant(tokens.clone());
        let f = self.forward(&Scope::new(&g, "unet", false), x, t)?;
        Ok(g.value(f))
    }
}

impl Parameterized for FeatureExtractor {
    fn visit(&self, path: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.stem.visit(&join(path, "stem"), f);
        self.down.visit(&join(path, "down"), f);
        self.up.visit(&join(path, "up"), f);
        self.attention.visit(&join(path, "attention"), f);
        self.out.visit(&join(path, "out"), f);
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.stem.visit_mut(&join(path, "stem"), f);
        self.down.visit_mut(&join(path, "down"), f);
        self.up.visit_mut(&join(path, "up"), f);
        self.attention.visit_mut(&join(path, "attention"), f);
        self.out.visit_mut(&join(path, "out"), f);
    }
}
