use std::rc::Rc;

use rand::Rng;

use super::ModelConfig;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, Linear, Parameterized, Scope};
use crate::tensor::{ResampleMap, ResampleMode, Tensor};

/// Class-agnostic masks for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub height: usize,
    pub width: usize,
    /// `[Q, H*W]`
    pub mask_logits: Tensor,
    /// `[Q, d_t]`
    pub mask_embeddings: Tensor,
    /// One `[Q, d_q]` matrix per decoder layer.
    pub decoder_trace: Vec<Tensor>,
}

impl MaskSet {
    pub fn queries(&self) -> usize {
        self.mask_logits.shape()[0]
    }

    /// Pixel membership `logit > 0` for query `q`.
    pub fn binary_mask(&self, q: usize) -> Vec<bool> {
        let n = self.height * self.width;
        self.mask_logits.data()[q * n..(q + 1) * n].iter().map(|&v| v > 0.0).collect()
    }
}

/// Query cross-attention over pixel features followed by a feed-forward
/// block, both residual.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub query: Linear,
    pub output: Linear,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl DecoderLayer {
    fn new<R: Rng + ?Sized>(d_q: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::new(d_q, d_q, 1.0, rng),
            output: Linear::new(d_q, d_q, 0.5, rng),
            ff1: Linear::new(d_q, 2 * d_q, 1.0, rng),
            ff2: Linear::new(2 * d_q, d_q, 0.5, rng),
        }
    }

    /// `queries: [Q, d_q]`, `memory: [n, d_q]`.
    fn forward(&self, s: &Scope, queries: Var, memory: Var) -> Var {
        let g = s.graph;
        let d = self.query.fan_in() as f64;
        let q = self.query.forward(&s.child("query"), queries);
        let attn = g.softmax_rows(g.scale(g.matmul(q, g.transpose(memory)), 1.0 / d.sqrt()));
        let read = self.output.forward(&s.child("output"), g.matmul(attn, memory));
        let x = g.add(queries, read);
        let ff = self
            .ff2
            .forward(&s.child("ff2"), g.relu(self.ff1.forward(&s.child("ff1"), x)));
        g.add(x, ff)
    }
}

impl Parameterized for DecoderLayer {
    fn visit(&self, path: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.query.visit(&join(path, "query"), f);
        self.output.visit(&join(path, "output"), f);
        self.ff1.visit(&join(path, "ff1"), f);
        self.ff2.visit(&join(path, "ff2"), f);
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.query.visit_mut(&join(path, "query"), f);
        self.output.visit_mut(&join(path, "output"), f);
        self.ff1.visit_mut(&join(path, "ff1"), f);
        self.ff2.visit_mut(&join(path, "ff2"), f);
    }
}

/// Query-based mask generator: pixel decoder, `Q` learned queries, `L`
/// decoder layers, and heads producing mask kernels and mask embeddings.
/// Masks are predicted at feature resolution and bilinearly upsampled.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskGenerator {
    pub pixel: Vec<Conv2d>,
    pub queries: Tensor,
    pub layers: Vec<DecoderLayer>,
    pub kernel: Linear,
    pub embed: Linear,
    pub d_f: usize,
}

pub(crate) struct MaskForward {
    pub logits: Var,
    pub embeddings: Var,
    pub trace: Vec<Var>,
}

impl MaskGenerator {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            pixel: vec![
                Conv2d::new(Conv2d::k1(cfg.d_f, cfg.d_q), rng),
                Conv2d::new(Conv2d::k1(cfg.d_q, cfg.d_q), rng),
            ],
            queries: Tensor::randn(&[cfg.queries, cfg.d_q], 1.0, rng),
            layers: (0..cfg.decoder_layers).map(|_| DecoderLayer::new(cfg.d_q, rng)).collect(),
            kernel: Linear::new(cfg.d_q, cfg.d_q, 1.0, rng),
            embed: Linear::new(cfg.d_q, cfg.d_t, 1.0, rng),
            d_f: cfg.d_f,
        }
    }

    pub(crate) fn forward(&self, s: &Scope, features: Var, height: usize, width: usize) -> Result<MaskForward> {
        let g = s.graph;
        let fs = g.shape(features);
        if fs.len() != 3 || fs[0] != self.d_f {
            return Err(Error::invalid(format!(
                "mask generator expects {} feature channels, got {:?}",
                self.d_f, fs
            )));
        }
        let (fh, fw) = (fs[1], fs[2]);
        let p0 = g.relu(self.pixel[0].forward(&s.child("pixel.0"), features));
        let pix = self.pixel[1].forward(&s.child("pixel.1"), p0);
        let d_q = g.shape(pix)[0];
        let pix_flat = g.reshape(pix, &[d_q, fh * fw]);
        let memory = g.transpose(pix_flat);

        let mut x = s.param("queries", &self.queries);
        let mut trace = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&s.child(&format!("layers.{i}")), x, memory);
            trace.push(x);
        }
        let kernel = self.kernel.forward(&s.child("kernel"), x);
        let q = g.shape(kernel)[0];
        let low = g.scale(g.matmul(kernel, pix_flat), 1.0 / (d_q as f64).sqrt());
        let map = Rc::new(ResampleMap::new(ResampleMode::Bilinear, fh, fw, height, width));
        let up = g.resample(g.reshape(low, &[q, fh, fw]), map);
        let logits = g.reshape(up, &[q, height * width]);
        let embeddings = self.embed.forward(&s.child("embed"), x);
        Ok(MaskForward {
            logits,
            embeddings,
            trace,
        })
    }

    /// Plain-tensor wrapper: masks at `height x width` from `features`.
    pub fn generate(&self, features: &Tensor, height: usize, width: usize) -> Result<MaskSet> {
        let g = Graph::new();
        let f = g.constant(features.clone());
        let out = self.forward(&Scope::new(&g, "masks", false), f, height, width)?;
        Ok(MaskSet {
            height,
            width,
            mask_logits: g.value(out.logits),
            mask_embeddings: g.value(out.embeddings),
            decoder_trace: out.trace.iter().map(|&v| g.value(v)).collect(),
        })
    }
}

impl Parameterized for MaskGenerator {
    fn visit(&self, path: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.pixel.visit(&join(path, "pixel"), f);
        f(&join(path, "queries"), &self.queries);
        self.layers.visit(&join(path, "layers"), f);
        self.kernel.visit(&join(path, "kernel"), f);
        self.embed.visit(&join(path, "embed"), f);
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.pixel.visit_mut(&join(path, "pixel"), f);
        f(&join(path, "queries"), &mut self.queries);
        self.layers.visit_mut(&join(path, "layers"), f);
        self.kernel.visit_mut(&join(path, "kernel"), f);
        self.embed.visit_mut(&join(path, "embed"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shape_contract() {
        let cfg = ModelConfig {
            queries: 8,
            decoder_layers: 3,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = MaskGenerator::new(&cfg, &mut rng);
        let f = Tensor::randn(&[cfg.d_f, 8, 8], 1.0, &mut rng);
        let set = m.generate(&f, 32, 32).unwrap();
        assert_eq!(set.queries(), 8);
        assert_eq!(set.mask_logits.shape(), &[8, 32 * 32]);
        assert_eq!(set.mask_embeddings.shape(), &[8, cfg.d_t]);
        assert_eq!(set.decoder_trace.len(), 3);
        assert!(set.decoder_trace.iter().all(|d| d.all_finite()));
        assert_eq!(m.clone().generate(&f, 32, 32).unwrap(), set);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let cfg = ModelConfig::default();
        let m = MaskGenerator::new(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(
            m.generate(&Tensor::zeros(&[cfg.d_f + 1, 4, 4]), 16, 16),
            Err(Error::InvalidArgument(_))
        ));
    }
}
