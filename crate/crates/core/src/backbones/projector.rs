use rand::Rng;

use super::ModelConfig;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{join, Linear, Parameterized, Scope};
use crate::tensor::Tensor;

/// Two-layer MLP turning an image embedding into `K` implicit text tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ImplicitTextProjector {
    pub fc1: Linear,
    pub fc2: Linear,
    pub tokens: usize,
    pub d_t: usize,
    pub normalize: bool,
}

impl ImplicitTextProjector {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(cfg.d_v, cfg.d_v, 1.0, rng),
            fc2: Linear::new(cfg.d_v, cfg.tokens * cfg.d_t, 1.0, rng),
            tokens: cfg.tokens,
            d_t: cfg.d_t,
            normalize: cfg.normalize_tokens,
        }
    }

    /// `embedding: [1, d_v]` -> `[K, d_t]`.
    pub fn forward(&self, s: &Scope, embedding: Var) -> Var {
        let g = s.graph;
        let h = g.tanh(self.fc1.forward(&s.child("fc1"), embedding));
        let out = self.fc2.forward(&s.child("fc2"), h);
        let tokens = g.reshape(out, &[self.tokens, self.d_t]);
        if self.normalize {
            g.row_l2_normalize(tokens)
        } else {
            tokens
        }
    }

    pub fn project(&self, embedding: &Tensor) -> Result<Tensor> {
        if embedding.len() != self.fc1.fan_in() {
            return Err(Error::invalid(format!(
                "projector expects a {}-dim embedding, got {}",
                self.fc1.fan_in(),
                embedding.len()
            )));
        }
        if !embedding.all_finite() {
            return Err(Error::InvalidInput("embedding is not finite".into()));
        }
        let g = Graph::new();
        let e = g.constant(embedding.clone().reshape(&[1, embedding.len()])?);
        let out = self.forward(&Scope::new(&g, "projector", false), e);
        Ok(g.value(out))
    }
}

impl Parameterized for ImplicitTextProjector {
    fn visit(&self, path: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.fc1.visit(&join(path, "fc1"), f);
        self.fc2.visit(&join(path, "fc2"), f);
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.fc1.visit_mut(&join(path, "fc1"), f);
        self.fc2.visit_mut(&join(path, "fc2"), f);
    }
}
