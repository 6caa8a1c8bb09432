use super::ModelConfig;
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{join, Parameterized, Scope};
use crate::tensor::Tensor;

pub const INITIAL_TEMPERATURE: f64 = 10.0;

/// Learnable categorisation temperature (stored as its logarithm so it stays
/// positive) and a learned no-object embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryHead {
    pub log_temperature: Tensor,
    pub no_object: Tensor,
}

impl CategoryHead {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            log_temperature: Tensor::scalar(INITIAL_TEMPERATURE.ln()),
            no_object: Tensor::zeros(&[cfg.d_t]),
        }
    }

    pub fn temperature(&self) -> f64 {
        self.log_temperature.data()[0].exp()
    }

    fn check(&self, s: &Scope, embeddings: Var, classes: &Tensor) -> Result<()> {
        let es = s.graph.shape(embeddings);
        let d_t = self.no_object.len();
        if es.len() != 2 || es[1] != d_t || classes.shape().len() != 2 || classes.shape()[1] != d_t {
            return Err(Error::invalid(format!(
                "embedding dims disagree: masks {:?}, classes {:?}, head {}",
                es,
                classes.shape(),
                d_t
            )));
        }
        Ok(())
    }

    /// `[Q, C + 1]` logits; the last column is no-object.
    pub fn logits(&self, s: &Scope, embeddings: Var, classes: &Tensor) -> Result<Var> {
        self.check(s, embeddings, classes)?;
        let g = s.graph;
        let d_t = self.no_object.len();
        let cls = g.constant(classes.clone());
        let void = g.reshape(s.param("no_object", &self.no_object), &[1, d_t]);
        let all = g.concat_rows(cls, void);
        let temp = g.exp(s.param("log_temperature", &self.log_temperature));
        Ok(g.mul_scalar(g.matmul(embeddings, g.transpose(all)), temp))
    }

    /// `[Q, C]` class probabilities with the no-object column removed and the
    /// remainder renormalised.
    pub fn class_probabilities(&self, s: &Scope, embeddings: Var, classes: &Tensor) -> Result<Var> {
        self.check(s, embeddings, classes)?;
        let g = s.graph;
        let cls = g.constant(classes.clone());
        let temp = g.exp(s.param("log_temperature", &self.log_temperature));
        Ok(g.softmax_rows(g.mul_scalar(g.matmul(embeddings, g.transpose(cls)), temp)))
    }
}

impl Parameterized for CategoryHead {
    fn visit(&self, path: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(path, "log_temperature"), &self.log_temperature);
        f(&join(path, "no_object"), &self.no_object);
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(path, "log_temperature"), &mut self.log_temperature);
        f(&join(path, "no_object"), &mut self.no_object);
    }
}
