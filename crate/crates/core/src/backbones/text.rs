use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{join, Linear, Parameterized};
use crate::tensor::{self, Tensor};

pub const TEXT_VOCAB_SLOTS: usize = 4096;
pub const DEFAULT_PROMPT: &str = "a photo of a {}";

/// Frozen text encoder: hashed-token embedding table, mean pooling, one
/// affine head and L2 normalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub table: Tensor,
    pub head: Linear,
}

fn fnv1a(token: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in token.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl TextEncoder {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            table: Tensor::randn(&[TEXT_VOCAB_SLOTS, cfg.d_t], 1.0, &mut rng),
            head: Linear::new(cfg.d_t, cfg.d_t, 1.0, &mut rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn tokenize(text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|t| (fnv1a(&t.to_lowercase()) % TEXT_VOCAB_SLOTS as u64) as usize)
            .collect()
    }

    /// Unit-norm embedding of one prompt.
    pub fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let ids = Self::tokenize(text);
        if ids.is_empty() {
            return Err(Error::invalid("cannot embed an empty prompt"));
        }
        let d = self.dim();
        let mut pooled = vec![0.0; d];
        for &id in &ids {
            for (p, v) in pooled.iter_mut().zip(&self.table.data()[id * d..(id + 1) * d]) {
                *p += v;
            }
        }
        for p in &mut pooled {
            *p /= ids.len() as f64;
        }
        let mut out = tensor::matmul(&pooled, self.head.weight.data(), 1, d, d);
        for (o, b) in out.iter_mut().zip(self.head.bias.data()) {
            *o += b;
        }
        Ok(unit(out))
    }
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in &mut v {
            *x /= n;
        }
    }
    v
}

impl Parameterized for TextEncoder {
    fn visit(&self, path: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(path, "table"), &self.table);
        self.head.visit(&join(path, "head"), f);
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(path, "table"), &mut self.table);
        self.head.visit_mut(&join(path, "head"), f);
    }
}

/// `[C, d_t]` class matrix: per class, the unit embeddings of every filled
/// template are averaged and renormalised.
pub fn embed_classes(enc: &TextEncoder, vocabulary: &[String], templates: &[String]) -> Result<Tensor> {
    if vocabulary.is_empty() {
        return Err(Error::invalid("class vocabulary is empty"));
    }
    if templates.is_empty() {
        return Err(Error::config("prompt template list is empty"));
    }
    for t in templates {
        if t.matches("{}").count() != 1 {
            return Err(Error::config(format!("template {t:?} must contain exactly one {{}} placeholder")));
        }
    }
    let d = enc.dim();
    let mut data = Vec::with_capacity(vocabulary.len() * d);
    for class in vocabulary {
        let mut acc = vec![0.0; d];
        for t in templates {
            for (a, v) in acc.iter_mut().zip(enc.embed(&t.replace("{}", class))?) {
                *a += v;
            }
        }
        for a in &mut acc {
            *a /= templates.len() as f64;
        }
        data.extend(unit(acc));
    }
    Tensor::new(&[vocabulary.len(), d], data)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

/// One class name per line; blank lines and `#` comments skipped.
pub fn parse_class_file(path: &Path) -> Result<Vec<String>> {
    let classes = read_lines(path)?;
    if classes.is_empty() {
        return Err(Error::config(format!("class file {} lists no classes", path.display())));
    }
    Ok(classes)
}

/// One template per line, each with a single `{}` placeholder.
pub fn parse_prompt_file(path: &Path) -> Result<Vec<String>> {
    let prompts = read_lines(path)?;
    if prompts.is_empty() {
        return Err(Error::config(format!("prompt file {} lists no templates", path.display())));
    }
    if let Some(bad) = prompts.iter().find(|p| p.matches("{}").count() != 1) {
        return Err(Error::config(format!("template {bad:?} must contain exactly one {{}} placeholder")));
    }
    Ok(prompts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn single_class_single_template_is_prompt_embedding() {
        let enc = TextEncoder::new(&ModelConfig::default(), 1);
        let m = embed_classes(&enc, &s(&["circle"]), &s(&[DEFAULT_PROMPT])).unwrap();
        assert_eq!(m.data(), enc.embed("a photo of a circle").unwrap().as_slice());
    }

    #[test]
    fn duplicated_templates_are_idempotent_and_rows_unit() {
        let enc = TextEncoder::new(&ModelConfig::default(), 1);
        let vocab = s(&["circle", "square", "traffic sign"]);
        let a = embed_classes(&enc, &vocab, &s(&["a {}", "the {} here"])).unwrap();
        let b = embed_classes(&enc, &vocab, &s(&["a {}", "the {} here", "a {}", "the {} here"])).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for r in 0..3 {
            let n: f64 = (0..enc.dim()).map(|c| a.at2(r, c).powi(2)).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn tokenization_is_case_insensitive() {
        assert_eq!(TextEncoder::tokenize("A Photo"), TextEncoder::tokenize("a photo"));
    }

    #[test]
    fn bad_inputs() {
        let enc = TextEncoder::new(&ModelConfig::micro(), 1);
        assert!(matches!(
            embed_classes(&enc, &[], &s(&[DEFAULT_PROMPT])),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            embed_classes(&enc, &s(&["x"]), &s(&["no placeholder"])),
            Err(Error::Config(_))
        ));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        fs::write(&p, "\n# nothing\n").unwrap();
        assert!(matches!(parse_class_file(&p), Err(Error::Config(_))));
        fs::write(&p, "road\n  car \n").unwrap();
        assert_eq!(parse_class_file(&p).unwrap(), s(&["road", "car"]));
    }
}
