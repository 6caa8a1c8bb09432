//! Distillation and supervision losses between the image branch (teacher)
//! and the event branch (student), plus the loss reweighting strategies.
//!
//! The mask term is implemented as soft-target cross-entropy minus the
//! entropy of the (constant) teacher distribution, i.e. a KL divergence. Its
//! gradients are those of the cross-entropy, and it vanishes exactly when
//! the two distributions agree.

mod dissimilarity;
mod pseudo;
mod reweight;

pub use dissimilarity::{DissimilarityNetwork, DN_HIDDEN_CHANNELS, DN_INITIAL_BIAS};
pub use pseudo::{assign_pseudo_labels, query_classes, QueryAssignment, MIN_ASSIGNMENT_IOU};
pub use reweight::{alternative_weight_map, ReweightKind};

use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbones::{Branch, CategoryHead, MaskSet};
use crate::error::{Error, Result};
use crate::eval::semantic_scores;
use crate::gray::GrayImage;
use crate::nn::Scope;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_m: f64,
    pub lambda_c: f64,
    /// Weight of the anti-collapse penalty on the mean trust map.
    pub lambda_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_m: 5.0,
            lambda_c: 2.0,
            lambda_reg: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_m", self.lambda_m),
            ("lambda_c", self.lambda_c),
            ("lambda_reg", self.lambda_reg),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("loss.{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unweighted loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_t: f64,
    pub l_f: f64,
    pub l_m: f64,
    pub l_c: f64,
    pub l_reg: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_t: f64,
    pub l_f: f64,
    pub l_m: f64,
    pub l_c: f64,
    pub l_reg: f64,
    pub l_final: f64,
    /// Gradient norm per trainable component, keyed by parameter prefix.
    pub grad_norms: BTreeMap<String, f64>,
}

fn weighted_sum(c: &LossComponents, w: &LossWeights) -> f64 {
    c.l_t + c.l_f + w.lambda_m * c.l_m + w.lambda_c * c.l_c + w.lambda_reg * c.l_reg
}

pub fn total_loss(c: &LossComponents, weights: &LossWeights) -> Result<LossReport> {
    for (name, v) in [("l_t", c.l_t), ("l_f", c.l_f), ("l_m", c.l_m), ("l_c", c.l_c), ("l_reg", c.l_reg)] {
        if !v.is_finite() {
            return Err(Error::Numeric {
                component: name.into(),
                message: format!("loss component is {v}"),
            });
        }
    }
    Ok(LossReport {
        l_t: c.l_t,
        l_f: c.l_f,
        l_m: c.l_m,
        l_c: c.l_c,
        l_reg: c.l_reg,
        l_final: weighted_sum(c, weights),
        grad_norms: BTreeMap::new(),
    })
}

// Graph-level losses. Teacher quantities are plain tensors and therefore
// constants of the student's graph.

/// Frobenius norm of the implicit-token difference.
pub fn embedding_loss(g: &Graph, teacher: &Tensor, student: Var) -> Result<Var> {
    if teacher.shape() != g.shape(student).as_slice() {
        return Err(Error::invalid(format!(
            "token shapes differ: {:?} vs {:?}",
            teacher.shape(),
            g.shape(student)
        )));
    }
    Ok(g.frob_norm(g.sub(student, g.constant(teacher.clone()))))
}

/// Mean over decoder layers of the Frobenius norm of the layer-output
/// difference, paired by position.
pub fn feature_loss(g: &Graph, teacher: &[Tensor], student: &[Var]) -> Result<Var> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(Error::invalid(format!(
            "decoder traces have {} and {} layers",
            teacher.len(),
            student.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for (t, &s) in teacher.iter().zip(student) {
        if t.shape() != g.shape(s).as_slice() {
            return Err(Error::invalid("decoder layer shapes differ"));
        }
        let term = g.frob_norm(g.sub(s, g.constant(t.clone())));
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
    }
    Ok(g.scale(acc.unwrap(), 1.0 / teacher.len() as f64))
}

/// `mean_n M_n KL(target_n || normalise(scores_n))`; `weights: [N]`,
/// `scores: [N, C]` positive.
pub fn mask_loss(g: &Graph, weights: Var, scores: Var, target: Rc<Tensor>) -> Var {
    g.weighted_kl(scores, weights, target)
}

/// `(mean(M) - 1)^2`
pub fn collapse_penalty(g: &Graph, m: Var) -> Var {
    g.square(g.sub(g.mean(m), g.constant(Tensor::scalar(1.0))))
}

pub fn category_loss_graph(
    head: &CategoryHead,
    s: &Scope,
    embeddings: Var,
    classes: &Tensor,
    targets: &[usize],
) -> Result<Var> {
    let c = classes.shape()[0];
    if let Some(&bad) = targets.iter().find(|&&t| t > c) {
        return Err(Error::invalid(format!("category target {bad} outside 0..={c}")));
    }
    if targets.len() != s.graph.shape(embeddings)[0] {
        return Err(Error::invalid("one category target per query is required"));
    }
    let logits = head.logits(s, embeddings, classes)?;
    Ok(s.graph.cross_entropy(logits, targets))
}

// Plain-tensor wrappers.

pub fn embedding_distill_loss(tokens_image: &Tensor, tokens_event: &Tensor) -> Result<f64> {
    let g = Graph::new();
    let v = embedding_loss(&g, tokens_image, g.constant(tokens_event.clone()))?;
    Ok(g.scalar(v))
}

pub fn feature_distill_loss(trace_image: &[Tensor], trace_event: &[Tensor]) -> Result<f64> {
    let g = Graph::new();
    let s: Vec<Var> = trace_event.iter().map(|t| g.constant(t.clone())).collect();
    let v = feature_loss(&g, trace_image, &s)?;
    Ok(g.scalar(v))
}

fn check_distributions(y: &Tensor, what: &str) -> Result<()> {
    let c = *y.shape().last().unwrap_or(&0);
    if y.shape().len() != 2 || c == 0 {
        return Err(Error::invalid(format!("{what} must be [pixels, classes]")));
    }
    for (i, row) in y.data().chunks(c).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-5 || row.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidInput(format!("{what} row {i} is not a distribution (sums to {s})")));
        }
    }
    Ok(())
}

/// Trust-weighted mask loss between per-pixel distributions `[N, C]`.
pub fn reweighted_mask_loss(m: &Tensor, y_image: &Tensor, y_event: &Tensor) -> Result<f64> {
    check_distributions(y_image, "image-branch segmentation")?;
    check_distributions(y_event, "event-branch segmentation")?;
    if y_image.shape() != y_event.shape() || m.len() != y_image.shape()[0] {
        return Err(Error::invalid("weight map and segmentations disagree in size"));
    }
    let g = Graph::new();
    let w = g.constant(m.clone().reshape(&[m.len()])?);
    let v = mask_loss(&g, w, g.constant(y_event.clone()), Rc::new(y_image.clone()));
    Ok(g.scalar(v))
}

pub fn category_loss(head: &CategoryHead, mask_embeddings: &Tensor, classes: &Tensor, targets: &[usize]) -> Result<f64> {
    let g = Graph::new();
    let s = Scope::new(&g, "head", false);
    let v = category_loss_graph(head, &s, g.constant(mask_embeddings.clone()), classes, targets)?;
    Ok(g.scalar(v))
}

/// Replaces every row by the one-hot vector of its argmax.
pub fn hard_targets(soft: &Tensor) -> Tensor {
    let c = soft.shape()[1];
    let mut out = vec![0.0; soft.len()];
    for (r, row) in soft.data().chunks(c).enumerate() {
        out[r * c + crate::eval::argmax_row(row)] = 1.0;
    }
    Tensor::from_parts(soft.shape().to_vec(), out)
}

/// Everything the student is compared against for one training image. The
/// teacher is frozen, so this is computed once per image and cached.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherOutputs {
    pub tokens: Tensor,
    pub features: Tensor,
    pub masks: MaskSet,
    /// Per-pixel class distribution `[H*W, C]`.
    pub soft: Rc<Tensor>,
    /// Argmax over the `C + 1` category logits per query.
    pub query_classes: Vec<usize>,
}

/// Per-pixel normalisation using the same summation as the KL kernel, so a
/// clone student reproduces the target bit for bit.
fn normalize_rows(scores: Tensor) -> Tensor {
    let c = scores.shape()[1];
    let shape = scores.shape().to_vec();
    let mut data = scores.into_data();
    for row in data.chunks_mut(c) {
        let s: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::from_parts(shape, data)
}

impl TeacherOutputs {
    pub fn compute(teacher: &Branch, image: &GrayImage, classes: &Tensor) -> Result<Self> {
        let g = Graph::new();
        let s = Scope::new(&g, "image", false);
        let fwd = teacher.forward(&s, image)?;
        let hs = teacher.head_scope(&s);
        let probs = teacher.head.class_probabilities(&hs, fwd.mask_embeddings, classes)?;
        let scores = g.value(semantic_scores(&g, fwd.mask_logits, probs));
        let logits = g.value(teacher.head.logits(&hs, fwd.mask_embeddings, classes)?);
        Ok(Self {
            tokens: g.value(fwd.tokens),
            features: g.value(fwd.features),
            masks: teacher.mask_set(&s, &fwd),
            soft: Rc::new(normalize_rows(scores)),
            query_classes: query_classes(&logits),
        })
    }
}

/// Options of the per-sample objective.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveOptions {
    pub weights: LossWeights,
    pub reweight: ReweightKind,
    /// Soft teacher distributions (default) or one-hot argmax targets.
    pub soft_targets: bool,
    pub assignment: QueryAssignment,
    pub train_dn: bool,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            reweight: ReweightKind::None,
            soft_targets: true,
            assignment: QueryAssignment::Overlap,
            train_dn: true,
        }
    }
}

/// Graph handles of one sample's losses.
pub struct SampleObjective {
    pub l_t: Var,
    pub l_f: Var,
    pub l_m: Var,
    pub l_c: Var,
    pub l_reg: Var,
    pub l_final: Var,
    /// Trust map `[H*W]`.
    pub weight_map: Var,
    pub category_targets: Vec<usize>,
}

impl SampleObjective {
    pub fn components(&self, g: &Graph) -> LossComponents {
        LossComponents {
            l_t: g.scalar(self.l_t),
            l_f: g.scalar(self.l_f),
            l_m: g.scalar(self.l_m),
            l_c: g.scalar(self.l_c),
            l_reg: g.scalar(self.l_reg),
        }
    }
}

/// Builds the full per-sample objective on `g`. Student parameters are
/// named under `event.*`, dissimilarity-network parameters under `dn.*`.
#[allow(clippy::too_many_arguments)]
pub fn sample_objective(
    g: &Graph,
    student: &Branch,
    dn: Option<&DissimilarityNetwork>,
    image: &GrayImage,
    reconstruction: &GrayImage,
    teacher: &TeacherOutputs,
    classes: &Tensor,
    opts: &ObjectiveOptions,
) -> Result<SampleObjective> {
    if (image.width, image.height) != (reconstruction.width, reconstruction.height) {
        return Err(Error::invalid("image and reconstruction geometries differ"));
    }
    let s = Scope::new(g, "event", true);
    let fwd = student.forward(&s, reconstruction)?;
    let l_t = embedding_loss(g, &teacher.tokens, fwd.tokens)?;
    let l_f = feature_loss(g, &teacher.masks.decoder_trace, &fwd.trace)?;

    let weight_map = match opts.reweight {
        ReweightKind::DissimilarityNetwork => {
            let dn = dn.ok_or_else(|| Error::config("dissimilarity reweighting needs a dissimilarity network"))?;
            dn.forward(
                &Scope::new(g, "dn", opts.train_dn),
                g.constant(image.to_tensor()),
                g.constant(reconstruction.to_tensor()),
            )?
        }
        kind => g.constant(alternative_weight_map(
            kind,
            image,
            reconstruction,
            &teacher.features,
            &g.value(fwd.features),
        )?),
    };

    let hs = student.head_scope(&s);
    let probs = student.head.class_probabilities(&hs, fwd.mask_embeddings, classes)?;
    let scores = semantic_scores(g, fwd.mask_logits, probs);
    let target = if opts.soft_targets {
        teacher.soft.clone()
    } else {
        Rc::new(hard_targets(&teacher.soft))
    };
    let l_m = mask_loss(g, weight_map, scores, target);

    let no_object = classes.shape()[0];
    let targets = assign_pseudo_labels(
        &teacher.masks.mask_logits,
        &teacher.query_classes,
        &g.value(fwd.mask_logits),
        no_object,
        opts.assignment,
    );
    let l_c = category_loss_graph(&student.head, &hs, fwd.mask_embeddings, classes, &targets)?;
    let l_reg = collapse_penalty(g, weight_map);

    let w = &opts.weights;
    let mut total = g.add(l_t, l_f);
    total = g.add(total, g.scale(l_m, w.lambda_m));
    total = g.add(total, g.scale(l_c, w.lambda_c));
    total = g.add(total, g.scale(l_reg, w.lambda_reg));
    Ok(SampleObjective {
        l_t,
        l_f,
        l_m,
        l_c,
        l_reg,
        l_final: total,
        weight_map,
        category_targets: targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::ModelConfig;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn embedding_loss_examples() {
        let a = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(embedding_distill_loss(&a, &a).unwrap(), 0.0);
        let l = embedding_distill_loss(&a, &Tensor::zeros(&[2, 2])).unwrap();
        assert!((l - 2f64.sqrt()).abs() < 1e-15);
        let b = t(&[2, 2], &[0.3, -2.0, 1.5, 0.1]);
        let base = embedding_distill_loss(&a, &b).unwrap();
        let scaled = embedding_distill_loss(&a.map(|v| -3.0 * v), &b.map(|v| -3.0 * v)).unwrap();
        assert!((scaled - 3.0 * base).abs() < 1e-12);
        assert!(matches!(
            embedding_distill_loss(&a, &Tensor::zeros(&[1, 2])),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn feature_loss_examples() {
        let z = Tensor::zeros(&[1, 2]);
        let one = t(&[1, 2], &[1.0, 0.0]);
        let three = t(&[1, 2], &[0.0, 3.0]);
        assert_eq!(feature_distill_loss(&[one.clone(), three.clone()], &[one.clone(), three.clone()]).unwrap(), 0.0);
        assert_eq!(feature_distill_loss(&[one.clone(), three.clone()], &[z.clone(), z.clone()]).unwrap(), 2.0);
        // Positional pairing: swapping the student's layers changes the value.
        let a = feature_distill_loss(&[one.clone(), three.clone()], &[one.clone(), z.clone()]).unwrap();
        let b = feature_distill_loss(&[one.clone(), three.clone()], &[z.clone(), one.clone()]).unwrap();
        assert_ne!(a, b);
        assert!(matches!(feature_distill_loss(&[one], &[z.clone(), z]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn mask_loss_examples() {
        let onehot = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(reweighted_mask_loss(&Tensor::ones(&[2]), &onehot, &onehot).unwrap(), 0.0);
        let other = t(&[2, 2], &[0.1, 0.9, 0.8, 0.2]);
        assert_eq!(reweighted_mask_loss(&Tensor::zeros(&[2]), &onehot, &other).unwrap(), 0.0);
        let l = reweighted_mask_loss(&Tensor::ones(&[1]), &t(&[1, 2], &[1.0, 0.0]), &t(&[1, 2], &[0.5, 0.5])).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(
            reweighted_mask_loss(&Tensor::ones(&[1]), &t(&[1, 2], &[0.7, 0.7]), &t(&[1, 2], &[0.5, 0.5])),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn mask_loss_is_linear_in_weights() {
        let y = t(&[3, 2], &[0.2, 0.8, 0.6, 0.4, 0.5, 0.5]);
        let p = t(&[3, 2], &[0.3, 0.7, 0.1, 0.9, 0.8, 0.2]);
        let m1 = t(&[3], &[0.2, 0.5, 0.9]);
        let m2 = t(&[3], &[0.7, 0.1, 0.3]);
        let sum = t(&[3], &[0.9, 0.6, 1.2]);
        let a = reweighted_mask_loss(&m1, &y, &p).unwrap() + reweighted_mask_loss(&m2, &y, &p).unwrap();
        assert!((a - reweighted_mask_loss(&sum, &y, &p).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn category_loss_examples() {
        let cfg = ModelConfig {
            d_t: 3,
            ..ModelConfig::micro()
        };
        let mut head = CategoryHead::new(&cfg);
        let classes = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        // Zero embeddings and zero no-object vector give uniform logits.
        let l = category_loss(&head, &Tensor::zeros(&[2, 3]), &classes, &[0, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        // Embedding equal to its class row with a very large temperature.
        head.log_temperature = Tensor::scalar(200f64.ln());
        let l = category_loss(&head, &t(&[1, 3], &[0.0, 1.0, 0.0]), &classes, &[1]).unwrap();
        assert!(l < 1e-30);
        // All no-object, with a no-object vector the embeddings favour.
        head.log_temperature = Tensor::scalar(1.0f64.ln());
        head.no_object = t(&[3], &[-1.0, -1.0, -1.0]);
        let emb = t(&[2, 3], &[-1.0, -1.0, -1.0, -0.5, -0.5, -0.5]);
        assert!(category_loss(&head, &emb, &classes, &[3, 3]).unwrap() < 4f64.ln());
        assert!(matches!(
            category_loss(&head, &emb, &classes, &[4, 0]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn total_loss_examples() {
        let unit = LossComponents {
            l_t: 1.0,
            l_f: 1.0,
            l_m: 1.0,
            l_c: 1.0,
            l_reg: 0.0,
        };
        assert_eq!(total_loss(&unit, &LossWeights::default()).unwrap().l_final, 9.0);
        assert_eq!(total_loss(&LossComponents::default(), &LossWeights::default()).unwrap().l_final, 0.0);
        let swapped = LossWeights {
            lambda_m: 2.0,
            lambda_c: 5.0,
            ..LossWeights::default()
        };
        assert_eq!(total_loss(&unit, &swapped).unwrap().l_final, 9.0);
        let bad = LossComponents {
            l_c: f64::NAN,
            ..unit
        };
        match total_loss(&bad, &LossWeights::default()) {
            Err(Error::Numeric { component, .. }) => assert_eq!(component, "l_c"),
            other => panic!("{other:?}"),
        }
    }
}
