//! Semantic assembly from class-agnostic masks, class merging and metrics.

mod merge;
mod metrics;

pub use merge::{merge_classes, ClassMergeMap, DDD17_MERGE, DSEC_MERGE};
pub use metrics::{compute_metrics, Confusion, MetricsReport};

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbones::{Branch, MaskSet};
use crate::error::{Error, Result};
use crate::events::EventStream;
use crate::gray::GrayImage;
use crate::nn::Scope;
use crate::reconstruct::Reconstructor;
use crate::tensor::{self, Tensor};

/// Per-pixel class distribution and its argmax.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMap {
    pub width: usize,
    pub height: usize,
    pub vocabulary: Vec<String>,
    /// `[H*W, C]`, rows sum to one.
    pub soft: Tensor,
    pub hard: Vec<usize>,
}

/// First index of the row maximum.
pub(crate) fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl SegmentationMap {
    /// Builds a map from non-negative scores, normalising each row.
    pub fn from_scores(width: usize, height: usize, vocabulary: Vec<String>, scores: Tensor) -> Result<Self> {
        let c = vocabulary.len();
        if scores.shape() != [width * height, c] {
            return Err(Error::invalid(format!(
                "scores {:?} do not match {}x{} map over {} classes",
                scores.shape(),
                width,
                height,
                c
            )));
        }
        let mut data = scores.into_data();
        let mut hard = Vec::with_capacity(width * height);
        for row in data.chunks_mut(c) {
            let s: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= s;
            }
            hard.push(argmax_row(row));
        }
        Ok(Self {
            width,
            height,
            vocabulary,
            soft: Tensor::from_parts(vec![width * height, c], data),
            hard,
        })
    }

    /// One-hot map from class indices, e.g. ground truth.
    pub fn from_labels(width: usize, height: usize, vocabulary: Vec<String>, labels: &[usize]) -> Result<Self> {
        let c = vocabulary.len();
        if labels.len() != width * height {
            return Err(Error::invalid("label count does not match geometry"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!("label {bad} outside vocabulary of {c}")));
        }
        let mut soft = vec![0.0; labels.len() * c];
        for (i, &l) in labels.iter().enumerate() {
            soft[i * c + l] = 1.0;
        }
        Ok(Self {
            width,
            height,
            vocabulary,
            soft: Tensor::from_parts(vec![labels.len(), c], soft),
            hard: labels.to_vec(),
        })
    }
}

/// Added to every per-pixel class score so that a pixel no mask covers
/// still normalises to a distribution.
pub const SCORE_FLOOR: f64 = 1e-9;

/// Unnormalised per-pixel class scores `sigmoid(mask_logits)^T . class_probs`
/// plus [`SCORE_FLOOR`]: `[Q, N]` and `[Q, C]` give `[N, C]`.
pub fn semantic_scores(g: &Graph, mask_logits: Var, class_probs: Var) -> Var {
    let s = g.matmul(g.transpose(g.sigmoid(mask_logits)), class_probs);
    let floor = g.constant(Tensor::full(&g.shape(s), SCORE_FLOOR));
    g.add(s, floor)
}

/// Categorises each mask against the class text embeddings (no-object
/// excluded) and combines the masks into a per-pixel distribution.
pub fn assemble_semantic(
    masks: &MaskSet,
    class_matrix: &Tensor,
    temperature: f64,
    vocabulary: &[String],
) -> Result<SegmentationMap> {
    let (q, d) = (masks.mask_embeddings.shape()[0], masks.mask_embeddings.shape()[1]);
    if class_matrix.shape().len() != 2 || class_matrix.shape()[1] != d {
        return Err(Error::invalid(format!(
            "class matrix {:?} does not match mask embedding width {d}",
            class_matrix.shape()
        )));
    }
    let c = class_matrix.shape()[0];
    if c != vocabulary.len() {
        return Err(Error::invalid("class matrix rows and vocabulary length differ"));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let mut logits = tensor::matmul_nt(masks.mask_embeddings.data(), class_matrix.data(), q, d, c);
    for v in &mut logits {
        *v *= temperature;
    }
    tensor::softmax_rows(&mut logits, c);
    let g = Graph::new();
    let ml = g.constant(masks.mask_logits.clone());
    let probs = g.constant(Tensor::from_parts(vec![q, c], logits));
    let scores = g.value(semantic_scores(&g, ml, probs));
    SegmentationMap::from_scores(masks.width, masks.height, vocabulary.to_vec(), scores)
}

/// Runs one branch on an image and assembles its semantic map.
pub fn segment_image(
    branch: &Branch,
    image: &GrayImage,
    class_matrix: &Tensor,
    vocabulary: &[String],
) -> Result<SegmentationMap> {
    let g = Graph::new();
    let s = Scope::new(&g, "branch", false);
    let fwd = branch.forward(&s, image)?;
    let masks = branch.mask_set(&s, &fwd);
    assemble_semantic(&masks, class_matrix, branch.head.temperature(), vocabulary)
}

/// Reconstructs a grayscale image from events and segments it with the
/// event branch.
pub fn segment_events(
    branch: &Branch,
    reconstructor: &Reconstructor,
    stream: &EventStream,
    class_matrix: &Tensor,
    vocabulary: &[String],
) -> Result<SegmentationMap> {
    let rec = reconstructor.reconstruct(stream, None)?;
    let image = GrayImage::new(rec.width, rec.height, rec.image)?;
    segment_image(branch, &image, class_matrix, vocabulary)
}

/// One labelled test stream.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledStream {
    pub id: String,
    pub stream: EventStream,
    pub labels: Vec<usize>,
}

/// Evaluation settings: the prediction vocabulary may differ from the
/// ground-truth taxonomy as long as the optional merge maps one onto the
/// other by name.
#[derive(Clone, Debug)]
pub struct EvalSetup<'a> {
    pub vocabulary: &'a [String],
    pub class_matrix: &'a Tensor,
    pub gt_vocabulary: &'a [String],
    pub merge: Option<&'a ClassMergeMap>,
    pub ignore_label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: MetricsReport,
    pub samples: usize,
    /// Samples skipped because their geometry did not match.
    pub skipped: usize,
}

/// Aggregated metrics of the event branch over a labelled test set.
pub fn evaluate(
    branch: &Branch,
    reconstructor: &Reconstructor,
    samples: &[LabeledStream],
    setup: &EvalSetup,
) -> Result<EvalReport> {
    let mut per_sample = Vec::new();
    let mut skipped = 0;
    for s in samples {
        if (s.stream.width, s.stream.height) != (reconstructor.width, reconstructor.height)
            || s.labels.len() != s.stream.width * s.stream.height
        {
            skipped += 1;
            continue;
        }
        let pred = segment_events(branch, reconstructor, &s.stream, setup.class_matrix, setup.vocabulary)?;
        per_sample.push((pred, &s.labels));
    }
    let mut confusion = Confusion::new(setup.gt_vocabulary.to_vec());
    for (pred, labels) in &per_sample {
        let pred = match setup.merge {
            Some(m) => merge_classes(pred, m)?,
            None => pred.clone(),
        };
        let index = class_index_map(&pred.vocabulary, setup.gt_vocabulary)?;
        let mapped: Vec<usize> = pred.hard.iter().map(|&p| index[p]).collect();
        confusion.accumulate(&mapped, labels, setup.ignore_label)?;
    }
    Ok(EvalReport {
        metrics: MetricsReport::from_confusion(&confusion),
        samples: per_sample.len(),
        skipped,
    })
}

/// Position of every predicted class name in the ground-truth vocabulary.
fn class_index_map(pred: &[String], gt: &[String]) -> Result<Vec<usize>> {
    pred.iter()
        .map(|name| {
            gt.iter().position(|g| g == name).ok_or_else(|| {
                Error::invalid(format!(
                    "predicted class {name:?} is not in the ground-truth vocabulary; supply a merge map"
                ))
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    fn mask_set(logits: Vec<f64>, q: usize, w: usize, h: usize, emb: Vec<f64>, d: usize) -> MaskSet {
        MaskSet {
            height: h,
            width: w,
            mask_logits: Tensor::new(&[q, w * h], logits).unwrap(),
            mask_embeddings: Tensor::new(&[q, d], emb).unwrap(),
            decoder_trace: vec![],
        }
    }

    #[test]
    fn full_mask_aligned_with_class_zero() {
        let m = mask_set(vec![10.0; 4], 1, 2, 2, vec![1.0, 0.0, 0.0], 3);
        let classes = Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let s = assemble_semantic(&m, &classes, 100.0, &names(3)).unwrap();
        assert_eq!(s.hard, vec![0; 4]);
    }

    #[test]
    fn disjoint_masks_give_their_partition() {
        let big = 40.0;
        let m = mask_set(
            vec![big, big, -big, -big, -big, -big, big, big],
            2,
            2,
            2,
            vec![1.0, 0.0, 0.0, 1.0],
            2,
        );
        let classes = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let s = assemble_semantic(&m, &classes, 100.0, &names(2)).unwrap();
        assert_eq!(s.hard, vec![0, 0, 1, 1]);
    }

    #[test]
    fn rows_sum_to_one_and_rescaling_invariance() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let logits = Tensor::randn(&[5, 36], 2.0, &mut rng).into_data();
        let emb = Tensor::randn(&[5, 4], 1.0, &mut rng).into_data();
        let classes = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let m = mask_set(logits.clone(), 5, 6, 6, emb.clone(), 4);
        let s = assemble_semantic(&m, &classes, 3.0, &names(3)).unwrap();
        for row in s.soft.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
        let m2 = mask_set(logits, 5, 6, 6, emb.iter().map(|v| v * 4.0).collect(), 4);
        let s2 = assemble_semantic(&m2, &classes, 0.75, &names(3)).unwrap();
        assert_eq!(s.hard, s2.hard);
        for (a, b) in s.soft.data().iter().zip(s2.soft.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let m = mask_set(vec![0.0; 4], 1, 2, 2, vec![1.0, 0.0], 2);
        assert!(matches!(
            assemble_semantic(&m, &Tensor::zeros(&[2, 3]), 1.0, &names(2)),
            Err(Error::InvalidArgument(_))
        ));
    }
}
