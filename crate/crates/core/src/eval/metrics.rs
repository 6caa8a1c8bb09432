use serde::{Deserialize, Serialize};

use super::SegmentationMap;
use crate::error::{Error, Result};

/// Integer confusion counts, rows indexed by ground truth and columns by
/// prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub vocabulary: Vec<String>,
    pub counts: Vec<u64>,
    pub ignored: u64,
}

impl Confusion {
    pub fn new(vocabulary: Vec<String>) -> Self {
        let c = vocabulary.len();
        Self {
            vocabulary,
            counts: vec![0; c * c],
            ignored: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes() + pred]
    }

    pub fn accumulate(&mut self, pred: &[usize], gt: &[usize], ignore_label: Option<usize>) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::invalid("prediction and ground truth sizes differ"));
        }
        let c = self.classes();
        for (&p, &g) in pred.iter().zip(gt) {
            if Some(g) == ignore_label {
                self.ignored += 1;
                continue;
            }
            if p >= c || g >= c {
                return Err(Error::invalid(format!("label {} outside vocabulary of {c}", p.max(g))));
            }
            self.counts[g * c + p] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub vocabulary: Vec<String>,
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean over classes present in ground truth or prediction.
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub confusion: Vec<Vec<u64>>,
    pub pixels: u64,
    pub ignored_pixels: u64,
    /// Set when no pixel was counted; the metrics are then zero.
    pub empty: bool,
}

impl MetricsReport {
    pub fn from_confusion(conf: &Confusion) -> Self {
        let c = conf.classes();
        let total = conf.total();
        let mut per_class = Vec::with_capacity(c);
        for k in 0..c {
            let tp = conf.get(k, k);
            let fn_: u64 = (0..c).filter(|&j| j != k).map(|j| conf.get(k, j)).sum();
            let fp: u64 = (0..c).filter(|&i| i != k).map(|i| conf.get(i, k)).sum();
            let union = tp + fp + fn_;
            per_class.push((union > 0).then(|| tp as f64 / union as f64));
        }
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        let trace: u64 = (0..c).map(|k| conf.get(k, k)).sum();
        Self {
            vocabulary: conf.vocabulary.clone(),
            per_class_iou: per_class,
            miou,
            pixel_accuracy: if total == 0 { 0.0 } else { trace as f64 / total as f64 },
            confusion: conf.counts.chunks(c.max(1)).map(|r| r.to_vec()).collect(),
            pixels: total,
            ignored_pixels: conf.ignored,
            empty: total == 0,
        }
    }
}

pub fn compute_metrics(pred: &SegmentationMap, gt: &SegmentationMap, ignore_label: Option<usize>) -> Result<MetricsReport> {
    if pred.vocabulary != gt.vocabulary {
        return Err(Error::invalid("prediction and ground truth vocabularies differ"));
    }
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::invalid("prediction and ground truth geometries differ"));
    }
    let mut conf = Confusion::new(gt.vocabulary.clone());
    conf.accumulate(&pred.hard, &gt.hard, ignore_label)?;
    Ok(MetricsReport::from_confusion(&conf))
}
