use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Minimum mask IoU for a student query to inherit a teacher query's class.
pub const MIN_ASSIGNMENT_IOU: f64 = 0.25;

/// How event-branch queries receive category targets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryAssignment {
    /// Class of the best-overlapping image-branch mask.
    #[default]
    Overlap,
    /// Query `q` takes the class of image-branch query `q`.
    Positional,
}

/// Row-wise argmax of `[Q, C + 1]` category logits; index `C` is no-object.
pub fn query_classes(logits: &Tensor) -> Vec<usize> {
    let cols = logits.shape()[1];
    logits.data().chunks(cols).map(crate::eval::argmax_row).collect()
}

/// Per-query targets in `0..=no_object`. Masks are binarised at
/// probability 0.5, i.e. logit > 0.
pub fn assign_pseudo_labels(
    teacher_masks: &Tensor,
    teacher_classes: &[usize],
    student_masks: &Tensor,
    no_object: usize,
    mode: QueryAssignment,
) -> Vec<usize> {
    let sq = student_masks.shape()[0];
    match mode {
        QueryAssignment::Positional => (0..sq)
            .map(|q| teacher_classes.get(q).copied().unwrap_or(no_object))
            .collect(),
        QueryAssignment::Overlap => {
            let n = student_masks.shape()[1];
            let bin = |t: &Tensor, q: usize| -> Vec<bool> { t.data()[q * n..(q + 1) * n].iter().map(|&v| v > 0.0).collect() };
            let teacher: Vec<Vec<bool>> = (0..teacher_masks.shape()[0]).map(|q| bin(teacher_masks, q)).collect();
            (0..sq)
                .map(|q| {
                    let s = bin(student_masks, q);
                    let mut best = (0.0, no_object);
                    for (t, tm) in teacher.iter().enumerate() {
                        let (mut inter, mut union) = (0usize, 0usize);
                        for (&a, &b) in s.iter().zip(tm) {
                            inter += (a && b) as usize;
                            union += (a || b) as usize;
                        }
                        let iou = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
                        if iou > best.0 {
                            best = (iou, teacher_classes[t]);
                        }
                    }
                    if best.0 >= MIN_ASSIGNMENT_IOU {
                        best.1
                    } else {
                        no_object
                    }
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_assignment() {
        // Teacher: query 0 covers pixels 0..2 (class 1), query 1 covers 2..4 (class 0).
        let teacher = Tensor::new(&[2, 4], vec![1.0, 1.0, -1.0, -1.0, -1.0, -1.0, 1.0, 1.0]).unwrap();
        // Student: query 0 matches teacher query 1, query 1 is empty, query 2 overlaps 1/4.
        let student = Tensor::new(&[3, 4], vec![-1.0, -1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0, 1.0, -1.0, 1.0, 1.0]).unwrap();
        let labels = assign_pseudo_labels(&teacher, &[1, 0], &student, 5, QueryAssignment::Overlap);
        assert_eq!(labels, vec![0, 5, 0]);
        let pos = assign_pseudo_labels(&teacher, &[1, 0], &student, 5, QueryAssignment::Positional);
        assert_eq!(pos, vec![1, 0, 5]);
    }

    #[test]
    fn below_threshold_is_no_object() {
        let teacher = Tensor::new(&[1, 8], vec![1.0; 8]).unwrap();
        let mut s = vec![-1.0; 8];
        s[0] = 1.0;
        let student = Tensor::new(&[1, 8], s).unwrap();
        assert_eq!(assign_pseudo_labels(&teacher, &[2], &student, 3, QueryAssignment::Overlap), vec![3]);
    }
}
