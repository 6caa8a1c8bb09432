use evseg::distill::{embedding_distill_loss, reweighted_mask_loss};
use evseg::eval::{compute_metrics, merge_classes, ClassMergeMap, SegmentationMap};
use evseg::events::{simulate_events, voxelize, Event, EventStream, FrameSequence, Polarity, DEFAULT_LOG_EPS};
use evseg::tensor::Tensor;
use proptest::prelude::*;

fn distribution(raw: &[f64], rows: usize) -> Tensor {
    let c = raw.len() / rows;
    let mut v = raw.to_vec();
    for r in v.chunks_mut(c) {
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|x| *x /= s);
    }
    Tensor::new(&[rows, c], v).unwrap()
}

proptest! {
    #[test]
    fn mask_loss_is_nonnegative_and_vanishes_on_agreement(
        raw in prop::collection::vec(0.01f64..1.0, 12),
        other in prop::collection::vec(0.01f64..1.0, 12),
        m in prop::collection::vec(0.0f64..1.0, 4),
    ) {
        let y = distribution(&raw, 4);
        let p = distribution(&other, 4);
        let w = Tensor::new(&[4], m).unwrap();
        prop_assert!(reweighted_mask_loss(&w, &y, &p).unwrap() >= -1e-12);
        prop_assert!(reweighted_mask_loss(&w, &y, &y).unwrap().abs() < 1e-12);
    }

    #[test]
    fn embedding_loss_is_symmetric(a in prop::collection::vec(-2.0f64..2.0, 6), b in prop::collection::vec(-2.0f64..2.0, 6)) {
        let ta = Tensor::new(&[2, 3], a).unwrap();
        let tb = Tensor::new(&[2, 3], b).unwrap();
        prop_assert_eq!(embedding_distill_loss(&ta, &ta).unwrap(), 0.0);
        let ab = embedding_distill_loss(&ta, &tb).unwrap();
        prop_assert!((ab - embedding_distill_loss(&tb, &ta).unwrap()).abs() < 1e-12);
        prop_assert!(ab >= 0.0);
    }

    /// Reversing a sequence in time swaps event polarities and keeps counts.
    #[test]
    fn reversed_sequence_flips_polarity_counts(
        frames in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 2..6),
        c in 0.05f64..0.5,
    ) {
        let n = frames.len();
        let ts: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let fwd = simulate_events(&FrameSequence::new(2, 2, frames.clone(), ts.clone()).unwrap(), c, DEFAULT_LOG_EPS).unwrap();
        let rev_frames: Vec<Vec<f64>> = frames.into_iter().rev().collect();
        let rev = simulate_events(&FrameSequence::new(2, 2, rev_frames, ts).unwrap(), c, DEFAULT_LOG_EPS).unwrap();
        let count = |s: &EventStream, p: Polarity| s.events.iter().filter(|e| e.p == p).count() as i64;
        // Reference hysteresis can shift each pixel's count by one.
        let slack = 4;
        prop_assert!((count(&fwd, Polarity::Positive) - count(&rev, Polarity::Negative)).abs() <= slack);
        prop_assert!((count(&fwd, Polarity::Negative) - count(&rev, Polarity::Positive)).abs() <= slack);
    }

    #[test]
    fn voxel_bins_collapse_to_histogram(
        raw in prop::collection::vec((0u32..5, 0u32..4, 0.0f64..1.0, any::<bool>()), 0..80),
        bins in 1usize..8,
    ) {
        let mut events: Vec<Event> = raw
            .into_iter()
            .map(|(x, y, t, p)| Event::new(x, y, t, if p { Polarity::Positive } else { Polarity::Negative }))
            .collect();
        events.sort_by(|a, b| a.t.total_cmp(&b.t));
        let s = EventStream::new(5, 4, 0.0, 1.0, events).unwrap();
        let one = voxelize(&s, 1).unwrap().values;
        let many = voxelize(&s, bins).unwrap().collapse();
        for (a, b) in one.iter().zip(&many) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    /// Merging predictions and ground truth with the same map never lowers
    /// pixel accuracy.
    #[test]
    fn merging_does_not_lower_accuracy(
        pred in prop::collection::vec(0usize..4, 16),
        gt in prop::collection::vec(0usize..4, 16),
    ) {
        let vocab: Vec<String> = ["road", "car", "truck", "sky"].iter().map(|s| s.to_string()).collect();
        let merge = ClassMergeMap::parse("road: road\nvehicle: car, truck\nsky: sky\n").unwrap();
        let pm = SegmentationMap::from_labels(4, 4, vocab.clone(), &pred).unwrap();
        let gm = SegmentationMap::from_labels(4, 4, vocab, &gt).unwrap();
        let fine = compute_metrics(&pm, &gm, None).unwrap();
        let coarse = compute_metrics(&merge_classes(&pm, &merge).unwrap(), &merge_classes(&gm, &merge).unwrap(), None).unwrap();
        prop_assert!(coarse.pixel_accuracy >= fine.pixel_accuracy - 1e-12);
        prop_assert_eq!(coarse.pixels, fine.pixels);
    }
}
