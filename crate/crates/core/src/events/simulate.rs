use super::{event_order, Event, EventStream, FrameSequence, Polarity};
use crate::error::{Error, Result};

pub const DEFAULT_LOG_EPS: f64 = 1e-3;

/// Threshold-crossing event simulation on linearly interpolated
/// log-intensity. After each event the pixel's reference level moves to the
/// level that was crossed.
pub fn simulate_events(seq: &FrameSequence, contrast_threshold: f64, eps: f64) -> Result<EventStream> {
    if seq.len() < 2 {
        return Err(Error::InsufficientInput(format!(
            "event simulation needs at least 2 frames, got {}",
            seq.len()
        )));
    }
    if !(contrast_threshold > 0.0 && contrast_threshold.is_finite()) {
        return Err(Error::invalid("contrast threshold must be positive"));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("log epsilon must be positive"));
    }
    seq.validate()?;

    let (w, h) = (seq.width, seq.height);
    // Level comparisons allow a tiny slack so that exact multiples of the
    // threshold survive rounding in ln().
    let tol = 1e-9 * contrast_threshold;
    let mut events = Vec::new();
    let logs: Vec<Vec<f64>> = seq
        .frames
        .iter()
        .map(|f| f.iter().map(|&v| (v + eps).ln()).collect())
        .collect();

    for pix in 0..w * h {
        let (x, y) = ((pix % w) as u32, (pix / w) as u32);
        let mut reference = logs[0][pix];
        for k in 0..seq.len() - 1 {
            let (la, lb) = (logs[k][pix], logs[k + 1][pix]);
            let (ta, tb) = (seq.timestamps[k], seq.timestamps[k + 1]);
            if la == lb {
                continue;
            }
            let at = |level: f64| (ta + (level - la) / (lb - la) * (tb - ta)).clamp(ta, tb);
            if lb > la {
                while reference + contrast_threshold <= lb + tol {
                    reference += contrast_threshold;
                    events.push(Event::new(x, y, at(reference), Polarity::Positive));
                }
            } else {
                while reference - contrast_threshold >= lb - tol {
                    reference -= contrast_threshold;
                    events.push(Event::new(x, y, at(reference), Polarity::Negative));
                }
            }
        }
    }
    events.sort_by(event_order);
    EventStream::new(w, h, seq.timestamps[0], *seq.timestamps.last().unwrap(), events)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_pixel(logs: &[f64], times: &[f64]) -> FrameSequence {
        let frames = logs.iter().map(|l| vec![l.exp() - DEFAULT_LOG_EPS]).collect();
        FrameSequence::new(1, 1, frames, times.to_vec()).unwrap()
    }

    #[test]
    fn ramp_of_three_thresholds_gives_three_spaced_events() {
        let c = 0.25;
        let l0 = (0.2f64 + DEFAULT_LOG_EPS).ln();
        let seq = single_pixel(&[l0, l0 + 3.0 * c], &[0.0, 0.3]);
        let s = simulate_events(&seq, c, DEFAULT_LOG_EPS).unwrap();
        assert_eq!(s.len(), 3);
        for (i, e) in s.events.iter().enumerate() {
            assert_eq!(e.p, Polarity::Positive);
            assert!((e.t - 0.1 * (i + 1) as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_sequence_is_silent() {
        let seq = FrameSequence::new(2, 2, vec![vec![0.4; 4]; 5], vec![0.0, 0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!(simulate_events(&seq, 0.1, DEFAULT_LOG_EPS).unwrap().is_empty());
    }

    #[test]
    fn reference_hysteresis_on_rise_then_fall() {
        let c = 0.2;
        let l0 = (0.3f64 + DEFAULT_LOG_EPS).ln();
        let seq = single_pixel(&[l0, l0 + 2.5 * c, l0], &[0.0, 1.0, 2.0]);
        let s = simulate_events(&seq, c, DEFAULT_LOG_EPS).unwrap();
        let p: Vec<i8> = s.events.iter().map(|e| e.p.as_i8()).collect();
        assert_eq!(p, vec![1, 1, -1, -1]);
        // Falling crossings at levels 1C and 0C above the start.
        assert!((s.events[2].t - 1.6).abs() < 1e-9);
        assert!((s.events[3].t - 2.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_short_and_unordered_sequences() {
        let one = FrameSequence::new(1, 1, vec![vec![0.5]], vec![0.0]).unwrap();
        assert!(matches!(simulate_events(&one, 0.1, 1e-3), Err(Error::InsufficientInput(_))));
        let bad = FrameSequence {
            width: 1,
            height: 1,
            frames: vec![vec![0.5], vec![0.6]],
            timestamps: vec![0.1, 0.1],
        };
        assert!(matches!(simulate_events(&bad, 0.1, 1e-3), Err(Error::MalformedSequence(_))));
    }

    #[test]
    fn pixel_permutation_permutes_events() {
        let frames_a = vec![vec![0.1, 0.5, 0.9, 0.2], vec![0.8, 0.5, 0.1, 0.6], vec![0.3, 0.9, 0.4, 0.6]];
        // Swap pixel 0 <-> 3 and 1 <-> 2 (a 180 degree rotation on 2x2).
        let perm = [3usize, 2, 1, 0];
        let frames_b: Vec<Vec<f64>> = frames_a.iter().map(|f| perm.iter().map(|&i| f[i]).collect()).collect();
        let ts = vec![0.0, 0.5, 1.0];
        let a = simulate_events(&FrameSequence::new(2, 2, frames_a, ts.clone()).unwrap(), 0.15, 1e-3).unwrap();
        let b = simulate_events(&FrameSequence::new(2, 2, frames_b, ts).unwrap(), 0.15, 1e-3).unwrap();
        assert_eq!(a.len(), b.len());
        let mut mapped: Vec<Event> = a
            .events
            .iter()
            .map(|e| {
                let src = (e.y * 2 + e.x) as usize;
                let dst = perm.iter().position(|&p| p == src).unwrap() as u32;
                Event::new(dst % 2, dst / 2, e.t, e.p)
            })
            .collect();
        mapped.sort_by(event_order);
        assert_eq!(mapped, b.events);
    }
}
