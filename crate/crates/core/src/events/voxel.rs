use super::EventStream;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BINS: usize = 5;

/// `bins x height x width` accumulation of event polarities with bilinear
/// weighting along time.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub bins: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl VoxelGrid {
    pub fn at(&self, bin: usize, y: usize, x: usize) -> f64 {
        self.values[(bin * self.height + y) * self.width + x]
    }

    pub fn bin_total(&self, bin: usize) -> f64 {
        let n = self.height * self.width;
        self.values[bin * n..(bin + 1) * n].iter().sum()
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Per-pixel sum over bins.
    pub fn collapse(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![0.0; n];
        for b in 0..self.bins {
            for (o, v) in out.iter_mut().zip(&self.values[b * n..(b + 1) * n]) {
                *o += v;
            }
        }
        out
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.bins, self.height, self.width], self.values.clone())
    }
}

/// Each event contributes `p * max(0, 1 - |b - t*|)` to bin `b`, with
/// `t* = (bins - 1) (t - t_start) / (t_end - t_start)`. A zero-length
/// window puts everything in bin 0.
pub fn voxelize(stream: &EventStream, bins: usize) -> Result<VoxelGrid> {
    if bins == 0 {
        return Err(Error::invalid("voxel grid needs at least one bin"));
    }
    stream.validate()?;
    let (h, w) = (stream.height, stream.width);
    let plane = h * w;
    let mut values = vec![0.0; bins * plane];
    let span = stream.duration();
    let scale = if span > 0.0 { (bins - 1) as f64 / span } else { 0.0 };
    for e in &stream.events {
        let pix = e.y as usize * w + e.x as usize;
        let ts = ((e.t - stream.t_start) * scale).clamp(0.0, (bins - 1) as f64);
        let lo = ts.floor() as usize;
        let frac = ts - lo as f64;
        let p = e.p.sign();
        values[lo * plane + pix] += p * (1.0 - frac);
        if frac > 0.0 && lo + 1 < bins {
            values[(lo + 1) * plane + pix] += p * frac;
        }
    }
    Ok(VoxelGrid {
        bins,
        height: h,
        width: w,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{Event, Polarity};
    use proptest::prelude::*;

    /// Direct evaluation of the triangular kernel over every bin.
    fn oracle(stream: &EventStream, bins: usize) -> Vec<f64> {
        let plane = stream.width * stream.height;
        let mut v = vec![0.0; bins * plane];
        for e in &stream.events {
            let ts = if stream.duration() > 0.0 {
                (bins - 1) as f64 * (e.t - stream.t_start) / stream.duration()
            } else {
                0.0
            };
            for b in 0..bins {
                let wgt = (1.0 - (b as f64 - ts).abs()).max(0.0);
                v[b * plane + e.y as usize * stream.width + e.x as usize] += e.p.sign() * wgt;
            }
        }
        v
    }

    #[test]
    fn single_event_splits_between_bins() {
        let s = EventStream::new(2, 2, 0.0, 1.0, vec![Event::new(0, 0, 0.5, Polarity::Positive)]).unwrap();
        let g = voxelize(&s, 2).unwrap();
        assert_eq!(g.at(0, 0, 0), 0.5);
        assert_eq!(g.at(1, 0, 0), 0.5);
    }

    #[test]
    fn endpoints_land_in_outer_bins() {
        let s = EventStream::new(
            2,
            2,
            0.0,
            1.0,
            vec![Event::new(0, 0, 0.0, Polarity::Positive), Event::new(1, 1, 1.0, Polarity::Negative)],
        )
        .unwrap();
        let g = voxelize(&s, 2).unwrap();
        assert_eq!(g.bin_total(0), 1.0);
        assert_eq!(g.bin_total(1), -1.0);
    }

    #[test]
    fn empty_stream_is_zero() {
        let s = EventStream::empty(3, 4, 0.0, 1.0).unwrap();
        let g = voxelize(&s, 5).unwrap();
        assert_eq!(g.values.len(), 5 * 12);
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_bins_rejected() {
        let s = EventStream::empty(3, 4, 0.0, 1.0).unwrap();
        assert!(matches!(voxelize(&s, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn unsorted_events_rejected() {
        let mut s = EventStream::empty(3, 4, 0.0, 1.0).unwrap();
        s.events = vec![Event::new(0, 0, 0.9, Polarity::Positive), Event::new(0, 0, 0.1, Polarity::Positive)];
        assert!(matches!(voxelize(&s, 3), Err(Error::MalformedStream(_))));
    }

    #[test]
    fn degenerate_window_uses_first_bin() {
        let s = EventStream::new(2, 1, 0.3, 0.3, vec![Event::new(1, 0, 0.3, Polarity::Negative)]).unwrap();
        let g = voxelize(&s, 4).unwrap();
        assert_eq!(g.at(0, 0, 1), -1.0);
        assert_eq!(g.total(), -1.0);
    }

    fn arb_stream() -> impl Strategy<Value = EventStream> {
        (1usize..6, 1usize..6, 0usize..40).prop_flat_map(|(w, h, n)| {
            prop::collection::vec((0..w as u32, 0..h as u32, 0.0f64..2.0, any::<bool>()), n).prop_map(
                move |raw| {
                    let mut ev: Vec<Event> = raw
                        .into_iter()
                        .map(|(x, y, t, p)| Event::new(x, y, t, if p { Polarity::Positive } else { Polarity::Negative }))
                        .collect();
                    ev.sort_by(|a, b| a.t.total_cmp(&b.t));
                    EventStream::new(w, h, 0.0, 2.0, ev).unwrap()
                },
            )
        })
    }

    proptest! {
        #[test]
        fn matches_kernel_oracle(s in arb_stream(), bins in 1usize..9) {
            let g = voxelize(&s, bins).unwrap();
            for (a, b) in g.values.iter().zip(oracle(&s, bins)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
