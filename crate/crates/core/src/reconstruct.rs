//! Frozen event-to-image reconstruction.
//!
//! Two reconstructors share one interface: a deterministic leaky integrator
//! of per-pixel polarity and a small recurrent convolutional network whose
//! weights are fixed at construction (random or loaded from a checkpoint).
//! Recurrent state is returned to the caller and passed back explicitly.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{voxelize, EventStream};
use crate::nn::{join, Conv2d, Parameterized};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconstructorKind {
    Integrator,
    LearnedRecurrent,
}

/// Output of one reconstruction window plus the state to thread into the
/// next one.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub width: usize,
    pub height: usize,
    /// Row-major intensities in `[0, 1]`.
    pub image: Vec<f64>,
    /// Integrator: the raw accumulator. Recurrent: the hidden feature map.
    pub state: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentNet {
    pub bins: usize,
    pub hidden: usize,
    pub input: Conv2d,
    pub update: Conv2d,
    pub output: Conv2d,
}

impl RecurrentNet {
    pub fn new(bins: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            bins,
            hidden,
            input: Conv2d::new(Conv2d::k3s1(bins + hidden, hidden), &mut rng),
            update: Conv2d::new(Conv2d::k3s1(hidden, hidden), &mut rng),
            output: Conv2d::new(Conv2d::k3s1(hidden, 1), &mut rng),
        }
    }
}

fn run_conv(c: &Conv2d, x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let g = tensor::ConvGeometry {
        in_channels: c.spec.in_channels,
        out_channels: c.spec.out_channels,
        height: h,
        width: w,
        kernel: c.spec.kernel,
        stride: c.spec.stride,
        pad: c.spec.pad,
    };
    tensor::conv2d(x, c.weight.data(), Some(c.bias.data()), &g)
}

#[derive(Clone, Debug, PartialEq)]
pub enum ReconstructorModel {
    Integrator { decay: f64, contrast: f64 },
    Recurrent(RecurrentNet),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reconstructor {
    pub width: usize,
    pub height: usize,
    pub model: ReconstructorModel,
}

impl Reconstructor {
    pub fn integrator(width: usize, height: usize, decay: f64, contrast: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::invalid(format!("integrator decay {decay} outside [0, 1]")));
        }
        if !(contrast > 0.0) {
            return Err(Error::invalid("integrator contrast must be positive"));
        }
        Ok(Self {
            width,
            height,
            model: ReconstructorModel::Integrator { decay, contrast },
        })
    }

    pub fn recurrent(width: usize, height: usize, bins: usize, hidden: usize, seed: u64) -> Result<Self> {
        if bins == 0 || hidden == 0 {
            return Err(Error::invalid("recurrent reconstructor needs bins and hidden channels"));
        }
        Ok(Self {
            width,
            height,
            model: ReconstructorModel::Recurrent(RecurrentNet::new(bins, hidden, seed)),
        })
    }

    pub fn kind(&self) -> ReconstructorKind {
        match self.model {
            ReconstructorModel::Integrator { .. } => ReconstructorKind::Integrator,
            ReconstructorModel::Recurrent(_) => ReconstructorKind::LearnedRecurrent,
        }
    }

    pub fn reconstruct(&self, stream: &EventStream, prior: Option<&Reconstruction>) -> Result<Reconstruction> {
        if (stream.width, stream.height) != (self.width, self.height) {
            return Err(Error::invalid(format!(
                "stream is {}x{}, reconstructor expects {}x{}",
                stream.width, stream.height, self.width, self.height
            )));
        }
        if let Some(p) = prior {
            if (p.width, p.height) != (self.width, self.height) {
                return Err(Error::invalid("prior reconstruction geometry mismatch"));
            }
        }
        let (h, w) = (self.height, self.width);
        match &self.model {
            ReconstructorModel::Integrator { decay, contrast } => {
                let counts = voxelize(stream, 1)?.collapse();
                let mut acc: Vec<f64> = counts.iter().map(|c| contrast * c).collect();
                if let Some(p) = prior {
                    for (a, s) in acc.iter_mut().zip(p.state.data()) {
                        *a += decay * s;
                    }
                }
                let image = normalize_percentile(&acc, 0.01, 0.99).into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
                Ok(Reconstruction {
                    width: w,
                    height: h,
                    image,
                    state: Tensor::from_parts(vec![h, w], acc),
                })
            }
            ReconstructorModel::Recurrent(net) => {
                let grid = voxelize(stream, net.bins)?;
                let hidden = match prior {
                    Some(p) if p.state.shape() == [net.hidden, h, w] => p.state.data().to_vec(),
                    Some(_) => return Err(Error::invalid("prior hidden state has wrong shape")),
                    None => vec![0.0; net.hidden * h * w],
                };
                let mut x = grid.values;
                x.extend_from_slice(&hidden);
                let a: Vec<f64> = run_conv(&net.input, &x, h, w).into_iter().map(|v| v.max(0.0)).collect();
                let next: Vec<f64> = run_conv(&net.update, &a, h, w).into_iter().map(f64::tanh).collect();
                let image = run_conv(&net.output, &next, h, w).into_iter().map(tensor::sigmoid).collect();
                Ok(Reconstruction {
                    width: w,
                    height: h,
                    image,
                    state: Tensor::from_parts(vec![net.hidden, h, w], next),
                })
            }
        }
    }

    /// Replaces the recurrent weights with checkpointed values named
    /// `reconstructor.*`.
    pub fn load_weights(&mut self, params: &BTreeMap<String, Tensor>) -> Result<()> {
        match self.model {
            ReconstructorModel::Recurrent(_) => self.load_params("reconstructor", params),
            ReconstructorModel::Integrator { .. } => Err(Error::invalid("the integrator has no weights")),
        }
    }
}

impl Parameterized for Reconstructor {
    fn visit(&self, path: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        if let ReconstructorModel::Recurrent(net) = &self.model {
            net.input.visit(&join(path, "input"), f);
            net.update.visit(&join(path, "update"), f);
            net.output.visit(&join(path, "output"), f);
        }
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        if let ReconstructorModel::Recurrent(net) = &mut self.model {
            net.input.visit_mut(&join(path, "input"), f);
            net.update.visit_mut(&join(path, "update"), f);
            net.output.visit_mut(&join(path, "output"), f);
        }
    }
}

/// Linear-interpolated percentile of already sorted values.
fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Affine map sending the `lo`/`hi` percentiles to 0 and 1 (unclamped).
/// Falls back to min/max when the percentiles coincide, and to a constant
/// 0.5 for flat images.
pub fn normalize_percentile(values: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut a = percentile_sorted(&sorted, lo);
    let mut b = percentile_sorted(&sorted, hi);
    if b - a <= 1e-12 {
        a = sorted[0];
        b = sorted[sorted.len() - 1];
    }
    if b - a <= 1e-12 {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - a) / (b - a)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{Event, Polarity};

    fn stream_at(x: u32, y: u32, n: usize) -> EventStream {
        let events = (0..n).map(|i| Event::new(x, y, i as f64 * 0.01, Polarity::Positive)).collect();
        EventStream::new(8, 8, 0.0, 1.0, events).unwrap()
    }

    #[test]
    fn empty_stream_is_mid_gray() {
        let r = Reconstructor::integrator(8, 8, 1.0, 0.2).unwrap();
        let out = r.reconstruct(&EventStream::empty(8, 8, 0.0, 1.0).unwrap(), None).unwrap();
        assert!(out.image.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn positive_events_make_unique_maximum() {
        let r = Reconstructor::integrator(8, 8, 1.0, 0.2).unwrap();
        let out = r.reconstruct(&stream_at(3, 4, 3), None).unwrap();
        let target = 4 * 8 + 3;
        let max = out.image[target];
        assert!(out.image.iter().enumerate().all(|(i, &v)| i == target || v < max));
    }

    #[test]
    fn deterministic_with_prior() {
        for r in [
            Reconstructor::integrator(8, 8, 0.7, 0.2).unwrap(),
            Reconstructor::recurrent(8, 8, 3, 4, 11).unwrap(),
        ] {
            let first = r.reconstruct(&stream_at(1, 2, 4), None).unwrap();
            let a = r.reconstruct(&stream_at(5, 5, 2), Some(&first)).unwrap();
            let b = r.reconstruct(&stream_at(5, 5, 2), Some(&first)).unwrap();
            assert_eq!(a, b);
            assert!(a.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn negated_polarity_reflects_around_mid_gray() {
        let r = Reconstructor::integrator(8, 8, 1.0, 0.2).unwrap();
        let mut events = Vec::new();
        for i in 0..40u32 {
            let p = if (i * 7) % 3 == 0 { Polarity::Negative } else { Polarity::Positive };
            events.push(Event::new((i * 5) % 8, (i * 3) % 8, i as f64 / 40.0, p));
        }
        let s = EventStream::new(8, 8, 0.0, 1.0, events).unwrap();
        let a = r.reconstruct(&s, None).unwrap();
        let b = r.reconstruct(&s.negated(), None).unwrap();
        let na = normalize_percentile(a.state.data(), 0.01, 0.99);
        let nb = normalize_percentile(b.state.data(), 0.01, 0.99);
        for (x, y) in na.iter().zip(&nb) {
            assert!((x + y - 1.0).abs() < 1e-9, "{x} {y}");
        }
    }

    #[test]
    fn geometry_mismatch_rejected() {
        let r = Reconstructor::integrator(8, 8, 1.0, 0.2).unwrap();
        let s = EventStream::empty(4, 8, 0.0, 1.0).unwrap();
        assert!(matches!(r.reconstruct(&s, None), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn recurrent_state_threads_through_windows() {
        let r = Reconstructor::recurrent(8, 8, 2, 3, 5).unwrap();
        let first = r.reconstruct(&stream_at(2, 2, 5), None).unwrap();
        let empty = EventStream::empty(8, 8, 1.0, 2.0).unwrap();
        let with_prior = r.reconstruct(&empty, Some(&first)).unwrap();
        let without = r.reconstruct(&empty, None).unwrap();
        assert_ne!(with_prior.image, without.image);
    }
}
