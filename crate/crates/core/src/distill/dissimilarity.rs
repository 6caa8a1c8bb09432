use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::gray::GrayImage;
use crate::nn::{join, Conv2d, Parameterized, Scope};
use crate::tensor::{ResampleMap, ResampleMode, Tensor};

pub const DN_HIDDEN_CHANNELS: usize = 8;
/// Initial bias of the second convolution; identical inputs then give
/// `M = sigmoid(2)`.
pub const DN_INITIAL_BIAS: f64 = 2.0;

/// Two stride-2 convolutions: a shared first layer applied to both images,
/// then a second layer on the squared feature difference. Output is a
/// per-pixel trust map in `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DissimilarityNetwork {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl DissimilarityNetwork {
    pub fn new(seed: u64) -> Self {
        Self::with_rng(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn with_rng<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let conv1 = Conv2d::new(Conv2d::k3s2(1, DN_HIDDEN_CHANNELS), rng);
        let mut conv2 = Conv2d::new(Conv2d::k3s2(DN_HIDDEN_CHANNELS, 1), rng);
        // Negative weights: larger feature disagreement lowers trust.
        for w in conv2.weight.data_mut() {
            *w = -w.abs();
        }
        conv2.bias = Tensor::scalar(DN_INITIAL_BIAS);
        Self { conv1, conv2 }
    }

    /// `x`, `x_hat`: `[1, H, W]`. Returns `M` flattened to `[H*W]`.
    pub fn forward(&self, s: &Scope, x: Var, x_hat: Var) -> Result<Var> {
        let g = s.graph;
        let (sa, sb) = (g.shape(x), g.shape(x_hat));
        if sa != sb || sa.len() != 3 || sa[0] != 1 {
            return Err(Error::invalid(format!(
                "dissimilarity inputs must share a [1, H, W] geometry, got {sa:?} and {sb:?}"
            )));
        }
        let (h, w) = (sa[1], sa[2]);
        let c1 = s.child("conv1");
        let a = g.relu(self.conv1.forward(&c1, x));
        let b = g.relu(self.conv1.forward(&c1, x_hat));
        let d = g.square(g.sub(a, b));
        let z = self.conv2.forward(&s.child("conv2"), d);
        let low = g.sigmoid(z);
        let zs = g.shape(low);
        let map = Rc::new(ResampleMap::new(ResampleMode::Bilinear, zs[1], zs[2], h, w));
        Ok(g.reshape(g.resample(low, map), &[h * w]))
    }

    /// Plain evaluation of `M` as an `[H, W]` tensor.
    pub fn map(&self, x: &GrayImage, x_hat: &GrayImage) -> Result<Tensor> {
        let g = Graph::new();
        let m = self.forward(
            &Scope::new(&g, "dn", false),
            g.constant(x.to_tensor()),
            g.constant(x_hat.to_tensor()),
        )?;
        g.value(m).reshape(&[x.height, x.width])
    }
}

impl Parameterized for DissimilarityNetwork {
    fn visit(&self, path: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.conv1.visit(&join(path, "conv1"), f);
        self.conv2.visit(&join(path, "conv2"), f);
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.conv1.visit_mut(&join(path, "conv1"), f);
        self.conv2.visit_mut(&join(path, "conv2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sigmoid;

    fn noise(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::new(w, h, (0..w * h).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn two_3x3_stride_2_convolutions() {
        let dn = DissimilarityNetwork::new(0);
        for c in [&dn.conv1, &dn.conv2] {
            assert_eq!((c.spec.kernel, c.spec.stride, c.spec.pad), (3, 2, 1));
        }
        assert_eq!(dn.conv1.weight.shape(), &[DN_HIDDEN_CHANNELS, 1, 3, 3]);
        assert_eq!(dn.conv2.weight.shape(), &[1, DN_HIDDEN_CHANNELS, 3, 3]);
        // 13 -> 7 -> 4 before upsampling back to the input size.
        let g = Graph::new();
        let s = Scope::new(&g, "dn", false);
        let x = g.constant(noise(13, 13, 1).to_tensor());
        let y = g.relu(dn.conv1.forward(&s.child("conv1"), x));
        assert_eq!(g.shape(y), vec![DN_HIDDEN_CHANNELS, 7, 7]);
        assert_eq!(g.shape(dn.conv2.forward(&s.child("conv2"), y)), vec![1, 4, 4]);
        assert_eq!(dn.map(&noise(13, 13, 1), &noise(13, 13, 2)).unwrap().shape(), &[13, 13]);
    }

    #[test]
    fn identical_inputs_give_constant_bias_response() {
        let dn = DissimilarityNetwork::new(3);
        let x = noise(12, 10, 1);
        let m = dn.map(&x, &x).unwrap();
        assert_eq!(m.shape(), &[10, 12]);
        let expected = sigmoid(DN_INITIAL_BIAS);
        assert!((expected - 0.8808).abs() < 1e-4);
        assert!(m.data().iter().all(|&v| (v - expected).abs() < 1e-15));
    }

    #[test]
    fn outputs_in_open_unit_interval() {
        for seed in 0..5 {
            let dn = DissimilarityNetwork::new(seed);
            let m = dn.map(&noise(9, 7, seed), &noise(9, 7, seed + 100)).unwrap();
            assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn larger_disagreement_lowers_trust() {
        let dn = DissimilarityNetwork::new(7);
        let x = GrayImage::filled(8, 8, 0.5);
        let mut prev = f64::INFINITY;
        for k in 0..4 {
            let m = dn.map(&x, &GrayImage::filled(8, 8, 0.5 + 0.15 * k as f64)).unwrap();
            let mean = m.sum() / m.len() as f64;
            assert!(mean <= prev);
            prev = mean;
        }
    }

    #[test]
    fn geometry_mismatch() {
        let dn = DissimilarityNetwork::new(1);
        assert!(matches!(
            dn.map(&noise(8, 8, 1), &noise(8, 6, 1)),
            Err(Error::InvalidArgument(_))
        ));
    }
}
