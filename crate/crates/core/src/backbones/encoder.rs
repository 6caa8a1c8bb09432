use rand::Rng;

use super::ModelConfig;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::gray::GrayImage;
use crate::nn::{join, Conv2d, Linear, Parameterized, Scope};
use crate::tensor::Tensor;

/// Frozen convolutional image encoder: three stride-2 convolutions, global
/// average pooling and a linear projection to `d_v`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoder {
    pub convs: Vec<Conv2d>,
    pub proj: Linear,
}

impl ImageEncoder {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let c = cfg.encoder_channels;
        let half = (c / 2).max(1);
        Self {
            convs: vec![
                Conv2d::new(Conv2d::k3s2(1, half), rng),
                Conv2d::new(Conv2d::k3s2(half, c), rng),
                Conv2d::new(Conv2d::k3s2(c, c), rng),
            ],
            proj: Linear::new(c, cfg.d_v, 1.0, rng),
        }
    }

    /// `image: [1, H, W]` -> (`[1, d_v]` embedding, `[c, H/8, W/8]` feature map).
    pub fn forward(&self, s: &Scope, image: Var) -> (Var, Var) {
        let g = s.graph;
        let mut x = image;
        for (i, conv) in self.convs.iter().enumerate() {
            x = g.relu(conv.forward(&s.child(&format!("convs.{i}")), x));
        }
        let shape = g.shape(x);
        let (c, hw) = (shape[0], shape[1] * shape[2]);
        let flat = g.reshape(x, &[c, hw]);
        let pool = g.constant(Tensor::full(&[hw, 1], 1.0 / hw as f64));
        let pooled = g.reshape(g.matmul(flat, pool), &[1, c]);
        (self.proj.forward(&s.child("proj"), pooled), x)
    }

    pub fn encode(&self, image: &GrayImage) -> Result<Tensor> {
        if !image.all_finite() {
            return Err(Error::InvalidInput("image contains non-finite pixels".into()));
        }
        let g = Graph::new();
        let x = g.constant(image.to_tensor());
        let (emb, _) = self.forward(&Scope::new(&g, "encoder", false), x);
        Ok(g.value(emb).reshape(&[self.proj.fan_out()]).expect("embedding size"))
    }
}

impl Parameterized for ImageEncoder {
    fn visit(&self, path: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.convs.visit(&join(path, "convs"), f);
        self.proj.visit(&join(path, "proj"), f);
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.convs.visit_mut(&join(path, "convs"), f);
        self.proj.visit_mut(&join(path, "proj"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder() -> ImageEncoder {
        ImageEncoder::new(&ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(1))
    }

    #[test]
    fn deterministic_and_finite() {
        let e = encoder();
        let img = GrayImage::new(16, 16, (0..256).map(|i| (i % 17) as f64 / 16.0).collect()).unwrap();
        let a = e.encode(&img).unwrap();
        assert_eq!(a, e.encode(&img).unwrap());
        assert_eq!(a.shape(), &[64]);
        let z = e.encode(&GrayImage::filled(16, 16, 0.0)).unwrap();
        assert!(z.all_finite());
    }

    #[test]
    fn one_pixel_change_moves_embedding() {
        let e = encoder();
        let base = GrayImage::new(16, 16, (0..256).map(|i| ((i * 7) % 13) as f64 / 12.0).collect()).unwrap();
        let mut other = base.clone();
        other.data[5 * 16 + 9] = 1.0 - other.data[5 * 16 + 9];
        assert_ne!(e.encode(&base).unwrap(), e.encode(&other).unwrap());
    }

    #[test]
    fn rejects_nan() {
        let mut img = GrayImage::filled(8, 8, 0.2);
        img.data[0] = f64::INFINITY;
        assert!(matches!(encoder().encode(&img), Err(Error::InvalidInput(_))));
    }
}
