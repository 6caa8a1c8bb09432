//! Toy-scale stand-ins for the foundation components of each branch.

mod encoder;
mod head;
mod masks;
mod projector;
mod text;
mod unet;

pub use encoder::ImageEncoder;
pub use head::CategoryHead;
pub use masks::{DecoderLayer, MaskGenerator, MaskSet};
pub use projector::ImplicitTextProjector;
pub use text::{embed_classes, parse_class_file, parse_prompt_file, TextEncoder, DEFAULT_PROMPT, TEXT_VOCAB_SLOTS};
pub use unet::{CrossAttention, FeatureExtractor};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::gray::GrayImage;
use crate::nn::{join, Parameterized, Scope};
use crate::tensor::Tensor;

/// Network dimensions shared by both branches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Image embedding width.
    pub d_v: usize,
    /// Text embedding width.
    pub d_t: usize,
    /// Feature-extractor output channels.
    pub d_f: usize,
    /// Implicit text tokens per image.
    pub tokens: usize,
    /// Mask queries.
    pub queries: usize,
    pub decoder_layers: usize,
    /// Query width inside the mask decoder.
    pub d_q: usize,
    pub encoder_channels: usize,
    pub unet_channels: usize,
    pub attention_dim: usize,
    /// L2-normalise implicit tokens before conditioning the UNet.
    pub normalize_tokens: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_v: 64,
            d_t: 32,
            d_f: 64,
            tokens: 4,
            queries: 8,
            decoder_layers: 3,
            d_q: 64,
            encoder_channels: 16,
            unet_channels: 16,
            attention_dim: 16,
            normalize_tokens: false,
        }
    }
}

impl ModelConfig {
    /// Small dimensions for gradient checks.
    pub fn micro() -> Self {
        Self {
            d_v: 6,
            d_t: 5,
            d_f: 6,
            tokens: 2,
            queries: 3,
            decoder_layers: 2,
            d_q: 6,
            encoder_channels: 4,
            unet_channels: 4,
            attention_dim: 4,
            normalize_tokens: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_v", self.d_v),
            ("d_t", self.d_t),
            ("d_f", self.d_f),
            ("tokens", self.tokens),
            ("queries", self.queries),
            ("decoder_layers", self.decoder_layers),
            ("d_q", self.d_q),
            ("encoder_channels", self.encoder_channels),
            ("unet_channels", self.unet_channels),
            ("attention_dim", self.attention_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Which branch components receive gradient updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Trainable {
    pub projector: bool,
    pub unet: bool,
    pub mask_generator: bool,
    pub head: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable {
        projector: false,
        unet: false,
        mask_generator: false,
        head: false,
    };
}

/// One branch: frozen image encoder, implicit-text projector, frozen
/// feature extractor, mask generator and category head.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub config: ModelConfig,
    pub encoder: ImageEncoder,
    pub projector: ImplicitTextProjector,
    pub unet: FeatureExtractor,
    pub masks: MaskGenerator,
    pub head: CategoryHead,
    pub trainable: Trainable,
}

/// Graph handles produced by one branch forward pass.
pub struct BranchForward {
    pub embedding: Var,
    pub tokens: Var,
    pub features: Var,
    /// `[Q, H*W]`
    pub mask_logits: Var,
    /// `[Q, d_t]`
    pub mask_embeddings: Var,
    /// `L` matrices `[Q, d_q]`.
    pub trace: Vec<Var>,
    pub height: usize,
    pub width: usize,
}

impl Branch {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            config: config.clone(),
            encoder: ImageEncoder::new(config, &mut rng),
            projector: ImplicitTextProjector::new(config, &mut rng),
            unet: FeatureExtractor::new(config, &mut rng),
            masks: MaskGenerator::new(config, &mut rng),
            head: CategoryHead::new(config),
            trainable: Trainable::NONE,
        })
    }

    /// Runs the whole branch on one image. Parameter names are rooted at the
    /// scope's path.
    pub fn forward(&self, s: &Scope, image: &GrayImage) -> Result<BranchForward> {
        if !image.all_finite() {
            return Err(Error::InvalidInput("image contains non-finite pixels".into()));
        }
        let g = s.graph;
        let x = g.constant(image.to_tensor());
        let (embedding, _) = self.encoder.forward(&s.child("encoder").with_trainable(false), x);
        let tokens = self
            .projector
            .forward(&s.child("projector").with_trainable(self.trainable.projector), embedding);
        let features = self
            .unet
            .forward(&s.child("unet").with_trainable(self.trainable.unet), x, tokens)?;
        let out = self.masks.forward(
            &s.child("masks").with_trainable(self.trainable.mask_generator),
            features,
            image.height,
            image.width,
        )?;
        Ok(BranchForward {
            embedding,
            tokens,
            features,
            mask_logits: out.logits,
            mask_embeddings: out.embeddings,
            trace: out.trace,
            height: image.height,
            width: image.width,
        })
    }

    pub fn head_scope<'g>(&self, s: &Scope<'g>) -> Scope<'g> {
        s.child("head").with_trainable(self.trainable.head)
    }

    /// Extracts the plain-tensor mask set from a forward pass.
    pub fn mask_set(&self, s: &Scope, fwd: &BranchForward) -> MaskSet {
        let g = s.graph;
        MaskSet {
            height: fwd.height,
            width: fwd.width,
            mask_logits: g.value(fwd.mask_logits),
            mask_embeddings: g.value(fwd.mask_embeddings),
            decoder_trace: fwd.trace.iter().map(|&v| g.value(v)).collect(),
        }
    }

    /// Checksum of the components that are frozen in every training regime.
    pub fn frozen_checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.encoder.checksum());
        h.update(self.unet.checksum());
        format!("{:x}", h.finalize())
    }

    pub fn visit_trainable(&self, path: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        if self.trainable.projector {
            self.projector.visit(&join(path, "projector"), f);
        }
        if self.trainable.unet {
            self.unet.visit(&join(path, "unet"), f);
        }
        if self.trainable.mask_generator {
            self.masks.visit(&join(path, "masks"), f);
        }
        if self.trainable.head {
            self.head.visit(&join(path, "head"), f);
        }
    }
}

impl Parameterized for Branch {
    fn visit(&self, path: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.encoder.visit(&join(path, "encoder"), f);
        self.projector.visit(&join(path, "projector"), f);
        self.unet.visit(&join(path, "unet"), f);
        self.masks.visit(&join(path, "masks"), f);
        self.head.visit(&join(path, "head"), f);
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoder.visit_mut(&join(path, "encoder"), f);
        self.projector.visit_mut(&join(path, "projector"), f);
        self.unet.visit_mut(&join(path, "unet"), f);
        self.masks.visit_mut(&join(path, "masks"), f);
        self.head.visit_mut(&join(path, "head"), f);
    }
}
