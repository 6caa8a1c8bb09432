//! Two-branch training: branch construction and freeze policy, teacher
//! pre-training, the distillation step, the fit loop and checkpoints.

mod checkpoint;
mod config;
mod data;
mod optim;
mod run;

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_VERSION};
pub use config::{
    EvalConfig, ExperimentConfig, FreezePolicy, LossConfig, Optimizer, OutputConfig, ReconstructorChoice,
    ReconstructorConfig, ReweightConfig, TeacherConfig, TextConfig, TrainConfig, VoxelConfig,
};
pub use data::{generate_toy, load_dataset, synthesize, Dataset, DatasetConfig, Manifest, Sample, TOY_CLASSES};
pub use run::{
    dataset_for, run_evaluation, run_training, write_json, EvalInputs, EventModel, TrainOutcome, FINAL_CHECKPOINT, LOSS_LOG,
};
pub use optim::{clip_global_norm, Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::backbones::{embed_classes, parse_class_file, parse_prompt_file, Branch, ModelConfig, TextEncoder, Trainable};
use crate::distill::{
    sample_objective, total_loss, DissimilarityNetwork, LossComponents, LossReport, ObjectiveOptions, ReweightKind,
    TeacherOutputs,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, semantic_scores, ClassMergeMap, EvalReport, EvalSetup, LabeledStream};
use crate::events::EventStream;
use crate::gray::GrayImage;
use crate::nn::{Parameterized, Scope};
use crate::reconstruct::Reconstructor;
use crate::tensor::Tensor;

/// Seed offsets so the frozen text encoder, reconstructor and
/// dissimilarity network draw from streams independent of the branches.
const TEXT_SEED_OFFSET: u64 = 0x7e47;
pub(crate) const RECON_SEED_OFFSET: u64 = 0x5ec0;
const DN_SEED_OFFSET: u64 = 0xd155;
const TEACHER_SEED_OFFSET: u64 = 0x7eac;

impl FreezePolicy {
    pub fn trainable(self) -> Trainable {
        match self {
            FreezePolicy::None => Trainable::NONE,
            FreezePolicy::MlpOnly => Trainable {
                projector: true,
                head: true,
                ..Trainable::NONE
            },
            FreezePolicy::MaskGeneratorOnly => Trainable {
                mask_generator: true,
                head: true,
                ..Trainable::NONE
            },
            FreezePolicy::Both => Trainable {
                projector: true,
                mask_generator: true,
                head: true,
                unet: false,
            },
        }
    }
}

/// Image branch (all frozen) and event branch (an exact copy, trainable per
/// the freeze policy).
pub fn build_branches(model: &ModelConfig, policy: FreezePolicy, seed: u64) -> Result<(Branch, Branch)> {
    let image = Branch::new(model, seed)?;
    let mut event = image.clone();
    event.trainable = policy.trainable();
    Ok((image, event))
}

/// Source of the event branch's input image.
#[derive(Clone, Debug, PartialEq)]
pub enum ReconstructionSource {
    Events(Reconstructor),
    /// The grayscale frame itself.
    Identity,
}

impl ReconstructionSource {
    pub fn from_config(cfg: &ExperimentConfig, width: usize, height: usize) -> Result<Self> {
        let r = &cfg.reconstructor;
        match r.kind {
            ReconstructorChoice::Identity => Ok(Self::Identity),
            ReconstructorChoice::Integrator => Ok(Self::Events(Reconstructor::integrator(width, height, r.decay, r.contrast)?)),
            ReconstructorChoice::LearnedRecurrent => {
                let mut rec = Reconstructor::recurrent(width, height, cfg.voxel.bins, r.hidden, cfg.seed ^ RECON_SEED_OFFSET)?;
                if let Some(path) = &r.checkpoint {
                    rec.load_weights(&Checkpoint::load(path)?.with_prefix("reconstructor"))?;
                }
                Ok(Self::Events(rec))
            }
        }
    }

    pub fn image(&self, stream: &EventStream, frame: &GrayImage) -> Result<GrayImage> {
        match self {
            Self::Identity => Ok(frame.clone()),
            Self::Events(r) => {
                let rec = r.reconstruct(stream, None)?;
                GrayImage::new(rec.width, rec.height, rec.image)
            }
        }
    }

    pub fn checksum(&self) -> String {
        match self {
            Self::Identity => "identity".into(),
            Self::Events(r) => r.checksum(),
        }
    }
}

/// Class text embeddings for a vocabulary using the configured prompts.
pub fn class_matrix(cfg: &ExperimentConfig, encoder: &TextEncoder, vocabulary: &[String]) -> Result<Tensor> {
    let templates = match &cfg.text.prompt_file {
        Some(p) => parse_prompt_file(p)?,
        None => cfg.text.templates.clone(),
    };
    embed_classes(encoder, vocabulary, &templates)
}

pub fn text_encoder(cfg: &ExperimentConfig) -> TextEncoder {
    TextEncoder::new(&cfg.model, cfg.seed ^ TEXT_SEED_OFFSET)
}

fn seen_vocabulary(cfg: &ExperimentConfig, dataset_classes: &[String]) -> Result<Vec<String>> {
    let vocabulary = match &cfg.text.classes_file {
        Some(p) => parse_class_file(p)?,
        None => dataset_classes.to_vec(),
    };
    if vocabulary.is_empty() {
        return Err(Error::config("seen-class vocabulary is empty"));
    }
    Ok(vocabulary)
}

/// Per-sample quantities that never change during training.
struct Cached {
    reconstruction: GrayImage,
    teacher: TeacherOutputs,
}

/// One record of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub l_t: f64,
    pub l_f: f64,
    pub l_m: f64,
    pub l_c: f64,
    pub l_reg: f64,
    pub l_final: f64,
    pub wall_ms: Option<u64>,
}

pub struct Trainer {
    pub config: ExperimentConfig,
    pub image_branch: Branch,
    pub event_branch: Branch,
    pub dn: DissimilarityNetwork,
    pub source: ReconstructionSource,
    pub text: TextEncoder,
    pub vocabulary: Vec<String>,
    pub classes: Tensor,
    pub adam: Adam,
    pub step: u64,
    rng: ChaCha8Rng,
    samples: Vec<Sample>,
    cache: Vec<Option<Cached>>,
}

impl Trainer {
    /// Builds both branches (pre-training the image branch first when
    /// configured) for the given training samples.
    pub fn new(config: &ExperimentConfig, dataset_classes: &[String], samples: Vec<Sample>) -> Result<Self> {
        config.validate()?;
        if samples.is_empty() {
            return Err(Error::config("training dataset is empty"));
        }
        let image_branch = pretrained_image_branch(config, dataset_classes, &samples)?;
        Self::with_image_branch(config, dataset_classes, samples, image_branch)
    }

    /// Uses an already trained image branch as teacher; the event branch
    /// starts as its clone. `teacher.pretrain_steps` is ignored.
    pub fn with_image_branch(
        config: &ExperimentConfig,
        dataset_classes: &[String],
        samples: Vec<Sample>,
        image_branch: Branch,
    ) -> Result<Self> {
        config.validate()?;
        if samples.is_empty() {
            return Err(Error::config("training dataset is empty"));
        }
        if image_branch.config != config.model {
            return Err(Error::config("image branch dimensions differ from model config"));
        }
        let (w, h) = (samples[0].image.width, samples[0].image.height);
        if samples.iter().any(|s| (s.image.width, s.image.height) != (w, h)) {
            return Err(Error::InvalidInput("training samples differ in geometry".into()));
        }
        let vocabulary = seen_vocabulary(config, dataset_classes)?;
        let text = text_encoder(config);
        let classes = class_matrix(config, &text, &vocabulary)?;
        let mut image_branch = image_branch;
        image_branch.trainable = Trainable::NONE;
        let mut event_branch = image_branch.clone();
        event_branch.trainable = config.train.freeze_policy.trainable();
        let source = ReconstructionSource::from_config(config, w, h)?;
        let n = samples.len();
        Ok(Self {
            config: config.clone(),
            image_branch,
            event_branch,
            dn: DissimilarityNetwork::new(config.seed ^ DN_SEED_OFFSET),
            source,
            text,
            vocabulary,
            classes,
            adam: Adam::new(config.train.learning_rate),
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            samples,
            cache: (0..n).map(|_| None).collect(),
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    fn objective_options(&self) -> ObjectiveOptions {
        ObjectiveOptions {
            weights: self.config.loss.weights(),
            reweight: self.config.reweight.kind,
            soft_targets: self.config.loss.soft_targets,
            assignment: self.config.loss.assignment,
            train_dn: self.dn_trainable(),
        }
    }

    pub fn dn_trainable(&self) -> bool {
        self.config.reweight.kind == ReweightKind::DissimilarityNetwork && self.config.train.freeze_policy != FreezePolicy::None
    }

    fn cached(&mut self, i: usize) -> Result<&Cached> {
        if self.cache[i].is_none() {
            let s = &self.samples[i];
            let reconstruction = self.source.image(&s.stream, &s.image)?;
            let teacher = TeacherOutputs::compute(&self.image_branch, &s.image, &self.classes)?;
            self.cache[i] = Some(Cached { reconstruction, teacher });
        }
        Ok(self.cache[i].as_ref().unwrap())
    }

    /// Replaces the event-branch input of sample `i`, e.g. with a
    /// deliberately corrupted copy of its frame.
    pub fn set_reconstruction(&mut self, i: usize, image: GrayImage) -> Result<()> {
        let s = &self.samples[i];
        if (image.width, image.height) != (s.image.width, s.image.height) {
            return Err(Error::invalid("reconstruction geometry differs from the sample"));
        }
        let teacher = TeacherOutputs::compute(&self.image_branch, &s.image, &self.classes)?;
        self.cache[i] = Some(Cached {
            reconstruction: image,
            teacher,
        });
        Ok(())
    }

    /// The event-branch input image of sample `i`.
    pub fn reconstruction(&mut self, i: usize) -> Result<GrayImage> {
        Ok(self.cached(i)?.reconstruction.clone())
    }

    /// Loss components and trainable-parameter gradients of one sample.
    pub fn sample_gradients(&mut self, i: usize) -> Result<(LossComponents, BTreeMap<String, Tensor>)> {
        let opts = self.objective_options();
        self.cached(i)?;
        let c = self.cache[i].as_ref().unwrap();
        let g = Graph::new();
        let obj = sample_objective(
            &g,
            &self.event_branch,
            Some(&self.dn),
            &self.samples[i].image,
            &c.reconstruction,
            &c.teacher,
            &self.classes,
            &opts,
        )?;
        let comps = obj.components(&g);
        let grads = g.backward(obj.l_final);
        Ok((comps, g.param_grads(&grads)))
    }

    /// Draws the next batch of sample indices.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let n = self.samples.len();
        (0..self.config.train.batch_size).map(|_| self.rng.gen_range(0..n)).collect()
    }

    /// One optimisation step over a batch drawn from the trainer's RNG.
    pub fn train_step(&mut self) -> Result<LossReport> {
        let batch = self.next_batch();
        self.train_on(&batch)
    }

    /// One optimisation step over the given sample indices. Per-sample
    /// results are reduced in batch order.
    pub fn train_on(&mut self, batch: &[usize]) -> Result<LossReport> {
        let mut sum = LossComponents::default();
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for &i in batch {
            let (c, g) = self.sample_gradients(i)?;
            sum.l_t += c.l_t;
            sum.l_f += c.l_f;
            sum.l_m += c.l_m;
            sum.l_c += c.l_c;
            sum.l_reg += c.l_reg;
            for (k, v) in g {
                match grads.get_mut(&k) {
                    Some(acc) => acc.add_assign(&v),
                    None => {
                        grads.insert(k, v);
                    }
                }
            }
        }
        let k = batch.len() as f64;
        let mean = LossComponents {
            l_t: sum.l_t / k,
            l_f: sum.l_f / k,
            l_m: sum.l_m / k,
            l_c: sum.l_c / k,
            l_reg: sum.l_reg / k,
        };
        let mut report = total_loss(&mean, &self.config.loss.weights())?;
        for g in grads.values_mut() {
            g.scale_assign(1.0 / k);
        }
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return Err(Error::Numeric {
                component: name.clone(),
                message: format!("non-finite gradient at step {}", self.step + 1),
            });
        }
        report.grad_norms = component_norms(&grads);
        clip_global_norm(&mut grads, self.config.train.grad_clip);
        let (event, dn) = (&mut self.event_branch, &mut self.dn);
        self.adam.step(&grads, |f| {
            event.visit_mut("event", f);
            dn.visit_mut("dn", f);
        });
        self.step += 1;
        Ok(report)
    }

    /// Runs `steps` training steps, appending one record per step to `log`.
    pub fn fit(&mut self, steps: u64, mut log: Option<&mut dyn Write>, checkpoint_dir: Option<&Path>) -> Result<Vec<LogRecord>> {
        let mut records = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let start = Instant::now();
            let r = self.train_step()?;
            let rec = LogRecord {
                step: self.step,
                l_t: r.l_t,
                l_f: r.l_f,
                l_m: r.l_m,
                l_c: r.l_c,
                l_reg: r.l_reg,
                l_final: r.l_final,
                wall_ms: self.config.train.log_wall_time.then(|| start.elapsed().as_millis() as u64),
            };
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&rec).expect("log record serialises");
                writeln!(w, "{line}").map_err(|e| Error::io("<loss log>", e))?;
            }
            records.push(rec);
            let every = self.config.train.checkpoint_every;
            if let Some(dir) = checkpoint_dir {
                if every > 0 && self.step % every == 0 {
                    self.checkpoint().save(&dir.join(format!("step-{:06}.ckpt", self.step)))?;
                }
            }
        }
        Ok(records)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        self.image_branch.visit("image", &mut |n, t| {
            tensors.insert(n.to_string(), t.clone());
        });
        self.event_branch.visit("event", &mut |n, t| {
            tensors.insert(n.to_string(), t.clone());
        });
        self.dn.visit("dn", &mut |n, t| {
            tensors.insert(n.to_string(), t.clone());
        });
        if let ReconstructionSource::Events(r) = &self.source {
            r.visit("reconstructor", &mut |n, t| {
                tensors.insert(n.to_string(), t.clone());
            });
        }
        for (k, v) in &self.adam.m {
            tensors.insert(format!("adam.m.{k}"), v.clone());
        }
        for (k, v) in &self.adam.v {
            tensors.insert(format!("adam.v.{k}"), v.clone());
        }
        Checkpoint {
            step: self.step,
            config_hash: self.config.hash(),
            config_json: self.config.to_json(),
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
            optimizer_step: self.adam.t,
            tensors,
        }
    }

    /// Rebuilds a trainer from a checkpoint and the same training samples.
    /// Pre-training is skipped: the image branch comes from the checkpoint.
    pub fn resume(ck: &Checkpoint, dataset_classes: &[String], samples: Vec<Sample>) -> Result<Self> {
        let config = ExperimentConfig::from_json(&ck.config_json)?;
        if config.hash() != ck.config_hash {
            return Err(Error::InvalidInput("checkpoint config hash does not match its config".into()));
        }
        let mut skip = config.clone();
        skip.teacher.pretrain_steps = 0;
        let mut t = Trainer::new(&skip, dataset_classes, samples)?;
        t.config = config;
        t.image_branch.load_params("image", &ck.tensors)?;
        t.event_branch.load_params("event", &ck.tensors)?;
        t.dn.load_params("dn", &ck.tensors)?;
        if let ReconstructionSource::Events(r) = &mut t.source {
            r.load_params("reconstructor", &ck.tensors)?;
        }
        t.adam.m = ck.with_prefix("adam.m");
        t.adam.v = ck.with_prefix("adam.v");
        t.adam.t = ck.optimizer_step;
        t.step = ck.step;
        let mut rng = ChaCha8Rng::from_seed(ck.rng.seed);
        rng.set_stream(ck.rng.stream);
        rng.set_word_pos(ck.rng.word_pos);
        t.rng = rng;
        Ok(t)
    }

    /// Evaluation of the event branch on held-out samples.
    pub fn evaluate(&self, test: &[Sample], eval_vocab: Option<(&[String], &Tensor)>, merge: Option<&ClassMergeMap>) -> Result<EvalReport> {
        let (vocab, classes) = eval_vocab.unwrap_or((&self.vocabulary, &self.classes));
        let labeled: Vec<LabeledStream> = test.iter().map(Sample::labeled_stream).collect();
        let setup = EvalSetup {
            vocabulary: vocab,
            class_matrix: classes,
            gt_vocabulary: &self.vocabulary,
            merge,
            ignore_label: self.config.eval.ignore_label,
        };
        match &self.source {
            ReconstructionSource::Events(r) => evaluate(&self.event_branch, r, &labeled, &setup),
            ReconstructionSource::Identity => Err(Error::config("evaluation needs an event reconstructor")),
        }
    }
}

/// Gradient norm per component: `event.projector`, `event.masks`,
/// `event.head`, `dn`, ...
fn component_norms(grads: &BTreeMap<String, Tensor>) -> BTreeMap<String, f64> {
    let mut sq: BTreeMap<String, f64> = BTreeMap::new();
    for (name, g) in grads {
        let parts: Vec<&str> = name.splitn(3, '.').collect();
        let key = if parts[0] == "dn" || parts.len() < 2 {
            parts[0].to_string()
        } else {
            format!("{}.{}", parts[0], parts[1])
        };
        *sq.entry(key).or_default() += g.sq_norm();
    }
    sq.into_iter().map(|(k, v)| (k, v.sqrt())).collect()
}

/// The image branch for `config`: freshly initialised from the seed, then
/// pre-trained on `samples` when `teacher.pretrain_steps > 0`.
pub fn pretrained_image_branch(config: &ExperimentConfig, dataset_classes: &[String], samples: &[Sample]) -> Result<Branch> {
    let (mut image_branch, _) = build_branches(&config.model, config.train.freeze_policy, config.seed)?;
    if config.teacher.pretrain_steps > 0 {
        if samples.is_empty() {
            return Err(Error::config("pre-training needs at least one sample"));
        }
        let vocabulary = seen_vocabulary(config, dataset_classes)?;
        let classes = class_matrix(config, &text_encoder(config), &vocabulary)?;
        pretrain_image_branch(&mut image_branch, samples, &classes, &config.teacher, config.seed ^ TEACHER_SEED_OFFSET)?;
    }
    Ok(image_branch)
}

/// Supervised pixel cross-entropy training of the image branch on labelled
/// frames. Everything except the image encoder is updated.
pub fn pretrain_image_branch(
    branch: &mut Branch,
    samples: &[Sample],
    classes: &Tensor,
    cfg: &TeacherConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let c = classes.shape()[0];
    let targets: Vec<Rc<Tensor>> = samples
        .iter()
        .map(|s| {
            let mut t = vec![0.0; s.labels.len() * c];
            for (p, &l) in s.labels.iter().enumerate() {
                if l < c {
                    t[p * c + l] = 1.0;
                }
            }
            Rc::new(Tensor::from_parts(vec![s.labels.len(), c], t))
        })
        .collect();
    let saved = branch.trainable;
    branch.trainable = Trainable {
        projector: true,
        unet: true,
        mask_generator: true,
        head: true,
    };
    let mut adam = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = Vec::with_capacity(cfg.pretrain_steps as usize);
    for step in 0..cfg.pretrain_steps {
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let i = rng.gen_range(0..samples.len());
            let g = Graph::new();
            let s = Scope::new(&g, "image", true);
            let fwd = branch.forward(&s, &samples[i].image)?;
            let probs = branch
                .head
                .class_probabilities(&branch.head_scope(&s), fwd.mask_embeddings, classes)?;
            let scores = semantic_scores(&g, fwd.mask_logits, probs);
            let n = samples[i].labels.len();
            let ones = g.constant(Tensor::ones(&[n]));
            let l = g.weighted_kl(scores, ones, targets[i].clone());
            loss += g.scalar(l);
            for (k, v) in g.param_grads(&g.backward(l)) {
                match grads.get_mut(&k) {
                    Some(acc) => acc.add_assign(&v),
                    None => {
                        grads.insert(k, v);
                    }
                }
            }
        }
        let k = cfg.batch_size as f64;
        for g in grads.values_mut() {
            g.scale_assign(1.0 / k);
        }
        if !loss.is_finite() {
            return Err(Error::Numeric {
                component: "pretraining".into(),
                message: format!("loss {loss} at step {}", step + 1),
            });
        }
        clip_global_norm(&mut grads, 10.0);
        adam.step(&grads, |f| branch.visit_mut("image", f));
        history.push(loss / k);
    }
    branch.trainable = saved;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.model = ModelConfig::micro();
        c.dataset = DatasetConfig {
            sequences: 3,
            test_sequences: 2,
            frames: 4,
            width: 16,
            height: 16,
            ..DatasetConfig::default()
        };
        c.train.batch_size = 2;
        c.train.learning_rate = 1e-3;
        c
    }

    fn trainer(c: &ExperimentConfig) -> Trainer {
        let ds = generate_toy(&c.dataset, c.seed).unwrap();
        Trainer::new(c, &ds.classes, ds.train).unwrap()
    }

    #[test]
    fn freeze_policies() {
        let t = FreezePolicy::Both.trainable();
        assert!(t.projector && t.mask_generator && t.head && !t.unet);
        let t = FreezePolicy::MlpOnly.trainable();
        assert!(t.projector && !t.mask_generator);
        let t = FreezePolicy::MaskGeneratorOnly.trainable();
        assert!(!t.projector && t.mask_generator);
        assert_eq!(FreezePolicy::None.trainable(), Trainable::NONE);
        let (a, b) = build_branches(&ModelConfig::micro(), FreezePolicy::Both, 3).unwrap();
        assert_eq!(a.named_params("x"), b.named_params("x"));
        assert_eq!(a.trainable, Trainable::NONE);
    }

    #[test]
    fn steps_are_deterministic_and_finite() {
        let c = tiny_config();
        let mut a = trainer(&c);
        let mut b = trainer(&c);
        let ra = a.fit(3, None, None).unwrap();
        let rb = b.fit(3, None, None).unwrap();
        assert_eq!(ra, rb);
        assert!(ra.iter().all(|r| r.l_final.is_finite()));
        assert_eq!(a.event_branch, b.event_branch);
    }

    #[test]
    fn resume_is_bit_identical() {
        let c = tiny_config();
        let mut full = trainer(&c);
        let all = full.fit(4, None, None).unwrap();
        let mut first = trainer(&c);
        first.fit(2, None, None).unwrap();
        let ck = first.checkpoint();
        let bytes = ck.to_bytes();
        let ck2 = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ck2.to_bytes(), bytes);
        let ds = generate_toy(&c.dataset, c.seed).unwrap();
        let mut resumed = Trainer::resume(&ck2, &ds.classes, ds.train).unwrap();
        let rest = resumed.fit(2, None, None).unwrap();
        assert_eq!(&all[2..], rest.as_slice());
        assert_eq!(full.checkpoint().to_bytes(), resumed.checkpoint().to_bytes());
    }

    #[test]
    fn empty_dataset_is_config_error() {
        assert!(matches!(
            Trainer::new(&tiny_config(), &["a".to_string()], vec![]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pretraining_reduces_pixel_loss() {
        let mut c = tiny_config();
        c.teacher.pretrain_steps = 30;
        c.teacher.learning_rate = 1e-2;
        let ds = generate_toy(&c.dataset, 1).unwrap();
        let text = text_encoder(&c);
        let classes = class_matrix(&c, &text, &ds.classes).unwrap();
        let mut b = Branch::new(&c.model, 0).unwrap();
        let h = pretrain_image_branch(&mut b, &ds.train, &classes, &c.teacher, 5).unwrap();
        let head: f64 = h[..5].iter().sum();
        let tail: f64 = h[h.len() - 5..].iter().sum();
        assert!(tail < head, "{head} -> {tail}");
    }
}
