//! Experiment configuration (TOML). Every section is optional and unknown
//! keys are rejected.
//!
//! ```toml
//! seed = 0
//! data_dir = "data/toy"          # optional; synthesised in memory if absent
//!
//! [dataset]   # toy generator: sequences, test_sequences, frames, width, ...
//! [model]     # d_v, d_t, d_f, tokens, queries, decoder_layers, d_q, ...
//! [train]     # learning_rate, batch_size, optimizer, steps, freeze_policy,
//!             # grad_clip, checkpoint_every, log_wall_time
//! [teacher]   # pretrain_steps, learning_rate, batch_size
//! [reconstructor]  # kind, decay, contrast, hidden, checkpoint
//! [voxel]     # bins
//! [reweight]  # kind = none | cosine-similarity | feature-difference | dissimilarity-network
//! [loss]      # lambda_m, lambda_c, lambda_reg, soft_targets, assignment
//! [text]      # templates, prompt_file, classes_file
//! [eval]      # classes_file, merge_file, ignore_label
//! [output]    # dir
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::DatasetConfig;
use crate::backbones::{ModelConfig, DEFAULT_PROMPT};
use crate::distill::{LossWeights, QueryAssignment, ReweightKind};
use crate::error::{Error, Result};
use crate::events::DEFAULT_BINS;

/// Which event-branch components are fine-tuned. The category head (and
/// the dissimilarity network when used) train under every policy except
/// `none`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Nothing is trained; the untrained baseline.
    None,
    MlpOnly,
    MaskGeneratorOnly,
    #[default]
    Both,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub steps: u64,
    pub freeze_policy: FreezePolicy,
    pub grad_clip: f64,
    /// Write an intermediate checkpoint every this many steps (0 = never).
    pub checkpoint_every: u64,
    /// Record wall-clock milliseconds in the loss log. Off by default so
    /// that logs of identical runs are byte-identical.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 4,
            optimizer: Optimizer::Adam,
            steps: 100,
            freeze_policy: FreezePolicy::Both,
            grad_clip: 10.0,
            checkpoint_every: 0,
            log_wall_time: false,
        }
    }
}

/// Supervised pre-training of the image branch on labelled frames, standing
/// in for loading pre-trained foundation weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub pretrain_steps: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            pretrain_steps: 0,
            learning_rate: 3e-3,
            batch_size: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconstructorChoice {
    #[default]
    Integrator,
    LearnedRecurrent,
    /// Uses the grayscale frame itself; a test oracle for the zero-gap case.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructorConfig {
    pub kind: ReconstructorChoice,
    pub decay: f64,
    pub contrast: f64,
    /// Hidden channels of the learned-recurrent reconstructor.
    pub hidden: usize,
    /// Checkpoint holding `reconstructor.*` weights for the learned kind.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ReconstructorConfig {
    fn default() -> Self {
        Self {
            kind: ReconstructorChoice::Integrator,
            decay: 1.0,
            contrast: 0.15,
            hidden: 4,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoxelConfig {
    pub bins: usize,
}

impl Default for VoxelConfig {
    fn default() -> Self {
        Self { bins: DEFAULT_BINS }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReweightConfig {
    pub kind: ReweightKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_m: f64,
    pub lambda_c: f64,
    pub lambda_reg: f64,
    pub soft_targets: bool,
    pub assignment: QueryAssignment,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda_m: w.lambda_m,
            lambda_c: w.lambda_c,
            lambda_reg: w.lambda_reg,
            soft_targets: true,
            assignment: QueryAssignment::Overlap,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_m: self.lambda_m,
            lambda_c: self.lambda_c,
            lambda_reg: self.lambda_reg,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    /// Prompt templates, each with one `{}` placeholder.
    pub templates: Vec<String>,
    /// Overrides `templates` when set.
    pub prompt_file: Option<PathBuf>,
    /// Seen-class vocabulary; defaults to the dataset's classes.
    pub classes_file: Option<PathBuf>,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            templates: vec![DEFAULT_PROMPT.to_string()],
            prompt_file: None,
            classes_file: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Test-time vocabulary; defaults to the dataset's classes.
    pub classes_file: Option<PathBuf>,
    pub merge_file: Option<PathBuf>,
    pub ignore_label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub teacher: TeacherConfig,
    pub reconstructor: ReconstructorConfig,
    pub voxel: VoxelConfig,
    pub reweight: ReweightConfig,
    pub loss: LossConfig,
    pub text: TextConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative input-file paths (prompts, class
    /// lists, merge maps, reconstructor weights) are taken relative to the
    /// file's directory; `data_dir` and `output.dir` stay relative to the
    /// working directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(base) = path.parent() {
            cfg.resolve_inputs(base);
        }
        Ok(cfg)
    }

    fn resolve_inputs(&mut self, base: &Path) {
        for p in [
            &mut self.reconstructor.checkpoint,
            &mut self.text.prompt_file,
            &mut self.text.classes_file,
            &mut self.eval.classes_file,
            &mut self.eval.merge_file,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises to JSON")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("embedded config: {e}")))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_json().as_bytes()).into()
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.loss.weights().validate()?;
        let t = &self.train;
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate must be positive"));
        }
        if t.batch_size == 0 || self.teacher.batch_size == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if !(t.grad_clip > 0.0) {
            return Err(Error::config("train.grad_clip must be positive"));
        }
        if !(self.teacher.learning_rate > 0.0) {
            return Err(Error::config("teacher.learning_rate must be positive"));
        }
        if self.voxel.bins == 0 {
            return Err(Error::config("voxel.bins must be positive"));
        }
        let r = &self.reconstructor;
        if !(0.0..=1.0).contains(&r.decay) || !(r.contrast > 0.0) || r.hidden == 0 {
            return Err(Error::config(
                "reconstructor.decay must lie in [0, 1], contrast and hidden must be positive",
            ));
        }
        if self.text.prompt_file.is_none() {
            if self.text.templates.is_empty() {
                return Err(Error::config("text.templates is empty"));
            }
            if let Some(bad) = self.text.templates.iter().find(|t| t.matches("{}").count() != 1) {
                return Err(Error::config(format!("template {bad:?} must contain exactly one {{}} placeholder")));
            }
        }
        Ok(())
    }

    /// Applies `key=value` overrides with dotted keys, e.g.
    /// `train.steps=5`. Values are parsed as TOML, falling back to strings.
    pub fn with_overrides<'a>(&self, overrides: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut doc: toml::Value = toml::Value::try_from(self).map_err(|e| Error::config(e.to_string()))?;
        for (key, raw) in overrides {
            let value = parse_value(raw);
            let mut node = &mut doc;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| Error::config(format!("override {key}: {part} is not a section")))?;
                if i + 1 == parts.len() {
                    table.insert(part.to_string(), value.clone());
                    break;
                }
                node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
            }
        }
        let cfg: Self = doc.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
