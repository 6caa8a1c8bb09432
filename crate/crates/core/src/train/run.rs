//! File-level drivers shared by the command line and the tests.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{Checkpoint, ExperimentConfig, LogRecord, ReconstructorChoice, Trainer};
use crate::backbones::{parse_class_file, Branch, TextEncoder};
use crate::error::{Error, Result};
use crate::eval::{evaluate, segment_events, ClassMergeMap, EvalReport, EvalSetup, LabeledStream, SegmentationMap};
use crate::events::EventStream;
use crate::nn::Parameterized;
use crate::reconstruct::Reconstructor;
use crate::tensor::Tensor;

use super::{class_matrix, generate_toy, load_dataset, text_encoder, Dataset, RECON_SEED_OFFSET};

pub const LOSS_LOG: &str = "loss_log.ndjson";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("value serialises") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The configured dataset: read from `data_dir` when set, generated in
/// memory otherwise.
pub fn dataset_for(config: &ExperimentConfig) -> Result<Dataset> {
    match &config.data_dir {
        Some(dir) => load_dataset(dir),
        None => generate_toy(&config.dataset, config.seed),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub records: Vec<LogRecord>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Trains for `config.train.steps` in total, writing the loss log, periodic
/// and final checkpoints and the resolved config under `out`. A resumed run
/// appends to the existing log.
pub fn run_training(config: &ExperimentConfig, dataset: &Dataset, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(&Checkpoint::load(p)?, &dataset.classes, dataset.train.clone())?,
        None => Trainer::new(config, &dataset.classes, dataset.train.clone())?,
    };
    // A resumed run keeps its embedded config but trains up to the
    // caller's step count.
    trainer.config.train.steps = config.train.steps;
    let cfg = trainer.config.clone();
    let config_path = out.join("config.toml");
    fs::write(&config_path, cfg.to_toml()).map_err(|e| Error::io(&config_path, e))?;
    let log = out.join(LOSS_LOG);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log)
        .map_err(|e| Error::io(&log, e))?;
    let mut writer = BufWriter::new(file);
    let remaining = cfg.train.steps.saturating_sub(trainer.step);
    let records = trainer.fit(remaining, Some(&mut writer), Some(out))?;
    writer.flush().map_err(|e| Error::io(&log, e))?;
    let checkpoint = out.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&checkpoint)?;
    Ok(TrainOutcome { records, checkpoint, log })
}

/// The deployable half of a trained model: the event branch, its
/// reconstructor and the text encoder.
#[derive(Clone, Debug)]
pub struct EventModel {
    pub config: ExperimentConfig,
    pub branch: Branch,
    pub text: TextEncoder,
    reconstructor_params: BTreeMap<String, Tensor>,
}

impl EventModel {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ExperimentConfig::from_json(&ck.config_json)?;
        let mut branch = Branch::new(&config.model, config.seed)?;
        branch.load_params("event", &ck.tensors)?;
        Ok(Self {
            text: text_encoder(&config),
            reconstructor_params: ck
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with("reconstructor."))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            config,
            branch,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// The trained reconstructor, instantiated for a sensor geometry.
    pub fn reconstructor(&self, width: usize, height: usize) -> Result<Reconstructor> {
        let r = &self.config.reconstructor;
        match r.kind {
            ReconstructorChoice::Integrator => Reconstructor::integrator(width, height, r.decay, r.contrast),
            ReconstructorChoice::LearnedRecurrent => {
                let mut rec =
                    Reconstructor::recurrent(width, height, self.config.voxel.bins, r.hidden, self.config.seed ^ RECON_SEED_OFFSET)?;
                rec.load_params("reconstructor", &self.reconstructor_params)?;
                Ok(rec)
            }
            ReconstructorChoice::Identity => Err(Error::config(
                "the identity reconstructor needs frames and cannot run on events alone",
            )),
        }
    }

    pub fn class_matrix(&self, vocabulary: &[String]) -> Result<Tensor> {
        class_matrix(&self.config, &self.text, vocabulary)
    }

    pub fn segment(&self, stream: &EventStream, vocabulary: &[String]) -> Result<SegmentationMap> {
        let rec = self.reconstructor(stream.width, stream.height)?;
        segment_events(&self.branch, &rec, stream, &self.class_matrix(vocabulary)?, vocabulary)
    }

    /// Evaluates on `samples` labelled in `gt_vocabulary`. The prediction
    /// vocabulary defaults to the ground-truth one.
    pub fn evaluate(
        &self,
        samples: &[LabeledStream],
        gt_vocabulary: &[String],
        vocabulary: Option<&[String]>,
        merge: Option<&ClassMergeMap>,
    ) -> Result<EvalReport> {
        let vocabulary = vocabulary.unwrap_or(gt_vocabulary);
        let classes = self.class_matrix(vocabulary)?;
        let (w, h) = samples.first().map_or((1, 1), |s| (s.stream.width, s.stream.height));
        let rec = self.reconstructor(w, h)?;
        let setup = EvalSetup {
            vocabulary,
            class_matrix: &classes,
            gt_vocabulary,
            merge,
            ignore_label: self.config.eval.ignore_label,
        };
        evaluate(&self.branch, &rec, samples, &setup)
    }
}

/// Evaluation inputs resolved from files.
pub struct EvalInputs {
    pub vocabulary: Option<Vec<String>>,
    pub merge: Option<ClassMergeMap>,
}

impl EvalInputs {
    pub fn from_files(classes: Option<&Path>, merge: Option<&Path>) -> Result<Self> {
        Ok(Self {
            vocabulary: classes.map(parse_class_file).transpose()?,
            merge: merge.map(ClassMergeMap::from_file).transpose()?,
        })
    }
}

/// Evaluates a checkpoint on a dataset's held-out split (all sequences when
/// it has none) and writes the report.
pub fn run_evaluation(model: &EventModel, dataset: &Dataset, inputs: &EvalInputs, report: &Path) -> Result<EvalReport> {
    let split = if dataset.test.is_empty() { &dataset.train } else { &dataset.test };
    let samples: Vec<LabeledStream> = split.iter().map(|s| s.labeled_stream()).collect();
    let r = model.evaluate(&samples, &dataset.classes, inputs.vocabulary.as_deref(), inputs.merge.as_ref())?;
    write_json(&r, report)?;
    Ok(r)
}
