//! Experiment configs, the training loop, evaluation, the surrogate transfer
//! experiment and comparison reports.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, Checkpoint, CheckpointMeta, LoadScope};
use crate::data::{self, AugmentPlan, Split, SplitData, SynthSpec};
use crate::error::{Error, Result};
use crate::metrics::{self, ConfusionMatrix, Metric, MetricSet};
use crate::nn::{init_weights, Mode, Model};
use crate::optim::{self, OptimizerConfig, OptimizerState};
use crate::tensor::Tensor;
use crate::zoo::{self, ModelId};

pub const DEFAULT_EPOCHS: usize = 30;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_HINGE_LAMBDA: f64 = 5e-4;
pub const CURVE_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,seconds";
pub const TRANSFER_THRESHOLD: f64 = 0.95;

fn default_epochs() -> usize {
    DEFAULT_EPOCHS
}

fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}

fn default_lambda() -> f64 {
    DEFAULT_HINGE_LAMBDA
}

/// Spatial input size, written `HxW` (height first).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct InputSize {
    pub height: usize,
    pub width: usize,
}

impl InputSize {
    pub fn shape(&self) -> [usize; 3] {
        [data::CHANNELS, self.height, self.width]
    }
}

impl FromStr for InputSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("input size must look like 320x240, got '{s}'"));
        let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
        let height: usize = h.trim().parse().map_err(|_| bad())?;
        let width: usize = w.trim().parse().map_err(|_| bad())?;
        if height == 0 || width == 0 {
            return Err(bad());
        }
        Ok(InputSize { height, width })
    }
}

impl TryFrom<String> for InputSize {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<InputSize> for String {
    fn from(s: InputSize) -> String {
        s.to_string()
    }
}

impl fmt::Display for InputSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossConfig {
    Bce,
    HingeL2 {
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
    /// Multi-class; only for the shape source task.
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSource {
    pub per_class: usize,
    pub val_per_class: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// `<root>/<split>/<class>/` tree.
    Dir(PathBuf),
    /// TSV manifest.
    Manifest(PathBuf),
    /// Binary fire / non-fire generator.
    Synth(SynthSource),
    /// Four-class shape/palette generator.
    SynthShapes(SynthSource),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model_id: ModelId,
    pub input_size: InputSize,
    pub dataset: DatasetSource,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Defaults to hinge_l2 for cnn_svm, cross_entropy for the shape task
    /// and bce otherwise.
    #[serde(default)]
    pub loss: Option<LossConfig>,
    pub seed: u64,
    #[serde(default)]
    pub augment_plan: AugmentPlan,
    #[serde(default)]
    pub freeze_base: bool,
    #[serde(default)]
    pub backbone_checkpoint: Option<PathBuf>,
    /// Permits a loss the model is not normally paired with.
    #[serde(default)]
    pub loss_override: bool,
}

impl ExperimentConfig {
    /// Reads a JSON config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut cfg.dataset {
            DatasetSource::Dir(p) | DatasetSource::Manifest(p) => resolve(p),
            _ => {}
        }
        if let Some(p) = &mut cfg.backbone_checkpoint {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn is_source_task(&self) -> bool {
        matches!(self.dataset, DatasetSource::SynthShapes(_))
    }

    pub fn effective_loss(&self) -> LossConfig {
        self.loss.unwrap_or(if self.is_source_task() {
            LossConfig::CrossEntropy
        } else if self.model_id == ModelId::CnnSvm {
            LossConfig::HingeL2 {
                lambda: DEFAULT_HINGE_LAMBDA,
            }
        } else {
            LossConfig::Bce
        })
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return cfg_err("batch_size must be >= 1".into());
        }
        self.optimizer.validate()?;
        self.augment_plan.validate()?;
        let backboned = self.model_id.is_backboned();
        if self.freeze_base && !backboned {
            return cfg_err(format!("freeze_base needs a backboned model, {} has none", self.model_id));
        }
        if self.backbone_checkpoint.is_some() && !backboned {
            return cfg_err(format!("backbone_checkpoint needs a backboned model, {} has none", self.model_id));
        }
        match (self.effective_loss(), self.is_source_task()) {
            (LossConfig::CrossEntropy, false) => {
                return cfg_err("cross_entropy is only for the synth_shapes task".into())
            }
            (LossConfig::Bce | LossConfig::HingeL2 { .. }, true) => {
                return cfg_err("synth_shapes is multi-class; use cross_entropy".into())
            }
            (LossConfig::HingeL2 { lambda }, _) => {
                if !(lambda >= 0.0 && lambda.is_finite()) {
                    return cfg_err(format!("hinge_l2 lambda must be >= 0, got {lambda}"));
                }
                if self.model_id != ModelId::CnnSvm && !self.loss_override {
                    return cfg_err(format!(
                        "hinge_l2 is paired with cnn_svm; set loss_override to use it with {}",
                        self.model_id
                    ));
                }
            }
            _ => {}
        }
        if self.is_source_task() && !backboned {
            return cfg_err(format!("synth_shapes pre-trains a backbone; {} has none", self.model_id));
        }
        if let DatasetSource::Synth(s) | DatasetSource::SynthShapes(s) = &self.dataset {
            if s.per_class == 0 || s.val_per_class == 0 {
                return cfg_err("synthetic per_class and val_per_class must be >= 1".into());
            }
        }
        self.model_spec()?;
        Ok(())
    }

    /// The network this config trains, before any freezing choice.
    pub fn model_spec(&self) -> Result<crate::nn::ModelSpec> {
        let to_cfg = |e: Error| Error::Config(e.to_string());
        let spec = zoo::build(self.model_id, self.input_size.shape()).map_err(to_cfg)?;
        if self.is_source_task() {
            zoo::with_classifier_head(&spec, data::SHAPE_CLASSES).map_err(to_cfg)
        } else {
            Ok(spec)
        }
    }

    pub fn build_model(&self) -> Result<Model<f32>> {
        let mut model = init_weights(&self.model_spec()?, self.seed)?;
        if self.model_id.is_backboned() {
            if let Some(path) = &self.backbone_checkpoint {
                let ckpt = checkpoint::load(path)?;
                model = checkpoint::load_into(model, &ckpt, LoadScope::BackboneOnly)?;
            }
            model.set_backbone_trainable(!self.freeze_base)?;
        }
        Ok(model)
    }
}

/// Train / val (/ test) splits resident in memory.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub train: SplitData,
    pub val: SplitData,
    pub test: Option<SplitData>,
    pub classes: usize,
}

impl TaskData {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let (h, w) = (cfg.input_size.height, cfg.input_size.width);
        let data = match &cfg.dataset {
            DatasetSource::Dir(p) | DatasetSource::Manifest(p) => {
                let manifest = data::load_manifest(p)?;
                let test = (manifest.split_len(Split::Test) > 0)
                    .then(|| SplitData::load(&manifest, Split::Test, h, w))
                    .transpose()?;
                TaskData {
                    train: SplitData::load(&manifest, Split::Train, h, w)?,
                    val: SplitData::load(&manifest, Split::Val, h, w)?,
                    test,
                    classes: 2,
                }
            }
            DatasetSource::Synth(s) => {
                let gen = |n, seed| {
                    let corpus = data::synth_dataset(&SynthSpec {
                        per_class: n,
                        height: h,
                        width: w,
                        seed,
                    })?;
                    let (images, labels) =
                        corpus.into_iter().map(|(img, l)| (img, l.target())).unzip();
                    Ok::<_, Error>((images, labels))
                };
                let (ti, tl) = gen(s.per_class, s.seed)?;
                let (vi, vl) = gen(s.val_per_class, data::mix(s.seed, 1))?;
                TaskData {
                    train: SplitData::new(Split::Train, ti, tl)?,
                    val: SplitData::new(Split::Val, vi, vl)?,
                    test: None,
                    classes: 2,
                }
            }
            DatasetSource::SynthShapes(s) => {
                let gen = |n, seed| {
                    let corpus = data::synth_shapes(&SynthSpec {
                        per_class: n,
                        height: h,
                        width: w,
                        seed,
                    })?;
                    let (images, labels) =
                        corpus.into_iter().map(|(img, c)| (img, c as u8)).unzip();
                    Ok::<_, Error>((images, labels))
                };
                let (ti, tl) = gen(s.per_class, s.seed)?;
                let (vi, vl) = gen(s.val_per_class, data::mix(s.seed, 1))?;
                TaskData {
                    train: SplitData::new(Split::Train, ti, tl)?,
                    val: SplitData::new(Split::Val, vi, vl)?,
                    test: None,
                    classes: data::SHAPE_CLASSES,
                }
            }
        };
        for (split, d) in [(Split::Train, &data.train), (Split::Val, &data.val)] {
            if d.is_empty() {
                return Err(Error::Dataset(format!("{split} split is empty")));
            }
        }
        Ok(data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

impl CurveRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.3}",
            self.epoch, self.train_loss, self.train_acc, self.val_loss, self.val_acc, self.seconds
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        let bad = || Error::Validation(format!("bad curve row {line:?}"));
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(CurveRow {
            epoch: f[0].parse().map_err(|_| bad())?,
            train_loss: num(1)?,
            train_acc: num(2)?,
            val_loss: num(3)?,
            val_acc: num(4)?,
            seconds: num(5)?,
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Run directory; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Stop after the first epoch whose training accuracy reaches this.
    pub stop_at_train_accuracy: Option<f64>,
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub dir: Option<PathBuf>,
    pub curves: Vec<CurveRow>,
    /// Per-epoch validation confusion; empty for multi-class runs.
    pub val_confusions: Vec<ConfusionMatrix>,
    /// 0 means the initial weights were never beaten.
    pub best_epoch: usize,
    /// Final-model confusion per split (binary runs only).
    pub final_confusion: Vec<(Split, ConfusionMatrix)>,
}

impl RunArtifacts {
    pub fn epochs_to(&self, val_accuracy: f64) -> Option<usize> {
        self.curves.iter().find(|r| r.val_acc >= val_accuracy).map(|r| r.epoch)
    }

    pub fn final_metrics(&self, split: Split) -> Option<MetricSet> {
        self.final_confusion
            .iter()
            .find(|(s, _)| *s == split)
            .map(|(_, cm)| metrics::derive(cm))
    }
}

struct Objective {
    loss: LossConfig,
    head_weight: Option<String>,
}

struct BatchLoss {
    total: f64,
    correct: usize,
    grad: Tensor<f32>,
    head_grad: Option<Tensor<f32>>,
}

impl Objective {
    fn new(cfg: &ExperimentConfig, model: &Model<f32>) -> Result<Self> {
        let loss = cfg.effective_loss();
        let head_weight = match loss {
            LossConfig::HingeL2 { .. } => Some(
                model
                    .output_weight_name()
                    .ok_or_else(|| Error::Config("hinge_l2 needs a dense output layer".into()))?
                    .to_string(),
            ),
            _ => None,
        };
        Ok(Objective { loss, head_weight })
    }

    fn eval(&self, model: &Model<f32>, logits: &Tensor<f32>, labels: &[u8]) -> Result<BatchLoss> {
        let n = labels.len();
        let (value, grad, head_grad) = match self.loss {
            LossConfig::Bce => {
                let z = logits.clone().reshape(vec![n])?;
                let (v, g) = optim::bce_with_logits(&z, labels)?;
                (v, g, None)
            }
            LossConfig::HingeL2 { lambda } => {
                let z = logits.clone().reshape(vec![n])?;
                let signs: Vec<i8> = labels.iter().map(|&l| if l == 1 { 1 } else { -1 }).collect();
                let name = self.head_weight.as_deref().expect("set for hinge");
                let w = &model
                    .param(name)
                    .ok_or_else(|| Error::State(format!("missing head weight {name}")))?
                    .value;
                let (v, g) = optim::hinge_l2(&z, &signs, w, lambda as f32)?;
                (v, g.logits, Some(g.head_weights))
            }
            LossConfig::CrossEntropy => {
                let classes: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
                let (v, g) = optim::softmax_cross_entropy(logits, &classes)?;
                (v, g, None)
            }
        };
        Ok(BatchLoss {
            total: f64::from(value.scalar) * n as f64,
            correct: count_correct(logits, labels),
            grad,
            head_grad,
        })
    }
}

fn count_correct(logits: &Tensor<f32>, labels: &[u8]) -> usize {
    let k = logits.len() / labels.len().max(1);
    logits
        .data()
        .chunks_exact(k.max(1))
        .zip(labels)
        .filter(|(row, &l)| predicted_class(row) == usize::from(l))
        .count()
}

fn predicted_class(row: &[f32]) -> usize {
    if row.len() == 1 {
        usize::from(row[0] > 0.0)
    } else {
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        best
    }
}

struct Pass {
    loss: f64,
    accuracy: f64,
    confusion: Option<ConfusionMatrix>,
}

fn evaluate_split(
    model: &Model<f32>,
    objective: &Objective,
    data: &SplitData,
    batch_size: usize,
    binary: bool,
) -> Result<Pass> {
    let (mut total, mut correct) = (0.0, 0usize);
    let mut cm = ConfusionMatrix::default();
    for batch in data.sequential(batch_size)? {
        let batch = batch?;
        let logits = model.predict(&batch.images)?;
        let l = objective.eval(model, &logits, &batch.labels)?;
        total += l.total;
        correct += l.correct;
        if binary {
            let z = logits.reshape(vec![batch.labels.len()])?;
            cm.merge(&metrics::confusion(&z, &batch.labels, 0.0)?);
        }
    }
    let n = data.len().max(1) as f64;
    Ok(Pass {
        loss: total / n,
        accuracy: correct as f64 / n,
        confusion: binary.then_some(cm),
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::storage(path, e))
}

/// Loads the config's data, builds its model and trains.
pub fn train(cfg: &ExperimentConfig, opts: &TrainOptions) -> Result<RunArtifacts> {
    cfg.validate()?;
    let data = TaskData::load(cfg)?;
    let model = cfg.build_model()?;
    fit(cfg, model, &data, opts).map(|(_, a)| a)
}

/// Trains `model` on `data` for `cfg.epochs`; returns the final model.
pub fn fit(
    cfg: &ExperimentConfig,
    mut model: Model<f32>,
    data: &TaskData,
    opts: &TrainOptions,
) -> Result<(Model<f32>, RunArtifacts)> {
    let binary = data.classes == 2;
    let objective = Objective::new(cfg, &model)?;
    let mut optimizer = OptimizerState::new(cfg.optimizer);
    let digest = cfg.digest();
    let meta = |epoch: usize| CheckpointMeta {
        model_id: cfg.model_id.as_str().to_string(),
        epoch: epoch as u64,
        seed: cfg.seed,
        config_digest: digest.clone(),
    };

    let dir = opts.out_dir.clone();
    let mut curve_file = None;
    let mut confusion_file = None;
    if let Some(d) = &dir {
        fs::create_dir_all(d).map_err(|e| Error::storage(d, e))?;
        write_file(&d.join("config.json"), &cfg.to_json())?;
        let open = |name: &str, header: &str| -> Result<fs::File> {
            let path = d.join(name);
            let mut f = fs::File::create(&path).map_err(|e| Error::storage(&path, e))?;
            writeln!(f, "{header}").map_err(|e| Error::storage(&path, e))?;
            Ok(f)
        };
        curve_file = Some(open("curves.csv", CURVE_HEADER)?);
        let header = if binary { "epoch,tp,fp,fn,tn" } else { "epoch,correct,total" };
        confusion_file = Some(open("val_confusion.csv", header)?);
        checkpoint::save(&model, meta(0), &d.join("best.wfck"))?;
    }

    let plan = (!cfg.augment_plan.is_empty()).then_some(&cfg.augment_plan);
    let mut curves = Vec::with_capacity(cfg.epochs);
    let mut val_confusions = Vec::new();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let (mut total, mut correct) = (0.0, 0usize);
        for (b, batch) in data.train.epoch(cfg.batch_size, cfg.seed, epoch as u64, plan)?.enumerate() {
            let batch = batch?;
            let logits = model.forward_outputs(&batch.images, Mode::Train)?;
            let l = objective.eval(&model, &logits, &batch.labels)?;
            if !l.total.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: format!("non-finite loss at batch {b}"),
                });
            }
            let mut grads = model.backward(&l.grad)?;
            if let (Some(extra), Some(name)) = (&l.head_grad, &objective.head_weight) {
                grads.accumulate(name, extra)?;
            }
            optimizer.step(&mut model, &grads)?;
            total += l.total;
            correct += l.correct;
        }
        let n = data.train.len() as f64;
        let val = evaluate_split(&model, &objective, &data.val, cfg.batch_size, binary)?;
        if !val.loss.is_finite() {
            return Err(Error::Training {
                epoch,
                reason: "non-finite validation loss".into(),
            });
        }
        let row = CurveRow {
            epoch,
            train_loss: total / n,
            train_acc: correct as f64 / n,
            val_loss: val.loss,
            val_acc: val.accuracy,
            seconds: started.elapsed().as_secs_f64(),
        };
        if opts.verbose {
            eprintln!(
                "epoch {epoch:>3}  loss {:.4}  acc {:.4}  val_loss {:.4}  val_acc {:.4}  {:.1}s",
                row.train_loss, row.train_acc, row.val_loss, row.val_acc, row.seconds
            );
        }
        let improved = val.accuracy > best_acc;
        if improved {
            best_acc = val.accuracy;
            best_epoch = epoch;
        }
        if let (Some(d), Some(cf), Some(vf)) = (&dir, &mut curve_file, &mut confusion_file) {
            let io = |e| Error::storage(d, e);
            writeln!(cf, "{}", row.to_csv()).map_err(io)?;
            match val.confusion {
                Some(cm) => writeln!(vf, "{epoch},{},{},{},{}", cm.tp, cm.fp, cm.fn_, cm.tn),
                None => writeln!(vf, "{epoch},{},{}", (val.accuracy * data.val.len() as f64).round(), data.val.len()),
            }
            .map_err(io)?;
            if improved {
                checkpoint::save(&model, meta(epoch), &d.join("best.wfck"))?;
            }
        }
        if let Some(cm) = val.confusion {
            val_confusions.push(cm);
        }
        curves.push(row);
        if opts.stop_at_train_accuracy.is_some_and(|t| row.train_acc >= t) {
            break;
        }
    }

    let mut final_confusion = Vec::new();
    if binary {
        let splits = [(Split::Train, Some(&data.train)), (Split::Val, Some(&data.val)), (Split::Test, data.test.as_ref())];
        for (split, d) in splits {
            if let Some(d) = d {
                let pass = evaluate_split(&model, &objective, d, cfg.batch_size, true)?;
                final_confusion.push((split, pass.confusion.expect("binary")));
            }
        }
    }
    if let Some(d) = &dir {
        let last = curves.last().map_or(0, |r| r.epoch);
        checkpoint::save(&model, meta(last), &d.join("final.wfck"))?;
        if binary {
            let mut csv = format!("{}\n", metrics::CSV_HEADER);
            for (split, cm) in &final_confusion {
                csv.push_str(&metrics::csv_row(cfg.model_id.as_str(), split.as_str(), cm));
                csv.push('\n');
            }
            write_file(&d.join("metrics.csv"), &csv)?;
        }
    }
    Ok((
        model,
        RunArtifacts {
            dir,
            curves,
            val_confusions,
            best_epoch,
            final_confusion,
        },
    ))
}

// ---------------------------------------------------------------------------
// evaluation

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub model_id: ModelId,
    pub split: Split,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricSet,
}

/// Confusion counts of `model` over `data` in eval mode at threshold 0.
pub fn evaluate_model(model: &Model<f32>, data: &SplitData, batch_size: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::default();
    for batch in data.sequential(batch_size)? {
        let batch = batch?;
        let z = model.predict(&batch.images)?;
        let z = z.reshape(vec![batch.labels.len()])?;
        cm.merge(&metrics::confusion(&z, &batch.labels, 0.0)?);
    }
    Ok(cm)
}

/// Input size for a checkpoint: explicit, else the sibling `config.json`,
/// else the model's reference size.
fn checkpoint_input(path: &Path, id: ModelId, input: Option<InputSize>) -> Result<InputSize> {
    if let Some(i) = input {
        return Ok(i);
    }
    let sibling = path.with_file_name("config.json");
    if sibling.is_file() {
        return Ok(ExperimentConfig::load(&sibling)?.input_size);
    }
    let [_, height, width] = id.default_input();
    Ok(InputSize { height, width })
}

pub fn evaluate(
    checkpoint_path: &Path,
    dataset: &Path,
    split: Split,
    input: Option<InputSize>,
) -> Result<Evaluation> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    let model_id: ModelId = ckpt.metadata.model_id.parse().map_err(|_| Error::Transfer {
        reason: "checkpoint names an unknown model".into(),
        names: vec![ckpt.metadata.model_id.clone()],
    })?;
    let size = checkpoint_input(checkpoint_path, model_id, input)?;
    let spec = zoo::build(model_id, size.shape())?;
    let model = checkpoint::load_into(init_weights(&spec, 0)?, &ckpt, LoadScope::All)?;
    let manifest = data::load_manifest(dataset)?;
    let data = SplitData::load(&manifest, split, size.height, size.width)?;
    let confusion = evaluate_model(&model, &data, DEFAULT_BATCH_SIZE)?;
    Ok(Evaluation {
        model_id,
        split,
        confusion,
        metrics: metrics::derive(&confusion),
    })
}

// ---------------------------------------------------------------------------
// transfer experiment

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    FineTune,
    Scratch,
}

impl Arm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Arm::FineTune => "fine_tune",
            Arm::Scratch => "scratch",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferRun {
    pub seed: u64,
    pub arm: Arm,
    pub epochs_to_threshold: Option<usize>,
    pub final_val_accuracy: Option<f64>,
    pub final_val: Option<ConfusionMatrix>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferReport {
    pub threshold: f64,
    pub budget: usize,
    pub runs: Vec<TransferRun>,
}

pub const TRANSFER_FOOTER: &str = "Both arms train the same architecture with the same epoch budget and batch size \
on the target task; source pre-training is not counted against the budget. \
Runs that never reach the threshold count as budget + 1 epochs.";

impl TransferReport {
    /// Median epochs-to-threshold; misses count as `budget + 1`.
    pub fn median_epochs(&self, arm: Arm) -> Option<f64> {
        let mut v: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.arm == arm)
            .map(|r| r.epochs_to_threshold.unwrap_or(self.budget + 1) as f64)
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
    }

    pub fn fine_tune_faster(&self) -> bool {
        match (self.median_epochs(Arm::FineTune), self.median_epochs(Arm::Scratch)) {
            (Some(a), Some(b)) => a < b,
            _ => false,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,arm,epochs_to_threshold,final_val_acc,tp,fp,fn,tn,error\n");
        for r in &self.runs {
            let cm = r.final_val.map_or(",,,".to_string(), |c| format!("{},{},{},{}", c.tp, c.fp, c.fn_, c.tn));
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.seed,
                r.arm.as_str(),
                r.epochs_to_threshold.map_or("NA".into(), |e| e.to_string()),
                r.final_val_accuracy.map_or("NA".into(), |a| format!("{a:.6}")),
                cm,
                r.error.as_deref().unwrap_or("").replace(',', ";"),
            ));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:>6}  {:<9}  {:>8}  {:>8}  {}\n",
            "seed", "arm", "epochs", "val_acc", "note"
        );
        for r in &self.runs {
            out.push_str(&format!(
                "{:>6}  {:<9}  {:>8}  {:>8}  {}\n",
                r.seed,
                r.arm.as_str(),
                r.epochs_to_threshold.map_or("-".into(), |e| e.to_string()),
                r.final_val_accuracy.map_or("-".into(), |a| format!("{:.4}", a)),
                r.error.as_deref().unwrap_or("")
            ));
        }
        let med = |a| self.median_epochs(a).map_or("-".into(), |m: f64| format!("{m}"));
        out.push_str(&format!(
            "median epochs to {:.0}% val accuracy: fine_tune {}, scratch {}\n",
            self.threshold * 100.0,
            med(Arm::FineTune),
            med(Arm::Scratch)
        ));
        out.push_str(TRANSFER_FOOTER);
        out.push('\n');
        out
    }
}

#[derive(Clone, Debug, Default)]
pub struct TransferOptions {
    pub out_dir: Option<PathBuf>,
    pub verbose: bool,
}

fn source_model(source: &ExperimentConfig, seed: u64, opts: &TrainOptions) -> Result<Model<f32>> {
    let cfg = ExperimentConfig {
        seed,
        freeze_base: false,
        ..source.clone()
    };
    let data = TaskData::load(&cfg)?;
    let model = cfg.build_model()?;
    Ok(fit(&cfg, model, &data, opts)?.0)
}

fn run_arm(
    target: &ExperimentConfig,
    data: &TaskData,
    model: Model<f32>,
    seed: u64,
    arm: Arm,
    threshold: f64,
    opts: &TrainOptions,
) -> TransferRun {
    let cfg = ExperimentConfig {
        seed,
        freeze_base: arm == Arm::FineTune,
        backbone_checkpoint: None,
        ..target.clone()
    };
    match fit(&cfg, model, data, opts) {
        Ok((_, a)) => {
            let final_val = a.final_confusion.iter().find(|(s, _)| *s == Split::Val).map(|(_, c)| *c);
            TransferRun {
                seed,
                arm,
                epochs_to_threshold: a.epochs_to(threshold),
                final_val_accuracy: a.curves.last().map(|r| r.val_acc),
                final_val,
                error: None,
            }
        }
        Err(e) => failed(seed, arm, e),
    }
}

fn failed(seed: u64, arm: Arm, e: Error) -> TransferRun {
    TransferRun {
        seed,
        arm,
        epochs_to_threshold: None,
        final_val_accuracy: None,
        final_val: None,
        error: Some(e.to_string()),
    }
}

/// Per seed: pre-train on `source`, move the backbone into a fresh target
/// model, freeze it and fit the head (fine_tune); separately fit the whole
/// target model from scratch (scratch). Arm failures are recorded, not
/// propagated.
pub fn transfer_experiment(
    source: &ExperimentConfig,
    target: &ExperimentConfig,
    seeds: &[u64],
    opts: &TransferOptions,
) -> Result<TransferReport> {
    source.validate()?;
    target.validate()?;
    if !target.model_id.is_backboned() {
        return Err(Error::Config(format!("transfer needs a backboned target model, got {}", target.model_id)));
    }
    if source.model_id != target.model_id {
        return Err(Error::Config(format!(
            "source ({}) and target ({}) must share an architecture",
            source.model_id, target.model_id
        )));
    }
    if target.is_source_task() {
        return Err(Error::Config("target must be a binary task".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let data = TaskData::load(target)?;
    let mut runs = Vec::with_capacity(2 * seeds.len());
    for &seed in seeds {
        let sub = |name: &str| TrainOptions {
            out_dir: opts.out_dir.as_ref().map(|d| d.join(format!("seed_{seed}")).join(name)),
            stop_at_train_accuracy: None,
            verbose: opts.verbose,
        };
        if opts.verbose {
            eprintln!("seed {seed}: source pre-training");
        }
        let fine = source_model(source, seed, &sub("source")).and_then(|src| {
            let ckpt = Checkpoint::from_model(
                &src,
                CheckpointMeta {
                    model_id: source.model_id.as_str().into(),
                    epoch: source.epochs as u64,
                    seed,
                    config_digest: source.digest(),
                },
            );
            let fresh = init_weights(&target.model_spec()?, seed)?;
            checkpoint::load_into(fresh, &ckpt, LoadScope::BackboneOnly)
        });
        if opts.verbose {
            eprintln!("seed {seed}: fine_tune arm");
        }
        runs.push(match fine {
            Ok(model) => run_arm(target, &data, model, seed, Arm::FineTune, TRANSFER_THRESHOLD, &sub("fine_tune")),
            Err(e) => failed(seed, Arm::FineTune, e),
        });
        if opts.verbose {
            eprintln!("seed {seed}: scratch arm");
        }
        let scratch = init_weights(&target.model_spec()?, seed);
        runs.push(match scratch {
            Ok(model) => run_arm(target, &data, model, seed, Arm::Scratch, TRANSFER_THRESHOLD, &sub("scratch")),
            Err(e) => failed(seed, Arm::Scratch, e),
        });
    }
    let report = TransferReport {
        threshold: TRANSFER_THRESHOLD,
        budget: target.epochs,
        runs,
    };
    if let Some(d) = &opts.out_dir {
        fs::create_dir_all(d).map_err(|e| Error::storage(d, e))?;
        write_file(&d.join("transfer.csv"), &report.to_csv())?;
        write_file(&d.join("transfer.txt"), &report.to_text())?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// reports

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Custom,
    Pretrained,
}

impl Group {
    pub fn of(id: ModelId) -> Self {
        if id.is_backboned() {
            Group::Pretrained
        } else {
            Group::Custom
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Group::Custom => "Custom",
            Group::Pretrained => "Pretrained",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Column {
    pub name: String,
    pub group: Group,
    pub values: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

/// Metric rows; rates are percentages, losses are raw.
pub const REPORT_ROWS: [&str; 10] = [
    "train_accuracy",
    "train_loss",
    "val_accuracy",
    "val_loss",
    "recall",
    "accuracy",
    "precision",
    "f1",
    "fpr",
    "fnr",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub columns: Vec<Column>,
}

fn pct(v: Option<f64>) -> Option<f64> {
    v.map(|v| v * 100.0)
}

fn column(name: String, id: ModelId, head: [Option<f64>; 4], cm: ConfusionMatrix) -> Column {
    let m = metrics::derive(&cm);
    let mut values = head.to_vec();
    values.extend(
        [Metric::Recall, Metric::Accuracy, Metric::Precision, Metric::F1, Metric::Fpr, Metric::Fnr]
            .map(|k| pct(m.get(k))),
    );
    Column {
        name,
        group: Group::of(id),
        values,
        confusion: cm,
    }
}

impl ComparisonTable {
    fn ordered(mut columns: Vec<Column>) -> Self {
        // stable: Custom first, original order within a group
        columns.sort_by_key(|c| c.group == Group::Pretrained);
        ComparisonTable { columns }
    }

    pub fn group_sizes(&self) -> (usize, usize) {
        let custom = self.columns.iter().filter(|c| c.group == Group::Custom).count();
        (custom, self.columns.len() - custom)
    }

    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or("NA".into(), |v| format!("{v:.4}"));
        let mut out = String::from("metric");
        for c in &self.columns {
            out.push_str(&format!(",{}", c.name));
        }
        out.push_str("\ngroup");
        for c in &self.columns {
            out.push_str(&format!(",{}", c.group.as_str()));
        }
        out.push('\n');
        for (i, row) in REPORT_ROWS.iter().enumerate() {
            out.push_str(row);
            for c in &self.columns {
                out.push_str(&format!(",{}", cell(c.values[i])));
            }
            out.push('\n');
        }
        for (label, get) in confusion_rows() {
            out.push_str(label);
            for c in &self.columns {
                out.push_str(&format!(",{}", get(&c.confusion)));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self.columns.iter().map(|c| c.name.len()).max().unwrap_or(0).max(10);
        let label_w = REPORT_ROWS.iter().map(|r| r.len()).max().unwrap_or(0);
        let mut out = String::new();
        let mut banner = format!("{:label_w$}", "");
        let (custom, pretrained) = self.group_sizes();
        for (group, n) in [(Group::Custom, custom), (Group::Pretrained, pretrained)] {
            if n > 0 {
                let span = n * (width + 2);
                banner.push_str(&format!("  {:^w$}", group.as_str(), w = span - 2));
            }
        }
        out.push_str(banner.trim_end());
        out.push('\n');
        let mut header = format!("{:label_w$}", "");
        for c in &self.columns {
            header.push_str(&format!("  {:>width$}", c.name));
        }
        out.push_str(&header);
        out.push('\n');
        for (i, row) in REPORT_ROWS.iter().enumerate() {
            let mut line = format!("{row:label_w$}");
            for c in &self.columns {
                let digits = if row.ends_with("loss") { 4 } else { 2 };
                let v = c.values[i].map_or("-".into(), |v| format!("{v:.digits$}"));
                line.push_str(&format!("  {v:>width$}"));
            }
            out.push_str(&line);
            out.push('\n');
        }
        out.push('\n');
        out.push_str(&header);
        out.push('\n');
        for (label, get) in confusion_rows() {
            let mut line = format!("{label:label_w$}");
            for c in &self.columns {
                line.push_str(&format!("  {:>width$}", get(&c.confusion)));
            }
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

fn confusion_rows() -> [(&'static str, fn(&ConfusionMatrix) -> u64); 4] {
    [("tp", |c| c.tp), ("fp", |c| c.fp), ("fn", |c| c.fn_), ("tn", |c| c.tn)]
}

const RUN_FILES: [&str; 3] = ["config.json", "curves.csv", "metrics.csv"];

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::storage(path, e))
}

fn run_column(dir: &Path) -> Result<Column> {
    let cfg = ExperimentConfig::load(&dir.join("config.json"))?;
    let curves = read_text(&dir.join("curves.csv"))?;
    let last = curves.lines().skip(1).filter(|l| !l.trim().is_empty()).last().map(CurveRow::parse).transpose()?;
    let rows: Vec<metrics::MetricRow> = read_text(&dir.join("metrics.csv"))?
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(metrics::parse_csv_row)
        .collect::<Result<_>>()?;
    let pick = |s: &str| rows.iter().find(|r| r.split == s);
    let held_out = pick("test").or_else(|| pick("val")).ok_or_else(|| Error::Report {
        missing: vec![format!("{}: test or val row", dir.join("metrics.csv").display())],
    })?;
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| cfg.model_id.as_str().into());
    Ok(column(
        name,
        cfg.model_id,
        [
            last.map(|r| r.train_acc * 100.0),
            last.map(|r| r.train_loss),
            last.map(|r| r.val_acc * 100.0),
            last.map(|r| r.val_loss),
        ],
        held_out.confusion,
    ))
}

/// Builds the comparison table from run directories without modifying them.
pub fn report(run_dirs: &[PathBuf]) -> Result<ComparisonTable> {
    if run_dirs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let missing: Vec<String> = run_dirs
        .iter()
        .flat_map(|d| RUN_FILES.iter().map(move |f| d.join(f)))
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Report { missing });
    }
    let columns = run_dirs.iter().map(|d| run_column(d)).collect::<Result<Vec<_>>>()?;
    Ok(ComparisonTable::ordered(columns))
}

/// The published columns, with confusion matrices recovered by reconcile.
pub fn reference_report() -> Result<ComparisonTable> {
    let columns = metrics::PUBLISHED
        .iter()
        .map(|p| {
            let cm = p.reconcile()?;
            Ok(column(
                p.model.display_name().to_string(),
                p.model,
                [Some(p.train_accuracy), Some(p.train_loss), Some(p.val_accuracy), None],
                cm,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ComparisonTable::ordered(columns))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth_cfg() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{"model_id":"vgg7","input_size":"16x16","seed":1,"epochs":1,"batch_size":8,
                "dataset":{"synth":{"per_class":4,"val_per_class":2,"seed":5}}}"#,
        )
        .unwrap()
    }

    #[test]
    fn input_size_parse() {
        let s: InputSize = "320x240".parse().unwrap();
        assert_eq!(s.shape(), [3, 320, 240]);
        assert!("320".parse::<InputSize>().is_err());
        assert!("0x4".parse::<InputSize>().is_err());
    }

    #[test]
    fn config_defaults_and_roundtrip() {
        let cfg = synth_cfg();
        assert_eq!(cfg.optimizer, OptimizerConfig::default());
        assert_eq!(cfg.effective_loss(), LossConfig::Bce);
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(cfg.digest().len(), 64);
    }

    #[test]
    fn config_rejections() {
        let base = r#""input_size":"32x32","seed":0,"dataset":{"synth":{"per_class":1,"val_per_class":1,"seed":0}}"#;
        for body in [
            r#""model_id":"vgg7","freeze_base":true"#,
            r#""model_id":"vgg7","loss":{"kind":"hinge_l2"}"#,
            r#""model_id":"vgg7","bogus":1"#,
            r#""model_id":"vgg7","batch_size":0"#,
            r#""model_id":"vgg42""#,
        ] {
            let err = ExperimentConfig::from_json(&format!("{{{body},{base}}}")).unwrap_err();
            assert!(err.is_usage(), "{body}: {err}");
        }
        let ok = format!(r#"{{"model_id":"vgg7","loss":{{"kind":"hinge_l2"}},"loss_override":true,{base}}}"#);
        assert!(ExperimentConfig::from_json(&ok).is_ok());
        let svm = format!(r#"{{"model_id":"cnn_svm",{base}}}"#);
        assert!(matches!(
            ExperimentConfig::from_json(&svm).unwrap().effective_loss(),
            LossConfig::HingeL2 { .. }
        ));
    }

    #[test]
    fn zero_epochs_writes_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { epochs: 0, ..synth_cfg() };
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let art = train(&cfg, &opts).unwrap();
        assert!(art.curves.is_empty());
        assert_eq!(art.best_epoch, 0);
        let curves = fs::read_to_string(dir.path().join("curves.csv")).unwrap();
        assert_eq!(curves.trim(), CURVE_HEADER);
        let init = cfg.build_model().unwrap();
        let best = checkpoint::load(&dir.path().join("best.wfck")).unwrap();
        assert_eq!(best, Checkpoint::from_model(&init, best.metadata.clone()));
    }

    #[test]
    fn reference_table_layout() {
        let t = reference_report().unwrap();
        assert_eq!(t.group_sizes(), (3, 3));
        let vgg16 = t.columns.iter().find(|c| c.name == "VGG-16").unwrap();
        assert_eq!(vgg16.confusion, ConfusionMatrix::new(324, 2, 1, 223));
        assert!(t.to_text().contains("Pretrained"));
        assert_eq!(t.to_csv().lines().count(), 2 + REPORT_ROWS.len() + 4);
    }

    #[test]
    fn report_lists_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        match report(&[dir.path().to_path_buf()]) {
            Err(Error::Report { missing }) => assert_eq!(missing.len(), 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn median_counts_misses_as_over_budget() {
        let run = |arm, e| TransferRun {
            seed: 0,
            arm,
            epochs_to_threshold: e,
            final_val_accuracy: None,
            final_val: None,
            error: None,
        };
        let r = TransferReport {
            threshold: 0.95,
            budget: 10,
            runs: vec![run(Arm::FineTune, Some(2)), run(Arm::FineTune, Some(4)), run(Arm::Scratch, None)],
        };
        assert_eq!(r.median_epochs(Arm::FineTune), Some(3.0));
        assert_eq!(r.median_epochs(Arm::Scratch), Some(11.0));
        assert!(r.fine_tune_faster());
    }
}
