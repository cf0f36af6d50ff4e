//! Deterministic minibatch SGD, teacher training with early stopping, and the
//! teacher -> adaptive fit -> student distillation pipeline.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptive::{fit_adaptive, AdaptiveConfig, AdaptiveParams};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{batch_loss_with_probs, LossSpec, TeacherOutputs};
use crate::metrics::{
    bucket_stats, gain_curve, logit_stats, per_class_accuracy, per_subgroup_errors, regularisation_samples,
    summarize, BucketStats, BucketWeighting, GainCurve, SortBy, SubgroupReport, DEFAULT_LOG_LOSS_CAP,
};
use crate::model::{softmax_with_temperature, Gradients, MlpModel, ProbMatrix};
use crate::seeded_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Multiply by `factor` at the start of every milestone epoch (0-based).
    Step { milestones: Vec<usize>, factor: f64 },
    /// Half-cosine decay from the base rate towards zero over the run.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub early_stop: Option<EarlyStop>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            learning_rate: 0.05,
            lr_schedule: LrSchedule::Step {
                milestones: vec![30, 45],
                factor: 0.1,
            },
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            early_stop: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!("learning rate {} must be >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be >= 0"));
        }
        if let LrSchedule::Step { milestones, factor } = &self.lr_schedule {
            if milestones.windows(2).any(|w| w[0] >= w[1]) || milestones.iter().any(|&m| m >= self.epochs) {
                return Err(Error::invalid(format!(
                    "milestones {milestones:?} must be strictly increasing and below {} epochs",
                    self.epochs
                )));
            }
            if !(*factor > 0.0) {
                return Err(Error::invalid("step factor must be positive"));
            }
        }
        if let Some(es) = &self.early_stop {
            if es.patience == 0 {
                return Err(Error::invalid("patience must be positive"));
            }
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match &self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Step { milestones, factor } => {
                let passed = milestones.iter().filter(|&&m| m <= epoch).count();
                self.learning_rate * factor.powi(passed as i32)
            }
            LrSchedule::Cosine => {
                let t = epoch as f64 / self.epochs as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub holdout_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub selected_epoch: usize,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,holdout_acc\n");
        for r in &self.records {
            let acc = r.holdout_acc.map(|a| format!("{a:?}")).unwrap_or_default();
            out.push_str(&format!("{},{:?},{}\n", r.epoch, r.train_loss, acc));
        }
        out
    }
}

/// Nesterov momentum: `v <- mu v + g`, `p <- p - lr (g + mu v)`.
struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    fn step(&mut self, model: &mut MlpModel, grads: &Gradients, lr: f64) {
        let mu = self.momentum;
        let wd = self.weight_decay;
        let first = self.velocity.is_empty();
        for (i, (params, grad, is_weight)) in model.param_blocks_mut(grads).enumerate() {
            if first {
                self.velocity.push(vec![0.0; params.len()]);
            }
            let v = &mut self.velocity[i];
            let decay = if is_weight { wd } else { 0.0 };
            for ((p, &g), vel) in params.iter_mut().zip(grad).zip(v.iter_mut()) {
                let g = g + decay * *p;
                *vel = mu * *vel + g;
                *p -= lr * (g + mu * *vel);
            }
        }
    }
}

fn diverged_at(e: Error, epoch: usize, loss: f64) -> Error {
    match e {
        Error::NonFiniteLogits => Error::Diverged { epoch, loss },
        e => e,
    }
}

pub fn accuracy(model: &MlpModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("accuracy of an empty dataset"));
    }
    let preds = model.predict(data.features())?;
    let hits = preds.iter().zip(data.labels()).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Trains `model` on `data`. With `early_stop` set (and patience below the
/// epoch budget) the checkpoint with the best holdout accuracy is returned;
/// the earliest epoch wins ties.
pub fn train(
    model: MlpModel,
    data: &Dataset,
    holdout: Option<&Dataset>,
    spec: &LossSpec,
    teacher: Option<&TeacherOutputs>,
    config: &TrainConfig,
) -> Result<(MlpModel, History)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if model.num_classes() != data.num_classes() {
        return Err(Error::shape(format!(
            "model has {} outputs for {} classes",
            model.num_classes(),
            data.num_classes()
        )));
    }
    let teacher_probs = match teacher {
        Some(t) if spec.needs_teacher() => {
            if t.len() != data.len() || t.num_classes() != data.num_classes() {
                return Err(Error::shape("teacher outputs are not index-aligned with the training data"));
            }
            Some(t.probs())
        }
        None if spec.needs_teacher() => return Err(Error::invalid("loss needs teacher outputs")),
        _ => None,
    };
    let early_stop = match (config.early_stop, holdout) {
        (Some(_), None) => return Err(Error::invalid("early stopping needs a holdout set")),
        (Some(_), Some(h)) if h.is_empty() => return Err(Error::invalid("early stopping needs a non-empty holdout set")),
        (Some(es), Some(_)) if es.patience < config.epochs => Some(es),
        _ => None,
    };

    let mut model = model;
    let mut opt = Sgd::new(config.momentum, config.weight_decay);
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, MlpModel)> = None;
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut seeded_rng(config.seed, 1 + epoch as u64));
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let x = data.features().select_rows(batch);
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels()[i]).collect();
            let probs = teacher_probs.map(|p| p.select_rows(batch));
            let (value, grads) = model
                .forward_backward(&x, |logits| batch_loss_with_probs(spec, logits, &labels, probs.as_ref()))
                .map_err(|e| diverged_at(e, epoch + 1, f64::NAN))?;
            total += value * batch.len() as f64;
            opt.step(&mut model, &grads, lr);
        }
        let train_loss = total / n as f64;
        if !train_loss.is_finite() || !model.flat_params().iter().all(|p| p.is_finite()) {
            return Err(Error::Diverged {
                epoch: epoch + 1,
                loss: train_loss,
            });
        }
        let holdout_acc = holdout
            .filter(|h| !h.is_empty())
            .map(|h| accuracy(&model, h))
            .transpose()
            .map_err(|e| diverged_at(e, epoch + 1, train_loss))?;
        records.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            holdout_acc,
        });
        if let (Some(es), Some(acc)) = (early_stop, holdout_acc) {
            let improved = best.as_ref().is_none_or(|(b, _, _)| acc > *b);
            if improved {
                best = Some((acc, epoch + 1, model.clone()));
            }
            let best_epoch = best.as_ref().map_or(0, |(_, e, _)| *e);
            if epoch + 1 - best_epoch >= es.patience {
                break;
            }
        }
    }

    match best {
        Some((_, epoch, best_model)) => Ok((best_model, History { records, selected_epoch: epoch })),
        None => {
            let selected_epoch = records.len();
            Ok((model, History { records, selected_epoch }))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            train: TrainConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn layer_dims(&self, input: usize, classes: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend_from_slice(&self.hidden);
        dims.push(classes);
        dims
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub holdout: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn new(train: Dataset, holdout: Dataset, test: Dataset) -> Result<Self> {
        let l = train.num_classes().max(holdout.num_classes()).max(test.num_classes());
        let g = train.num_subgroups().max(holdout.num_subgroups()).max(test.num_subgroups());
        let (train, holdout, test) = (
            train.with_num_classes(l).with_num_subgroups(g),
            holdout.with_num_classes(l).with_num_subgroups(g),
            test.with_num_classes(l).with_num_subgroups(g),
        );
        if train.dim() != holdout.dim() || train.dim() != test.dim() {
            return Err(Error::shape("splits have different feature widths"));
        }
        if train.is_empty() || test.is_empty() {
            return Err(Error::invalid("train and test splits must be non-empty"));
        }
        Ok(Self { train, holdout, test })
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes()
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: MlpModel,
    pub history: History,
}

#[derive(Debug, Clone)]
pub struct TeacherRun {
    pub trained: TrainedModel,
    pub train_outputs: TeacherOutputs,
    pub holdout_outputs: TeacherOutputs,
}

/// One-hot training of the teacher with holdout early stopping, followed by
/// one frozen pass over train and holdout at `temperature`.
pub fn train_teacher(splits: &Splits, config: &ModelConfig, temperature: f64) -> Result<TeacherRun> {
    let dims = config.layer_dims(splits.train.dim(), splits.num_classes());
    let model = MlpModel::init(&dims, config.train.seed)?;
    let (model, history) = train(model, &splits.train, Some(&splits.holdout), &LossSpec::OneHot, None, &config.train)?;
    let train_outputs = TeacherOutputs::from_logits(model.forward_logits(splits.train.features())?, temperature)?;
    let holdout_outputs = TeacherOutputs::from_logits(model.forward_logits(splits.holdout.features())?, temperature)?;
    Ok(TeacherRun {
        trained: TrainedModel { model, history },
        train_outputs,
        holdout_outputs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    OneHot,
    Distill,
    Adamix,
    Adamargin,
    AdamarginPlusAdamix,
    Adatemp,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::OneHot,
        Mode::Distill,
        Mode::Adamix,
        Mode::Adamargin,
        Mode::AdamarginPlusAdamix,
        Mode::Adatemp,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::OneHot => "one-hot",
            Mode::Distill => "distill",
            Mode::Adamix => "adamix",
            Mode::Adamargin => "adamargin",
            Mode::AdamarginPlusAdamix => "adamargin-plus-adamix",
            Mode::Adatemp => "adatemp",
        }
    }

    pub fn uses_teacher(&self) -> bool {
        *self != Mode::OneHot
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillRun {
    pub mode: Mode,
    /// Scalar mixing weight for `distill` and `adatemp`.
    pub alpha: f64,
    /// Teacher temperature; the mean of the per-class temperatures in `adatemp`.
    pub temperature: f64,
    pub rounds: usize,
    pub rho_epsilon: f64,
    pub temperature_floor: f64,
    /// Estimate average margins from temperature-scaled (rather than raw) holdout probabilities.
    pub gamma_at_temperature: bool,
    pub min_class_count: usize,
}

impl Default for DistillRun {
    fn default() -> Self {
        Self {
            mode: Mode::Distill,
            alpha: 0.5,
            temperature: 1.0,
            rounds: 1,
            rho_epsilon: 0.05,
            temperature_floor: 0.25,
            gamma_at_temperature: true,
            min_class_count: 1,
        }
    }
}

impl DistillRun {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha = {} outside [0, 1]", self.alpha)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::invalid("temperature must be positive"));
        }
        if self.rounds == 0 {
            return Err(Error::invalid("rounds must be at least 1"));
        }
        if self.mode == Mode::OneHot && self.rounds > 1 {
            return Err(Error::invalid("one-hot mode has no teacher to pass between rounds"));
        }
        if !(self.rho_epsilon >= 0.0) || !(self.temperature_floor > 0.0) {
            return Err(Error::invalid("rho_epsilon must be >= 0 and temperature_floor > 0"));
        }
        Ok(())
    }

    fn adaptive_config(&self) -> AdaptiveConfig {
        AdaptiveConfig {
            rho_epsilon: self.rho_epsilon,
            base_temperature: self.temperature,
            temperature_floor: self.temperature_floor,
            min_class_count: self.min_class_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub k_list: Vec<usize>,
    pub num_buckets: usize,
    pub bucket_weighting: BucketWeighting,
    pub log_loss_cap: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_list: vec![1, 10],
            num_buckets: 10,
            bucket_weighting: BucketWeighting::Sample,
            log_loss_cap: DEFAULT_LOG_LOSS_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub run: DistillRun,
    pub eval: EvalConfig,
    /// Also train a one-hot student (student config, same seed) as the comparison baseline.
    pub baseline: bool,
}

impl Default for PipelineConfig {
    /// Desk-scale recipe: two hidden layers of 32 units, cosine-annealed
    /// Nesterov SGD, teacher early stopping on holdout accuracy.
    fn default() -> Self {
        let student = TrainConfig {
            epochs: 80,
            learning_rate: 0.02,
            lr_schedule: LrSchedule::Cosine,
            ..TrainConfig::default()
        };
        let teacher = TrainConfig {
            early_stop: Some(EarlyStop { patience: 10 }),
            ..student.clone()
        };
        Self {
            teacher: ModelConfig {
                hidden: vec![32, 32],
                train: teacher,
            },
            student: ModelConfig {
                hidden: vec![32, 32],
                train: TrainConfig { seed: 1, ..student },
            },
            run: DistillRun {
                alpha: 0.9,
                ..DistillRun::default()
            },
            eval: EvalConfig::default(),
            baseline: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassStats {
    pub count: Vec<usize>,
    pub accuracy: Vec<f64>,
    pub mean_log_loss: Vec<f64>,
    pub mean_margin: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub report: SubgroupReport,
    pub per_class: PerClassStats,
}

/// Evaluation of one round on the test split. The top-level subgroup fields describe the student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub mode: Mode,
    pub round: usize,
    pub alpha: Option<f64>,
    pub temperature: Option<f64>,
    pub test_digest: String,
    pub per_subgroup_error: Vec<f64>,
    pub n_per_subgroup: Vec<usize>,
    pub avg_error: f64,
    pub balanced_error: f64,
    pub worst_error: f64,
    pub topk_error: std::collections::BTreeMap<usize, f64>,
    pub student_per_class: PerClassStats,
    pub teacher: Option<ModelEval>,
    pub onehot: Option<ModelEval>,
    /// Models: teacher, student, then the one-hot baseline when present.
    pub buckets: Option<BucketStats>,
    /// Student minus one-hot baseline, sorted by the baseline's class accuracy.
    pub gain_curve: Option<GainCurve>,
    pub reg_sample_fraction: Option<Vec<f64>>,
    pub log_loss_cap: f64,
}

impl RoundReport {
    pub fn student_report(&self) -> SubgroupReport {
        SubgroupReport {
            per_subgroup_error: self.per_subgroup_error.clone(),
            n_per_subgroup: self.n_per_subgroup.clone(),
            avg_error: self.avg_error,
            balanced_error: self.balanced_error,
            worst_error: self.worst_error,
            topk_error: self.topk_error.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }
}

#[derive(Debug, Clone)]
pub struct RoundArtifacts {
    pub round: usize,
    pub student: TrainedModel,
    pub adaptive: Option<AdaptiveParams>,
    /// Teacher probabilities the student was trained against.
    pub teacher_train: Option<TeacherOutputs>,
    pub report: RoundReport,
}

#[derive(Debug, Clone)]
pub struct PipelineArtifacts {
    pub teacher: Option<TrainedModel>,
    pub baseline: Option<TrainedModel>,
    pub rounds: Vec<RoundArtifacts>,
}

impl PipelineArtifacts {
    pub fn final_round(&self) -> &RoundArtifacts {
        self.rounds.last().expect("a pipeline has at least one round")
    }
}

pub(crate) fn checkpoint_id(model: &MlpModel) -> String {
    hex::encode(Sha256::digest(model.to_checkpoint().as_bytes()))[..16].to_string()
}

fn eval_model(probs: &ProbMatrix, test: &Dataset, eval: &EvalConfig) -> Result<ModelEval> {
    let preds = probs.argmax();
    let (err, counts) = per_subgroup_errors(&preds, test.labels(), test.subgroups(), test.num_subgroups())?;
    let g = err.len();
    let ks: Vec<usize> = eval.k_list.iter().copied().filter(|&k| k >= 1 && k <= g).collect();
    let report = summarize(&err, &counts, &ks)?;
    let stats = logit_stats(probs, test.labels(), eval.log_loss_cap)?;
    let l = probs.num_classes();
    let mut count = vec![0usize; l];
    let mut ll = vec![0.0; l];
    let mut mg = vec![0.0; l];
    for (s, &y) in stats.iter().zip(test.labels()) {
        count[y] += 1;
        ll[y] += s.log_loss;
        mg[y] += s.margin;
    }
    let mean = |v: Vec<f64>| -> Vec<f64> {
        v.iter().zip(&count).map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect()
    };
    Ok(ModelEval {
        report,
        per_class: PerClassStats {
            accuracy: per_class_accuracy(probs, test.labels()),
            mean_log_loss: mean(ll),
            mean_margin: mean(mg),
            count,
        },
    })
}

fn test_probs(model: &MlpModel, test: &Dataset) -> Result<ProbMatrix> {
    softmax_with_temperature(&model.forward_logits(test.features())?, 1.0)
}

/// Trains a one-hot student with the student config.
pub fn train_onehot_student(splits: &Splits, config: &ModelConfig) -> Result<TrainedModel> {
    let dims = config.layer_dims(splits.train.dim(), splits.num_classes());
    let model = MlpModel::init(&dims, config.train.seed)?;
    let holdout = (!splits.holdout.is_empty()).then_some(&splits.holdout);
    let (model, history) = train(model, &splits.train, holdout, &LossSpec::OneHot, None, &config.train)?;
    Ok(TrainedModel { model, history })
}

/// Full pipeline: teacher (skipped in one-hot mode), optional one-hot
/// baseline, then `rounds` rounds of student training where each student
/// teaches the next round.
pub fn distill_pipeline(splits: &Splits, config: &PipelineConfig) -> Result<PipelineArtifacts> {
    config.run.validate()?;
    let teacher = if config.run.mode.uses_teacher() {
        Some(train_teacher(splits, &config.teacher, config.run.temperature)?.trained)
    } else {
        None
    };
    let baseline = if config.baseline && config.run.mode.uses_teacher() {
        Some(train_onehot_student(splits, &config.student)?)
    } else {
        None
    };
    distill_rounds(splits, config, teacher, baseline)
}

/// Student stage of the pipeline given an already trained teacher and baseline.
pub fn distill_rounds(
    splits: &Splits,
    config: &PipelineConfig,
    teacher: Option<TrainedModel>,
    baseline: Option<TrainedModel>,
) -> Result<PipelineArtifacts> {
    let run = &config.run;
    run.validate()?;
    if run.mode.uses_teacher() && teacher.is_none() {
        return Err(Error::invalid(format!("mode {} needs a teacher", run.mode)));
    }
    let baseline_eval = baseline.as_ref().map(|b| test_probs(&b.model, &splits.test)).transpose()?;

    let mut current_teacher = teacher.as_ref().map(|t| t.model.clone());
    let mut rounds = Vec::with_capacity(run.rounds);
    for round in 1..=run.rounds {
        let (spec, teacher_train, adaptive) = match &current_teacher {
            None => (LossSpec::OneHot, None, None),
            Some(tm) => {
                let holdout_logits = tm.forward_logits(splits.holdout.features())?;
                let gamma_temp = if run.gamma_at_temperature { run.temperature } else { 1.0 };
                let holdout_out = TeacherOutputs::from_logits(holdout_logits, gamma_temp)?;
                let adaptive = fit_adaptive(
                    &holdout_out,
                    splits.holdout.labels(),
                    &run.adaptive_config(),
                    Some(checkpoint_id(tm)),
                )?;
                let train_logits = tm.forward_logits(splits.train.features())?;
                let teacher_train = if run.mode == Mode::Adatemp {
                    TeacherOutputs::from_logits_per_class(train_logits, splits.train.labels(), adaptive.temps.temps())?
                } else {
                    TeacherOutputs::from_logits(train_logits, run.temperature)?
                };
                let spec = match run.mode {
                    Mode::OneHot => LossSpec::OneHot,
                    Mode::Distill | Mode::Adatemp => LossSpec::Distill { alpha: run.alpha },
                    Mode::Adamix => LossSpec::AdaMix {
                        mix: adaptive.mix.clone(),
                    },
                    Mode::Adamargin => LossSpec::Margin {
                        rho: adaptive.rho.clone(),
                    },
                    Mode::AdamarginPlusAdamix => LossSpec::MarginMix {
                        mix: adaptive.mix.clone(),
                        rho: adaptive.rho.clone(),
                    },
                };
                (spec, Some(teacher_train), Some(adaptive))
            }
        };

        let dims = config.student.layer_dims(splits.train.dim(), splits.num_classes());
        let init = MlpModel::init(&dims, config.student.train.seed)?;
        let holdout = (!splits.holdout.is_empty()).then_some(&splits.holdout);
        let (student, history) = train(init, &splits.train, holdout, &spec, teacher_train.as_ref(), &config.student.train)?;

        let report = round_report(
            splits,
            config,
            round,
            &student,
            current_teacher.as_ref(),
            baseline_eval.as_ref(),
            teacher_train.as_ref(),
        )?;
        current_teacher = run.mode.uses_teacher().then(|| student.clone());
        rounds.push(RoundArtifacts {
            round,
            student: TrainedModel { model: student, history },
            adaptive,
            teacher_train,
            report,
        });
    }
    Ok(PipelineArtifacts {
        teacher,
        baseline,
        rounds,
    })
}

fn round_report(
    splits: &Splits,
    config: &PipelineConfig,
    round: usize,
    student: &MlpModel,
    teacher: Option<&MlpModel>,
    baseline_probs: Option<&ProbMatrix>,
    teacher_train: Option<&TeacherOutputs>,
) -> Result<RoundReport> {
    let eval = &config.eval;
    let test = &splits.test;
    let student_probs = test_probs(student, test)?;
    let student_eval = eval_model(&student_probs, test, eval)?;
    let teacher_probs = teacher.map(|t| test_probs(t, test)).transpose()?;
    let teacher_eval = teacher_probs.as_ref().map(|p| eval_model(p, test, eval)).transpose()?;
    let onehot_eval = match (config.run.mode, baseline_probs) {
        (Mode::OneHot, _) => Some(student_eval.clone()),
        (_, Some(p)) => Some(eval_model(p, test, eval)?),
        _ => None,
    };

    let buckets = match &teacher_probs {
        Some(tp) => {
            let nb = eval.num_buckets.min(tp.num_classes());
            let mut others = vec![&student_probs];
            if let Some(bp) = baseline_probs {
                others.push(bp);
            }
            Some(bucket_stats(tp, &others, test.labels(), nb, eval.bucket_weighting, eval.log_loss_cap)?)
        }
        None => None,
    };
    let gain = match (&onehot_eval, config.run.mode) {
        (Some(base), m) if m != Mode::OneHot => Some(gain_curve(
            &base.per_class.accuracy,
            &student_eval.per_class.accuracy,
            SortBy::ModelA,
            None,
        )?),
        _ => None,
    };
    let reg = match (teacher_train, &buckets) {
        (Some(tt), Some(b)) => {
            let sp = test_probs(student, &splits.train)?;
            Some(regularisation_samples(tt.probs(), &sp, splits.train.labels(), &b.assignment)?.1)
        }
        _ => None,
    };

    let uses_teacher = config.run.mode.uses_teacher();
    let r = student_eval.report;
    Ok(RoundReport {
        mode: config.run.mode,
        round,
        alpha: uses_teacher.then_some(config.run.alpha),
        temperature: uses_teacher.then_some(config.run.temperature),
        test_digest: test.digest(),
        per_subgroup_error: r.per_subgroup_error,
        n_per_subgroup: r.n_per_subgroup,
        avg_error: r.avg_error,
        balanced_error: r.balanced_error,
        worst_error: r.worst_error,
        topk_error: r.topk_error,
        student_per_class: student_eval.per_class,
        teacher: teacher_eval,
        onehot: onehot_eval,
        buckets,
        gain_curve: gain,
        reg_sample_fraction: reg,
        log_loss_cap: eval.log_loss_cap,
    })
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

pub fn per_class_csv(report: &RoundReport) -> String {
    let mut out = String::from("class,count,teacher_acc,student_acc,onehot_acc\n");
    let pc = &report.student_per_class;
    for c in 0..pc.accuracy.len() {
        let t = report.teacher.as_ref().map(|t| t.per_class.accuracy[c]);
        let o = report.onehot.as_ref().map(|o| o.per_class.accuracy[c]);
        out.push_str(&format!(
            "{c},{},{},{:?},{}\n",
            pc.count[c],
            opt_cell(t),
            pc.accuracy[c],
            opt_cell(o)
        ));
    }
    out
}

/// Wide bucket table: one row per bucket, one accuracy/log-loss/margin triple per model.
pub fn buckets_csv(stats: &BucketStats, model_names: &[&str]) -> String {
    let mut out = String::from("bucket,classes,samples");
    for name in model_names {
        out.push_str(&format!(",{name}_acc,{name}_log_loss,{name}_margin"));
    }
    out.push('\n');
    for b in 0..stats.num_buckets {
        let classes: Vec<String> = (0..stats.assignment.len())
            .filter(|&c| stats.assignment[c] == b)
            .map(|c| c.to_string())
            .collect();
        out.push_str(&format!("{b},{},{}", classes.join(" "), stats.samples_per_bucket[b]));
        for m in stats.models.iter().take(model_names.len()) {
            out.push_str(&format!(",{:?},{:?},{:?}", m.accuracy[b], m.log_loss[b], m.margin[b]));
        }
        out.push('\n');
    }
    out
}

pub fn gain_curve_csv(curve: &GainCurve) -> String {
    let mut out = String::from("k,class,gain\n");
    for (i, (g, c)) in curve.gain.iter().zip(&curve.order).enumerate() {
        out.push_str(&format!("{},{c},{g:?}\n", i + 1));
    }
    out
}

/// Writes the run directory: checkpoints, per-round adaptive parameters and
/// reports, training histories and the final round's CSV tables.
pub fn write_run_dir(dir: &Path, config_json: &str, artifacts: &PipelineArtifacts) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: String, contents: &str| -> Result<()> {
        write(&dir.join(&name), contents)?;
        written.push(name);
        Ok(())
    };
    put("config.json".into(), config_json)?;
    if let Some(t) = &artifacts.teacher {
        put("teacher.ckpt".into(), &t.model.to_checkpoint())?;
        put("history.csv".into(), &t.history.to_csv())?;
    } else {
        put("history.csv".into(), &artifacts.rounds[0].student.history.to_csv())?;
    }
    if let Some(b) = &artifacts.baseline {
        put("onehot_baseline.ckpt".into(), &b.model.to_checkpoint())?;
    }
    for r in &artifacts.rounds {
        let k = r.round;
        put(format!("student_round_{k}.ckpt"), &r.student.model.to_checkpoint())?;
        put(format!("history_student_round_{k}.csv"), &r.student.history.to_csv())?;
        if let Some(a) = &r.adaptive {
            put(format!("adaptive_round_{k}.txt"), &a.to_text())?;
        }
        put(format!("report_round_{k}.json"), &r.report.to_json())?;
    }
    let last = &artifacts.final_round().report;
    put("per_class.csv".into(), &per_class_csv(last))?;
    if let Some(b) = &last.buckets {
        let names: &[&str] = if last.onehot.is_some() && b.models.len() > 2 {
            &["teacher", "student", "onehot"]
        } else {
            &["teacher", "student"]
        };
        put("buckets.csv".into(), &buckets_csv(b, names))?;
    }
    if let Some(g) = &last.gain_curve {
        put("gain_curve.csv".into(), &gain_curve_csv(g))?;
    }
    Ok(written)
}
