//! Command-line front end: `synth`, `run`, `compare` and `sweep`.
//!
//! Settings resolve as flags over the `--config` file over built-in defaults.
//! Every command echoes the resolved settings into a `manifest.json`, and a
//! manifest (or a run's `config.json`) is itself accepted by `--config`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{load_csv, save_csv, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{bucket_assignment, gain_curve, topk_error, BucketWeighting, GainCurve, SortBy};
use crate::sweep::{rows_csv, run_sweep, synth_splits, wins_csv, SweepConfig, SynthConfig};
use crate::trainer::{
    distill_pipeline, gain_curve_csv, write_run_dir, EarlyStop, Mode, PerClassStats, PipelineConfig, RoundReport,
    Splits,
};

pub const TOOL: &str = "subgroup-kd";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "subgroup-kd", version, about = "Subgroup-aware knowledge distillation experiments")]
pub struct Cli {
    /// JSON settings file, or a manifest written by an earlier invocation.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a long-tailed Gaussian mixture and write train/holdout/test CSVs.
    Synth(SynthArgs),
    /// Train a teacher, the student(s) and evaluate them on the test split.
    Run(RunArgs),
    /// Compare the final rounds of two run directories.
    Compare(CompareArgs),
    /// Run several modes over several seeds on synthetic data.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub separation: Option<f64>,
    /// Ratio of the largest to the smallest training class.
    #[arg(long)]
    pub imbalance: Option<f64>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub holdout_fraction: Option<f64>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub rho_epsilon: Option<f64>,
    #[arg(long)]
    pub temperature_floor: Option<f64>,
    /// Estimate the adaptive rules from untempered holdout probabilities.
    #[arg(long)]
    pub raw_gamma: bool,
    #[arg(long)]
    pub min_class_count: Option<usize>,
    /// Student hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub teacher_hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub teacher_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub teacher_lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Teacher early-stopping patience in epochs.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Worst-k subgroup counts to report, comma separated.
    #[arg(long = "k", value_delimiter = ',')]
    pub k_list: Option<Vec<usize>>,
    #[arg(long)]
    pub buckets: Option<usize>,
    /// Average bucket statistics over classes instead of samples.
    #[arg(long)]
    pub class_weighted_buckets: bool,
    #[arg(long)]
    pub log_loss_cap: Option<f64>,
    /// Skip the one-hot comparison student.
    #[arg(long)]
    pub no_baseline: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Directory with train.csv, holdout.csv and test.csv. Without it the
    /// synthetic settings are used to generate the splits in memory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[command(flatten)]
    pub synth: SynthArgs,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CompareArgs {
    pub run_a: PathBuf,
    pub run_b: PathBuf,
    #[arg(long = "k", value_delimiter = ',')]
    pub k_list: Option<Vec<usize>>,
    #[arg(long)]
    pub buckets: Option<usize>,
    #[arg(long)]
    pub class_weighted_buckets: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    pub modes: Option<Vec<Mode>>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[command(flatten)]
    pub synth: SynthArgs,
}

/// Everything a command can be configured with. Missing keys take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub synth: SynthConfig,
    pub pipeline: PipelineConfig,
    pub sweep_seeds: Vec<u64>,
    pub sweep_modes: Vec<Mode>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            seed: 0,
            data: None,
            synth: SynthConfig::default(),
            pipeline: PipelineConfig::default(),
            sweep_seeds: (0..10).collect(),
            sweep_modes: vec![Mode::Distill, Mode::Adamix, Mode::Adamargin],
        }
    }
}

impl Settings {
    /// Reads a settings file. A manifest is accepted too; its `config` echo is used.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let value = match value {
            serde_json::Value::Object(mut map) if map.contains_key("tool") && map.contains_key("config") => {
                map.remove("config").expect("checked above")
            }
            other => other,
        };
        Ok(serde_json::from_value(value)?)
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("settings serialize");
        text.push('\n');
        text
    }

    /// Seeds the pipeline: the teacher gets `seed`, the student `seed + 1`.
    fn seed_pipeline(&mut self) {
        self.pipeline.teacher.train.seed = self.seed;
        self.pipeline.student.train.seed = self.seed.wrapping_add(1);
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl SynthArgs {
    fn apply(&self, cfg: &mut SynthConfig) {
        set(&mut cfg.classes, self.classes);
        set(&mut cfg.dim, self.dim);
        set(&mut cfg.per_class, self.per_class);
        set(&mut cfg.separation, self.separation);
        set(&mut cfg.imbalance, self.imbalance);
        set(&mut cfg.train_fraction, self.train_fraction);
        set(&mut cfg.holdout_fraction, self.holdout_fraction);
        set(&mut cfg.test_fraction, self.test_fraction);
    }
}

impl PipelineArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        let run = &mut cfg.run;
        set(&mut run.alpha, self.alpha);
        set(&mut run.temperature, self.temperature);
        set(&mut run.rounds, self.rounds);
        set(&mut run.rho_epsilon, self.rho_epsilon);
        set(&mut run.temperature_floor, self.temperature_floor);
        set(&mut run.min_class_count, self.min_class_count);
        if self.raw_gamma {
            run.gamma_at_temperature = false;
        }
        set(&mut cfg.student.hidden, self.hidden.clone());
        set(&mut cfg.teacher.hidden, self.teacher_hidden.clone());
        set(&mut cfg.student.train.epochs, self.epochs);
        set(&mut cfg.teacher.train.epochs, self.teacher_epochs);
        set(&mut cfg.student.train.learning_rate, self.lr);
        set(&mut cfg.teacher.train.learning_rate, self.teacher_lr);
        for t in [&mut cfg.teacher.train, &mut cfg.student.train] {
            set(&mut t.batch_size, self.batch_size);
            set(&mut t.momentum, self.momentum);
            set(&mut t.weight_decay, self.weight_decay);
        }
        if let Some(p) = self.patience {
            cfg.teacher.train.early_stop = Some(EarlyStop { patience: p });
        }
        set(&mut cfg.eval.k_list, self.k_list.clone());
        set(&mut cfg.eval.num_buckets, self.buckets);
        set(&mut cfg.eval.log_loss_cap, self.log_loss_cap);
        if self.class_weighted_buckets {
            cfg.eval.bucket_weighting = BucketWeighting::Class;
        }
        if self.no_baseline {
            cfg.baseline = false;
        }
    }
}

/// Record of one invocation: resolved settings, inputs with their digests,
/// seeds and the files written (relative to the output directory).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: Settings,
    pub seeds: BTreeMap<String, u64>,
    /// Dataset name to sha256 of its canonical CSV form.
    pub digests: BTreeMap<String, String>,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    fn new(command: &str, config: &Settings) -> Self {
        Self {
            tool: TOOL.into(),
            version: VERSION.into(),
            command: command.into(),
            config: config.clone(),
            seeds: BTreeMap::new(),
            digests: BTreeMap::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn write(&mut self, dir: &Path) -> Result<()> {
        self.artifacts.push("manifest.json".into());
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_file(&dir.join("manifest.json"), &text)
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn require_out(out: Option<&Path>) -> Result<&Path> {
    out.ok_or_else(|| Error::invalid("--out <dir> is required"))
}

fn base_settings(cli_config: Option<&Path>, seed: Option<u64>) -> Result<Settings> {
    let mut s = match cli_config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    set(&mut s.seed, seed);
    Ok(s)
}

/// Parses `args` (including the program name) and executes the command.
pub fn run_from_args<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::invalid(e.to_string()))?;
    execute(&cli)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let settings = base_settings(cli.config.as_deref(), cli.seed)?;
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Synth(a) => cmd_synth(settings, a, require_out(out)?).map(drop),
        Command::Run(a) => cmd_run(settings, a, require_out(out)?).map(drop),
        Command::Compare(a) => {
            let report = cmd_compare(a, out)?;
            print!("{}", report.summary_table());
            Ok(())
        }
        Command::Sweep(a) => cmd_sweep(settings, a, require_out(out)?).map(drop),
    }
}

/// Writes `train.csv`, `holdout.csv`, `test.csv` and `manifest.json` into `out`.
pub fn cmd_synth(mut settings: Settings, args: &SynthArgs, out: &Path) -> Result<RunManifest> {
    args.apply(&mut settings.synth);
    let splits = synth_splits(&settings.synth, settings.seed)?;
    create_dir(out)?;
    let mut manifest = RunManifest::new("synth", &settings);
    manifest.seeds.insert("data".into(), settings.seed);
    for (name, ds) in [("train", &splits.train), ("holdout", &splits.holdout), ("test", &splits.test)] {
        let file = format!("{name}.csv");
        save_csv(ds, out.join(&file))?;
        manifest.digests.insert(name.into(), ds.digest());
        manifest.artifacts.push(file);
    }
    manifest.write(out)?;
    log::info!(
        "wrote {} train / {} holdout / {} test rows to {}",
        splits.train.len(),
        splits.holdout.len(),
        splits.test.len(),
        out.display()
    );
    Ok(manifest)
}

fn load_splits(dir: &Path) -> Result<Splits> {
    let load = |name: &str| -> Result<Dataset> { load_csv(dir.join(format!("{name}.csv"))) };
    Splits::new(load("train")?, load("holdout")?, load("test")?)
}

/// Trains the configured pipeline and writes the run directory plus `manifest.json`.
pub fn cmd_run(mut settings: Settings, args: &RunArgs, out: &Path) -> Result<RunManifest> {
    if args.data.is_some() {
        settings.data = args.data.clone();
    }
    set(&mut settings.pipeline.run.mode, args.mode);
    args.pipeline.apply(&mut settings.pipeline);
    args.synth.apply(&mut settings.synth);
    settings.seed_pipeline();
    if settings.pipeline.run.mode == Mode::OneHot {
        settings.pipeline.baseline = false;
    }
    settings.pipeline.run.validate()?;

    let splits = match &settings.data {
        Some(dir) => load_splits(dir)?,
        None => synth_splits(&settings.synth, settings.seed)?,
    };
    log::info!(
        "{} run: {} train / {} holdout / {} test rows, {} classes",
        settings.pipeline.run.mode,
        splits.train.len(),
        splits.holdout.len(),
        splits.test.len(),
        splits.num_classes()
    );
    let artifacts = distill_pipeline(&splits, &settings.pipeline)?;
    for r in &artifacts.rounds {
        if !report_is_finite(&r.report) {
            return Err(Error::invalid(format!("round {} produced non-finite metrics", r.round)));
        }
    }

    let mut manifest = RunManifest::new("run", &settings);
    manifest.seeds.insert("teacher".into(), settings.pipeline.teacher.train.seed);
    manifest.seeds.insert("student".into(), settings.pipeline.student.train.seed);
    if settings.data.is_none() {
        manifest.seeds.insert("data".into(), settings.seed);
    }
    for (name, ds) in [("train", &splits.train), ("holdout", &splits.holdout), ("test", &splits.test)] {
        manifest.digests.insert(name.into(), ds.digest());
    }
    manifest.artifacts = write_run_dir(out, &settings.to_json(), &artifacts)?;
    manifest.write(out)?;

    let r = &artifacts.final_round().report;
    println!(
        "{} round {}: mean acc {:.4}  balanced acc {:.4}  worst acc {:.4}",
        r.mode,
        r.round,
        1.0 - r.avg_error,
        1.0 - r.balanced_error,
        1.0 - r.worst_error
    );
    Ok(manifest)
}

fn report_is_finite(r: &RoundReport) -> bool {
    r.per_subgroup_error.iter().all(|v| v.is_finite())
        && [r.avg_error, r.balanced_error, r.worst_error].iter().all(|v| v.is_finite())
        && r.student_per_class.mean_log_loss.iter().all(|v| v.is_finite())
}

/// Final-round report of a run directory.
pub fn load_final_report(dir: &Path) -> Result<RoundReport> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut last: Option<usize> = None;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(k) = name
            .strip_prefix("report_round_")
            .and_then(|s| s.strip_suffix(".json"))
            .and_then(|s| s.parse::<usize>().ok())
        {
            last = Some(last.map_or(k, |m| m.max(k)));
        }
    }
    let k = last.ok_or_else(|| Error::invalid(format!("no round reports in {}", dir.display())))?;
    let path = dir.join(format!("report_round_{k}.json"));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstKDelta {
    pub k: usize,
    pub acc_a: f64,
    pub acc_b: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareBucket {
    pub bucket: usize,
    pub classes: Vec<usize>,
    pub samples: usize,
    pub acc_a: f64,
    pub acc_b: f64,
    pub log_loss_a: f64,
    pub log_loss_b: f64,
    pub margin_a: f64,
    pub margin_b: f64,
    /// Share of training samples with teacher true-label probability below the student's.
    pub reg_fraction_a: Option<f64>,
    pub reg_fraction_b: Option<f64>,
}

/// B relative to A. Deltas are `b - a`, in accuracy units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub run_a: String,
    pub run_b: String,
    pub mode_a: Mode,
    pub mode_b: Mode,
    pub test_digest: String,
    pub mean_acc_a: f64,
    pub mean_acc_b: f64,
    pub mean_acc_delta: f64,
    pub balanced_acc_delta: f64,
    pub worst_k: Vec<WorstKDelta>,
    /// Buckets by A's teacher per-class accuracy (A's student when A has no teacher).
    pub bucket_source: String,
    pub bucket_weighting: BucketWeighting,
    pub buckets: Vec<CompareBucket>,
    pub gain_curve: GainCurve,
}

impl CompareReport {
    pub fn summary_table(&self) -> String {
        let mut out = format!(
            "{:<14}{:>10}{:>10}{:>10}\n",
            "metric", self.mode_a.as_str(), self.mode_b.as_str(), "delta"
        );
        out.push_str(&format!(
            "{:<14}{:>10.4}{:>10.4}{:>+10.4}\n",
            "mean acc", self.mean_acc_a, self.mean_acc_b, self.mean_acc_delta
        ));
        for w in &self.worst_k {
            out.push_str(&format!(
                "{:<14}{:>10.4}{:>10.4}{:>+10.4}\n",
                format!("worst-{} acc", w.k),
                w.acc_a,
                w.acc_b,
                w.delta
            ));
        }
        out
    }

    pub fn buckets_csv(&self) -> String {
        let mut out = String::from(
            "bucket,classes,samples,a_acc,b_acc,a_log_loss,b_log_loss,a_margin,b_margin\n",
        );
        for b in &self.buckets {
            let classes: Vec<String> = b.classes.iter().map(usize::to_string).collect();
            out.push_str(&format!(
                "{},{},{},{:?},{:?},{:?},{:?},{:?},{:?}\n",
                b.bucket,
                classes.join(" "),
                b.samples,
                b.acc_a,
                b.acc_b,
                b.log_loss_a,
                b.log_loss_b,
                b.margin_a,
                b.margin_b
            ));
        }
        out
    }

    pub fn reg_samples_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        let mut out = String::from("bucket,a_fraction,b_fraction\n");
        for b in &self.buckets {
            out.push_str(&format!("{},{},{}\n", b.bucket, cell(b.reg_fraction_a), cell(b.reg_fraction_b)));
        }
        out
    }
}

/// Per-bucket means of per-class statistics, weighted by class sample counts or per class.
fn bucket_reduce(values: &[f64], counts: &[usize], assignment: &[usize], nb: usize, w: BucketWeighting) -> Vec<f64> {
    let mut sum = vec![0.0; nb];
    let mut weight = vec![0.0; nb];
    for c in 0..assignment.len() {
        if counts[c] == 0 {
            continue;
        }
        let wc = match w {
            BucketWeighting::Sample => counts[c] as f64,
            BucketWeighting::Class => 1.0,
        };
        sum[assignment[c]] += wc * values[c];
        weight[assignment[c]] += wc;
    }
    sum.iter().zip(&weight).map(|(&s, &w)| if w == 0.0 { 0.0 } else { s / w }).collect()
}

/// Reg fractions follow each run's own teacher buckets; they line up with
/// ours only when the bucket assignments agree.
fn reg_fractions(report: &RoundReport, assignment: &[usize]) -> Option<Vec<f64>> {
    let stats = report.buckets.as_ref()?;
    let frac = report.reg_sample_fraction.as_ref()?;
    (stats.assignment == assignment).then(|| frac.clone())
}

/// Compares the final rounds of two runs evaluated on the same test split.
/// With `out`, writes `compare.json`, `gain_curve.csv`, `buckets.csv` and `reg_samples.csv`.
pub fn cmd_compare(args: &CompareArgs, out: Option<&Path>) -> Result<CompareReport> {
    let a = load_final_report(&args.run_a)?;
    let b = load_final_report(&args.run_b)?;
    if a.test_digest != b.test_digest {
        return Err(Error::DigestMismatch(a.test_digest, b.test_digest));
    }
    let k_list = args.k_list.clone().unwrap_or_else(|| vec![1, 10]);
    let g = a.per_subgroup_error.len();
    if b.per_subgroup_error.len() != g {
        return Err(Error::shape("runs report different subgroup counts"));
    }
    let worst_k = k_list
        .iter()
        .filter(|&&k| k >= 1 && k <= g)
        .map(|&k| {
            let acc_a = 1.0 - topk_error(&a.per_subgroup_error, k)?;
            let acc_b = 1.0 - topk_error(&b.per_subgroup_error, k)?;
            Ok(WorstKDelta {
                k,
                acc_a,
                acc_b,
                delta: acc_b - acc_a,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let sub_acc = |r: &RoundReport| r.per_subgroup_error.iter().map(|e| 1.0 - e).collect::<Vec<f64>>();
    let gain = gain_curve(&sub_acc(&a), &sub_acc(&b), SortBy::ModelA, None)?;

    let (source, reference): (&str, &PerClassStats) = match &a.teacher {
        Some(t) => ("teacher_a", &t.per_class),
        None => ("student_a", &a.student_per_class),
    };
    let l = reference.accuracy.len();
    let nb = args.buckets.unwrap_or(10).min(l);
    let weighting = if args.class_weighted_buckets {
        BucketWeighting::Class
    } else {
        BucketWeighting::Sample
    };
    let assignment = bucket_assignment(&reference.accuracy, nb)?;
    let (pa, pb) = (&a.student_per_class, &b.student_per_class);
    let counts = &pa.count;
    let reduce = |v: &[f64]| bucket_reduce(v, counts, &assignment, nb, weighting);
    let (acc_a, acc_b) = (reduce(&pa.accuracy), reduce(&pb.accuracy));
    let (ll_a, ll_b) = (reduce(&pa.mean_log_loss), reduce(&pb.mean_log_loss));
    let (mg_a, mg_b) = (reduce(&pa.mean_margin), reduce(&pb.mean_margin));
    let (reg_a, reg_b) = (reg_fractions(&a, &assignment), reg_fractions(&b, &assignment));
    let buckets = (0..nb)
        .map(|k| CompareBucket {
            bucket: k,
            classes: (0..l).filter(|&c| assignment[c] == k).collect(),
            samples: (0..l).filter(|&c| assignment[c] == k).map(|c| counts[c]).sum(),
            acc_a: acc_a[k],
            acc_b: acc_b[k],
            log_loss_a: ll_a[k],
            log_loss_b: ll_b[k],
            margin_a: mg_a[k],
            margin_b: mg_b[k],
            reg_fraction_a: reg_a.as_ref().map(|f| f[k]),
            reg_fraction_b: reg_b.as_ref().map(|f| f[k]),
        })
        .collect();

    let report = CompareReport {
        run_a: args.run_a.display().to_string(),
        run_b: args.run_b.display().to_string(),
        mode_a: a.mode,
        mode_b: b.mode,
        test_digest: a.test_digest.clone(),
        mean_acc_a: 1.0 - a.avg_error,
        mean_acc_b: 1.0 - b.avg_error,
        mean_acc_delta: a.avg_error - b.avg_error,
        balanced_acc_delta: a.balanced_error - b.balanced_error,
        worst_k,
        bucket_source: source.into(),
        bucket_weighting: weighting,
        buckets,
        gain_curve: gain,
    };
    if let Some(dir) = out {
        create_dir(dir)?;
        let mut json = serde_json::to_string_pretty(&report)?;
        json.push('\n');
        write_file(&dir.join("compare.json"), &json)?;
        write_file(&dir.join("gain_curve.csv"), &gain_curve_csv(&report.gain_curve))?;
        write_file(&dir.join("buckets.csv"), &report.buckets_csv())?;
        write_file(&dir.join("reg_samples.csv"), &report.reg_samples_csv())?;
    }
    Ok(report)
}

/// Runs the sweep, writes one run directory per member under `runs/`, then
/// `sweep.csv`, `wins.csv` and `manifest.json`.
pub fn cmd_sweep(mut settings: Settings, args: &SweepArgs, out: &Path) -> Result<RunManifest> {
    set(&mut settings.sweep_seeds, args.seeds.clone());
    set(&mut settings.sweep_modes, args.modes.clone());
    args.pipeline.apply(&mut settings.pipeline);
    args.synth.apply(&mut settings.synth);
    let cfg = SweepConfig {
        seeds: settings.sweep_seeds.clone(),
        modes: settings.sweep_modes.clone(),
        synth: settings.synth.clone(),
        pipeline: settings.pipeline.clone(),
    };
    let result = run_sweep(&cfg)?;
    create_dir(out)?;
    let mut manifest = RunManifest::new("sweep", &settings);
    for m in &result.members {
        let name = format!("runs/{}_seed{}", m.mode, m.seed);
        let member = Settings {
            seed: m.seed,
            data: None,
            synth: settings.synth.clone(),
            pipeline: m.config.clone(),
            ..Settings::default()
        };
        write_run_dir(&out.join(&name), &member.to_json(), &m.artifacts)?;
        manifest.artifacts.push(name);
        manifest.seeds.insert(format!("{}_seed{}", m.mode, m.seed), m.seed);
    }
    let rows = result.rows()?;
    let wins = result.win_counts()?;
    write_file(&out.join("sweep.csv"), &rows_csv(&rows))?;
    write_file(&out.join("wins.csv"), &wins_csv(&wins))?;
    manifest.artifacts.push("sweep.csv".into());
    manifest.artifacts.push("wins.csv".into());
    manifest.write(out)?;
    print!("{}", wins_csv(&wins));
    Ok(manifest)
}
