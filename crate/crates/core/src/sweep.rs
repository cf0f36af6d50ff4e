//! Multi-seed, multi-mode studies on synthetic long-tailed data.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive::AdaptiveParams;
use crate::data::{longtail_downsample, split, synth_gaussian_mixture, LongTailSpec, SplitSpec};
use crate::error::{Error, Result};
use crate::metrics::topk_error;
use crate::trainer::{distill_rounds, train_teacher, Mode, PipelineArtifacts, PipelineConfig, RoundReport, Splits};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub separation: f64,
    pub imbalance: f64,
    pub train_fraction: f64,
    pub holdout_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 2,
            per_class: 500,
            separation: 12.0,
            imbalance: 100.0,
            train_fraction: 0.6,
            holdout_fraction: 0.2,
            test_fraction: 0.2,
        }
    }
}

/// Balanced mixture, stratified three-way split, then long-tail downsampling of
/// the training part only. Holdout and test stay balanced.
pub fn synth_splits(cfg: &SynthConfig, seed: u64) -> Result<Splits> {
    let full = synth_gaussian_mixture(cfg.classes, cfg.dim, cfg.per_class, cfg.separation, seed)?;
    let spec = SplitSpec {
        train_fraction: cfg.train_fraction,
        holdout_fraction: cfg.holdout_fraction,
        test_fraction: cfg.test_fraction,
        stratified: true,
        seed,
    };
    let (train, holdout, test) = split(&full, &spec)?;
    let train = longtail_downsample(&train, &LongTailSpec::new(cfg.imbalance)?, seed)?;
    Splits::new(train, holdout, test)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub seeds: Vec<u64>,
    pub modes: Vec<Mode>,
    pub synth: SynthConfig,
    /// Template; the mode and both model seeds are set per member.
    pub pipeline: PipelineConfig,
}

#[derive(Debug, Clone)]
pub struct SweepMember {
    pub mode: Mode,
    pub seed: u64,
    pub config: PipelineConfig,
    pub artifacts: PipelineArtifacts,
}

impl SweepMember {
    pub fn report(&self) -> &RoundReport {
        &self.artifacts.final_round().report
    }

    pub fn adaptive(&self) -> Option<&AdaptiveParams> {
        self.artifacts.final_round().adaptive.as_ref()
    }
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    /// Ordered by mode (one-hot first, then as given), then seed (as given).
    pub members: Vec<SweepMember>,
    pub k_list: Vec<usize>,
}

/// Member config for one (mode, seed): the teacher uses `seed`, the student `seed + 1`.
pub fn member_config(template: &PipelineConfig, mode: Mode, seed: u64) -> PipelineConfig {
    let mut cfg = template.clone();
    cfg.run.mode = mode;
    if mode == Mode::OneHot {
        cfg.run.rounds = 1;
    }
    cfg.teacher.train.seed = seed;
    cfg.student.train.seed = seed.wrapping_add(1);
    cfg.baseline = false;
    cfg
}

/// Runs every (seed, mode) pair. One-hot is always included as the reference.
/// Seeds run in parallel; each seed trains its teacher once and shares it
/// across modes, which gives the same artifacts as independent runs.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepResult> {
    if cfg.seeds.is_empty() {
        return Err(Error::invalid("a sweep needs at least one seed"));
    }
    let mut modes = vec![Mode::OneHot];
    for &m in &cfg.modes {
        if !modes.contains(&m) {
            modes.push(m);
        }
    }
    let per_seed: Vec<Result<Vec<SweepMember>>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let splits = synth_splits(&cfg.synth, seed)?;
            let teacher_cfg = member_config(&cfg.pipeline, Mode::Distill, seed);
            let teacher = if modes.iter().any(Mode::uses_teacher) {
                Some(train_teacher(&splits, &teacher_cfg.teacher, teacher_cfg.run.temperature)?.trained)
            } else {
                None
            };
            modes
                .iter()
                .map(|&mode| {
                    let config = member_config(&cfg.pipeline, mode, seed);
                    let t = mode.uses_teacher().then(|| teacher.clone()).flatten();
                    let artifacts = distill_rounds(&splits, &config, t, None)?;
                    Ok(SweepMember {
                        mode,
                        seed,
                        config,
                        artifacts,
                    })
                })
                .collect()
        })
        .collect();
    let mut by_seed = Vec::with_capacity(per_seed.len());
    for r in per_seed {
        by_seed.push(r?);
    }
    let mut members = Vec::with_capacity(by_seed.len() * modes.len());
    for i in 0..modes.len() {
        members.extend(by_seed.iter().map(|seed_members| seed_members[i].clone()));
    }
    Ok(SweepResult {
        members,
        k_list: cfg.pipeline.eval.k_list.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: Mode,
    pub seed: u64,
    pub teacher_acc: Option<f64>,
    pub avg_acc: f64,
    pub balanced_acc: f64,
    /// `(k, mean accuracy of the k worst subgroups)`.
    pub worst_k_acc: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinCount {
    pub mode: Mode,
    pub seeds: usize,
    pub avg_wins: usize,
    /// `(k, seeds where the mode's worst-k accuracy beats one-hot)`.
    pub worst_k_wins: Vec<(usize, usize)>,
}

impl SweepResult {
    pub fn rows(&self) -> Result<Vec<SweepRow>> {
        self.members
            .iter()
            .map(|m| {
                let r = m.report();
                let g = r.per_subgroup_error.len();
                let worst_k_acc = self
                    .k_list
                    .iter()
                    .filter(|&&k| k >= 1 && k <= g)
                    .map(|&k| Ok((k, 1.0 - topk_error(&r.per_subgroup_error, k)?)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(SweepRow {
                    mode: m.mode,
                    seed: m.seed,
                    teacher_acc: r.teacher.as_ref().map(|t| t.report.avg_accuracy()),
                    avg_acc: 1.0 - r.avg_error,
                    balanced_acc: 1.0 - r.balanced_error,
                    worst_k_acc,
                })
            })
            .collect()
    }

    /// For every non-reference mode, the number of seeds where it strictly beats one-hot.
    pub fn win_counts(&self) -> Result<Vec<WinCount>> {
        win_counts(&self.rows()?)
    }
}

pub fn win_counts(rows: &[SweepRow]) -> Result<Vec<WinCount>> {
    let reference = |seed: u64| {
        rows.iter()
            .find(|r| r.mode == Mode::OneHot && r.seed == seed)
            .ok_or_else(|| Error::invalid(format!("no one-hot row for seed {seed}")))
    };
    let mut modes: Vec<Mode> = Vec::new();
    for r in rows {
        if r.mode != Mode::OneHot && !modes.contains(&r.mode) {
            modes.push(r.mode);
        }
    }
    modes
        .into_iter()
        .map(|mode| {
            let mine: Vec<&SweepRow> = rows.iter().filter(|r| r.mode == mode).collect();
            let mut avg_wins = 0;
            let mut worst: Vec<(usize, usize)> = mine.first().map_or(Vec::new(), |r| r.worst_k_acc.iter().map(|&(k, _)| (k, 0)).collect());
            for r in &mine {
                let base = reference(r.seed)?;
                avg_wins += usize::from(r.avg_acc > base.avg_acc);
                for (slot, (&(k, acc), &(bk, bacc))) in worst.iter_mut().zip(r.worst_k_acc.iter().zip(&base.worst_k_acc)) {
                    debug_assert_eq!(k, bk);
                    slot.1 += usize::from(acc > bacc);
                }
            }
            Ok(WinCount {
                mode,
                seeds: mine.len(),
                avg_wins,
                worst_k_wins: worst,
            })
        })
        .collect()
}

pub fn rows_csv(rows: &[SweepRow]) -> String {
    let ks: Vec<usize> = rows.first().map_or(Vec::new(), |r| r.worst_k_acc.iter().map(|&(k, _)| k).collect());
    let mut out = String::from("mode,seed,teacher_acc,avg_acc,balanced_acc");
    for k in &ks {
        out.push_str(&format!(",worst_{k}_acc"));
    }
    out.push('\n');
    for r in rows {
        let t = r.teacher_acc.map(|v| format!("{v:?}")).unwrap_or_default();
        out.push_str(&format!("{},{},{t},{:?},{:?}", r.mode, r.seed, r.avg_acc, r.balanced_acc));
        for (_, acc) in &r.worst_k_acc {
            out.push_str(&format!(",{acc:?}"));
        }
        out.push('\n');
    }
    out
}

pub fn wins_csv(wins: &[WinCount]) -> String {
    let ks: Vec<usize> = wins.first().map_or(Vec::new(), |w| w.worst_k_wins.iter().map(|&(k, _)| k).collect());
    let mut out = String::from("mode,seeds,avg_wins");
    for k in &ks {
        out.push_str(&format!(",worst_{k}_wins"));
    }
    out.push('\n');
    for w in wins {
        out.push_str(&format!("{},{},{}", w.mode, w.seeds, w.avg_wins));
        for (_, c) in &w.worst_k_wins {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
    }
    out
}
