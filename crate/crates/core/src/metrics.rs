//! Subgroup error summaries and logit diagnostics.
//!
//! Reports store errors; accuracies are `1 - error` wherever they are shown.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ProbMatrix;

/// Log-loss reported for a zero true-class probability.
pub const DEFAULT_LOG_LOSS_CAP: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupReport {
    pub per_subgroup_error: Vec<f64>,
    pub n_per_subgroup: Vec<usize>,
    pub avg_error: f64,
    pub balanced_error: f64,
    pub worst_error: f64,
    pub topk_error: BTreeMap<usize, f64>,
}

impl SubgroupReport {
    pub fn avg_accuracy(&self) -> f64 {
        1.0 - self.avg_error
    }

    pub fn balanced_accuracy(&self) -> f64 {
        1.0 - self.balanced_error
    }

    /// Mean accuracy of the `k` worst subgroups.
    pub fn worst_k_accuracy(&self, k: usize) -> Result<f64> {
        Ok(1.0 - topk_error(&self.per_subgroup_error, k)?)
    }
}

/// Misclassification rate and sample count of every subgroup.
pub fn per_subgroup_errors(
    predictions: &[usize],
    labels: &[usize],
    subgroups: &[usize],
    num_subgroups: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    if predictions.len() != labels.len() || subgroups.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions, {} labels, {} subgroup ids",
            predictions.len(),
            labels.len(),
            subgroups.len()
        )));
    }
    let mut wrong = vec![0usize; num_subgroups];
    let mut counts = vec![0usize; num_subgroups];
    for ((&p, &y), &g) in predictions.iter().zip(labels).zip(subgroups) {
        if g >= num_subgroups {
            return Err(Error::invalid(format!("subgroup id {g} out of range for {num_subgroups}")));
        }
        counts[g] += 1;
        wrong[g] += usize::from(p != y);
    }
    if let Some(g) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptySubgroup(g));
    }
    let err = wrong.iter().zip(&counts).map(|(&w, &c)| w as f64 / c as f64).collect();
    Ok((err, counts))
}

/// Mean of the `k` largest errors.
pub fn topk_error(err: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > err.len() {
        return Err(Error::invalid(format!("k = {k} outside 1..={}", err.len())));
    }
    let mut sorted = err.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted[..k].iter().sum::<f64>() / k as f64)
}

pub fn summarize(err: &[f64], counts: &[usize], k_list: &[usize]) -> Result<SubgroupReport> {
    if err.is_empty() || err.len() != counts.len() {
        return Err(Error::shape(format!("{} errors for {} counts", err.len(), counts.len())));
    }
    if let Some(e) = err.iter().find(|e| !(0.0..=1.0).contains(*e)) {
        return Err(Error::invalid(format!("error rate {e} outside [0, 1]")));
    }
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(Error::invalid("no samples to summarize"));
    }
    let avg_error = err.iter().zip(counts).map(|(e, &c)| e * c as f64).sum::<f64>() / n as f64;
    let balanced_error = err.iter().sum::<f64>() / err.len() as f64;
    let worst_error = err.iter().fold(f64::NEG_INFINITY, |m, &e| m.max(e));
    let topk = k_list
        .iter()
        .map(|&k| Ok((k, topk_error(err, k)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(SubgroupReport {
        per_subgroup_error: err.to_vec(),
        n_per_subgroup: counts.to_vec(),
        avg_error,
        balanced_error,
        worst_error,
        topk_error: topk,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SortBy {
    ModelA,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainCurve {
    /// `gain[k - 1]` is the mean `acc_b - acc_a` over the `k` worst classes.
    pub gain: Vec<f64>,
    /// Class order used, worst first.
    pub order: Vec<usize>,
}

/// Ascending order of `key`, ties by index.
fn ascending_order(key: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..key.len()).collect();
    order.sort_by(|&i, &j| key[i].total_cmp(&key[j]).then(i.cmp(&j)));
    order
}

/// Cumulative accuracy gain of model B over model A across the worst `k` classes.
/// With `SortBy::Reference`, `reference` supplies the sort key.
pub fn gain_curve(acc_a: &[f64], acc_b: &[f64], sort_by: SortBy, reference: Option<&[f64]>) -> Result<GainCurve> {
    if acc_a.len() != acc_b.len() || acc_a.is_empty() {
        return Err(Error::shape(format!("accuracy vectors of length {} and {}", acc_a.len(), acc_b.len())));
    }
    let key = match sort_by {
        SortBy::ModelA => acc_a,
        SortBy::Reference => {
            let r = reference.ok_or_else(|| Error::invalid("reference sort needs reference accuracies"))?;
            if r.len() != acc_a.len() {
                return Err(Error::shape("reference accuracies have the wrong length"));
            }
            r
        }
    };
    let order = ascending_order(key);
    let mut sum = 0.0;
    let gain = order
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            sum += acc_b[c] - acc_a[c];
            sum / (i + 1) as f64
        })
        .collect();
    Ok(GainCurve { gain, order })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitStat {
    pub correct: bool,
    pub log_loss: f64,
    pub margin: f64,
}

/// Accuracy, log-loss `-ln p_y` (capped) and margin `p_y - max_{y' != y} p_y'` per sample.
pub fn logit_stats(probs: &ProbMatrix, labels: &[usize], log_loss_cap: f64) -> Result<Vec<LogitStat>> {
    if probs.rows() != labels.len() {
        return Err(Error::shape(format!("{} probability rows for {} labels", probs.rows(), labels.len())));
    }
    labels
        .iter()
        .enumerate()
        .map(|(n, &y)| {
            let row = probs.row(n);
            if y >= row.len() {
                return Err(Error::invalid(format!("label {y} out of range")));
            }
            let py = row[y];
            let rival = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != y)
                .fold(f64::NEG_INFINITY, |m, (_, &p)| m.max(p));
            let rival = if rival.is_finite() { rival } else { 0.0 };
            let log_loss = if py > 0.0 { (-py.ln()).min(log_loss_cap) } else { log_loss_cap };
            Ok(LogitStat {
                correct: py > rival,
                log_loss,
                margin: py - rival,
            })
        })
        .collect()
}

/// Per-class accuracy from a probability matrix; absent classes score 0.
pub fn per_class_accuracy(probs: &ProbMatrix, labels: &[usize]) -> Vec<f64> {
    let l = probs.num_classes();
    let preds = probs.argmax();
    let mut hit = vec![0usize; l];
    let mut count = vec![0usize; l];
    for (&p, &y) in preds.iter().zip(labels) {
        count[y] += 1;
        hit[y] += usize::from(p == y);
    }
    hit.iter()
        .zip(&count)
        .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
        .collect()
}

/// Splits classes, sorted by descending `class_accuracy` (ties by index), into
/// contiguous buckets whose sizes differ by at most one. Returns the bucket of every class.
pub fn bucket_assignment(class_accuracy: &[f64], num_buckets: usize) -> Result<Vec<usize>> {
    let l = class_accuracy.len();
    if num_buckets == 0 || num_buckets > l {
        return Err(Error::invalid(format!("{num_buckets} buckets for {l} classes")));
    }
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&i, &j| class_accuracy[j].total_cmp(&class_accuracy[i]).then(i.cmp(&j)));
    let (base, extra) = (l / num_buckets, l % num_buckets);
    let mut assignment = vec![0; l];
    let mut pos = 0;
    for b in 0..num_buckets {
        let size = base + usize::from(b < extra);
        for &c in &order[pos..pos + size] {
            assignment[c] = b;
        }
        pos += size;
    }
    Ok(assignment)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BucketWeighting {
    /// Every sample in the bucket counts once.
    Sample,
    /// Every class in the bucket counts once.
    Class,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketMeans {
    pub accuracy: Vec<f64>,
    pub log_loss: Vec<f64>,
    pub margin: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub num_buckets: usize,
    pub assignment: Vec<usize>,
    pub samples_per_bucket: Vec<usize>,
    pub weighting: BucketWeighting,
    /// Teacher first, then the comparison models in the order given.
    pub models: Vec<BucketMeans>,
}

/// Per-class mean of one statistic; absent classes give 0.
fn class_means(values: &[f64], labels: &[usize], num_classes: usize) -> (Vec<f64>, Vec<usize>) {
    let mut sum = vec![0.0; num_classes];
    let mut count = vec![0usize; num_classes];
    for (&v, &y) in values.iter().zip(labels) {
        sum[y] += v;
        count[y] += 1;
    }
    let mean = sum.iter().zip(&count).map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect();
    (mean, count)
}

fn bucket_means_of(
    stats: &[LogitStat],
    labels: &[usize],
    assignment: &[usize],
    num_buckets: usize,
    weighting: BucketWeighting,
) -> BucketMeans {
    let l = assignment.len();
    let acc: Vec<f64> = stats.iter().map(|s| if s.correct { 1.0 } else { 0.0 }).collect();
    let ll: Vec<f64> = stats.iter().map(|s| s.log_loss).collect();
    let mg: Vec<f64> = stats.iter().map(|s| s.margin).collect();
    let reduce = |values: &[f64]| -> Vec<f64> {
        let mut sum = vec![0.0; num_buckets];
        let mut weight = vec![0.0; num_buckets];
        match weighting {
            BucketWeighting::Sample => {
                for (&v, &y) in values.iter().zip(labels) {
                    sum[assignment[y]] += v;
                    weight[assignment[y]] += 1.0;
                }
            }
            BucketWeighting::Class => {
                let (means, counts) = class_means(values, labels, l);
                for c in 0..l {
                    if counts[c] > 0 {
                        sum[assignment[c]] += means[c];
                        weight[assignment[c]] += 1.0;
                    }
                }
            }
        }
        sum.iter().zip(&weight).map(|(&s, &w)| if w == 0.0 { 0.0 } else { s / w }).collect()
    };
    BucketMeans {
        accuracy: reduce(&acc),
        log_loss: reduce(&ll),
        margin: reduce(&mg),
    }
}

/// Buckets classes by teacher accuracy and reports mean accuracy, log-loss and
/// margin per bucket for the teacher and each comparison model.
pub fn bucket_stats(
    teacher_probs: &ProbMatrix,
    model_probs: &[&ProbMatrix],
    labels: &[usize],
    num_buckets: usize,
    weighting: BucketWeighting,
    log_loss_cap: f64,
) -> Result<BucketStats> {
    let l = teacher_probs.num_classes();
    for p in model_probs {
        if p.rows() != teacher_probs.rows() || p.num_classes() != l {
            return Err(Error::shape("comparison model probabilities are not aligned with the teacher"));
        }
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= l) {
        return Err(Error::invalid(format!("label {y} out of range for {l} classes")));
    }
    let assignment = bucket_assignment(&per_class_accuracy(teacher_probs, labels), num_buckets)?;
    let mut samples_per_bucket = vec![0; num_buckets];
    for &y in labels {
        samples_per_bucket[assignment[y]] += 1;
    }
    let models = std::iter::once(teacher_probs)
        .chain(model_probs.iter().copied())
        .map(|p| {
            let stats = logit_stats(p, labels, log_loss_cap)?;
            Ok(bucket_means_of(&stats, labels, &assignment, num_buckets, weighting))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BucketStats {
        num_buckets,
        assignment,
        samples_per_bucket,
        weighting,
        models,
    })
}

/// Samples where the teacher's true-label probability is below the student's,
/// and the fraction of such samples in each bucket of `assignment`.
pub fn regularisation_samples(
    teacher_probs: &ProbMatrix,
    student_probs: &ProbMatrix,
    labels: &[usize],
    assignment: &[usize],
) -> Result<(Vec<bool>, Vec<f64>)> {
    if teacher_probs.rows() != student_probs.rows()
        || teacher_probs.num_classes() != student_probs.num_classes()
        || teacher_probs.rows() != labels.len()
    {
        return Err(Error::shape("teacher, student and labels are not aligned"));
    }
    if assignment.len() != teacher_probs.num_classes() {
        return Err(Error::shape("bucket assignment must cover every class"));
    }
    let num_buckets = assignment.iter().max().map_or(0, |m| m + 1);
    let mut hits = vec![0usize; num_buckets];
    let mut totals = vec![0usize; num_buckets];
    let mut mask = Vec::with_capacity(labels.len());
    for (n, &y) in labels.iter().enumerate() {
        if y >= assignment.len() {
            return Err(Error::invalid(format!("label {y} out of range")));
        }
        let flag = teacher_probs.row(n)[y] < student_probs.row(n)[y];
        mask.push(flag);
        totals[assignment[y]] += 1;
        hits[assignment[y]] += usize::from(flag);
    }
    let fractions = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
        .collect();
    Ok((mask, fractions))
}

/// Spearman rank correlation with average ranks for ties; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::shape("rank correlation needs two equal-length vectors of length >= 2"));
    }
    let rank = |v: &[f64]| -> Vec<f64> {
        let order = ascending_order(v);
        let mut ranks = vec![0.0; v.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &order[i..=j] {
                ranks[k] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}
