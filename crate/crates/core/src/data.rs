//! Datasets: synthetic Gaussian mixtures, long-tail downsampling, splits and CSV I/O.
//!
//! CSV layout is `f0,f1,...,f{D-1},label[,subgroup]`, one sample per row, `\n`
//! line endings. Reals are written with the shortest representation that parses
//! back to the same `f64`, so save/load round-trips bit-exactly.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seeded_rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    subgroup_ids: Option<Vec<usize>>,
    num_classes: usize,
    num_subgroups: usize,
}

impl Dataset {
    /// Validates and builds a dataset. Without subgroup ids the subgroups are
    /// the classes themselves and `num_subgroups` is forced to `num_classes`.
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        subgroup_ids: Option<Vec<usize>>,
        num_classes: usize,
        num_subgroups: Option<usize>,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        if features.rows() != labels.len() {
            return Err(Error::shape(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        let num_subgroups = match &subgroup_ids {
            None => num_classes,
            Some(ids) => {
                if ids.len() != labels.len() {
                    return Err(Error::shape(format!(
                        "{} subgroup ids but {} labels",
                        ids.len(),
                        labels.len()
                    )));
                }
                let g = num_subgroups
                    .unwrap_or_else(|| ids.iter().max().map_or(1, |m| m + 1))
                    .max(1);
                if let Some(&bad) = ids.iter().find(|&&s| s >= g) {
                    return Err(Error::invalid(format!(
                        "subgroup id {bad} out of range for {g} subgroups"
                    )));
                }
                g
            }
        };
        Ok(Self {
            features,
            labels,
            subgroup_ids,
            num_classes,
            num_subgroups,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subgroup_ids(&self) -> Option<&[usize]> {
        self.subgroup_ids.as_deref()
    }

    /// Subgroup of every sample, falling back to the class label.
    pub fn subgroups(&self) -> &[usize] {
        self.subgroup_ids.as_deref().unwrap_or(&self.labels)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_subgroups(&self) -> usize {
        self.num_subgroups
    }

    /// Returns a copy that declares at least `num_classes` classes.
    pub fn with_num_classes(mut self, num_classes: usize) -> Self {
        if num_classes > self.num_classes {
            if self.subgroup_ids.is_none() {
                self.num_subgroups = num_classes;
            }
            self.num_classes = num_classes;
        }
        self
    }

    /// Returns a copy that declares at least `num_subgroups` subgroups (only
    /// meaningful when explicit subgroup ids are present).
    pub fn with_num_subgroups(mut self, num_subgroups: usize) -> Self {
        if self.subgroup_ids.is_some() && num_subgroups > self.num_subgroups {
            self.num_subgroups = num_subgroups;
        }
        self
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Gathers a subset of samples, in the given order, keeping class and subgroup cardinalities.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            subgroup_ids: self
                .subgroup_ids
                .as_ref()
                .map(|ids| indices.iter().map(|&i| ids[i]).collect()),
            num_classes: self.num_classes,
            num_subgroups: self.num_subgroups,
        }
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (0..self.dim()).map(|j| format!("f{j}")).collect();
        out.push_str(&header.join(","));
        if !header.is_empty() {
            out.push(',');
        }
        out.push_str("label");
        if self.subgroup_ids.is_some() {
            out.push_str(",subgroup");
        }
        out.push('\n');
        for (n, row) in self.features.iter_rows().enumerate() {
            for v in row {
                let _ = write!(out, "{v:?},");
            }
            let _ = write!(out, "{}", self.labels[n]);
            if let Some(ids) = &self.subgroup_ids {
                let _ = write!(out, ",{}", ids[n]);
            }
            out.push('\n');
        }
        out
    }

    /// Hex SHA-256 of the canonical CSV serialization.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_csv_string().as_bytes()))
    }
}

pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if !ds.features.is_finite() {
        return Err(Error::invalid("refusing to write non-finite features"));
    }
    std::fs::write(path, ds.to_csv_string()).map_err(|e| Error::io(path, e))
}

/// Reads a dataset. `num_classes` (and `num_subgroups`) are inferred as the
/// largest id plus one; use [`Dataset::with_num_classes`] to widen.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let csv_err = |message: String| Error::Csv {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| csv_err(e.to_string()))?
        .clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| csv_err("missing `label` column".into()))?;
    let subgroup_col = headers.iter().position(|h| h.trim() == "subgroup");
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| c != label_col && Some(c) != subgroup_col)
        .collect();

    let parse_id = |cell: &str, line: u64| -> Result<usize> {
        let v: f64 = cell
            .trim()
            .parse()
            .map_err(|_| csv_err(format!("line {line}: non-numeric cell `{cell}`")))?;
        if v < 0.0 || v.fract() != 0.0 || !v.is_finite() {
            return Err(csv_err(format!(
                "line {line}: `{cell}` is not a non-negative integer id"
            )));
        }
        Ok(v as usize)
    };

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut subgroups = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        for &c in &feature_cols {
            let cell = &record[c];
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| csv_err(format!("line {line}: non-numeric cell `{cell}`")))?;
            data.push(v);
        }
        labels.push(parse_id(&record[label_col], line)?);
        if let Some(c) = subgroup_col {
            subgroups.push(parse_id(&record[c], line)?);
        }
    }
    let n = labels.len();
    let features = Matrix::from_vec(n, feature_cols.len(), data)?;
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    let subgroup_ids = subgroup_col.map(|_| subgroups);
    Dataset::new(features, labels, subgroup_ids, num_classes, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    probabilities: Vec<f64>,
}

impl LabelDistribution {
    pub fn new(probabilities: Vec<f64>) -> Result<Self> {
        let sum: f64 = probabilities.iter().sum();
        if probabilities.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "label distribution must be nonnegative and sum to 1 (sum = {sum})"
            )));
        }
        Ok(Self { probabilities })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }
}

pub fn empirical_label_dist(ds: &Dataset) -> Result<LabelDistribution> {
    if ds.is_empty() {
        return Err(Error::invalid("empty dataset has no label distribution"));
    }
    let n = ds.len() as f64;
    LabelDistribution::new(ds.class_counts().into_iter().map(|c| c as f64 / n).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LongTailSpec {
    pub imbalance_ratio: f64,
}

impl LongTailSpec {
    pub fn new(imbalance_ratio: f64) -> Result<Self> {
        if !(imbalance_ratio >= 1.0) || !imbalance_ratio.is_finite() {
            return Err(Error::invalid(format!(
                "imbalance ratio must be finite and >= 1, got {imbalance_ratio}"
            )));
        }
        Ok(Self { imbalance_ratio })
    }

    /// Geometric decay `mu` with `mu^(L-1) = imbalance_ratio`.
    pub fn decay(&self, num_classes: usize) -> f64 {
        if num_classes < 2 {
            return 1.0;
        }
        self.imbalance_ratio.powf(1.0 / (num_classes - 1) as f64)
    }

    /// Retained count for class `i` given the class-0 count, rounded half-up.
    pub fn retained(&self, head_count: usize, class: usize, num_classes: usize) -> usize {
        let mu = self.decay(num_classes);
        (head_count as f64 * mu.powi(-(class as i32)) + 0.5).floor() as usize
    }
}

/// Downsamples so class `i` keeps `round(n0 * mu^-i)` samples, where `n0` is the
/// class-0 count. Retained samples are chosen uniformly under `seed` and kept in
/// their original order.
pub fn longtail_downsample(ds: &Dataset, spec: &LongTailSpec, seed: u64) -> Result<Dataset> {
    LongTailSpec::new(spec.imbalance_ratio)?;
    let l = ds.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); l];
    for (i, &y) in ds.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let head = by_class[0].len();
    let mut rng = seeded_rng(seed, 0);
    let mut keep = Vec::new();
    for (class, members) in by_class.iter_mut().enumerate() {
        let target = spec.retained(head, class, l);
        if target == 0 {
            return Err(Error::EmptyClass {
                class,
                context: format!(" after long-tail downsampling (head count {head})"),
            });
        }
        if members.len() < target {
            return Err(Error::invalid(format!(
                "class {class} has {} samples but {target} are required",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        keep.extend_from_slice(&members[..target]);
    }
    keep.sort_unstable();
    Ok(ds.select(&keep))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub holdout_fraction: f64,
    pub test_fraction: f64,
    pub stratified: bool,
    pub seed: u64,
}

impl SplitSpec {
    fn validate(&self) -> Result<()> {
        let f = [self.train_fraction, self.holdout_fraction, self.test_fraction];
        if f.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
            return Err(Error::invalid(format!("split fractions must lie in (0,1): {f:?}")));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("split fractions must sum to 1: {f:?}")));
        }
        Ok(())
    }

    fn sizes(&self, n: usize) -> [usize; 3] {
        let round = |x: f64| (x + 0.5).floor() as usize;
        let train = round(self.train_fraction * n as f64).min(n);
        let holdout = round(self.holdout_fraction * n as f64).min(n - train);
        [train, holdout, n - train - holdout]
    }
}

/// Partitions into (train, holdout, test). Each part lists its samples in
/// ascending original order.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed, 0);
    let groups: Vec<Vec<usize>> = if spec.stratified {
        let mut by_class = vec![Vec::new(); ds.num_classes()];
        for (i, &y) in ds.labels().iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    } else {
        vec![(0..ds.len()).collect()]
    };

    let mut parts: [Vec<usize>; 3] = Default::default();
    for (class, mut members) in groups.into_iter().enumerate() {
        if spec.stratified && members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let sizes = spec.sizes(members.len());
        if spec.stratified && sizes.contains(&0) {
            return Err(Error::EmptyClass {
                class,
                context: format!(
                    " in a stratified split cell ({} samples give sizes {sizes:?})",
                    members.len()
                ),
            });
        }
        let mut start = 0;
        for (part, size) in parts.iter_mut().zip(sizes) {
            part.extend_from_slice(&members[start..start + size]);
            start += size;
        }
    }
    for part in parts.iter_mut() {
        part.sort_unstable();
    }
    let [a, b, c] = parts;
    Ok((ds.select(&a), ds.select(&b), ds.select(&c)))
}

/// Isotropic unit-variance Gaussian classes. Class `c` has mean
/// `separation / sqrt(2) * u_c` with `u_c` a unit direction drawn from
/// `(seed, c)`, so orthogonal class directions sit exactly `separation` apart.
/// Samples are grouped by class in ascending class order.
pub fn synth_gaussian_mixture(
    num_classes: usize,
    dim: usize,
    samples_per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    if dim == 0 || samples_per_class == 0 {
        return Err(Error::invalid("dim and samples_per_class must be positive"));
    }
    if !(separation > 0.0) || !separation.is_finite() {
        return Err(Error::invalid(format!("separation must be positive, got {separation}")));
    }
    let radius = separation / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|c| {
            let mut rng = seeded_rng(seed, 1 + c as u64);
            loop {
                let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    break v.into_iter().map(|x| radius * x / norm).collect();
                }
            }
        })
        .collect();

    let n = num_classes * samples_per_class;
    let mut rng = seeded_rng(seed, 0);
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..samples_per_class {
            for &m in mean {
                let z: f64 = rng.sample(StandardNormal);
                data.push(m + z);
            }
            labels.push(c);
        }
    }
    Dataset::new(Matrix::from_vec(n, dim, data)?, labels, None, num_classes, None)
}
