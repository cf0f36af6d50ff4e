//! Softmax cross-entropy, distillation, adaptive-mixing distillation and
//! variable-margin losses. Every per-sample loss returns its value and its
//! exact gradient with respect to the logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{softmax, softmax_per_class_temperature, softmax_with_temperature, LogitMatrix, ProbMatrix};

const TEACHER_ROW_TOLERANCE: f64 = 1e-6;

/// Temperature the teacher probabilities were produced at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Temperature {
    Scalar(f64),
    /// Indexed by the sample's training label.
    PerClass(Vec<f64>),
}

/// Frozen teacher predictions, index-aligned with a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutputs {
    probs: ProbMatrix,
    logits: LogitMatrix,
    temperature: Temperature,
}

impl TeacherOutputs {
    pub fn from_logits(logits: LogitMatrix, temperature: f64) -> Result<Self> {
        let probs = softmax_with_temperature(&logits, temperature)?;
        Ok(Self {
            probs,
            logits,
            temperature: Temperature::Scalar(temperature),
        })
    }

    pub fn from_logits_per_class(logits: LogitMatrix, labels: &[usize], temps: &[f64]) -> Result<Self> {
        let probs = softmax_per_class_temperature(&logits, labels, temps)?;
        Ok(Self {
            probs,
            logits,
            temperature: Temperature::PerClass(temps.to_vec()),
        })
    }

    pub fn probs(&self) -> &ProbMatrix {
        &self.probs
    }

    pub fn logits(&self) -> &LogitMatrix {
        &self.logits
    }

    pub fn temperature(&self) -> &Temperature {
        &self.temperature
    }

    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.rows() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.probs.num_classes()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixWeights {
    alpha: Vec<f64>,
}

impl MixWeights {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if let Some(a) = alpha.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::invalid(format!("mixing weight {a} outside [0, 1]")));
        }
        Ok(Self { alpha })
    }

    pub fn constant(alpha: f64, num_classes: usize) -> Result<Self> {
        Self::new(vec![alpha; num_classes])
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }
}

/// Pairwise margin multipliers `rho[y][y']`. The diagonal is unused and kept at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginMatrix {
    rho: Vec<Vec<f64>>,
}

impl MarginMatrix {
    pub fn new(rho: Vec<Vec<f64>>) -> Result<Self> {
        let l = rho.len();
        for (y, row) in rho.iter().enumerate() {
            if row.len() != l {
                return Err(Error::shape(format!("margin matrix row {y} has length {}", row.len())));
            }
            for (yp, &r) in row.iter().enumerate() {
                if y != yp && !(r > 0.0 && r.is_finite()) {
                    return Err(Error::invalid(format!(
                        "margin rho[{y}][{yp}] = {r} must be positive and finite"
                    )));
                }
            }
        }
        Ok(Self { rho })
    }

    pub fn ones(num_classes: usize) -> Self {
        Self {
            rho: vec![vec![1.0; num_classes]; num_classes],
        }
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rho
    }

    pub fn get(&self, y: usize, yp: usize) -> f64 {
        self.rho[y][yp]
    }

    pub fn num_classes(&self) -> usize {
        self.rho.len()
    }
}

fn check_label(label: usize, num_classes: usize) -> Result<()> {
    if label >= num_classes {
        return Err(Error::invalid(format!(
            "label {label} out of range for {num_classes} classes"
        )));
    }
    Ok(())
}

fn check_teacher_row(row: &[f64], num_classes: usize) -> Result<()> {
    if row.len() != num_classes {
        return Err(Error::shape(format!(
            "teacher row has {} entries for {num_classes} classes",
            row.len()
        )));
    }
    let sum: f64 = row.iter().sum();
    if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > TEACHER_ROW_TOLERANCE {
        return Err(Error::invalid(format!("teacher row is not a distribution (sum = {sum})")));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha = {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// `logsumexp(f) - f_j` for every `j`, i.e. the cross-entropy of each label.
/// The shared term is `ln_1p` of the off-max mass so a dominant logit does not
/// lose precision.
fn per_label_ce(logits: &[f64]) -> Vec<f64> {
    let top = crate::model::argmax(logits);
    let max = logits[top];
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != top)
        .map(|(_, &f)| (f - max).exp())
        .sum();
    let lse_minus_max = rest.ln_1p();
    logits.iter().map(|&f| (max - f) + lse_minus_max).collect()
}

fn finite_logits(logits: &[f64]) -> Result<()> {
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("logits must be non-empty and finite"));
    }
    Ok(())
}

/// Softmax cross-entropy `-f_y + logsumexp(f)`.
pub fn ce_loss(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    finite_logits(logits)?;
    check_label(label, logits.len())?;
    let value = per_label_ce(logits)[label];
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((value, grad))
}

fn mixed_target_loss(logits: &[f64], label: usize, teacher_row: &[f64], alpha: f64) -> (f64, Vec<f64>) {
    let ce = per_label_ce(logits);
    let soft: f64 = teacher_row.iter().zip(&ce).map(|(p, c)| p * c).sum();
    let value = (1.0 - alpha) * ce[label] + alpha * soft;
    let mut grad = softmax(logits);
    for (g, &p) in grad.iter_mut().zip(teacher_row) {
        *g -= alpha * p;
    }
    grad[label] -= 1.0 - alpha;
    (value, grad)
}

/// `(1 - alpha) * ce(y, f) + alpha * sum_y' p_t[y'] * ce(y', f)`.
pub fn distill_loss(logits: &[f64], label: usize, teacher_row: &[f64], alpha: f64) -> Result<(f64, Vec<f64>)> {
    finite_logits(logits)?;
    check_label(label, logits.len())?;
    check_teacher_row(teacher_row, logits.len())?;
    check_alpha(alpha)?;
    Ok(mixed_target_loss(logits, label, teacher_row, alpha))
}

/// Distillation with the mixing weight chosen by the sample's own label.
pub fn adamix_loss(logits: &[f64], label: usize, teacher_row: &[f64], mix: &MixWeights) -> Result<(f64, Vec<f64>)> {
    check_label(label, logits.len())?;
    if mix.alpha.len() != logits.len() {
        return Err(Error::shape(format!(
            "{} mixing weights for {} classes",
            mix.alpha.len(),
            logits.len()
        )));
    }
    distill_loss(logits, label, teacher_row, mix.alpha[label])
}

fn margin_terms(logits: &[f64], label: usize, rho: &MarginMatrix) -> (f64, Vec<f64>) {
    let fy = logits[label];
    // t_{y'} = log rho_{yy'} + f_{y'} - f_y; shift by max({0} ∪ t)
    let t: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(j, &f)| if j == label { f64::NEG_INFINITY } else { rho.get(label, j).ln() + f - fy })
        .collect();
    let shift = t.iter().fold(0.0f64, |m, &v| m.max(v));
    let e: Vec<f64> = t.iter().map(|&v| (v - shift).exp()).collect();
    let sum: f64 = e.iter().sum();
    let value = if shift == 0.0 {
        sum.ln_1p()
    } else {
        shift + ((-shift).exp() + sum).ln()
    };
    let denom = (-shift).exp() + sum;
    let mut grad: Vec<f64> = e.iter().map(|&v| v / denom).collect();
    grad[label] = -grad.iter().enumerate().filter(|&(j, _)| j != label).map(|(_, g)| g).sum::<f64>();
    (value, grad)
}

/// `log(1 + sum_{y' != y} rho[y][y'] * exp(f_y' - f_y))`.
pub fn margin_loss(logits: &[f64], label: usize, rho: &MarginMatrix) -> Result<(f64, Vec<f64>)> {
    finite_logits(logits)?;
    check_label(label, logits.len())?;
    if rho.num_classes() != logits.len() {
        return Err(Error::shape(format!(
            "margin matrix is {0}x{0} for {1} classes",
            rho.num_classes(),
            logits.len()
        )));
    }
    Ok(margin_terms(logits, label, rho))
}

/// Margin loss in place of the one-hot term of the adaptive-mixing objective:
/// `(1 - a_y) * margin(y, f) + a_y * sum_y' p_t[y'] * ce(y', f)`.
pub fn margin_mix_loss(
    logits: &[f64],
    label: usize,
    teacher_row: &[f64],
    mix: &MixWeights,
    rho: &MarginMatrix,
) -> Result<(f64, Vec<f64>)> {
    let (m_value, m_grad) = margin_loss(logits, label, rho)?;
    check_teacher_row(teacher_row, logits.len())?;
    if mix.alpha.len() != logits.len() {
        return Err(Error::shape("mixing weights do not match class count"));
    }
    let alpha = mix.alpha[label];
    let (soft_value, soft_grad) = mixed_target_loss(logits, label, teacher_row, 1.0);
    let value = (1.0 - alpha) * m_value + alpha * soft_value;
    let grad = m_grad
        .iter()
        .zip(&soft_grad)
        .map(|(m, s)| (1.0 - alpha) * m + alpha * s)
        .collect();
    Ok((value, grad))
}

/// Objective applied to every sample of a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    /// Plain cross-entropy against the labels.
    OneHot,
    Distill { alpha: f64 },
    AdaMix { mix: MixWeights },
    /// Variable-margin loss against the labels, no teacher term.
    Margin { rho: MarginMatrix },
    MarginMix { mix: MixWeights, rho: MarginMatrix },
}

impl LossSpec {
    pub fn needs_teacher(&self) -> bool {
        matches!(self, LossSpec::Distill { .. } | LossSpec::AdaMix { .. } | LossSpec::MarginMix { .. })
    }

    /// Value and logit gradient for one sample.
    pub fn sample_loss(&self, logits: &[f64], label: usize, teacher_row: Option<&[f64]>) -> Result<(f64, Vec<f64>)> {
        let teacher = || teacher_row.ok_or_else(|| Error::invalid("distillation loss needs teacher outputs"));
        match self {
            LossSpec::OneHot => ce_loss(logits, label),
            LossSpec::Distill { alpha } => distill_loss(logits, label, teacher()?, *alpha),
            LossSpec::AdaMix { mix } => adamix_loss(logits, label, teacher()?, mix),
            LossSpec::Margin { rho } => margin_loss(logits, label, rho),
            LossSpec::MarginMix { mix, rho } => margin_mix_loss(logits, label, teacher()?, mix, rho),
        }
    }
}

/// Mean loss over the batch and the gradient of that mean with respect to every logit.
pub fn batch_loss(
    spec: &LossSpec,
    logits: &LogitMatrix,
    labels: &[usize],
    teacher: Option<&TeacherOutputs>,
) -> Result<(f64, Matrix)> {
    batch_loss_with_probs(spec, logits, labels, teacher.map(|t| t.probs()))
}

pub(crate) fn batch_loss_with_probs(
    spec: &LossSpec,
    logits: &LogitMatrix,
    labels: &[usize],
    teacher_probs: Option<&ProbMatrix>,
) -> Result<(f64, Matrix)> {
    let n = logits.rows();
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} logit rows", labels.len())));
    }
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let teacher_probs = if spec.needs_teacher() {
        let probs = teacher_probs.ok_or_else(|| Error::invalid("distillation loss needs teacher outputs"))?;
        if probs.rows() != n || probs.num_classes() != logits.num_classes() {
            return Err(Error::shape("teacher outputs are not aligned with the batch"));
        }
        Some(probs)
    } else {
        None
    };
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grad = Matrix::zeros(n, logits.num_classes());
    for (i, &y) in labels.iter().enumerate() {
        let (v, g) = spec.sample_loss(logits.row(i), y, teacher_probs.map(|p| p.row(i)))?;
        total += v;
        for (dst, gv) in grad.row_mut(i).iter_mut().zip(g) {
            *dst = gv * scale;
        }
    }
    Ok((total * scale, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn ce_examples() {
        let (v, g) = ce_loss(&[0.3; 4], 2).unwrap();
        assert!(close(v, 4f64.ln(), 1e-15));
        assert!(close(g.iter().sum::<f64>(), 0.0, 1e-15));

        let (v, g) = ce_loss(&[10.0, -10.0], 0).unwrap();
        let expected = (-20f64).exp().ln_1p();
        assert!(close(v, expected, 1e-20));
        assert!((v - 2.06e-9).abs() < 1e-11);
        assert!((g[0] + 2.06e-9).abs() < 1e-11 && (g[1] - 2.06e-9).abs() < 1e-11);

        assert!(ce_loss(&[0.0, 1.0], 2).is_err());
        assert!(ce_loss(&[f64::NAN, 1.0], 0).is_err());
    }

    #[test]
    fn distill_examples() {
        let f = [1.0, 0.0];
        let (ce0, _) = ce_loss(&f, 0).unwrap();
        let (ce1, _) = ce_loss(&f, 1).unwrap();
        let (v, _) = distill_loss(&f, 0, &[0.6, 0.4], 0.5).unwrap();
        assert!(close(v, 0.5 * ce0 + 0.5 * (0.6 * ce0 + 0.4 * ce1), 1e-15));

        assert_eq!(distill_loss(&f, 1, &[0.6, 0.4], 0.0).unwrap().0, ce1);
        let (v1, g1) = distill_loss(&f, 1, &[0.0, 1.0], 1.0).unwrap();
        let (v2, g2) = ce_loss(&f, 1).unwrap();
        assert!(close(v1, v2, 1e-15));
        assert!(g1.iter().zip(&g2).all(|(a, b)| close(*a, *b, 1e-15)));

        assert!(distill_loss(&f, 0, &[0.6, 0.5], 0.5).is_err());
        assert!(distill_loss(&f, 0, &[0.6, 0.4], 1.5).is_err());
    }

    #[test]
    fn adamix_examples() {
        let mix = MixWeights::new(vec![0.0, 1.0]).unwrap();
        let teacher = [0.3, 0.7];
        let f0 = [0.5, -0.2];
        let f1 = [-1.0, 2.0];
        let (a0, _) = adamix_loss(&f0, 0, &teacher, &mix).unwrap();
        let (a1, _) = adamix_loss(&f1, 1, &teacher, &mix).unwrap();
        let expected = ce_loss(&f0, 0).unwrap().0 + distill_loss(&f1, 1, &teacher, 1.0).unwrap().0;
        assert!(close(a0 + a1, expected, 1e-15));
        assert!(MixWeights::new(vec![0.2, -0.1]).is_err());
    }

    #[test]
    fn margin_examples() {
        let (v, _) = margin_loss(&[0.0, 0.0], 0, &MarginMatrix::new(vec![vec![1.0, 2.0], vec![1.0, 1.0]]).unwrap()).unwrap();
        assert!(close(v, 3f64.ln(), 1e-15));

        let m = 0.7f64;
        let rho = MarginMatrix::new(vec![vec![1.0, m.exp()], vec![1.0, 1.0]]).unwrap();
        let f = [0.4, 1.3];
        let (v, _) = margin_loss(&f, 0, &rho).unwrap();
        assert!(close(v, (f[1] - f[0] + m).exp().ln_1p(), 1e-14));

        let f = [0.2, -1.0, 3.0];
        let (mv, mg) = margin_loss(&f, 1, &MarginMatrix::ones(3)).unwrap();
        let (cv, cg) = ce_loss(&f, 1).unwrap();
        assert!(close(mv, cv, 1e-12));
        assert!(mg.iter().zip(&cg).all(|(a, b)| close(*a, *b, 1e-12)));

        assert!(MarginMatrix::new(vec![vec![1.0, 0.0], vec![1.0, 1.0]]).is_err());
    }

    #[test]
    fn margin_loss_is_stable_for_large_gaps() {
        let rho = MarginMatrix::new(vec![vec![1.0, 20.0], vec![0.05, 1.0]]).unwrap();
        let (v, g) = margin_loss(&[-500.0, 500.0], 0, &rho).unwrap();
        assert!(close(v, 1000.0 + 20f64.ln(), 1e-9));
        assert!(close(g[1], 1.0, 1e-12) && close(g[0], -1.0, 1e-12));
        let (v, _) = margin_loss(&[500.0, -500.0], 0, &rho).unwrap();
        assert!((0.0..1e-300).contains(&v));
    }

    #[test]
    fn batch_loss_cases() {
        let logits = LogitMatrix::new(Matrix::from_rows(&[[0.2, 1.0, -0.5]]).unwrap()).unwrap();
        let (v, g) = batch_loss(&LossSpec::OneHot, &logits, &[2], None).unwrap();
        let (sv, sg) = ce_loss(logits.row(0), 2).unwrap();
        assert_eq!(v, sv);
        assert_eq!(g.row(0), sg.as_slice());

        let dup = LogitMatrix::new(Matrix::from_rows(&[[0.2, 1.0, -0.5], [0.2, 1.0, -0.5]]).unwrap()).unwrap();
        let (dv, _) = batch_loss(&LossSpec::OneHot, &dup, &[2, 2], None).unwrap();
        assert!(close(dv, sv, 1e-15));

        let err = batch_loss(&LossSpec::Distill { alpha: 0.5 }, &logits, &[2], None).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }
}
