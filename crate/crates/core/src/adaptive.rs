//! Per-class quantities estimated from a teacher's behaviour on held-out data:
//! average margins, mixing weights, the margin matrix and class temperatures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{MarginMatrix, MixWeights, TeacherOutputs};

/// Classes with fewer holdout samples than this trigger a warning.
pub const SMALL_CLASS_WARNING: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaVector {
    gamma: Vec<f64>,
}

impl GammaVector {
    pub fn new(gamma: Vec<f64>) -> Result<Self> {
        if let Some(g) = gamma.iter().find(|g| !(-1.0..=1.0).contains(*g)) {
            return Err(Error::invalid(format!("average margin {g} outside [-1, 1]")));
        }
        Ok(Self { gamma })
    }

    pub fn values(&self) -> &[f64] {
        &self.gamma
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureVector {
    temps: Vec<f64>,
    base: f64,
}

impl TemperatureVector {
    pub fn temps(&self) -> &[f64] {
        &self.temps
    }

    pub fn base(&self) -> f64 {
        self.base
    }
}

fn class_members(labels: &[usize], num_classes: usize, min_class_count: usize) -> Result<Vec<Vec<usize>>> {
    let mut members = vec![Vec::new(); num_classes];
    for (n, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::invalid(format!("label {y} out of range for {num_classes} classes")));
        }
        members[y].push(n);
    }
    for (class, m) in members.iter().enumerate() {
        if m.is_empty() || m.len() < min_class_count {
            return Err(Error::EmptyClass {
                class,
                context: format!(" (need {} for per-class estimation, have {})", min_class_count.max(1), m.len()),
            });
        }
        if m.len() < SMALL_CLASS_WARNING {
            log::warn!("class {class} has only {} samples; its adaptive estimates are noisy", m.len());
        }
    }
    Ok(members)
}

fn check_aligned(teacher: &TeacherOutputs, labels: &[usize]) -> Result<usize> {
    if teacher.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} teacher rows for {} labels",
            teacher.len(),
            labels.len()
        )));
    }
    let l = teacher.num_classes();
    if l < 2 {
        return Err(Error::invalid("per-class margins need at least two classes"));
    }
    Ok(l)
}

/// Mean over samples of class `y` of `p_y - (1/(L-1)) sum_{y' != y} p_y'`,
/// accumulated term by term.
pub fn avg_margin_per_class(teacher: &TeacherOutputs, labels: &[usize]) -> Result<GammaVector> {
    avg_margin_with_min_count(teacher, labels, 1)
}

pub fn avg_margin_with_min_count(
    teacher: &TeacherOutputs,
    labels: &[usize],
    min_class_count: usize,
) -> Result<GammaVector> {
    let l = check_aligned(teacher, labels)?;
    let members = class_members(labels, l, min_class_count)?;
    let probs = teacher.probs();
    let gamma = members
        .iter()
        .enumerate()
        .map(|(y, idx)| {
            let total: f64 = idx
                .iter()
                .map(|&n| {
                    let row = probs.row(n);
                    let others: f64 = row.iter().enumerate().filter(|&(j, _)| j != y).map(|(_, p)| p).sum();
                    row[y] - others / (l - 1) as f64
                })
                .sum();
            (total / idx.len() as f64).clamp(-1.0, 1.0)
        })
        .collect();
    GammaVector::new(gamma)
}

/// Closed form of the average margin from the mean true-class probability:
/// `(L * p_bar - 1) / (L - 1)`.
pub fn avg_margin_from_true_class_mean(mean_true_prob: f64, num_classes: usize) -> f64 {
    let l = num_classes as f64;
    (l * mean_true_prob - 1.0) / (l - 1.0)
}

/// `alpha_y = max(0, gamma_y)`.
pub fn mix_weights(gamma: &GammaVector) -> MixWeights {
    MixWeights::new(gamma.gamma.iter().map(|&g| g.clamp(0.0, 1.0)).collect())
        .expect("clamped weights are in [0, 1]")
}

/// `rho[y][y'] = (alpha_y' + eps) / (alpha_y + eps)`, diagonal 1.
pub fn rho_matrix(mix: &MixWeights, epsilon: f64) -> Result<MarginMatrix> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::invalid(format!("epsilon must be finite and >= 0, got {epsilon}")));
    }
    let a = mix.alpha();
    let rho = (0..a.len())
        .map(|y| {
            (0..a.len())
                .map(|yp| if y == yp { 1.0 } else { (a[yp] + epsilon) / (a[y] + epsilon) })
                .collect()
        })
        .collect::<Vec<Vec<f64>>>();
    MarginMatrix::new(rho).map_err(|_| {
        Error::invalid("margin matrix is undefined: a zero mixing weight needs epsilon > 0")
    })
}

/// Raw per-class spread `E_{x|y}[f_y^2 - (1/(L-1)) sum_{y' != y} f_y'^2]` of the teacher logits.
pub fn logit_spread_per_class(teacher: &TeacherOutputs, labels: &[usize]) -> Result<Vec<f64>> {
    let l = check_aligned(teacher, labels)?;
    let members = class_members(labels, l, 1)?;
    let logits = teacher.logits();
    Ok(members
        .iter()
        .enumerate()
        .map(|(y, idx)| {
            let total: f64 = idx
                .iter()
                .map(|&n| {
                    let row = logits.row(n);
                    let others: f64 = row.iter().enumerate().filter(|&(j, _)| j != y).map(|(_, f)| f * f).sum();
                    row[y] * row[y] - others / (l - 1) as f64
                })
                .sum();
            total / idx.len() as f64
        })
        .collect())
}

/// `T_y = sqrt(max(v_y, floor^2))`, rescaled so the mean temperature is `base`.
pub fn temperatures_from_spread(spread: &[f64], base: f64, floor: f64) -> Result<TemperatureVector> {
    if !(base > 0.0) || !base.is_finite() || !(floor > 0.0) || !floor.is_finite() {
        return Err(Error::invalid(format!("base ({base}) and floor ({floor}) must be positive")));
    }
    if spread.is_empty() {
        return Err(Error::invalid("no classes to assign temperatures to"));
    }
    let raw: Vec<f64> = spread.iter().map(|&v| v.max(floor * floor).sqrt()).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let temps = raw.iter().map(|t| t * base / mean).collect();
    Ok(TemperatureVector { temps, base })
}

pub fn per_class_temperatures(
    teacher: &TeacherOutputs,
    labels: &[usize],
    base: f64,
    floor: f64,
) -> Result<TemperatureVector> {
    temperatures_from_spread(&logit_spread_per_class(teacher, labels)?, base, floor)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveConfig {
    pub rho_epsilon: f64,
    pub base_temperature: f64,
    pub temperature_floor: f64,
    pub min_class_count: usize,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            rho_epsilon: 0.05,
            base_temperature: 1.0,
            temperature_floor: 0.25,
            min_class_count: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub holdout_size: usize,
    pub teacher_checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveParams {
    pub gamma: GammaVector,
    pub mix: MixWeights,
    pub rho: MarginMatrix,
    pub temps: TemperatureVector,
    pub provenance: Provenance,
}

impl AdaptiveParams {
    pub fn to_text(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("adaptive params serialize");
        text.push('\n');
        text
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Fits every adaptive quantity from one teacher pass over the holdout set.
pub fn fit_adaptive(
    teacher: &TeacherOutputs,
    labels: &[usize],
    config: &AdaptiveConfig,
    teacher_checkpoint: Option<String>,
) -> Result<AdaptiveParams> {
    let gamma = avg_margin_with_min_count(teacher, labels, config.min_class_count)?;
    let mix = mix_weights(&gamma);
    let rho = rho_matrix(&mix, config.rho_epsilon)?;
    let temps = per_class_temperatures(teacher, labels, config.base_temperature, config.temperature_floor)?;
    Ok(AdaptiveParams {
        gamma,
        mix,
        rho,
        temps,
        provenance: Provenance {
            holdout_size: labels.len(),
            teacher_checkpoint,
        },
    })
}
