//! Central finite-difference checks of end-to-end parameter gradients.

use rand::Rng;
use subgroup_kd::adaptive::rho_matrix;
use subgroup_kd::losses::{batch_loss, LossSpec, MixWeights, TeacherOutputs};
use subgroup_kd::model::{LogitMatrix, MlpModel};
use subgroup_kd::Matrix;

use super::{random_distribution, random_labels, rng};

pub const DIMS: [usize; 4] = [4, 16, 16, 5];
pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
const BATCH: usize = 6;

pub struct Case {
    model: MlpModel,
    features: Matrix,
    labels: Vec<usize>,
    teacher: TeacherOutputs,
}

pub fn case(seed: u64) -> Case {
    let mut r = rng(1000 + seed);
    // Jitter every parameter so no pre-activation sits exactly on the ReLU kink,
    // which zero-initialized biases produce for samples with all units inactive.
    let mut model = MlpModel::init(&DIMS, seed).unwrap();
    let jittered: Vec<f64> = model.flat_params().iter().map(|p| p + r.random_range(-0.1..0.1)).collect();
    model.set_flat_params(&jittered).unwrap();
    let features = Matrix::from_vec(BATCH, DIMS[0], (0..BATCH * DIMS[0]).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
    let labels = random_labels(&mut r, BATCH, DIMS[3]);
    let rows: Vec<Vec<f64>> = (0..BATCH).map(|_| random_distribution(&mut r, DIMS[3]).iter().map(|p| p.ln()).collect()).collect();
    let teacher = TeacherOutputs::from_logits(LogitMatrix::new(Matrix::from_rows(&rows).unwrap()).unwrap(), 1.5).unwrap();
    Case {
        model,
        features,
        labels,
        teacher,
    }
}

pub fn specs(seed: u64) -> Vec<(&'static str, LossSpec)> {
    let mut r = rng(2000 + seed);
    let alpha: Vec<f64> = (0..DIMS[3]).map(|_| r.random_range(0.0..1.0)).collect();
    let mix = MixWeights::new(alpha).unwrap();
    let rho = rho_matrix(&mix, 0.05).unwrap();
    vec![
        ("ce", LossSpec::OneHot),
        ("distill", LossSpec::Distill { alpha: r.random_range(0.0..1.0) }),
        ("adamix", LossSpec::AdaMix { mix: mix.clone() }),
        ("margin", LossSpec::Margin { rho: rho.clone() }),
        ("margin_mix", LossSpec::MarginMix { mix, rho }),
    ]
}

fn loss_at(c: &Case, spec: &LossSpec, params: &[f64]) -> f64 {
    let mut m = c.model.clone();
    m.set_flat_params(params).unwrap();
    let logits = m.forward_logits(&c.features).unwrap();
    batch_loss(spec, &logits, &c.labels, Some(&c.teacher)).unwrap().0
}

/// Largest elementwise relative error between backprop and central differences.
/// Entries where both magnitudes are below the step size are compared absolutely.
pub fn max_relative_error(c: &Case, spec: &LossSpec) -> f64 {
    let logits = c.model.forward_logits(&c.features).unwrap();
    let (_, upstream) = batch_loss(spec, &logits, &c.labels, Some(&c.teacher)).unwrap();
    let analytic = c.model.backward(&c.features, &upstream).unwrap().flatten();
    let base = c.model.flat_params();
    let mut worst: f64 = 0.0;
    for (i, &g) in analytic.iter().enumerate() {
        let mut p = base.clone();
        p[i] = base[i] + STEP;
        let up = loss_at(c, spec, &p);
        p[i] = base[i] - STEP;
        let down = loss_at(c, spec, &p);
        let fd = (up - down) / (2.0 * STEP);
        let scale = g.abs().max(fd.abs()).max(STEP);
        worst = worst.max((g - fd).abs() / scale);
    }
    worst
}
