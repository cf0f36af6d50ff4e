#![allow(dead_code)]

pub mod gradcheck;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subgroup_kd::data::Dataset;
use subgroup_kd::model::{softmax, ProbMatrix};
use subgroup_kd::trainer::{EarlyStop, LrSchedule, ModelConfig, PipelineConfig, Splits, TrainConfig};
use subgroup_kd::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_logits(rng: &mut ChaCha8Rng, l: usize, scale: f64) -> Vec<f64> {
    (0..l).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn random_distribution(rng: &mut ChaCha8Rng, l: usize) -> Vec<f64> {
    softmax(&random_logits(rng, l, 3.0))
}

pub fn random_probs(rng: &mut ChaCha8Rng, n: usize, l: usize) -> ProbMatrix {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| random_distribution(rng, l)).collect();
    ProbMatrix::new(Matrix::from_rows(&rows).unwrap()).unwrap()
}

/// Labels covering every class at least once when `n >= l`.
pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, l: usize) -> Vec<usize> {
    (0..n).map(|i| if i < l { i } else { rng.random_range(0..l) }).collect()
}

/// Tiny pipeline: narrow networks and a handful of epochs.
pub fn small_pipeline() -> PipelineConfig {
    let train = TrainConfig {
        epochs: 6,
        batch_size: 16,
        learning_rate: 0.02,
        lr_schedule: LrSchedule::Cosine,
        ..TrainConfig::default()
    };
    PipelineConfig {
        teacher: ModelConfig {
            hidden: vec![8],
            train: TrainConfig {
                early_stop: Some(EarlyStop { patience: 3 }),
                ..train.clone()
            },
        },
        student: ModelConfig {
            hidden: vec![8],
            train: TrainConfig { seed: 1, ..train },
        },
        ..PipelineConfig::default()
    }
}

/// Two well separated blobs per class on a line, for quick pipeline tests.
pub fn tiny_splits(seed: u64) -> Splits {
    use subgroup_kd::sweep::{synth_splits, SynthConfig};
    let cfg = SynthConfig {
        classes: 4,
        dim: 2,
        per_class: 60,
        separation: 8.0,
        imbalance: 4.0,
        ..SynthConfig::default()
    };
    synth_splits(&cfg, seed).unwrap()
}

pub fn dataset(features: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> Dataset {
    Dataset::new(Matrix::from_rows(&features).unwrap(), labels, None, classes, None).unwrap()
}
