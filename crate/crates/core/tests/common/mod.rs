#![allow(dead_code)]

use pulsestress_core::features::N_FEATURES;
use pulsestress_core::ingest::Task;
use pulsestress_core::nn::{ModelInput, Real, Tensor, Variant};
use pulsestress_core::pipeline::{prepare_subject, PreparedSubject, PreprocessConfig};
use pulsestress_core::synth::{default_schedule, synth_subject};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEG: usize = 3840;

/// Standard-normal-ish segments and features.
pub fn random_input<T: Real>(variant: Variant, batch: usize, seed: u64) -> ModelInput<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = || -> f64 { (0..12).map(|_| rng.random::<f64>()).sum::<f64>() - 6.0 };
    let segments = (0..batch * SEG).map(|_| T::lit(gauss())).collect();
    let features = variant.uses_features().then(|| {
        (0..batch * N_FEATURES)
            .map(|_| T::lit(gauss()))
            .collect::<Vec<_>>()
    });
    ModelInput {
        segments: Tensor::from_vec(&[batch, SEG, 1], segments).unwrap(),
        features: features.map(|f| Tensor::from_vec(&[batch, N_FEATURES], f).unwrap()),
    }
}

pub fn synthetic_subjects(n: usize, scale: f64, task: Task, seed: u64) -> Vec<PreparedSubject> {
    let config = PreprocessConfig::new(task);
    (0..n)
        .map(|i| {
            let rec = synth_subject(
                &format!("S{}", i + 2),
                &default_schedule(scale),
                seed.wrapping_add(i as u64 * 101),
            );
            prepare_subject(&rec, &config).unwrap()
        })
        .collect()
}
