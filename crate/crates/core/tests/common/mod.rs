#![allow(dead_code)]

use kgvem::config::RunConfig;
use kgvem::data::{synth_generate, HeadRelDistribution, SyntheticData};
use kgvem::model::{EmbeddingSpace, Hyperparameters, Norm};

/// Ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&average_ranks(a), &average_ranks(b))
}

pub const SYNTH_ENTITIES: usize = 100;
pub const SYNTH_RELATIONS: usize = 4;
pub const SYNTH_DIM: usize = 16;
pub const SYNTH_FACTS: usize = 20_000;

/// Two entity groups whose planted strengths differ by `ratio`.
pub fn two_group_lambda(ratio: f64) -> Vec<f64> {
    (0..SYNTH_ENTITIES)
        .map(|e| if e < SYNTH_ENTITIES / 2 { 1.0 } else { ratio })
        .collect()
}

pub fn two_group_data(seed: u64) -> (SyntheticData, Vec<f64>) {
    let planted = two_group_lambda(100.0);
    let hyper = Hyperparameters::new(planted.clone(), vec![1.0; 2 * SYNTH_RELATIONS], Norm::L2).unwrap();
    let hr = HeadRelDistribution::uniform(SYNTH_ENTITIES, SYNTH_RELATIONS).unwrap();
    let data = synth_generate(EmbeddingSpace::real(SYNTH_DIM), &hyper, &hr, SYNTH_FACTS, seed).unwrap();
    (data, planted)
}

pub fn zipf_data(exponent: f64, seed: u64) -> SyntheticData {
    let hyper = Hyperparameters::uniform(SYNTH_ENTITIES, 2 * SYNTH_RELATIONS, 1.0, Norm::L2);
    let hr = HeadRelDistribution::zipf(SYNTH_ENTITIES, SYNTH_RELATIONS, exponent).unwrap();
    synth_generate(EmbeddingSpace::real(SYNTH_DIM), &hyper, &hr, SYNTH_FACTS, seed).unwrap()
}

/// Desk-scale settings for the synthetic experiments.
pub fn synth_config(lambda: f64) -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("space", "real"),
        ("dim", "16"),
        ("p", "2"),
        ("max_epochs", "30"),
        ("patience", "5"),
        ("batch_size", "256"),
        ("learning_rate", "0.1"),
        ("em_estep_steps", "1000"),
        ("em_steps", "5000"),
        ("em_batch_size", "256"),
        ("lr_mu", "1e-4"),
        ("lr_xi", "1e-4"),
        ("lr_lambda", "0.1"),
        ("sigma_init", "0.2"),
        ("elbo_every", "100"),
        ("elbo_samples", "4"),
        ("seed", "7"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.lambda = lambda;
    cfg
}
