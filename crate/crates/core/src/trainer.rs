//! MAP training with minibatch adaptive-gradient updates and early stopping
//! on filtered validation MRR.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{minibatch_iter, Dataset, FrequencyTable, Triple};
use crate::error::{Error, Result};
use crate::eval::evaluate_with;
use crate::exec::Execution;
use crate::model::{minibatch_objective, EmbeddingSpace, Gradients, Hyperparameters, Norm, Parameters, Table};

/// Strength assigned to symbols that never occur in training.
pub const LAMBDA_FLOOR: f64 = 1e-6;

/// Standard deviation of the random embedding initialization.
pub const INIT_STD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub init_std: f64,
    /// Offset in the adaptive-gradient denominator.
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            learning_rate: 0.1,
            max_epochs: 50,
            patience: 10,
            eval_every: 1,
            seed: 0,
            init_std: INIT_STD,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_owned()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and nonnegative");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if !(self.init_std > 0.0) {
            return bad("init_std must be positive");
        }
        Ok(())
    }
}

/// Frequency-proportional strengths `lambda_e = lambda * n_e`, with `floor`
/// for symbols of zero frequency.
pub fn conventional_lambda(
    freq: &FrequencyTable,
    lambda: f64,
    norm: Norm,
    floor: f64,
) -> Result<Hyperparameters> {
    if !(lambda > 0.0) || !(floor > 0.0) {
        return Err(Error::InvalidArgument("lambda and floor must be positive".into()));
    }
    let scale = |counts: &[u64]| -> Vec<f64> {
        counts
            .iter()
            .map(|&n| if n == 0 { floor } else { lambda * n as f64 })
            .collect()
    };
    Hyperparameters::new(scale(&freq.entity), scale(&freq.relation), norm)
}

/// Per-coordinate accumulated squared gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub entities: Table,
    pub relations: Table,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(params: &Parameters, epsilon: f64) -> Self {
        let w = params.space.width();
        OptimizerState {
            entities: Table::zeros(params.num_entities(), w),
            relations: Table::zeros(params.num_relation_rows(), w),
            epsilon,
        }
    }
}

fn adagrad_rows(param: &mut Table, acc: &mut Table, grad: &Table, touched: &[bool], lr: f64, eps: f64) {
    for (i, _) in touched.iter().enumerate().filter(|(_, &t)| t) {
        let g = grad.row(i);
        let a = acc.row_mut(i);
        for (a, g) in a.iter_mut().zip(g) {
            *a += g * g;
        }
        let a = acc.row(i);
        for ((x, g), a) in param.row_mut(i).iter_mut().zip(g).zip(a) {
            *x -= lr * g / (a.sqrt() + eps);
        }
    }
}

/// One adaptive-gradient step on the minibatch loss (softmax loss plus the
/// per-occurrence regularizer share). Returns the minibatch loss evaluated
/// before the update.
pub fn sgd_step(
    params: &mut Parameters,
    opt: &mut OptimizerState,
    hyper: &Hyperparameters,
    freq: &FrequencyTable,
    batch: &[Triple],
    learning_rate: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    grads.clear();
    let loss = minibatch_objective(params, hyper, freq, batch, 1.0, grads)?;
    if !grads.is_finite() {
        return Err(Error::NonFinite { what: "gradient" });
    }
    let eps = opt.epsilon;
    adagrad_rows(
        &mut params.entities,
        &mut opt.entities,
        &grads.entities,
        &grads.entity_touched,
        learning_rate,
        eps,
    );
    adagrad_rows(
        &mut params.relations,
        &mut opt.relations,
        &grads.relations,
        &grads.relation_touched,
        learning_rate,
        eps,
    );
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_mrr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Snapshot with the best validation MRR (the initialization if never evaluated).
    pub params: Parameters,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl TrainOutcome {
    /// `epoch<TAB>train_loss<TAB>valid_mrr`, one line per evaluation.
    pub fn log_text(&self) -> String {
        let mut s = String::new();
        for r in &self.history {
            writeln!(s, "{}\t{}\t{}", r.epoch, r.train_loss, r.valid_mrr).expect("write to String");
        }
        s
    }
}

/// Trains point estimates from a random initialization, evaluating filtered
/// validation MRR every `eval_every` epochs (and after the last epoch).
pub fn train_map(
    dataset: &Dataset,
    hyper: &Hyperparameters,
    space: EmbeddingSpace,
    config: &TrainConfig,
    exec: Execution,
) -> Result<TrainOutcome> {
    let filter = dataset.filter_index();
    train_with_validator(dataset, hyper, space, config, |params| {
        Ok(evaluate_with(params, &dataset.valid, &filter, &[], exec)?.mrr)
    })
}

/// [`train_map`] with a caller-supplied validation score (higher is better).
pub fn train_with_validator<F>(
    dataset: &Dataset,
    hyper: &Hyperparameters,
    space: EmbeddingSpace,
    config: &TrainConfig,
    mut validate: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&Parameters) -> Result<f64>,
{
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = Parameters::random(
        dataset.num_entities,
        dataset.num_relation_rows(),
        space,
        config.init_std,
        &mut rng,
    );
    let freq = dataset.frequencies();
    let mut opt = OptimizerState::new(&params, config.epsilon);
    let mut grads = Gradients::for_params(&params);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Parameters)> = None;

    for epoch in 1..=config.max_epochs {
        let mut train_loss = 0.0;
        for batch in &minibatch_iter(&dataset.train, config.batch_size, config.seed, epoch as u64) {
            train_loss += sgd_step(
                &mut params,
                &mut opt,
                hyper,
                &freq,
                batch,
                config.learning_rate,
                &mut grads,
            )?;
        }
        if epoch % config.eval_every != 0 && epoch != config.max_epochs {
            continue;
        }
        let valid_mrr = validate(&params)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            valid_mrr,
        });
        match &best {
            Some((best_mrr, best_epoch, _)) if valid_mrr <= *best_mrr => {
                if epoch - best_epoch >= config.patience {
                    break;
                }
            }
            _ => best = Some((valid_mrr, epoch, params.clone())),
        }
    }

    let best_epoch = best.as_ref().map(|b| b.1);
    Ok(TrainOutcome {
        params: best.map_or(params, |b| b.2),
        history,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{count_frequencies, HeadRelDistribution, synth_generate};

    #[test]
    fn conventional_lambda_scales_counts() {
        let f = FrequencyTable {
            entity: vec![2, 2],
            relation: vec![1, 1],
        };
        let h = conventional_lambda(&f, 0.5, Norm::L2, LAMBDA_FLOOR).unwrap();
        assert_eq!(h.entity, vec![1.0, 1.0]);
        assert_eq!(h.relation, vec![0.5, 0.5]);

        let ones = FrequencyTable {
            entity: vec![1, 1, 1],
            relation: vec![1, 1],
        };
        let h = conventional_lambda(&ones, 1.0, Norm::L3, LAMBDA_FLOOR).unwrap();
        assert_eq!(h.entity, vec![1.0; 3]);

        let zero = FrequencyTable {
            entity: vec![0],
            relation: vec![],
        };
        let h = conventional_lambda(&zero, 0.1, Norm::L2, 1e-6).unwrap();
        assert_eq!(h.entity, vec![1e-6]);
    }

    fn tiny() -> Dataset {
        let hyper = Hyperparameters::uniform(8, 4, 1.0, Norm::L2);
        let hr = HeadRelDistribution::uniform(8, 2).unwrap();
        synth_generate(EmbeddingSpace::real(4), &hyper, &hr, 300, 1).unwrap().dataset
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let ds = tiny();
        let freq = ds.frequencies();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = Parameters::random(8, 4, EmbeddingSpace::real(4), 0.1, &mut rng);
        let before = params.clone();
        let mut opt = OptimizerState::new(&params, 1e-8);
        let mut g = Gradients::for_params(&params);
        let hyper = Hyperparameters::uniform(8, 4, 0.3, Norm::L2);
        sgd_step(&mut params, &mut opt, &hyper, &freq, &ds.train[..16], 0.0, &mut g).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn single_triple_update_is_sparse_in_relations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = Parameters::random(5, 4, EmbeddingSpace::complex(2), 0.5, &mut rng);
        let before = params.clone();
        let batch = [Triple::new(1, 2, 3)];
        let freq = count_frequencies(&batch, 5, 2);
        let hyper = Hyperparameters::uniform(5, 4, 0.0, Norm::L2);
        let mut opt = OptimizerState::new(&params, 1e-8);
        let mut g = Gradients::for_params(&params);
        sgd_step(&mut params, &mut opt, &hyper, &freq, &batch, 0.1, &mut g).unwrap();
        for r in [0, 1, 3] {
            assert_eq!(params.relations.row(r), before.relations.row(r));
        }
        assert_ne!(params.relations.row(2), before.relations.row(2));
        for e in 0..5 {
            assert_ne!(params.entities.row(e), before.entities.row(e), "entity {e}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny();
        let hyper = conventional_lambda(&ds.frequencies(), 0.01, Norm::L3, LAMBDA_FLOOR).unwrap();
        let cfg = TrainConfig {
            max_epochs: 2,
            patience: 2,
            batch_size: 32,
            seed: 4,
            ..TrainConfig::default()
        };
        let a = train_map(&ds, &hyper, EmbeddingSpace::real(4), &cfg, Execution::Parallel).unwrap();
        let b = train_map(&ds, &hyper, EmbeddingSpace::real(4), &cfg, Execution::Sequential).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let ds = tiny();
        let hyper = Hyperparameters::uniform(8, 4, 1.0, Norm::L2);
        let cfg = TrainConfig {
            max_epochs: 0,
            patience: 1,
            seed: 9,
            ..TrainConfig::default()
        };
        let out = train_map(&ds, &hyper, EmbeddingSpace::real(4), &cfg, Execution::default()).unwrap();
        assert!(out.history.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let init = Parameters::random(8, 4, EmbeddingSpace::real(4), INIT_STD, &mut rng);
        assert_eq!(out.params, init);
    }

    #[test]
    fn early_stopping_returns_best_snapshot() {
        let ds = tiny();
        let hyper = Hyperparameters::uniform(8, 4, 1.0, Norm::L2);
        let cfg = TrainConfig {
            max_epochs: 10,
            patience: 1,
            eval_every: 1,
            batch_size: 64,
            ..TrainConfig::default()
        };
        let mut calls = 0;
        let mut snapshots = Vec::new();
        let out = train_with_validator(&ds, &hyper, EmbeddingSpace::real(4), &cfg, |p| {
            calls += 1;
            snapshots.push(p.clone());
            Ok(1.0 / calls as f64)
        })
        .unwrap();
        assert_eq!(calls, 2);
        assert_eq!(out.best_epoch, Some(1));
        assert_eq!(out.params, snapshots[0]);
        assert_eq!(out.history.len(), 2);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let long_patience = TrainConfig {
            patience: 100,
            max_epochs: 5,
            ..TrainConfig::default()
        };
        assert!(long_patience.validate().is_ok());
    }
}
