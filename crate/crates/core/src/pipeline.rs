//! The three-phase protocol: MAP pre-training with frequency-proportional
//! strengths, variational EM over the strengths, MAP re-training from a fresh
//! initialization with the tuned strengths, then test evaluation.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::data::{Dataset, Triple, Vocab};
use crate::error::{Error, Result};
use crate::eval::{evaluate_with, query_ranks, EvalReport, PosteriorSamples};
use crate::exec::Execution;
use crate::export::export_lambdas;
use crate::model::Hyperparameters;
use crate::trainer::{conventional_lambda, train_map, TrainOutcome};
use crate::var_em::{run_em, EmOutcome};

/// File names written into the output directory.
pub mod files {
    pub const LOCK: &str = ".lock";
    pub const CONFIG: &str = "config.txt";
    pub const ENTITIES: &str = "entities.tsv";
    pub const RELATIONS: &str = "relations.tsv";
    pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
    pub const PRETRAIN_LOG: &str = "pretrain_log.tsv";
    pub const EM_CKPT: &str = "em.ckpt";
    pub const EM_LOG: &str = "em_log.tsv";
    pub const RETRAIN_CKPT: &str = "retrain.ckpt";
    pub const RETRAIN_LOG: &str = "retrain_log.tsv";
    pub const REPORT: &str = "report.txt";
    pub const VALID_COMPARISON: &str = "valid_comparison.txt";
}

const BAYES_STREAM: u64 = 0xBA7E5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Startup,
    Preprocess,
    Pretrain,
    Em,
    Retrain,
    Eval,
    Export,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Startup => "startup",
            Phase::Preprocess => "preprocess",
            Phase::Pretrain => "pretrain",
            Phase::Em => "em",
            Phase::Retrain => "retrain",
            Phase::Eval => "eval",
            Phase::Export => "export-lambdas",
        })
    }
}

/// An error tagged with the phase it aborted.
#[derive(Debug, thiserror::Error)]
#[error("{phase} phase failed: {error}")]
pub struct PhaseError {
    pub phase: Phase,
    pub error: Error,
}

pub trait InPhase<T> {
    fn in_phase(self, phase: Phase) -> std::result::Result<T, PhaseError>;
}

impl<T> InPhase<T> for Result<T> {
    fn in_phase(self, phase: Phase) -> std::result::Result<T, PhaseError> {
        self.map_err(|error| PhaseError { phase, error })
    }
}

/// Frequency-proportional strengths followed by MAP training.
pub fn pretrain(dataset: &Dataset, cfg: &RunConfig, exec: Execution) -> Result<(Hyperparameters, TrainOutcome)> {
    let lambda = conventional_lambda(&dataset.frequencies(), cfg.lambda, cfg.norm, cfg.lambda_floor)?;
    let outcome = train_map(dataset, &lambda, cfg.space()?, &cfg.train, exec)?;
    Ok((lambda, outcome))
}

/// MAP training from a fresh initialization with the given strengths.
pub fn retrain(dataset: &Dataset, lambda: &Hyperparameters, cfg: &RunConfig, exec: Execution) -> Result<TrainOutcome> {
    train_map(dataset, lambda, cfg.space()?, &cfg.train, exec)
}

/// Filtered ranks of `queries` under a checkpoint. Variational checkpoints
/// use posterior-sample averaging when `bayes_samples > 0`.
pub fn checkpoint_ranks(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    queries: &[Triple],
    cfg: &RunConfig,
    exec: Execution,
) -> Result<Vec<usize>> {
    let filter = dataset.filter_index();
    match ckpt.variational_params() {
        Some(var) if cfg.bayes_samples > 0 => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(BAYES_STREAM);
            let posterior = PosteriorSamples::draw(&var, cfg.bayes_samples, &mut rng)?;
            query_ranks(&posterior, queries, &filter, exec)
        }
        _ => query_ranks(&ckpt.mean, queries, &filter, exec),
    }
}

/// [`checkpoint_ranks`] summarized into MRR and Hits@k.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    queries: &[Triple],
    cfg: &RunConfig,
    exec: Execution,
) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty query set".into()));
    }
    EvalReport::from_ranks(&checkpoint_ranks(ckpt, dataset, queries, cfg, exec)?, &cfg.ks)
}

/// Everything the three phases produce, kept in memory.
#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub initial_lambda: Hyperparameters,
    pub pretrained: TrainOutcome,
    pub em: EmOutcome,
    pub retrained: TrainOutcome,
    pub pretrained_valid: EvalReport,
    pub retrained_valid: EvalReport,
    pub test: EvalReport,
}

impl PipelineOutcome {
    pub fn final_checkpoint(&self) -> Checkpoint {
        Checkpoint::map(self.retrained.params.clone(), self.em.lambda.clone())
    }
}

fn valid_report(params: &crate::model::Parameters, dataset: &Dataset, cfg: &RunConfig, exec: Execution) -> Result<EvalReport> {
    evaluate_with(params, &dataset.valid, &dataset.filter_index(), &cfg.ks, exec)
}

/// Runs all phases on an in-memory dataset.
pub fn run_phases(
    dataset: &Dataset,
    cfg: &RunConfig,
    exec: Execution,
) -> std::result::Result<PipelineOutcome, PhaseError> {
    cfg.validate().in_phase(Phase::Startup)?;
    let (initial_lambda, pretrained) = pretrain(dataset, cfg, exec).in_phase(Phase::Pretrain)?;
    let em = run_em(&pretrained.params, dataset, &initial_lambda, &cfg.em, exec).in_phase(Phase::Em)?;
    let retrained = retrain(dataset, &em.lambda, cfg, exec).in_phase(Phase::Retrain)?;
    let pretrained_valid = valid_report(&pretrained.params, dataset, cfg, exec).in_phase(Phase::Eval)?;
    let retrained_valid = valid_report(&retrained.params, dataset, cfg, exec).in_phase(Phase::Eval)?;
    let test = evaluate_with(&retrained.params, &dataset.test, &dataset.filter_index(), &cfg.ks, exec)
        .in_phase(Phase::Eval)?;
    Ok(PipelineOutcome {
        initial_lambda,
        pretrained,
        em,
        retrained,
        pretrained_valid,
        retrained_valid,
        test,
    })
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
    _file: File,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(files::LOCK);
        let file = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::InvalidArgument(format!(
                    "{} is locked by another run (remove {} if that run is gone)",
                    dir.display(),
                    path.display()
                ))
            } else {
                Error::io(&path, e)
            }
        })?;
        Ok(OutputLock { path, _file: file })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads the dataset named by the config and writes its vocabulary into `out_dir`.
pub fn prepare(cfg: &RunConfig) -> Result<(Dataset, Vocab)> {
    let [train, valid, test] = cfg.dataset_paths()?;
    let (dataset, vocab) = Dataset::load(train, valid, test)?;
    vocab.export(&cfg.out_dir.join(files::ENTITIES), &cfg.out_dir.join(files::RELATIONS))?;
    Ok((dataset, vocab))
}

fn vocab_ref(cfg: &RunConfig) -> String {
    cfg.out_dir.join(files::ENTITIES).display().to_string()
}

/// Runs every phase from files, writing a checkpoint and log after each phase
/// into `cfg.out_dir`. Completed phases stay on disk if a later one fails.
pub fn run_pipeline(cfg: &RunConfig, exec: Execution) -> std::result::Result<(Checkpoint, EvalReport), PhaseError> {
    cfg.validate().in_phase(Phase::Startup)?;
    cfg.dataset_paths().in_phase(Phase::Startup)?;
    let _lock = OutputLock::acquire(&cfg.out_dir).in_phase(Phase::Startup)?;
    write_text(&cfg.out_dir.join(files::CONFIG), &cfg.to_text()).in_phase(Phase::Startup)?;
    let out = |name: &str| cfg.out_dir.join(name);

    let (dataset, vocab) = prepare(cfg).in_phase(Phase::Preprocess)?;

    let (initial_lambda, pretrained) = pretrain(&dataset, cfg, exec).in_phase(Phase::Pretrain)?;
    let ckpt = Checkpoint::map(pretrained.params.clone(), initial_lambda.clone()).with_vocab(vocab_ref(cfg));
    save_checkpoint(&ckpt, out(files::PRETRAIN_CKPT)).in_phase(Phase::Pretrain)?;
    write_text(&out(files::PRETRAIN_LOG), &pretrained.log_text()).in_phase(Phase::Pretrain)?;

    let em = run_em(&pretrained.params, &dataset, &initial_lambda, &cfg.em, exec).in_phase(Phase::Em)?;
    let ckpt = Checkpoint::variational(em.var.clone(), em.lambda.clone()).with_vocab(vocab_ref(cfg));
    save_checkpoint(&ckpt, out(files::EM_CKPT)).in_phase(Phase::Em)?;
    write_text(&out(files::EM_LOG), &em.log_text()).in_phase(Phase::Em)?;
    export_lambdas(&em.lambda, &dataset.frequencies(), Some(&vocab), &cfg.out_dir).in_phase(Phase::Export)?;

    let retrained = retrain(&dataset, &em.lambda, cfg, exec).in_phase(Phase::Retrain)?;
    let final_ckpt = Checkpoint::map(retrained.params.clone(), em.lambda.clone()).with_vocab(vocab_ref(cfg));
    save_checkpoint(&final_ckpt, out(files::RETRAIN_CKPT)).in_phase(Phase::Retrain)?;
    write_text(&out(files::RETRAIN_LOG), &retrained.log_text()).in_phase(Phase::Retrain)?;

    let before = valid_report(&pretrained.params, &dataset, cfg, exec).in_phase(Phase::Eval)?;
    let after = valid_report(&retrained.params, &dataset, cfg, exec).in_phase(Phase::Eval)?;
    write_text(
        &out(files::VALID_COMPARISON),
        &format!("pretrained_valid_mrr\t{}\nretrained_valid_mrr\t{}\n", before.mrr, after.mrr),
    )
    .in_phase(Phase::Eval)?;
    let report = evaluate_checkpoint(&final_ckpt, &dataset, &dataset.test, cfg, exec).in_phase(Phase::Eval)?;
    write_text(&out(files::REPORT), &report.to_text()).in_phase(Phase::Eval)?;
    Ok((final_ckpt, report))
}

/// Loads a checkpoint and checks it against the dataset's dimensions.
pub fn load_matching_checkpoint(path: &Path, dataset: &Dataset) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.num_entities() != dataset.num_entities || ckpt.num_relations != dataset.num_relations {
        return Err(Error::InvalidArgument(format!(
            "{} has {} entities / {} relations, dataset has {} / {}",
            path.display(),
            ckpt.num_entities(),
            ckpt.num_relations,
            dataset.num_entities,
            dataset.num_relations
        )));
    }
    Ok(ckpt)
}
