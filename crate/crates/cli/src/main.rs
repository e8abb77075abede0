//! Command-line front end: the three-phase pipeline, its individual phases,
//! synthetic data generation and strength export.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kgvem::checkpoint::{save_checkpoint, Checkpoint};
use kgvem::config::{RunConfig, KEYS};
use kgvem::data::{synth_generate, Dataset, HeadRelDistribution};
use kgvem::eval::rank_dump;
use kgvem::export::{export_lambdas, placeholder_names, write_lambda_csv, LambdaRow};
use kgvem::model::{Hyperparameters, Norm};
use kgvem::pipeline::{
    self, checkpoint_ranks, files, load_matching_checkpoint, prepare, write_text, InPhase, OutputLock,
    Phase, PhaseError,
};
use kgvem::var_em::run_em;
use kgvem::{Error, Execution};

const OVERRIDE_HELP: &str = "Any config key may also be given as a flag, e.g. `--lambda 0.01` or `--em-steps=500`.";

#[derive(Parser, Debug)]
#[command(name = "kgvem", version, about = "Knowledge graph embeddings with regularizer strengths tuned by variational EM", after_help = OVERRIDE_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Shared {
    /// `key = value` configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Input checkpoint (defaults to the previous phase's output in the output directory)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Disable data-parallel evaluation
    #[arg(long)]
    sequential: bool,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Split {
    Valid,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the vocabulary and report dataset statistics
    Preprocess(Shared),
    /// MAP training with frequency-proportional strengths
    Pretrain(Shared),
    /// Variational EM starting from a pre-trained checkpoint
    Em(Shared),
    /// MAP training from scratch with the strengths stored in a checkpoint
    Retrain(Shared),
    /// Filtered MRR and Hits@k of a checkpoint
    Eval {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Also write `h, r, t, rank` per query to this file
        #[arg(long)]
        ranks: Option<PathBuf>,
    },
    /// pretrain, em, retrain and eval in one go
    Pipeline(Shared),
    /// Write a synthetic dataset drawn from the generative model
    Synth {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, default_value_t = 100)]
        entities: usize,
        #[arg(long, default_value_t = 4)]
        relations: usize,
        #[arg(long, default_value_t = 20_000)]
        facts: usize,
        /// Heads follow a power law with this exponent instead of being uniform
        #[arg(long)]
        zipf: Option<f64>,
        /// Strength of the second half of the entities, relative to `lambda`
        #[arg(long, default_value_t = 1.0)]
        lambda_ratio: f64,
    },
    /// Write strengths next to training frequencies as CSV
    ExportLambdas(Shared),
}

impl Command {
    fn shared(&self) -> &Shared {
        match self {
            Command::Preprocess(s)
            | Command::Pretrain(s)
            | Command::Em(s)
            | Command::Retrain(s)
            | Command::Pipeline(s)
            | Command::ExportLambdas(s) => s,
            Command::Eval { shared, .. } | Command::Synth { shared, .. } => shared,
        }
    }
}

type Overrides = Vec<(String, String)>;

/// Pulls `--<config key> value` and `--<config key>=value` pairs out of the
/// argument list; `--seed` and `--out-dir` are left for clap.
fn split_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, Overrides), String> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.to_str().and_then(|s| s.strip_prefix("--")) else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_owned())),
            None => (flag, None),
        };
        let key = name.replace('-', "_");
        if !KEYS.contains(&key.as_str()) || key == "seed" || key == "out_dir" {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .and_then(|v| v.into_string().ok())
                .ok_or_else(|| format!("--{name} needs a value"))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn load_config(shared: &Shared, overrides: &[(String, String)]) -> kgvem::Result<RunConfig> {
    let mut cfg = match &shared.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    if let Some(seed) = shared.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(dir) = &shared.out_dir {
        cfg.out_dir.clone_from(dir);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn input_checkpoint(shared: &Shared, cfg: &RunConfig, default: &str) -> PathBuf {
    shared.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join(default))
}

fn vocab_ref(cfg: &RunConfig) -> String {
    cfg.out_dir.join(files::ENTITIES).display().to_string()
}

type Outcome = Result<(), PhaseError>;

fn preprocess(cfg: &RunConfig) -> Outcome {
    let (ds, vocab) = prepare(cfg).in_phase(Phase::Preprocess)?;
    let stats = format!(
        "entities\t{}\nrelations\t{}\ntrain\t{}\nvalid\t{}\ntest\t{}\nfilter_pairs\t{}\n",
        vocab.num_entities(),
        vocab.num_relations(),
        Dataset::raw(&ds.train).len(),
        Dataset::raw(&ds.valid).len(),
        Dataset::raw(&ds.test).len(),
        ds.filter_index().len()
    );
    print!("{stats}");
    write_text(&cfg.out_dir.join("dataset_stats.txt"), &stats).in_phase(Phase::Preprocess)
}

fn pretrain(cfg: &RunConfig, exec: Execution) -> Outcome {
    let (ds, _) = prepare(cfg).in_phase(Phase::Preprocess)?;
    let (lambda, outcome) = pipeline::pretrain(&ds, cfg, exec).in_phase(Phase::Pretrain)?;
    write_text(&cfg.out_dir.join(files::PRETRAIN_LOG), &outcome.log_text()).in_phase(Phase::Pretrain)?;
    let ckpt = Checkpoint::map(outcome.params, lambda).with_vocab(vocab_ref(cfg));
    save_checkpoint(&ckpt, cfg.out_dir.join(files::PRETRAIN_CKPT)).in_phase(Phase::Pretrain)
}

fn em(shared: &Shared, cfg: &RunConfig, exec: Execution) -> Outcome {
    let (ds, vocab) = prepare(cfg).in_phase(Phase::Preprocess)?;
    let path = input_checkpoint(shared, cfg, files::PRETRAIN_CKPT);
    let start = load_matching_checkpoint(&path, &ds).in_phase(Phase::Em)?;
    if start.lambda.norm != cfg.norm {
        return Err(Error::InvalidArgument(format!("{} was trained with p = {}", path.display(), start.lambda.norm.order())))
            .in_phase(Phase::Em);
    }
    let out = run_em(&start.mean, &ds, &start.lambda, &cfg.em, exec).in_phase(Phase::Em)?;
    let ckpt = Checkpoint::variational(out.var.clone(), out.lambda.clone()).with_vocab(vocab_ref(cfg));
    save_checkpoint(&ckpt, cfg.out_dir.join(files::EM_CKPT)).in_phase(Phase::Em)?;
    write_text(&cfg.out_dir.join(files::EM_LOG), &out.log_text()).in_phase(Phase::Em)?;
    export_lambdas(&out.lambda, &ds.frequencies(), Some(&vocab), &cfg.out_dir)
        .map(drop)
        .in_phase(Phase::Export)
}

fn retrain(shared: &Shared, cfg: &RunConfig, exec: Execution) -> Outcome {
    let (ds, _) = prepare(cfg).in_phase(Phase::Preprocess)?;
    let tuned = load_matching_checkpoint(&input_checkpoint(shared, cfg, files::EM_CKPT), &ds).in_phase(Phase::Retrain)?;
    let outcome = pipeline::retrain(&ds, &tuned.lambda, cfg, exec).in_phase(Phase::Retrain)?;
    write_text(&cfg.out_dir.join(files::RETRAIN_LOG), &outcome.log_text()).in_phase(Phase::Retrain)?;
    let ckpt = Checkpoint::map(outcome.params, tuned.lambda).with_vocab(vocab_ref(cfg));
    save_checkpoint(&ckpt, cfg.out_dir.join(files::RETRAIN_CKPT)).in_phase(Phase::Retrain)
}

fn eval(shared: &Shared, cfg: &RunConfig, split: Split, ranks: Option<&Path>, exec: Execution) -> Outcome {
    let (ds, _) = prepare(cfg).in_phase(Phase::Preprocess)?;
    let ckpt = load_matching_checkpoint(&input_checkpoint(shared, cfg, files::RETRAIN_CKPT), &ds).in_phase(Phase::Eval)?;
    let queries = match split {
        Split::Valid => &ds.valid,
        Split::Test => &ds.test,
    };
    let r = checkpoint_ranks(&ckpt, &ds, queries, cfg, exec).in_phase(Phase::Eval)?;
    let report = kgvem::eval::EvalReport::from_ranks(&r, &cfg.ks).in_phase(Phase::Eval)?;
    print!("{}", report.to_text());
    write_text(&cfg.out_dir.join(files::REPORT), &report.to_text()).in_phase(Phase::Eval)?;
    if let Some(path) = ranks {
        write_text(path, &rank_dump(queries, &r)).in_phase(Phase::Eval)?;
    }
    Ok(())
}

fn export(shared: &Shared, cfg: &RunConfig) -> Outcome {
    let (ds, vocab) = prepare(cfg).in_phase(Phase::Preprocess)?;
    let ckpt = load_matching_checkpoint(&input_checkpoint(shared, cfg, files::EM_CKPT), &ds).in_phase(Phase::Export)?;
    let fit = export_lambdas(&ckpt.lambda, &ds.frequencies(), Some(&vocab), &cfg.out_dir).in_phase(Phase::Export)?;
    println!("entity_fit\t{}", fit.entity.unwrap_or(f64::NAN));
    println!("relation_fit\t{}", fit.relation.unwrap_or(f64::NAN));
    Ok(())
}

fn synth(cfg: &RunConfig, entities: usize, relations: usize, facts: usize, zipf: Option<f64>, ratio: f64) -> Outcome {
    let build = || -> kgvem::Result<()> {
        let space = cfg.space()?;
        let half = entities / 2;
        let entity_lambda = (0..entities)
            .map(|e| if e < half { cfg.lambda } else { cfg.lambda * ratio })
            .collect();
        let hyper = Hyperparameters::new(entity_lambda, vec![cfg.lambda; 2 * relations], Norm::L2)?;
        let hr = match zipf {
            Some(s) => HeadRelDistribution::zipf(entities, relations, s)?,
            None => HeadRelDistribution::uniform(entities, relations)?,
        };
        let data = synth_generate(space, &hyper, &hr, facts, cfg.seed)?;
        std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
        let paths = data.write_tsv(&cfg.out_dir)?;
        let freq = data.dataset.frequencies();
        let rows: Vec<LambdaRow> = placeholder_names("e", entities)
            .into_iter()
            .zip(&freq.entity)
            .zip(&hyper.entity)
            .map(|((name, &frequency), &lambda)| LambdaRow { name, frequency, lambda })
            .collect();
        write_lambda_csv(&cfg.out_dir.join("planted_entity_lambdas.csv"), "entity", &rows)?;
        save_checkpoint(&Checkpoint::map(data.truth, hyper), cfg.out_dir.join("truth.ckpt"))?;
        for p in paths {
            println!("{}", p.display());
        }
        Ok(())
    };
    build().in_phase(Phase::Startup)
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Outcome {
    let shared = cli.command.shared();
    let cfg = load_config(shared, overrides).in_phase(Phase::Startup)?;
    let exec = if shared.sequential { Execution::Sequential } else { Execution::default() };
    if let Command::Pipeline(_) = cli.command {
        let (_, report) = pipeline::run_pipeline(&cfg, exec)?;
        print!("{}", report.to_text());
        return Ok(());
    }
    if !matches!(cli.command, Command::Synth { .. }) {
        cfg.dataset_paths().in_phase(Phase::Startup)?;
    }
    let _lock = OutputLock::acquire(&cfg.out_dir).in_phase(Phase::Startup)?;
    match &cli.command {
        Command::Preprocess(_) => preprocess(&cfg),
        Command::Pretrain(_) => pretrain(&cfg, exec),
        Command::Em(s) => em(s, &cfg, exec),
        Command::Retrain(s) => retrain(s, &cfg, exec),
        Command::Eval { shared, split, ranks } => eval(shared, &cfg, *split, ranks.as_deref(), exec),
        Command::ExportLambdas(s) => export(s, &cfg),
        Command::Synth { entities, relations, facts, zipf, lambda_ratio, .. } => {
            synth(&cfg, *entities, *relations, *facts, *zipf, *lambda_ratio)
        }
        Command::Pipeline(_) => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args_os().collect()) {
        Ok(x) => x,
        Err(msg) => {
            eprintln!("kgvem: startup phase failed: {msg}");
            return ExitCode::FAILURE;
        }
    };
    let cli = Cli::parse_from(args);
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kgvem: {e}");
            ExitCode::FAILURE
        }
    }
}
