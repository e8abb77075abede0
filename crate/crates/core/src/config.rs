//! Run configuration: line-oriented `key = value` files with `#` comments,
//! where every key can also be overridden individually.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::DEFAULT_KS;
use crate::model::{EmbeddingSpace, Norm, SpaceKind};
use crate::trainer::{TrainConfig, LAMBDA_FLOOR};
use crate::var_em::EmConfig;

/// Every key accepted by [`RunConfig::set`], in the order [`RunConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "train_path",
    "valid_path",
    "test_path",
    "out_dir",
    "space",
    "dim",
    "p",
    "lambda",
    "lambda_floor",
    "seed",
    "batch_size",
    "learning_rate",
    "max_epochs",
    "patience",
    "eval_every",
    "init_std",
    "em_estep_steps",
    "em_steps",
    "lr_mu",
    "lr_xi",
    "lr_lambda",
    "sigma_init",
    "em_batch_size",
    "lambda_hat_samples",
    "elbo_every",
    "elbo_samples",
    "ks",
    "bayes_samples",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train_path: Option<PathBuf>,
    pub valid_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub space: SpaceKind,
    pub dim: usize,
    pub norm: Norm,
    /// Scalar strength for the frequency-proportional initialization.
    pub lambda: f64,
    pub lambda_floor: f64,
    /// Shared by pre-training, re-training and EM.
    pub seed: u64,
    pub train: TrainConfig,
    pub em: EmConfig,
    pub ks: Vec<usize>,
    /// Posterior samples for Bayesian prediction at evaluation; 0 uses point estimates.
    pub bayes_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train_path: None,
            valid_path: None,
            test_path: None,
            out_dir: PathBuf::from("out"),
            space: SpaceKind::Complex,
            dim: 32,
            norm: Norm::L3,
            lambda: 0.01,
            lambda_floor: LAMBDA_FLOOR,
            seed: 0,
            train: TrainConfig::default(),
            em: EmConfig {
                seed: 0,
                ..EmConfig::default()
            },
            ks: DEFAULT_KS.to_vec(),
            bayes_samples: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("`{key}`: cannot parse `{value}`")))
}

fn existing<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    let p = path
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument(format!("`{key}` is not set")))?;
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::InvalidArgument(format!("`{key}` = {} does not exist", p.display())))
    }
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(before, _)| before).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                msg: format!("expected `key = value`, found `{line}`"),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| Error::Config {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse_str(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "train_path" => self.train_path = Some(value.into()),
            "valid_path" => self.valid_path = Some(value.into()),
            "test_path" => self.test_path = Some(value.into()),
            "out_dir" => self.out_dir = value.into(),
            "space" => self.space = value.parse()?,
            "dim" => self.dim = parse(key, value)?,
            "p" => self.norm = Norm::from_order(parse(key, value)?)?,
            "lambda" => self.lambda = parse(key, value)?,
            "lambda_floor" => self.lambda_floor = parse(key, value)?,
            "seed" => {
                self.seed = parse(key, value)?;
                self.train.seed = self.seed;
                self.em.seed = self.seed;
            }
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "learning_rate" => self.train.learning_rate = parse(key, value)?,
            "max_epochs" => self.train.max_epochs = parse(key, value)?,
            "patience" => self.train.patience = parse(key, value)?,
            "eval_every" => self.train.eval_every = parse(key, value)?,
            "init_std" => self.train.init_std = parse(key, value)?,
            "em_estep_steps" => self.em.estep_steps = parse(key, value)?,
            "em_steps" => self.em.em_steps = parse(key, value)?,
            "lr_mu" => self.em.lr_mu = parse(key, value)?,
            "lr_xi" => self.em.lr_xi = parse(key, value)?,
            "lr_lambda" => self.em.lr_lambda = parse(key, value)?,
            "sigma_init" => self.em.sigma_init = parse(key, value)?,
            "em_batch_size" => self.em.batch_size = parse(key, value)?,
            "lambda_hat_samples" => self.em.lambda_hat_samples = parse(key, value)?,
            "elbo_every" => self.em.elbo_every = parse(key, value)?,
            "elbo_samples" => self.em.elbo_samples = parse(key, value)?,
            "ks" => {
                self.ks = value
                    .split(',')
                    .map(|k| parse(key, k.trim()))
                    .collect::<Result<_>>()?;
            }
            "bayes_samples" => self.bayes_samples = parse(key, value)?,
            _ => return Err(Error::InvalidArgument(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn space(&self) -> Result<EmbeddingSpace> {
        EmbeddingSpace::new(self.space, self.dim)
    }

    pub fn validate(&self) -> Result<()> {
        self.space()?;
        if !(self.lambda > 0.0 && self.lambda.is_finite()) || !(self.lambda_floor > 0.0) {
            return Err(Error::InvalidArgument("lambda and lambda_floor must be positive".into()));
        }
        if self.ks.contains(&0) {
            return Err(Error::InvalidArgument("ks must be >= 1".into()));
        }
        self.train.validate()?;
        self.em.validate()
    }

    /// The three dataset paths; errors if any is unset or missing on disk.
    pub fn dataset_paths(&self) -> Result<[&Path; 3]> {
        Ok([
            existing(&self.train_path, "train_path")?,
            existing(&self.valid_path, "valid_path")?,
            existing(&self.test_path, "test_path")?,
        ])
    }

    /// Serializes to the same `key = value` format [`RunConfig::parse_str`] reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let ks = self.ks.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let values: Vec<(&str, Option<String>)> = vec![
            ("train_path", path(&self.train_path)),
            ("valid_path", path(&self.valid_path)),
            ("test_path", path(&self.test_path)),
            ("out_dir", Some(self.out_dir.display().to_string())),
            ("space", Some(self.space.as_str().into())),
            ("dim", Some(self.dim.to_string())),
            ("p", Some(self.norm.order().to_string())),
            ("lambda", Some(self.lambda.to_string())),
            ("lambda_floor", Some(self.lambda_floor.to_string())),
            ("seed", Some(self.seed.to_string())),
            ("batch_size", Some(self.train.batch_size.to_string())),
            ("learning_rate", Some(self.train.learning_rate.to_string())),
            ("max_epochs", Some(self.train.max_epochs.to_string())),
            ("patience", Some(self.train.patience.to_string())),
            ("eval_every", Some(self.train.eval_every.to_string())),
            ("init_std", Some(self.train.init_std.to_string())),
            ("em_estep_steps", Some(self.em.estep_steps.to_string())),
            ("em_steps", Some(self.em.em_steps.to_string())),
            ("lr_mu", Some(self.em.lr_mu.to_string())),
            ("lr_xi", Some(self.em.lr_xi.to_string())),
            ("lr_lambda", Some(self.em.lr_lambda.to_string())),
            ("sigma_init", Some(self.em.sigma_init.to_string())),
            ("em_batch_size", Some(self.em.batch_size.to_string())),
            ("lambda_hat_samples", Some(self.em.lambda_hat_samples.to_string())),
            ("elbo_every", Some(self.em.elbo_every.to_string())),
            ("elbo_samples", Some(self.em.elbo_samples.to_string())),
            ("ks", Some(ks)),
            ("bayes_samples", Some(self.bayes_samples.to_string())),
        ];
        debug_assert_eq!(values.iter().map(|v| v.0).collect::<Vec<_>>(), KEYS);
        for (k, v) in values {
            if let Some(v) = v {
                writeln!(s, "{k} = {v}").expect("write to String");
            }
        }
        s
    }
}
