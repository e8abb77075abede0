//! Binary checkpoints: an ASCII magic line, a `key=value` header ending at a
//! blank line, then little-endian `f64` tables in a fixed order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{EmbeddingSpace, Hyperparameters, Norm, Parameters, SpaceKind, Table};
use crate::var_em::VariationalParams;

pub const MAGIC: &[u8] = b"KGVEM1\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Map,
    Variational,
}

impl CheckpointKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckpointKind::Map => "map",
            CheckpointKind::Variational => "variational",
        }
    }
}

/// Point-estimate or variational embeddings together with the strengths they
/// were trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Point estimates, or the variational means.
    pub mean: Parameters,
    /// Variational log standard deviations; `None` for point estimates.
    pub log_std: Option<Parameters>,
    pub lambda: Hyperparameters,
    /// Number of original relations (the relation table has twice as many rows).
    pub num_relations: usize,
    /// Location of the vocabulary files this checkpoint's ids refer to.
    pub vocab: Option<String>,
}

impl Checkpoint {
    pub fn map(params: Parameters, lambda: Hyperparameters) -> Self {
        let num_relations = params.num_relation_rows() / 2;
        Checkpoint {
            mean: params,
            log_std: None,
            lambda,
            num_relations,
            vocab: None,
        }
    }

    pub fn variational(var: VariationalParams, lambda: Hyperparameters) -> Self {
        let num_relations = var.mu.num_relation_rows() / 2;
        Checkpoint {
            mean: var.mu,
            log_std: Some(var.xi),
            lambda,
            num_relations,
            vocab: None,
        }
    }

    pub fn with_vocab(mut self, vocab: impl Into<String>) -> Self {
        self.vocab = Some(vocab.into());
        self
    }

    pub fn kind(&self) -> CheckpointKind {
        if self.log_std.is_some() {
            CheckpointKind::Variational
        } else {
            CheckpointKind::Map
        }
    }

    pub fn space(&self) -> EmbeddingSpace {
        self.mean.space
    }

    pub fn num_entities(&self) -> usize {
        self.mean.num_entities()
    }

    pub fn variational_params(&self) -> Option<VariationalParams> {
        self.log_std.as_ref().map(|xi| VariationalParams {
            mu: self.mean.clone(),
            xi: xi.clone(),
        })
    }

    fn check_shapes(&self) -> Result<()> {
        let n_e = self.num_entities();
        let n_rows = 2 * self.num_relations;
        let w = self.space().width();
        let ok_params = |p: &Parameters| {
            p.space == self.mean.space
                && p.entities.rows() == n_e
                && p.relations.rows() == n_rows
                && p.entities.cols() == w
                && p.relations.cols() == w
        };
        let ok = ok_params(&self.mean)
            && self.log_std.as_ref().is_none_or(ok_params)
            && self.lambda.entity.len() == n_e
            && self.lambda.relation.len() == n_rows;
        let vocab_ok = self.vocab.as_deref().is_none_or(|v| !v.contains('\n'));
        if ok && vocab_ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument("checkpoint tables disagree with its header".into()))
        }
    }

    fn header(&self) -> String {
        let space = self.space();
        let mut h = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| writeln!(h, "{k}={v}").expect("write to String");
        kv("format_version", &FORMAT_VERSION);
        kv("space", &space.kind.as_str());
        kv("k", &space.dim);
        kv("k_prime", &space.width());
        kv("p", &self.lambda.norm.order());
        kv("n_e", &self.num_entities());
        kv("n_r", &self.num_relations);
        kv("kind", &self.kind().as_str());
        if let Some(v) = &self.vocab {
            kv("vocab", v);
        }
        h.push('\n');
        h
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check_shapes()?;
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(self.header().as_bytes());
        let mut put = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        put(self.mean.entities.as_slice());
        put(self.mean.relations.as_slice());
        if let Some(xi) = &self.log_std {
            put(xi.entities.as_slice());
            put(xi.relations.as_slice());
        }
        put(&self.lambda.entity);
        put(&self.lambda.relation);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes.strip_prefix(MAGIC).ok_or(Error::MagicMismatch)?;
        let end = rest.windows(2).position(|w| w == b"\n\n").ok_or(Error::Truncated)?;
        let header = std::str::from_utf8(&rest[..=end]).map_err(|_| Error::BadHeader("header is not UTF-8".into()))?;
        let payload = &rest[end + 2..];

        let mut fields = BTreeMap::new();
        for line in header.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::BadHeader(format!("line `{line}` is not key=value")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| Error::BadHeader(format!("missing `{k}`")));
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::BadHeader(format!("`{k}` is not a count")))
        };

        let version = get("format_version")?;
        if version != FORMAT_VERSION.to_string() {
            return Err(Error::VersionMismatch(version.to_owned()));
        }
        let kind: SpaceKind = get("space")?.parse().map_err(|_| Error::BadHeader("unknown space".into()))?;
        let space = EmbeddingSpace::new(kind, num("k")?)?;
        if num("k_prime")? != space.width() {
            return Err(Error::BadHeader("k_prime disagrees with space and k".into()));
        }
        let p = num("p")?;
        let norm = u32::try_from(p)
            .ok()
            .and_then(|p| Norm::from_order(p).ok())
            .ok_or_else(|| Error::BadHeader(format!("unsupported p={p}")))?;
        let n_e = num("n_e")?;
        let n_r = num("n_r")?;
        let variational = match get("kind")? {
            "map" => false,
            "variational" => true,
            other => return Err(Error::BadHeader(format!("unknown kind `{other}`"))),
        };
        let vocab = fields.get("vocab").map(|v| (*v).to_owned());

        let w = space.width();
        let n_rows = 2 * n_r;
        let tables = if variational { 2 } else { 1 };
        let floats = tables * (n_e + n_rows) * w + n_e + n_rows;
        let expected = floats * 8;
        if payload.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                found: payload.len(),
            });
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };
        let mut params = || -> Result<Parameters> {
            Ok(Parameters {
                entities: Table::from_vec(n_e, w, take(n_e * w))?,
                relations: Table::from_vec(n_rows, w, take(n_rows * w))?,
                space,
            })
        };
        let mean = params()?;
        let log_std = if variational { Some(params()?) } else { None };
        let entity = take(n_e);
        let relation = take(n_rows);
        Ok(Checkpoint {
            mean,
            log_std,
            lambda: Hyperparameters {
                entity,
                relation,
                norm,
            },
            num_relations: n_r,
            vocab,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
