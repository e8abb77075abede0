//! The probabilistic embedding model: embedding tables, score functions,
//! priors, regularizers and the tail-prediction softmax loss.

mod loss;
mod score;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub use loss::{
    log_prior, log_sum_exp, minibatch_objective, neg_log_joint, occurrence_regularizer,
    prior_log_normalizer, regularizer_penalty, tail_softmax_loss, Gradients,
};
pub use score::{query_backward, query_vector, score, score_complex, score_distmult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpaceKind {
    /// Real vectors, DistMult scoring.
    Real,
    /// Complex vectors stored as `dim` real parts followed by `dim` imaginary parts; ComplEx scoring.
    Complex,
}

impl SpaceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SpaceKind::Real => "real",
            SpaceKind::Complex => "complex",
        }
    }
}

impl std::str::FromStr for SpaceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" | "distmult" => Ok(SpaceKind::Real),
            "complex" | "complex-valued" => Ok(SpaceKind::Complex),
            _ => Err(Error::InvalidArgument(format!("unknown embedding space `{s}`"))),
        }
    }
}

/// Embedding space tag plus dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EmbeddingSpace {
    pub kind: SpaceKind,
    /// Number of (real or complex) components `K`.
    pub dim: usize,
}

impl EmbeddingSpace {
    pub fn new(kind: SpaceKind, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be >= 1".into()));
        }
        Ok(EmbeddingSpace { kind, dim })
    }

    pub fn real(dim: usize) -> Self {
        EmbeddingSpace::new(SpaceKind::Real, dim).expect("dim >= 1")
    }

    pub fn complex(dim: usize) -> Self {
        EmbeddingSpace::new(SpaceKind::Complex, dim).expect("dim >= 1")
    }

    /// Real storage coordinates per vector (`K'`).
    pub fn width(&self) -> usize {
        match self.kind {
            SpaceKind::Real => self.dim,
            SpaceKind::Complex => 2 * self.dim,
        }
    }
}

/// Order `p` of the p-norm regularizer / prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Norm {
    L2,
    L3,
}

impl Norm {
    pub fn from_order(p: u32) -> Result<Self> {
        match p {
            2 => Ok(Norm::L2),
            3 => Ok(Norm::L3),
            _ => Err(Error::InvalidArgument(format!("norm order must be 2 or 3, got {p}"))),
        }
    }

    pub fn order(self) -> u32 {
        match self {
            Norm::L2 => 2,
            Norm::L3 => 3,
        }
    }

    pub fn p(self) -> f64 {
        f64::from(self.order())
    }

    /// `|x|^p`
    #[inline]
    pub fn abs_pow(self, x: f64) -> f64 {
        match self {
            Norm::L2 => x * x,
            Norm::L3 => x.abs() * x * x,
        }
    }

    /// Derivative of `|x|^p / p`, i.e. `|x|^(p-1) sign(x)`.
    #[inline]
    pub fn scaled_grad(self, x: f64) -> f64 {
        match self {
            Norm::L2 => x,
            Norm::L3 => x.abs() * x,
        }
    }

    /// `||v||_p^p` over all storage coordinates.
    pub fn norm_pow(self, v: &[f64]) -> f64 {
        v.iter().map(|&x| self.abs_pow(x)).sum()
    }
}

/// Dense row-major table of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Table {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Table::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Table {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "table data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Table { rows, cols, data })
    }

    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Table { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Point estimates of all embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    /// One row per entity, shared by head and tail roles.
    pub entities: Table,
    /// One row per relation, inverse relations included.
    pub relations: Table,
    pub space: EmbeddingSpace,
}

impl Parameters {
    pub fn zeros(num_entities: usize, num_relation_rows: usize, space: EmbeddingSpace) -> Self {
        Parameters {
            entities: Table::zeros(num_entities, space.width()),
            relations: Table::zeros(num_relation_rows, space.width()),
            space,
        }
    }

    /// I.i.d. zero-mean Gaussian entries with standard deviation `std`.
    pub fn random<R: Rng + ?Sized>(
        num_entities: usize,
        num_relation_rows: usize,
        space: EmbeddingSpace,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = space.width();
        let entities = Table::random(num_entities, w, std, rng);
        let relations = Table::random(num_relation_rows, w, std, rng);
        Parameters {
            entities,
            relations,
            space,
        }
    }

    pub fn num_entities(&self) -> usize {
        self.entities.rows()
    }

    pub fn num_relation_rows(&self) -> usize {
        self.relations.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.entities.is_finite() && self.relations.is_finite()
    }
}

/// Per-entity and per-relation regularizer strengths.
#[derive(Clone, Debug, PartialEq)]
pub struct Hyperparameters {
    pub entity: Vec<f64>,
    pub relation: Vec<f64>,
    pub norm: Norm,
}

impl Hyperparameters {
    /// Checks that every strength is positive and finite.
    pub fn new(entity: Vec<f64>, relation: Vec<f64>, norm: Norm) -> Result<Self> {
        if let Some(bad) = entity.iter().chain(&relation).find(|&&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "regularizer strengths must be positive and finite, found {bad}"
            )));
        }
        Ok(Hyperparameters {
            entity,
            relation,
            norm,
        })
    }

    pub fn uniform(num_entities: usize, num_relation_rows: usize, value: f64, norm: Norm) -> Self {
        Hyperparameters {
            entity: vec![value; num_entities],
            relation: vec![value; num_relation_rows],
            norm,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.entity.iter().chain(&self.relation).copied()
    }
}
