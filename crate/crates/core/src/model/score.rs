//! DistMult and ComplEx scores.
//!
//! Both scores are linear in the tail vector, so they are computed as
//! `dot(query(h, r), t)` where the query vector depends only on the head and
//! relation. Per-triple scoring and all-tails scoring share this routine and
//! therefore agree bit for bit.

use super::{EmbeddingSpace, Parameters, SpaceKind};
use crate::data::Triple;

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Writes the query vector `q` with `f(h, r, t) = <q, t>` into `out`.
///
/// Real: `q_k = h_k r_k`. Complex with `h = a + ib`, `r = c + id`:
/// `q = (ac - bd) + i(ad + bc)` stored as real parts then imaginary parts,
/// so that `<q, t>` over storage equals `sum_k Re[h_k r_k conj(t_k)]`.
#[inline]
pub fn query_vector(space: EmbeddingSpace, head: &[f64], rel: &[f64], out: &mut [f64]) {
    match space.kind {
        SpaceKind::Real => {
            for ((o, h), r) in out.iter_mut().zip(head).zip(rel) {
                *o = h * r;
            }
        }
        SpaceKind::Complex => {
            let k = space.dim;
            let (a, b) = head.split_at(k);
            let (c, d) = rel.split_at(k);
            let (re, im) = out.split_at_mut(k);
            for i in 0..k {
                re[i] = a[i] * c[i] - b[i] * d[i];
                im[i] = a[i] * d[i] + b[i] * c[i];
            }
        }
    }
}

/// Back-propagates a gradient on the query vector into head and relation
/// gradients (accumulating).
#[inline]
pub fn query_backward(
    space: EmbeddingSpace,
    head: &[f64],
    rel: &[f64],
    grad_query: &[f64],
    grad_head: &mut [f64],
    grad_rel: &mut [f64],
) {
    match space.kind {
        SpaceKind::Real => {
            for i in 0..space.dim {
                grad_head[i] += grad_query[i] * rel[i];
                grad_rel[i] += grad_query[i] * head[i];
            }
        }
        SpaceKind::Complex => {
            let k = space.dim;
            let (a, b) = head.split_at(k);
            let (c, d) = rel.split_at(k);
            let (gre, gim) = grad_query.split_at(k);
            for i in 0..k {
                grad_head[i] += gre[i] * c[i] + gim[i] * d[i];
                grad_head[k + i] += -gre[i] * d[i] + gim[i] * c[i];
                grad_rel[i] += gre[i] * a[i] + gim[i] * b[i];
                grad_rel[k + i] += -gre[i] * b[i] + gim[i] * a[i];
            }
        }
    }
}

pub fn score(space: EmbeddingSpace, head: &[f64], rel: &[f64], tail: &[f64]) -> f64 {
    let mut q = vec![0.0; space.width()];
    query_vector(space, head, rel, &mut q);
    dot(&q, tail)
}

/// `sum_k h_k r_k t_k`
pub fn score_distmult(head: &[f64], rel: &[f64], tail: &[f64]) -> f64 {
    score(EmbeddingSpace::real(head.len()), head, rel, tail)
}

/// `sum_k Re[h_k r_k conj(t_k)]` for complex vectors stored as `[re..., im...]`.
pub fn score_complex(head: &[f64], rel: &[f64], tail: &[f64]) -> f64 {
    assert!(head.len().is_multiple_of(2), "complex storage must have even length");
    score(EmbeddingSpace::complex(head.len() / 2), head, rel, tail)
}

impl Parameters {
    pub fn score(&self, t: Triple) -> f64 {
        score(
            self.space,
            self.entities.row(t.head),
            self.relations.row(t.relation),
            self.entities.row(t.tail),
        )
    }

    pub fn query(&self, head: usize, relation: usize) -> Vec<f64> {
        let mut q = vec![0.0; self.space.width()];
        query_vector(self.space, self.entities.row(head), self.relations.row(relation), &mut q);
        q
    }

    /// Scores of `(head, relation, t)` for every entity `t`.
    pub fn score_all_tails(&self, head: usize, relation: usize) -> Vec<f64> {
        let q = self.query(head, relation);
        self.entities.iter_rows().map(|t| dot(&q, t)).collect()
    }

    /// Like [`Parameters::score_all_tails`], writing into a caller buffer.
    pub fn score_all_tails_into(&self, query: &[f64], out: &mut [f64]) {
        for (o, t) in out.iter_mut().zip(self.entities.iter_rows()) {
            *o = dot(query, t);
        }
    }
}
