use statrs::function::gamma::ln_gamma;

use super::{query_backward, query_vector, Hyperparameters, Norm, Parameters, Table};
use crate::data::{FrequencyTable, Triple};
use crate::error::{Error, Result};

/// `log sum exp(x)` with max subtraction. Returns `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Tail-prediction softmax loss summed over `batch`:
/// `sum [-f(h,r,t) + log sum_t' exp f(h,r,t')]`.
pub fn tail_softmax_loss(params: &Parameters, batch: &[Triple]) -> Result<f64> {
    let mut scores = vec![0.0; params.num_entities()];
    let mut total = 0.0;
    for t in batch {
        let q = params.query(t.head, t.relation);
        params.score_all_tails_into(&q, &mut scores);
        let l = log_sum_exp(&scores) - scores[t.tail];
        if !l.is_finite() {
            return Err(Error::NonFinite { what: "softmax loss" });
        }
        total += l;
    }
    Ok(total)
}

/// `sum_e (lambda_e / p) ||E_e||_p^p + sum_r (lambda_r / p) ||R_r||_p^p`.
///
/// Complex vectors are treated as their real storage coordinates.
pub fn regularizer_penalty(params: &Parameters, hyper: &Hyperparameters) -> f64 {
    let norm = hyper.norm;
    let p = norm.p();
    let part = |table: &Table, lambdas: &[f64]| -> f64 {
        table
            .iter_rows()
            .zip(lambdas)
            .map(|(row, l)| l / p * norm.norm_pow(row))
            .sum()
    };
    part(&params.entities, &hyper.entity) + part(&params.relations, &hyper.relation)
}

/// Log prior up to a lambda-independent constant:
/// `sum (K'/p) log lambda - (lambda/p) ||v||_p^p` over all vectors.
pub fn log_prior(params: &Parameters, hyper: &Hyperparameters) -> f64 {
    let width = params.space.width() as f64;
    let p = hyper.norm.p();
    let log_norm: f64 = hyper.iter().map(|l| width / p * l.ln()).sum();
    log_norm - regularizer_penalty(params, hyper)
}

/// Per-coordinate log normalizer of the unit-strength prior,
/// `log integral exp(-|x|^p / p) dx = log(2 Gamma(1 + 1/p) p^(1/p))`.
///
/// Subtracting `K'` times this from [`log_prior`] for each vector gives the
/// fully normalized log density.
pub fn prior_log_normalizer(norm: Norm) -> f64 {
    let p = norm.p();
    std::f64::consts::LN_2 + ln_gamma(1.0 + 1.0 / p) + p.ln() / p
}

/// Softmax loss over the whole (augmented) training set minus the log prior.
/// The `log P(h, r)` term is constant and omitted.
pub fn neg_log_joint(params: &Parameters, hyper: &Hyperparameters, train: &[Triple]) -> Result<f64> {
    Ok(tail_softmax_loss(params, train)? - log_prior(params, hyper))
}

#[inline]
fn occurrence_weight(lambda: f64, count: u64, p: f64) -> f64 {
    lambda / (p * count.max(1) as f64)
}

/// Minibatch share of the regularizer: each occurrence of entity `e` (as head
/// or tail) contributes `lambda_e / (p n_e) ||E_e||_p^p`, likewise for relations.
/// Over one epoch these shares add up to [`regularizer_penalty`] for every
/// symbol that occurs in training.
pub fn occurrence_regularizer(
    params: &Parameters,
    hyper: &Hyperparameters,
    freq: &FrequencyTable,
    batch: &[Triple],
) -> f64 {
    let norm = hyper.norm;
    let p = norm.p();
    let ent = |e: usize| {
        occurrence_weight(hyper.entity[e], freq.entity[e], p) * norm.norm_pow(params.entities.row(e))
    };
    batch
        .iter()
        .map(|t| {
            let r = t.relation;
            ent(t.head)
                + ent(t.tail)
                + occurrence_weight(hyper.relation[r], freq.relation[r], p)
                    * norm.norm_pow(params.relations.row(r))
        })
        .sum()
}

/// Gradient buffers shaped like [`Parameters`], with row-touched flags.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub entities: Table,
    pub relations: Table,
    pub entity_touched: Vec<bool>,
    pub relation_touched: Vec<bool>,
}

impl Gradients {
    pub fn for_params(params: &Parameters) -> Self {
        let w = params.space.width();
        Gradients {
            entities: Table::zeros(params.num_entities(), w),
            relations: Table::zeros(params.num_relation_rows(), w),
            entity_touched: vec![false; params.num_entities()],
            relation_touched: vec![false; params.num_relation_rows()],
        }
    }

    /// Zeroes touched rows and resets the flags.
    pub fn clear(&mut self) {
        for (i, t) in self.entity_touched.iter_mut().enumerate() {
            if std::mem::take(t) {
                self.entities.row_mut(i).fill(0.0);
            }
        }
        for (i, t) in self.relation_touched.iter_mut().enumerate() {
            if std::mem::take(t) {
                self.relations.row_mut(i).fill(0.0);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entities.is_finite() && self.relations.is_finite()
    }
}

/// Minibatch objective `scale * (softmax loss + occurrence regularizer)` and
/// its gradient, accumulated into `grads` (which should be cleared by the caller).
///
/// `scale = 1` gives the per-batch term of an epoch decomposition of the full
/// loss; `scale = |S'| / |B|` gives an unbiased estimate of the full loss.
pub fn minibatch_objective(
    params: &Parameters,
    hyper: &Hyperparameters,
    freq: &FrequencyTable,
    batch: &[Triple],
    scale: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    let space = params.space;
    let w = space.width();
    let n_e = params.num_entities();
    let norm = hyper.norm;
    let p = norm.p();

    let mut q = vec![0.0; w];
    let mut scores = vec![0.0; n_e];
    let mut grad_q = vec![0.0; w];
    let mut total = 0.0;

    grads.entity_touched.fill(true);
    for t in batch {
        let head = params.entities.row(t.head);
        let rel = params.relations.row(t.relation);
        query_vector(space, head, rel, &mut q);
        params.score_all_tails_into(&q, &mut scores);

        let target_score = scores[t.tail];
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - m).exp();
            z += *s;
        }
        let target = params.entities.row(t.tail);
        let l = m + z.ln() - target_score;
        if !l.is_finite() {
            return Err(Error::NonFinite { what: "softmax loss" });
        }
        total += l;

        // d loss / d E_t' = (p_t' - [t' = t]) q ;  d loss / d q = E_p[E_t'] - E_t
        for (g, x) in grad_q.iter_mut().zip(target) {
            *g = -scale * x;
        }
        for (e, &weight) in scores.iter().enumerate() {
            let coef = scale * weight / z;
            for (g, x) in grad_q.iter_mut().zip(params.entities.row(e)) {
                *g += coef * x;
            }
            for (g, qk) in grads.entities.row_mut(e).iter_mut().zip(&q) {
                *g += coef * qk;
            }
        }
        for (g, qk) in grads.entities.row_mut(t.tail).iter_mut().zip(&q) {
            *g -= scale * qk;
        }
        query_backward(
            space,
            head,
            rel,
            &grad_q,
            grads.entities.row_mut(t.head),
            grads.relations.row_mut(t.relation),
        );
        grads.relation_touched[t.relation] = true;

        for e in [t.head, t.tail] {
            let c = occurrence_weight(hyper.entity[e], freq.entity[e], p);
            let row = params.entities.row(e);
            total += c * norm.norm_pow(row);
            for (g, &x) in grads.entities.row_mut(e).iter_mut().zip(row) {
                *g += scale * c * p * norm.scaled_grad(x);
            }
        }
        let r = t.relation;
        let c = occurrence_weight(hyper.relation[r], freq.relation[r], p);
        let row = params.relations.row(r);
        total += c * norm.norm_pow(row);
        for (g, &x) in grads.relations.row_mut(r).iter_mut().zip(row) {
            *g += scale * c * p * norm.scaled_grad(x);
        }
    }
    Ok(scale * total)
}
