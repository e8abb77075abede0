//! Filtered link-prediction metrics: rank, MRR and Hits@k, for point
//! estimates or for predictions averaged over posterior samples.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;

use crate::data::{FilterIndex, Triple};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{log_sum_exp, Parameters};
use crate::var_em::VariationalParams;

pub const DEFAULT_KS: [usize; 3] = [1, 3, 10];

/// Anything that can score every candidate tail of a `(head, relation)` query.
pub trait TailScorer: Sync {
    fn num_entities(&self) -> usize;
    fn num_relation_rows(&self) -> usize;
    fn tail_scores(&self, head: usize, relation: usize) -> Vec<f64>;
}

impl TailScorer for Parameters {
    fn num_entities(&self) -> usize {
        Parameters::num_entities(self)
    }

    fn num_relation_rows(&self) -> usize {
        Parameters::num_relation_rows(self)
    }

    fn tail_scores(&self, head: usize, relation: usize) -> Vec<f64> {
        self.score_all_tails(head, relation)
    }
}

/// Bayesian prediction: tail probabilities averaged over a fixed set of
/// posterior samples.
#[derive(Clone, Debug)]
pub struct PosteriorSamples {
    samples: Vec<Parameters>,
}

impl PosteriorSamples {
    pub fn draw<R: Rng + ?Sized>(var: &VariationalParams, n_samples: usize, rng: &mut R) -> Result<Self> {
        if n_samples == 0 {
            return Err(Error::InvalidArgument("need at least one posterior sample".into()));
        }
        Ok(PosteriorSamples {
            samples: (0..n_samples).map(|_| var.sample(rng)).collect(),
        })
    }

    pub fn samples(&self) -> &[Parameters] {
        &self.samples
    }
}

fn softmax_in_place(scores: &mut [f64]) {
    let lse = log_sum_exp(scores);
    scores.iter_mut().for_each(|s| *s = (*s - lse).exp());
}

impl TailScorer for PosteriorSamples {
    fn num_entities(&self) -> usize {
        self.samples[0].num_entities()
    }

    fn num_relation_rows(&self) -> usize {
        self.samples[0].num_relation_rows()
    }

    fn tail_scores(&self, head: usize, relation: usize) -> Vec<f64> {
        let mut avg = vec![0.0; self.num_entities()];
        for s in &self.samples {
            let mut probs = s.score_all_tails(head, relation);
            softmax_in_place(&mut probs);
            avg.iter_mut().zip(&probs).for_each(|(a, p)| *a += p);
        }
        let n = self.samples.len() as f64;
        avg.iter_mut().for_each(|a| *a /= n);
        avg
    }
}

/// `(1/n) sum_s softmax(f(theta_s))` over `n_samples` fresh posterior samples.
pub fn bayes_average_scores<R: Rng + ?Sized>(
    var: &VariationalParams,
    head: usize,
    relation: usize,
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    Ok(PosteriorSamples::draw(var, n_samples, rng)?.tail_scores(head, relation))
}

/// `1 + #{t' not in known, t' != target : score(t') >= score(target)}`.
///
/// `known` must be sorted. Ties count against the target.
pub fn rank_from_scores(scores: &[f64], target: usize, known: &[usize]) -> Result<usize> {
    if target >= scores.len() {
        return Err(Error::InvalidArgument(format!("target {target} out of range")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite { what: "score" });
    }
    let threshold = scores[target];
    let mut known = known.iter().peekable();
    let mut rank = 1;
    for (t, &s) in scores.iter().enumerate() {
        while known.next_if(|&&k| k < t).is_some() {}
        if known.next_if_eq(&&t).is_some() || t == target {
            continue;
        }
        if s >= threshold {
            rank += 1;
        }
    }
    Ok(rank)
}

fn check_query<S: TailScorer + ?Sized>(scorer: &S, t: Triple) -> Result<()> {
    let n_e = scorer.num_entities();
    if t.head >= n_e || t.tail >= n_e || t.relation >= scorer.num_relation_rows() {
        return Err(Error::InvalidArgument(format!("query {t:?} has out-of-range ids")));
    }
    Ok(())
}

/// Filtered rank of `target` among all tails of `(head, relation)`.
pub fn filtered_rank<S: TailScorer + ?Sized>(
    scorer: &S,
    head: usize,
    relation: usize,
    target: usize,
    filter: &FilterIndex,
) -> Result<usize> {
    check_query(scorer, Triple::new(head, relation, target))?;
    let scores = scorer.tail_scores(head, relation);
    rank_from_scores(&scores, target, filter.tails(head, relation))
}

/// Filtered ranks of every query, in query order.
pub fn query_ranks<S: TailScorer + ?Sized>(
    scorer: &S,
    queries: &[Triple],
    filter: &FilterIndex,
    exec: Execution,
) -> Result<Vec<usize>> {
    exec.try_map(queries, |q| filtered_rank(scorer, q.head, q.relation, q.tail, filter))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mrr: f64,
    pub hits_at_k: BTreeMap<usize, f64>,
    pub n_queries: usize,
}

impl EvalReport {
    pub fn from_ranks(ranks: &[usize], ks: &[usize]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::InvalidArgument("cannot evaluate an empty query set".into()));
        }
        let n = ranks.len() as f64;
        let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
        let hits_at_k = ks
            .iter()
            .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
            .collect();
        Ok(EvalReport {
            mrr,
            hits_at_k,
            n_queries: ranks.len(),
        })
    }

    pub fn hits(&self, k: usize) -> Option<f64> {
        self.hits_at_k.get(&k).copied()
    }

    /// `metric<TAB>value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "mrr\t{}", self.mrr).expect("write to String");
        for (k, v) in &self.hits_at_k {
            writeln!(s, "hits@{k}\t{v}").expect("write to String");
        }
        writeln!(s, "n_queries\t{}", self.n_queries).expect("write to String");
        s
    }
}

/// MRR and Hits@k over every augmented test triple.
pub fn evaluate_with<S: TailScorer + ?Sized>(
    scorer: &S,
    test: &[Triple],
    filter: &FilterIndex,
    ks: &[usize],
    exec: Execution,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty test set".into()));
    }
    let ranks = query_ranks(scorer, test, filter, exec)?;
    EvalReport::from_ranks(&ranks, ks)
}

/// [`evaluate_with`] using point estimates and the default execution strategy.
pub fn evaluate(params: &Parameters, test: &[Triple], filter: &FilterIndex, ks: &[usize]) -> Result<EvalReport> {
    evaluate_with(params, test, filter, ks, Execution::default())
}

/// `h<TAB>r<TAB>t<TAB>rank` per query.
pub fn rank_dump(queries: &[Triple], ranks: &[usize]) -> String {
    let mut s = String::new();
    for (q, r) in queries.iter().zip(ranks) {
        writeln!(s, "{}\t{}\t{}\t{}", q.head, q.relation, q.tail, r).expect("write to String");
    }
    s
}
