//! Variational EM over the regularizer strengths.
//!
//! The posterior over embeddings is approximated by a fully factorized
//! Gaussian `q` with means `mu` and log standard deviations `xi`. E-steps
//! follow reparameterization gradients of the noisy minibatch loss plus the
//! analytic entropy gradient; M-steps move each `1 / lambda` towards
//! `E_q[||v||_p^p] / K'`.

mod diagnostics;

use std::fmt::Write as _;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{minibatch_iter, Dataset, FrequencyTable, Minibatches, Triple};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{
    log_prior, minibatch_objective, prior_log_normalizer, tail_softmax_loss, Gradients,
    Hyperparameters, Norm, Parameters, Table,
};

pub use diagnostics::{
    absolute_moment, analytic_prior_entropy_optimum, naive_lambda, prior_entropy_objective,
};

/// Mean-field Gaussian over all embedding coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalParams {
    pub mu: Parameters,
    /// Log standard deviations, laid out like `mu`.
    pub xi: Parameters,
}

impl VariationalParams {
    /// `mu` copies the point estimate; every `xi` is `log(sigma_init)`.
    pub fn init(pretrained: &Parameters, sigma_init: f64) -> Result<Self> {
        if !(sigma_init > 0.0 && sigma_init.is_finite()) {
            return Err(Error::InvalidArgument("sigma_init must be positive".into()));
        }
        let w = pretrained.space.width();
        let xi0 = sigma_init.ln();
        Ok(VariationalParams {
            mu: pretrained.clone(),
            xi: Parameters {
                entities: Table::filled(pretrained.num_entities(), w, xi0),
                relations: Table::filled(pretrained.num_relation_rows(), w, xi0),
                space: pretrained.space,
            },
        })
    }

    pub fn num_coordinates(&self) -> usize {
        self.mu.entities.as_slice().len() + self.mu.relations.as_slice().len()
    }

    /// `H[q] = sum xi + (n / 2) log(2 pi e)`.
    pub fn entropy(&self) -> f64 {
        let sum_xi: f64 = self.xi.entities.as_slice().iter().chain(self.xi.relations.as_slice()).sum();
        let per = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        sum_xi + self.num_coordinates() as f64 * per
    }

    /// `mu + exp(xi) * eps` using the given noise (zero where none was drawn).
    pub fn sample_with(&self, noise: &NoiseDraw) -> Parameters {
        let perturb = |mu: &Table, xi: &Table, eps: &Table| -> Table {
            let data = mu
                .as_slice()
                .iter()
                .zip(xi.as_slice())
                .zip(eps.as_slice())
                .map(|((m, x), e)| m + x.exp() * e)
                .collect();
            Table::from_vec(mu.rows(), mu.cols(), data).expect("shape")
        };
        Parameters {
            entities: perturb(&self.mu.entities, &self.xi.entities, &noise.entities),
            relations: perturb(&self.mu.relations, &self.xi.relations, &noise.relations),
            space: self.mu.space,
        }
    }

    /// One full reparameterized sample.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Parameters {
        self.sample_with(&NoiseDraw::full(self, rng))
    }
}

fn standard_normal_table<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Table {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Table::from_vec(rows, cols, data).expect("shape")
}

/// Standard-normal noise for one step.
///
/// Entity noise always covers every row (all entities enter the softmax);
/// relation noise is drawn only for relations present in the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub entities: Table,
    pub relations: Table,
    pub relation_drawn: Vec<bool>,
}

impl NoiseDraw {
    pub fn zeros(var: &VariationalParams) -> Self {
        let w = var.mu.space.width();
        NoiseDraw {
            entities: Table::zeros(var.mu.num_entities(), w),
            relations: Table::zeros(var.mu.num_relation_rows(), w),
            relation_drawn: vec![false; var.mu.num_relation_rows()],
        }
    }

    pub fn full<R: Rng + ?Sized>(var: &VariationalParams, rng: &mut R) -> Self {
        let w = var.mu.space.width();
        NoiseDraw {
            entities: standard_normal_table(var.mu.num_entities(), w, rng),
            relations: standard_normal_table(var.mu.num_relation_rows(), w, rng),
            relation_drawn: vec![true; var.mu.num_relation_rows()],
        }
    }

    /// Draws entity rows in id order, then the batch's relation rows in id order.
    pub fn for_batch<R: Rng + ?Sized>(var: &VariationalParams, batch: &[Triple], rng: &mut R) -> Self {
        let w = var.mu.space.width();
        let mut noise = NoiseDraw::zeros(var);
        noise.entities = standard_normal_table(var.mu.num_entities(), w, rng);
        for t in batch {
            noise.relation_drawn[t.relation] = true;
        }
        for (r, _) in noise.relation_drawn.iter().enumerate().filter(|(_, d)| **d) {
            for x in noise.relations.row_mut(r) {
                *x = rng.sample(StandardNormal);
            }
        }
        noise
    }
}

/// Gradients of the noisy loss with respect to `mu` and `xi`.
#[derive(Clone, Debug)]
pub struct VarGradients {
    pub mu: Gradients,
    pub xi: Gradients,
}

impl VarGradients {
    pub fn for_var(var: &VariationalParams) -> Self {
        VarGradients {
            mu: Gradients::for_params(&var.mu),
            xi: Gradients::for_params(&var.mu),
        }
    }
}

/// Minibatch loss at the reparameterized sample `theta = mu + exp(xi) * eps`,
/// scaled by `scale`, with gradients `dL/dmu = dL/dtheta` and
/// `dL/dxi = dL/dtheta * exp(xi) * eps` written into `grads`.
pub fn noisy_loss_into(
    var: &VariationalParams,
    hyper: &Hyperparameters,
    freq: &FrequencyTable,
    batch: &[Triple],
    noise: &NoiseDraw,
    scale: f64,
    grads: &mut VarGradients,
) -> Result<f64> {
    let theta = var.sample_with(noise);
    grads.mu.clear();
    grads.xi.clear();
    let value = minibatch_objective(&theta, hyper, freq, batch, scale, &mut grads.mu)?;
    if !value.is_finite() || !grads.mu.is_finite() {
        return Err(Error::NonFinite { what: "noisy loss" });
    }
    let chain = |g_mu: &Table, g_xi: &mut Table, xi: &Table, eps: &Table, touched: &[bool]| {
        for (i, _) in touched.iter().enumerate().filter(|(_, t)| **t) {
            for (((gx, gm), x), e) in g_xi.row_mut(i).iter_mut().zip(g_mu.row(i)).zip(xi.row(i)).zip(eps.row(i)) {
                *gx = gm * x.exp() * e;
            }
        }
    };
    chain(
        &grads.mu.entities,
        &mut grads.xi.entities,
        &var.xi.entities,
        &noise.entities,
        &grads.mu.entity_touched,
    );
    chain(
        &grads.mu.relations,
        &mut grads.xi.relations,
        &var.xi.relations,
        &noise.relations,
        &grads.mu.relation_touched,
    );
    grads.xi.entity_touched.clone_from(&grads.mu.entity_touched);
    grads.xi.relation_touched.clone_from(&grads.mu.relation_touched);
    Ok(value)
}

/// Allocating form of [`noisy_loss_into`].
pub fn noisy_loss(
    var: &VariationalParams,
    hyper: &Hyperparameters,
    freq: &FrequencyTable,
    batch: &[Triple],
    noise: &NoiseDraw,
    scale: f64,
) -> Result<(f64, VarGradients)> {
    let mut grads = VarGradients::for_var(var);
    let v = noisy_loss_into(var, hyper, freq, batch, noise, scale, &mut grads)?;
    Ok((v, grads))
}

/// `mu -= alpha_mu * dL/dmu`; `xi -= alpha_xi * (dL/dxi - 1)`.
///
/// The `-1` is the entropy gradient and applies to every coordinate, so
/// coordinates the batch did not touch still widen by `alpha_xi`.
pub fn estep_update(var: &mut VariationalParams, grads: &VarGradients, alpha_mu: f64, alpha_xi: f64) {
    let step_mu = |mu: &mut Table, g: &Table, touched: &[bool]| {
        for (i, _) in touched.iter().enumerate().filter(|(_, t)| **t) {
            for (m, g) in mu.row_mut(i).iter_mut().zip(g.row(i)) {
                *m -= alpha_mu * g;
            }
        }
    };
    step_mu(&mut var.mu.entities, &grads.mu.entities, &grads.mu.entity_touched);
    step_mu(&mut var.mu.relations, &grads.mu.relations, &grads.mu.relation_touched);

    let step_xi = |xi: &mut Table, g: &Table, touched: &[bool]| {
        for (i, &t) in touched.iter().enumerate() {
            if t {
                for (x, g) in xi.row_mut(i).iter_mut().zip(g.row(i)) {
                    *x -= alpha_xi * (g - 1.0);
                }
            } else {
                for x in xi.row_mut(i) {
                    *x += alpha_xi;
                }
            }
        }
    };
    step_xi(&mut var.xi.entities, &grads.xi.entities, &grads.xi.entity_touched);
    step_xi(&mut var.xi.relations, &grads.xi.relations, &grads.xi.relation_touched);
}

fn closed_form_second_moment(mu: &Table, xi: &Table) -> Vec<f64> {
    (0..mu.rows())
        .map(|i| {
            mu.row(i)
                .iter()
                .zip(xi.row(i))
                .map(|(m, x)| m * m + (2.0 * x).exp())
                .sum()
        })
        .collect()
}

/// Monte-Carlo `E_q[||v||_p^p]` per row. The first sample uses `reuse` where
/// it holds noise for a row; everything else is drawn fresh.
fn sampled_moment<R: Rng + ?Sized>(
    mu: &Table,
    xi: &Table,
    norm: Norm,
    reuse: Option<(&Table, &[bool])>,
    n_samples: usize,
    rng: &mut R,
) -> Vec<f64> {
    let mut acc = vec![0.0; mu.rows()];
    for s in 0..n_samples {
        for (i, a) in acc.iter_mut().enumerate() {
            let reused = match reuse {
                Some((eps, drawn)) if s == 0 && drawn[i] => Some(eps.row(i)),
                _ => None,
            };
            let row_sum: f64 = mu
                .row(i)
                .iter()
                .zip(xi.row(i))
                .enumerate()
                .map(|(k, (m, x))| {
                    let e = match reused {
                        Some(eps) => eps[k],
                        None => rng.sample(StandardNormal),
                    };
                    norm.abs_pow(m + x.exp() * e)
                })
                .sum();
            *a += row_sum;
        }
    }
    acc.iter_mut().for_each(|a| *a /= n_samples as f64);
    acc
}

fn invert_moments(moments: Vec<f64>, width: f64) -> Result<Vec<f64>> {
    moments
        .into_iter()
        .map(|m| {
            if m > 0.0 && m.is_finite() {
                Ok(width / m)
            } else {
                Err(Error::InvalidArgument(format!(
                    "expected p-norm {m} is not positive; lambda_hat undefined"
                )))
            }
        })
        .collect()
}

/// Optimal strengths for the current `q`: `lambda_hat = K' / E_q[||v||_p^p]`.
///
/// `p = 2` uses the closed form `sum mu^2 + sigma^2`; `p = 3` averages
/// `n_samples` reparameterized draws.
pub fn lambda_hat<R: Rng + ?Sized>(
    var: &VariationalParams,
    norm: Norm,
    n_samples: usize,
    rng: &mut R,
) -> Result<Hyperparameters> {
    lambda_hat_reusing(var, norm, None, n_samples, rng)
}

/// [`lambda_hat`] that, for `p = 3`, takes its first sample from an existing
/// noise draw (rows without noise are drawn fresh).
pub fn lambda_hat_reusing<R: Rng + ?Sized>(
    var: &VariationalParams,
    norm: Norm,
    noise: Option<&NoiseDraw>,
    n_samples: usize,
    rng: &mut R,
) -> Result<Hyperparameters> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("lambda_hat needs at least one sample".into()));
    }
    let width = var.mu.space.width() as f64;
    let (ent, rel) = match norm {
        Norm::L2 => (
            closed_form_second_moment(&var.mu.entities, &var.xi.entities),
            closed_form_second_moment(&var.mu.relations, &var.xi.relations),
        ),
        Norm::L3 => {
            let all_entities = vec![true; var.mu.num_entities()];
            let ent_reuse = noise.map(|n| (&n.entities, all_entities.as_slice()));
            let rel_reuse = noise.map(|n| (&n.relations, n.relation_drawn.as_slice()));
            let e = sampled_moment(&var.mu.entities, &var.xi.entities, norm, ent_reuse, n_samples, rng);
            let r = sampled_moment(&var.mu.relations, &var.xi.relations, norm, rel_reuse, n_samples, rng);
            (e, r)
        }
    };
    Hyperparameters::new(invert_moments(ent, width)?, invert_moments(rel, width)?, norm)
}

/// Monte-Carlo `lambda_hat` for any `p`, ignoring the `p = 2` closed form.
pub fn lambda_hat_sampled<R: Rng + ?Sized>(
    var: &VariationalParams,
    norm: Norm,
    n_samples: usize,
    rng: &mut R,
) -> Result<Hyperparameters> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("lambda_hat needs at least one sample".into()));
    }
    let width = var.mu.space.width() as f64;
    let e = sampled_moment(&var.mu.entities, &var.xi.entities, norm, None, n_samples, rng);
    let r = sampled_moment(&var.mu.relations, &var.xi.relations, norm, None, n_samples, rng);
    Hyperparameters::new(invert_moments(e, width)?, invert_moments(r, width)?, norm)
}

/// `lambda <- [(1 - alpha) / lambda + alpha / lambda_hat]^-1`, elementwise.
pub fn mstep_update(lambda: &Hyperparameters, hat: &Hyperparameters, alpha: f64) -> Result<Hyperparameters> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha_lambda must be in (0, 1], got {alpha}")));
    }
    let blend = |cur: &[f64], opt: &[f64]| -> Vec<f64> {
        cur.iter()
            .zip(opt)
            .map(|(&l, &h)| {
                if l == h {
                    l
                } else if alpha == 1.0 {
                    h
                } else {
                    ((1.0 - alpha) / l + alpha / h).recip()
                }
            })
            .collect()
    };
    Hyperparameters::new(
        blend(&lambda.entity, &hat.entity),
        blend(&lambda.relation, &hat.relation),
        lambda.norm,
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Monte-Carlo ELBO over the full training set:
/// `E_q[log p(S' | theta) + log p(theta | lambda)] + H[q]`.
///
/// The log prior here is fully normalized, so the estimate lower-bounds the
/// log of a discrete probability and is at most zero in expectation.
pub fn elbo_estimate<R: RngCore + ?Sized>(
    var: &VariationalParams,
    hyper: &Hyperparameters,
    train: &[Triple],
    n_samples: usize,
    rng: &mut R,
    exec: Execution,
) -> Result<ElboEstimate> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("elbo_estimate needs at least one sample".into()));
    }
    let seeds: Vec<u64> = (0..n_samples).map(|_| rng.next_u64()).collect();
    let normalizer = var.num_coordinates() as f64 * prior_log_normalizer(hyper.norm);
    let entropy = var.entropy();
    let values = exec.try_map(&seeds, |&seed| -> Result<f64> {
        let mut local = ChaCha8Rng::seed_from_u64(seed);
        let theta = var.sample(&mut local);
        let log_lik = -tail_softmax_loss(&theta, train)?;
        Ok(log_lik + log_prior(&theta, hyper) - normalizer + entropy)
    })?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std_error = if values.len() > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(ElboEstimate { mean, std_error })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmConfig {
    /// Pure E-steps with `lambda` frozen.
    pub estep_steps: usize,
    /// Joint E+M steps.
    pub em_steps: usize,
    pub lr_mu: f64,
    pub lr_xi: f64,
    pub lr_lambda: f64,
    pub sigma_init: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Samples per M-step `lambda_hat` (the first reuses the E-step noise).
    pub lambda_hat_samples: usize,
    /// Steps between ELBO records; 0 disables them.
    pub elbo_every: usize,
    pub elbo_samples: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            estep_steps: 1000,
            em_steps: 5000,
            lr_mu: 1e-3,
            lr_xi: 1e-3,
            lr_lambda: 0.1,
            sigma_init: 0.2,
            batch_size: 256,
            seed: 1,
            lambda_hat_samples: 1,
            elbo_every: 100,
            elbo_samples: 8,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_owned()));
        if !(self.lr_mu >= 0.0 && self.lr_xi >= 0.0) {
            return bad("E-step learning rates must be nonnegative");
        }
        if !(self.lr_lambda > 0.0 && self.lr_lambda <= 1.0) {
            return bad("lr_lambda must be in (0, 1]");
        }
        if !(self.sigma_init > 0.0) {
            return bad("sigma_init must be positive");
        }
        if self.batch_size == 0 || self.lambda_hat_samples == 0 {
            return bad("batch_size and lambda_hat_samples must be >= 1");
        }
        if self.elbo_every > 0 && self.elbo_samples == 0 {
            return bad("elbo_samples must be >= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmPhase {
    Init,
    EStep,
    EmStep,
}

impl EmPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            EmPhase::Init => "init",
            EmPhase::EStep => "E",
            EmPhase::EmStep => "EM",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmRecord {
    pub step: usize,
    pub phase: EmPhase,
    pub noisy_loss: f64,
    pub elbo: ElboEstimate,
    pub lambda_min: f64,
    pub lambda_median: f64,
    pub lambda_max: f64,
}

#[derive(Clone, Debug)]
pub struct EmOutcome {
    pub lambda: Hyperparameters,
    pub var: VariationalParams,
    pub trace: Vec<EmRecord>,
}

impl EmOutcome {
    /// `step<TAB>phase<TAB>noisy_loss<TAB>elbo_mean<TAB>elbo_stderr<TAB>lambda_min<TAB>lambda_median<TAB>lambda_max`
    pub fn log_text(&self) -> String {
        let mut s = String::new();
        for r in &self.trace {
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.step,
                r.phase.as_str(),
                r.noisy_loss,
                r.elbo.mean,
                r.elbo.std_error,
                r.lambda_min,
                r.lambda_median,
                r.lambda_max
            )
            .expect("write to String");
        }
        s
    }
}

/// Minimum, median and maximum over all strengths.
pub fn lambda_summary(hyper: &Hyperparameters) -> (f64, f64, f64) {
    let mut all: Vec<f64> = hyper.iter().collect();
    if all.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    all.sort_by(f64::total_cmp);
    let n = all.len();
    let median = if n % 2 == 1 {
        all[n / 2]
    } else {
        0.5 * (all[n / 2 - 1] + all[n / 2])
    };
    (all[0], median, all[n - 1])
}

/// Cycles through seeded epochs of minibatches indefinitely.
struct BatchStream<'a> {
    triples: &'a [Triple],
    batch_size: usize,
    seed: u64,
    epoch: u64,
    current: Minibatches,
    next: usize,
}

impl<'a> BatchStream<'a> {
    fn new(triples: &'a [Triple], batch_size: usize, seed: u64) -> Self {
        BatchStream {
            triples,
            batch_size,
            seed,
            epoch: 0,
            current: minibatch_iter(triples, batch_size, seed, 0),
            next: 0,
        }
    }

    fn next_batch(&mut self) -> Vec<Triple> {
        if self.next >= self.current.len() {
            self.epoch += 1;
            self.current = minibatch_iter(self.triples, self.batch_size, self.seed, self.epoch);
            self.next = 0;
        }
        let b = self.current.iter().nth(self.next).expect("nonempty epoch").to_vec();
        self.next += 1;
        b
    }
}

/// Stream id separating the fixed ELBO noise from the training noise.
const ELBO_STREAM: u64 = 0xE1B0;

/// Runs `estep_steps` pure E-steps and then `em_steps` E+M steps, starting
/// from `q` centered on `pretrained`.
pub fn run_em(
    pretrained: &Parameters,
    dataset: &Dataset,
    lambda_init: &Hyperparameters,
    config: &EmConfig,
    exec: Execution,
) -> Result<EmOutcome> {
    config.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::InvalidArgument("variational EM needs training data".into()));
    }
    let mut var = VariationalParams::init(pretrained, config.sigma_init)?;
    let mut lambda = lambda_init.clone();
    let norm = lambda.norm;
    let freq = dataset.frequencies();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut batches = BatchStream::new(&dataset.train, config.batch_size, config.seed);
    let mut grads = VarGradients::for_var(&var);
    let mut trace = Vec::new();
    let total = config.estep_steps + config.em_steps;
    let n_train = dataset.train.len() as f64;

    let record = |step: usize, phase: EmPhase, noisy: f64, var: &VariationalParams, lambda: &Hyperparameters| {
        let mut elbo_rng = ChaCha8Rng::seed_from_u64(config.seed);
        elbo_rng.set_stream(ELBO_STREAM);
        let elbo = elbo_estimate(var, lambda, &dataset.train, config.elbo_samples, &mut elbo_rng, exec)?;
        let (lambda_min, lambda_median, lambda_max) = lambda_summary(lambda);
        Ok::<_, Error>(EmRecord {
            step,
            phase,
            noisy_loss: noisy,
            elbo,
            lambda_min,
            lambda_median,
            lambda_max,
        })
    };
    if config.elbo_every > 0 {
        trace.push(record(0, EmPhase::Init, f64::NAN, &var, &lambda)?);
    }

    for step in 1..=total {
        let batch = batches.next_batch();
        let noise = NoiseDraw::for_batch(&var, &batch, &mut rng);
        let scale = n_train / batch.len() as f64;
        let noisy = noisy_loss_into(&var, &lambda, &freq, &batch, &noise, scale, &mut grads)?;
        estep_update(&mut var, &grads, config.lr_mu, config.lr_xi);
        let phase = if step > config.estep_steps {
            let hat = lambda_hat_reusing(&var, norm, Some(&noise), config.lambda_hat_samples, &mut rng)?;
            lambda = mstep_update(&lambda, &hat, config.lr_lambda)?;
            EmPhase::EmStep
        } else {
            EmPhase::EStep
        };
        if config.elbo_every > 0 && (step % config.elbo_every == 0 || step == total) {
            trace.push(record(step, phase, noisy, &var, &lambda)?);
        }
    }
    Ok(EmOutcome { lambda, var, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::count_frequencies;
    use crate::model::{EmbeddingSpace, Gradients};
    use rand::Rng;

    fn tiny_var(rng: &mut ChaCha8Rng, space: EmbeddingSpace, n_e: usize, n_rows: usize) -> VariationalParams {
        let mu = Parameters::random(n_e, n_rows, space, 0.7, rng);
        let mut var = VariationalParams::init(&mu, 0.3).unwrap();
        for x in var.xi.entities.as_mut_slice().iter_mut().chain(var.xi.relations.as_mut_slice()) {
            *x = rng.random_range(-2.0..0.0);
        }
        var
    }

    fn random_batch(rng: &mut ChaCha8Rng, n_e: usize, n_rows: usize, len: usize) -> Vec<Triple> {
        (0..len)
            .map(|_| Triple::new(rng.random_range(0..n_e), rng.random_range(0..n_rows), rng.random_range(0..n_e)))
            .collect()
    }

    fn map_loss(params: &Parameters, hyper: &Hyperparameters, freq: &FrequencyTable, batch: &[Triple]) -> f64 {
        let mut g = Gradients::for_params(params);
        minibatch_objective(params, hyper, freq, batch, 1.0, &mut g).unwrap()
    }

    #[test]
    fn init_values() {
        let mu = Parameters::random(3, 2, EmbeddingSpace::real(4), 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let var = VariationalParams::init(&mu, 0.2).unwrap();
        assert_eq!(var.mu, mu);
        assert!(var.xi.entities.as_slice().iter().all(|&x| (x - (-1.6094379124341003)).abs() < 1e-15));
        let var = VariationalParams::init(&mu, 1.0).unwrap();
        assert!(var.xi.relations.as_slice().iter().all(|&x| x == 0.0));
        assert!(VariationalParams::init(&mu, 0.0).is_err());
    }

    #[test]
    fn zero_noise_is_map_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let var = tiny_var(&mut rng, EmbeddingSpace::complex(2), 5, 4);
        let batch = random_batch(&mut rng, 5, 4, 5);
        let freq = count_frequencies(&batch, 5, 2);
        let hyper = Hyperparameters::uniform(5, 4, 0.5, Norm::L2);
        let (v, g) = noisy_loss(&var, &hyper, &freq, &batch, &NoiseDraw::zeros(&var), 1.0).unwrap();
        assert_eq!(v, map_loss(&var.mu, &hyper, &freq, &batch));
        assert!(g.xi.entities.as_slice().iter().chain(g.xi.relations.as_slice()).all(|&x| x == 0.0));
    }

    #[test]
    fn collapsed_posterior_is_map_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut var = tiny_var(&mut rng, EmbeddingSpace::real(3), 5, 4);
        var.xi.entities.as_mut_slice().fill(-30.0);
        var.xi.relations.as_mut_slice().fill(-30.0);
        let batch = random_batch(&mut rng, 5, 4, 5);
        let freq = count_frequencies(&batch, 5, 2);
        let hyper = Hyperparameters::uniform(5, 4, 1.5, Norm::L3);
        let noise = NoiseDraw::full(&var, &mut rng);
        let (v, _) = noisy_loss(&var, &hyper, &freq, &batch, &noise, 1.0).unwrap();
        assert!((v - map_loss(&var.mu, &hyper, &freq, &batch)).abs() < 1e-9);
    }

    #[test]
    fn reparameterization_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for space in [EmbeddingSpace::real(3), EmbeddingSpace::complex(2)] {
            for norm in [Norm::L2, Norm::L3] {
                let var = tiny_var(&mut rng, space, 5, 4);
                let batch = random_batch(&mut rng, 5, 4, 6);
                let freq = count_frequencies(&batch, 5, 2);
                let hyper = Hyperparameters::uniform(5, 4, 0.8, norm);
                let noise = NoiseDraw::for_batch(&var, &batch, &mut rng);
                let (_, g) = noisy_loss(&var, &hyper, &freq, &batch, &noise, 2.0).unwrap();
                let value = |v: &VariationalParams| noisy_loss(v, &hyper, &freq, &batch, &noise, 2.0).unwrap().0;
                let h = 1e-5;
                type Block = fn(&mut VariationalParams) -> &mut Table;
                let blocks: [(Block, &Table); 4] = [
                    (|v| &mut v.mu.entities, &g.mu.entities),
                    (|v| &mut v.mu.relations, &g.mu.relations),
                    (|v| &mut v.xi.entities, &g.xi.entities),
                    (|v| &mut v.xi.relations, &g.xi.relations),
                ];
                for (select, grad) in blocks {
                    for i in 0..grad.as_slice().len() {
                        let mut plus = var.clone();
                        let mut minus = var.clone();
                        select(&mut plus).as_mut_slice()[i] += h;
                        select(&mut minus).as_mut_slice()[i] -= h;
                        let fd = (value(&plus) - value(&minus)) / (2.0 * h);
                        let an = grad.as_slice()[i];
                        assert!((fd - an).abs() <= 1e-6 + 1e-5 * an.abs(), "{space:?} {norm:?} {fd} {an}");
                    }
                }
            }
        }
    }

    #[test]
    fn estep_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let var0 = tiny_var(&mut rng, EmbeddingSpace::real(2), 3, 2);
        let mut grads = VarGradients::for_var(&var0);
        grads.mu.entity_touched.fill(true);
        grads.xi.entity_touched.fill(true);

        let mut var = var0.clone();
        estep_update(&mut var, &grads, 0.5, 0.25);
        assert_eq!(var.mu, var0.mu);
        for (a, b) in var.xi.entities.as_slice().iter().chain(var.xi.relations.as_slice()).zip(
            var0.xi.entities.as_slice().iter().chain(var0.xi.relations.as_slice()),
        ) {
            assert_eq!(*a, b + 0.25);
        }

        let mut var = var0.clone();
        estep_update(&mut var, &grads, 0.0, 0.0);
        assert_eq!(var, var0);

        grads.xi.entities.as_mut_slice()[1] = 1.0;
        let mut var = var0.clone();
        estep_update(&mut var, &grads, 0.1, 0.1);
        assert_eq!(var.xi.entities.as_slice()[1], var0.xi.entities.as_slice()[1]);
    }

    #[test]
    fn lambda_hat_closed_form_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mu = Parameters::zeros(1, 1, EmbeddingSpace::real(100));
        let var = VariationalParams::init(&mu, 1.0).unwrap();
        let hat = lambda_hat(&var, Norm::L2, 1, &mut rng).unwrap();
        assert!((hat.entity[0] - 1.0).abs() < 1e-15);

        let mut mu = Parameters::zeros(1, 1, EmbeddingSpace::real(2));
        mu.entities.as_mut_slice()[0] = 3.0;
        let mut var = VariationalParams::init(&mu, 1.0).unwrap();
        var.xi.entities.as_mut_slice()[0] = -30.0;
        let hat = lambda_hat(&var, Norm::L2, 1, &mut rng).unwrap();
        assert!((hat.entity[0] - 0.2).abs() < 1e-12);

        let var = VariationalParams::init(&Parameters::zeros(1, 1, EmbeddingSpace::real(2)), 1e-300).unwrap();
        assert!(lambda_hat(&var, Norm::L2, 1, &mut rng).is_err());
    }

    #[test]
    fn lambda_hat_third_moment_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let var = VariationalParams::init(&Parameters::zeros(1, 1, EmbeddingSpace::real(1)), 1.0).unwrap();
        let hat = lambda_hat(&var, Norm::L3, 100_000, &mut rng).unwrap();
        let exact = 1.0 / (2.0 * (2.0 / std::f64::consts::PI).sqrt());
        assert!((hat.entity[0] / exact - 1.0).abs() < 0.02);
        assert!((exact - 0.6267).abs() < 1e-4);
    }

    #[test]
    fn lambda_hat_reuses_step_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let var = tiny_var(&mut rng, EmbeddingSpace::real(3), 4, 2);
        let noise = NoiseDraw::full(&var, &mut rng);
        let from_noise = lambda_hat_reusing(&var, Norm::L3, Some(&noise), 1, &mut rng).unwrap();
        let theta = var.sample_with(&noise);
        for (e, l) in from_noise.entity.iter().enumerate() {
            let want = 3.0 / Norm::L3.norm_pow(theta.entities.row(e));
            assert!((l - want).abs() < 1e-12 * want);
        }
    }

    #[test]
    fn mstep_examples() {
        let l = Hyperparameters::new(vec![2.0], vec![], Norm::L2).unwrap();
        let h = Hyperparameters::new(vec![4.0], vec![], Norm::L2).unwrap();
        let got = mstep_update(&l, &h, 0.5).unwrap();
        assert!((got.entity[0] - 8.0 / 3.0).abs() < 1e-15);
        assert_eq!(mstep_update(&l, &h, 1.0).unwrap().entity, vec![4.0]);
        for alpha in [1e-3, 0.1, 0.5, 0.99, 1.0] {
            let odd = Hyperparameters::new(vec![0.3, 7.1e5], vec![1.0 / 3.0], Norm::L3).unwrap();
            assert_eq!(mstep_update(&odd, &odd, alpha).unwrap(), odd);
        }
        assert!(mstep_update(&l, &h, 0.0).is_err());
        assert!(mstep_update(&l, &h, 1.5).is_err());
    }

    #[test]
    fn elbo_of_empty_dataset_is_entropy_plus_prior() {
        // with no data the estimate is E_q[log prior] + H
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut mu = Parameters::zeros(1, 0, EmbeddingSpace::real(1));
        mu.entities.as_mut_slice()[0] = 0.4;
        let var = VariationalParams::init(&mu, 0.5).unwrap();
        let hyper = Hyperparameters::uniform(1, 0, 2.0, Norm::L2);
        let est = elbo_estimate(&var, &hyper, &[], 200_000, &mut rng, Execution::Sequential).unwrap();
        let (m, s, l) = (0.4f64, 0.5f64, 2.0f64);
        let pi2 = 2.0 * std::f64::consts::PI;
        let expected_log_prior = 0.5 * (l / pi2).ln() - 0.5 * l * (m * m + s * s);
        let entropy = s.ln() + 0.5 * (pi2 * std::f64::consts::E).ln();
        let want = expected_log_prior + entropy;
        assert!((est.mean - want).abs() < 4.0 * est.std_error, "{} {} {}", est.mean, want, est.std_error);
    }

    #[test]
    fn elbo_collapse_is_strongly_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut var = tiny_var(&mut rng, EmbeddingSpace::real(2), 3, 2);
        var.xi.entities.as_mut_slice().fill(-30.0);
        var.xi.relations.as_mut_slice().fill(-30.0);
        let hyper = Hyperparameters::uniform(3, 2, 1.0, Norm::L2);
        let train = augment_pairs();
        let est = elbo_estimate(&var, &hyper, &train, 4, &mut rng, Execution::Sequential).unwrap();
        assert!(est.mean < -30.0 * var.num_coordinates() as f64 * 0.9);
    }

    fn augment_pairs() -> Vec<Triple> {
        crate::data::augment_reciprocal(&[Triple::new(0, 0, 1), Triple::new(1, 0, 2)], 1)
    }

    #[test]
    fn elbo_is_self_consistent_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let var = tiny_var(&mut rng, EmbeddingSpace::real(2), 3, 2);
        let hyper = Hyperparameters::uniform(3, 2, 1.3, Norm::L2);
        let train = augment_pairs();
        let small = elbo_estimate(&var, &hyper, &train, 10_000, &mut rng, Execution::Parallel).unwrap();
        let big = elbo_estimate(&var, &hyper, &train, 1_000_000, &mut rng, Execution::Parallel).unwrap();
        let se = (small.std_error.powi(2) + big.std_error.powi(2)).sqrt();
        assert!((small.mean - big.mean).abs() < 3.0 * se);
        assert!(big.mean <= 3.0 * big.std_error);
    }

    #[test]
    fn elbo_is_identical_across_execution_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let var = tiny_var(&mut rng, EmbeddingSpace::complex(2), 3, 2);
        let hyper = Hyperparameters::uniform(3, 2, 1.0, Norm::L3);
        let train = augment_pairs();
        let a = elbo_estimate(&var, &hyper, &train, 16, &mut ChaCha8Rng::seed_from_u64(1), Execution::Parallel).unwrap();
        let b = elbo_estimate(&var, &hyper, &train, 16, &mut ChaCha8Rng::seed_from_u64(1), Execution::Sequential).unwrap();
        assert_eq!(a, b);
    }

    fn tiny_dataset() -> Dataset {
        let train = [Triple::new(0, 0, 1), Triple::new(1, 0, 2), Triple::new(2, 0, 0), Triple::new(0, 0, 2)];
        Dataset::from_raw(&train, &train[..1], &train[1..2], 3, 1).unwrap()
    }

    #[test]
    fn frozen_lambda_without_em_steps() {
        let ds = tiny_dataset();
        let mu = Parameters::random(3, 2, EmbeddingSpace::real(2), 0.3, &mut ChaCha8Rng::seed_from_u64(1));
        let lambda = Hyperparameters::uniform(3, 2, 0.7, Norm::L2);
        let config = EmConfig { estep_steps: 20, em_steps: 0, batch_size: 3, elbo_every: 5, ..EmConfig::default() };
        let out = run_em(&mu, &ds, &lambda, &config, Execution::Sequential).unwrap();
        assert_eq!(out.lambda, lambda);
        assert_ne!(out.var.mu, mu);
        let steps: Vec<usize> = out.trace.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 5, 10, 15, 20]);
        assert_eq!(out.log_text().lines().count(), 5);
    }

    #[test]
    fn single_em_step_jumps_to_lambda_hat() {
        let ds = tiny_dataset();
        let mu = Parameters::random(3, 2, EmbeddingSpace::real(2), 0.3, &mut ChaCha8Rng::seed_from_u64(1));
        let lambda = Hyperparameters::uniform(3, 2, 0.7, Norm::L2);
        let config = EmConfig {
            estep_steps: 0,
            em_steps: 1,
            lr_mu: 0.0,
            lr_xi: 0.0,
            lr_lambda: 1.0,
            elbo_every: 0,
            ..EmConfig::default()
        };
        let out = run_em(&mu, &ds, &lambda, &config, Execution::Sequential).unwrap();
        let init = VariationalParams::init(&mu, config.sigma_init).unwrap();
        let hat = lambda_hat(&init, Norm::L2, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.lambda, hat);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn run_em_is_deterministic() {
        let ds = tiny_dataset();
        let mu = Parameters::random(3, 2, EmbeddingSpace::complex(2), 0.3, &mut ChaCha8Rng::seed_from_u64(1));
        let lambda = Hyperparameters::uniform(3, 2, 0.7, Norm::L3);
        let config = EmConfig { estep_steps: 5, em_steps: 30, batch_size: 2, elbo_every: 10, ..EmConfig::default() };
        let a = run_em(&mu, &ds, &lambda, &config, Execution::Parallel).unwrap();
        let b = run_em(&mu, &ds, &lambda, &config, Execution::Sequential).unwrap();
        assert_eq!(a.lambda, b.lambda);
        assert_eq!(a.var, b.var);
        assert_eq!(a.log_text(), b.log_text());
    }

    #[test]
    fn summary_and_config_checks() {
        let h = Hyperparameters::new(vec![3.0, 1.0], vec![2.0, 10.0], Norm::L2).unwrap();
        assert_eq!(lambda_summary(&h), (1.0, 2.5, 10.0));
        assert!(EmConfig { lr_lambda: 0.0, ..EmConfig::default() }.validate().is_err());
        assert!(EmConfig { batch_size: 0, ..EmConfig::default() }.validate().is_err());
        assert!(EmConfig::default().validate().is_ok());
    }
}
