//! Why joint point estimation of embeddings and strengths diverges while the
//! variational objective stays bounded.

use statrs::function::gamma::gamma;

use crate::model::{Norm, Parameters};

/// `c_p = E|eps|^p` for standard-normal `eps`:
/// `2^(p/2) Gamma((p + 1) / 2) / sqrt(pi)`.
pub fn absolute_moment(p: f64) -> f64 {
    2f64.powf(p / 2.0) * gamma((p + 1.0) / 2.0) / std::f64::consts::PI.sqrt()
}

/// Per-coordinate prior-plus-entropy objective in `u = lambda sigma^p`,
/// `(1/p) [log u - c_p u]`.
pub fn prior_entropy_objective(u: f64, norm: Norm) -> f64 {
    let p = norm.p();
    (u.ln() - absolute_moment(p) * u) / p
}

/// Finite maximizer `u* = 1 / c_p` of [`prior_entropy_objective`].
pub fn analytic_prior_entropy_optimum(norm: Norm) -> f64 {
    absolute_moment(norm.p()).recip()
}

/// The strengths that maximize the log joint at a fixed point estimate,
/// `K' / ||v||_p^p` per vector. Infinite for vectors that are exactly zero.
pub fn naive_lambda(params: &Parameters, norm: Norm) -> (Vec<f64>, Vec<f64>) {
    let width = params.space.width() as f64;
    let per = |t: &crate::model::Table| -> Vec<f64> {
        t.iter_rows()
            .map(|row| {
                let n = norm.norm_pow(row);
                if n == 0.0 {
                    f64::INFINITY
                } else {
                    width / n
                }
            })
            .collect()
    };
    (per(&params.entities), per(&params.relations))
}
