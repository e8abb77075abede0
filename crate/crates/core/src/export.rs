//! Learned strengths next to symbol frequencies, as CSV for plotting, plus the
//! least-squares proportional fit `lambda ~ c * n`.

use std::path::Path;

use crate::data::{FrequencyTable, Vocab};
use crate::error::{Error, Result};
use crate::model::Hyperparameters;

pub const ENTITY_FILE: &str = "entity_lambdas.csv";
pub const RELATION_FILE: &str = "relation_lambdas.csv";
pub const FIT_FILE: &str = "lambda_fit.txt";

/// One CSV row: symbol name, training frequency, strength.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaRow {
    pub name: String,
    pub frequency: u64,
    pub lambda: f64,
}

/// `argmin_c sum (lambda_i - c n_i)^2 = sum lambda n / sum n^2`; `None` if every count is zero.
pub fn proportional_fit(lambdas: &[f64], counts: &[u64]) -> Option<f64> {
    let (num, den) = lambdas
        .iter()
        .zip(counts)
        .fold((0.0, 0.0), |(num, den), (&l, &n)| {
            let n = n as f64;
            (num + l * n, den + n * n)
        });
    (den > 0.0).then(|| num / den)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaFit {
    pub entity: Option<f64>,
    pub relation: Option<f64>,
}

fn rows(names: &[String], counts: &[u64], lambdas: &[f64]) -> Result<Vec<LambdaRow>> {
    if names.len() != counts.len() || counts.len() != lambdas.len() {
        return Err(Error::InvalidArgument(format!(
            "{} names, {} frequencies, {} strengths",
            names.len(),
            counts.len(),
            lambdas.len()
        )));
    }
    Ok(names
        .iter()
        .zip(counts)
        .zip(lambdas)
        .map(|((name, &frequency), &lambda)| LambdaRow {
            name: name.clone(),
            frequency,
            lambda,
        })
        .collect())
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let source = match e.into_kind() {
        csv::ErrorKind::Io(io) => io,
        other => std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{other:?}")),
    };
    Error::io(path, source)
}

/// Writes `name,frequency,lambda` rows under a header line.
pub fn write_lambda_csv(path: &Path, kind: &str, rows: &[LambdaRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = [format!("{kind}_name"), "frequency".into(), "lambda".into()];
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record([r.name.clone(), r.frequency.to_string(), r.lambda.to_string()])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_lambda_csv(path: &Path) -> Result<Vec<LambdaRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let bad = || Error::Parse {
            path: path.to_owned(),
            line: i + 2,
            found: rec.len(),
        };
        if rec.len() != 3 {
            return Err(bad());
        }
        out.push(LambdaRow {
            name: rec[0].to_owned(),
            frequency: rec[1].parse().map_err(|_| bad())?,
            lambda: rec[2].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Default names `e0, e1, ...` and `r0, r1, ...` when no vocabulary is at hand.
pub fn placeholder_names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// Writes the entity and relation CSVs and the fit coefficients into `out_dir`.
pub fn export_lambdas(
    lambda: &Hyperparameters,
    freq: &FrequencyTable,
    vocab: Option<&Vocab>,
    out_dir: &Path,
) -> Result<LambdaFit> {
    let (entity_names, relation_names) = match vocab {
        Some(v) => (v.entity_names().to_vec(), v.relation_names().to_vec()),
        None => (
            placeholder_names("e", lambda.entity.len()),
            placeholder_names("r", lambda.relation.len()),
        ),
    };
    let entity_rows = rows(&entity_names, &freq.entity, &lambda.entity)?;
    let relation_rows = rows(&relation_names, &freq.relation, &lambda.relation)?;
    write_lambda_csv(&out_dir.join(ENTITY_FILE), "entity", &entity_rows)?;
    write_lambda_csv(&out_dir.join(RELATION_FILE), "relation", &relation_rows)?;

    let fit = LambdaFit {
        entity: proportional_fit(&lambda.entity, &freq.entity),
        relation: proportional_fit(&lambda.relation, &freq.relation),
    };
    let show = |c: Option<f64>| c.map_or_else(|| "nan".to_owned(), |c| c.to_string());
    let text = format!("entity\t{}\nrelation\t{}\n", show(fit.entity), show(fit.relation));
    let fit_path = out_dir.join(FIT_FILE);
    std::fs::write(&fit_path, text).map_err(|e| Error::io(&fit_path, e))?;
    Ok(fit)
}
