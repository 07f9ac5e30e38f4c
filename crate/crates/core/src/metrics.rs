//! Point and probabilistic forecast evaluation.
//!
//! Point errors are taken with respect to the predictive median. `Cov_α` is
//! one-sided (truth at or below the α-quantile) and `FIC_α` is central
//! interval coverage at nominal mass α. Summations run in record order so
//! results are reproducible bit for bit.

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::likelihood::PredictiveDistribution;

/// Levels reported for QL, Cov and FIC.
pub const LEVELS: [f64; 3] = [0.1, 0.5, 0.9];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no records to evaluate")]
    Empty,
    #[error("record {0} carries a point forecast but a distribution is required")]
    NotProbabilistic(usize),
    #[error("records mix point and probabilistic forecasts")]
    MixedKinds,
    #[error("level {0} must lie strictly inside (0, 1)")]
    InvalidLevel(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Forecast {
    Distribution(PredictiveDistribution),
    Point(f64),
}

impl Forecast {
    /// Median for distributions, the raw value for point forecasts.
    pub fn center(&self) -> f64 {
        match self {
            Forecast::Distribution(d) => d.median(),
            Forecast::Point(v) => *v,
        }
    }

    pub fn distribution(&self) -> Option<&PredictiveDistribution> {
        match self {
            Forecast::Distribution(d) => Some(d),
            Forecast::Point(_) => None,
        }
    }
}

/// One forecast step paired with the realised value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub beam_id: String,
    pub timestamp: NaiveDateTime,
    pub truth: f64,
    pub forecast: Forecast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub crps: Option<f64>,
    /// Quantile loss at [`LEVELS`].
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ql: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cov: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fic: Option<[f64; 3]>,
    pub count: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: [&'static str; 15] = [
        "model", "mse", "mae", "rmse", "crps", "ql_0.1", "ql_0.5", "ql_0.9", "cov_0.1", "cov_0.5", "cov_0.9",
        "fic_0.1", "fic_0.5", "fic_0.9", "n",
    ];

    /// Row in [`Self::CSV_HEADER`] order; probabilistic cells are empty for
    /// point-forecast models.
    pub fn csv_record(&self, model: &str) -> Vec<String> {
        let mut row = vec![
            model.to_string(),
            self.mse.to_string(),
            self.mae.to_string(),
            self.rmse.to_string(),
        ];
        row.push(self.crps.map(|v| v.to_string()).unwrap_or_default());
        for triple in [self.ql, self.cov, self.fic] {
            match triple {
                Some(vals) => row.extend(vals.iter().map(|v| v.to_string())),
                None => row.extend(std::iter::repeat_n(String::new(), 3)),
            }
        }
        row.push(self.count.to_string());
        row
    }
}

/// Quantile (pinball) loss of prediction `q` for outcome `y` at level `alpha`.
pub fn pinball(q: f64, y: f64, alpha: f64) -> f64 {
    if y >= q {
        alpha * (y - q)
    } else {
        (1.0 - alpha) * (q - y)
    }
}

/// `(mse, mae, rmse)` of the forecast centers.
pub fn point_metrics(records: &[EvalRecord]) -> Result<(f64, f64, f64), MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let (mut se, mut ae) = (0.0, 0.0);
    for r in records {
        let e = r.truth - r.forecast.center();
        se += e * e;
        ae += e.abs();
    }
    let n = records.len() as f64;
    let mse = se / n;
    Ok((mse, ae / n, mse.sqrt()))
}

fn check_level(alpha: f64) -> Result<(), MetricsError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(MetricsError::InvalidLevel(alpha))
    }
}

fn distributions(records: &[EvalRecord]) -> Result<Vec<&PredictiveDistribution>, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    records
        .iter()
        .enumerate()
        .map(|(i, r)| r.forecast.distribution().ok_or(MetricsError::NotProbabilistic(i)))
        .collect()
}

fn quantile(d: &PredictiveDistribution, p: f64) -> f64 {
    d.quantile(p).expect("level validated by caller")
}

/// Mean pinball loss of the α-quantiles.
pub fn quantile_loss(records: &[EvalRecord], alpha: f64) -> Result<f64, MetricsError> {
    check_level(alpha)?;
    let dists = distributions(records)?;
    let total: f64 = dists
        .iter()
        .zip(records)
        .map(|(d, r)| pinball(quantile(d, alpha), r.truth, alpha))
        .sum();
    Ok(total / records.len() as f64)
}

/// Fraction of records with `y <= quantile(alpha)`.
pub fn coverage(records: &[EvalRecord], alpha: f64) -> Result<f64, MetricsError> {
    check_level(alpha)?;
    let dists = distributions(records)?;
    let hits = dists
        .iter()
        .zip(records)
        .filter(|(d, r)| r.truth <= quantile(d, alpha))
        .count();
    Ok(hits as f64 / records.len() as f64)
}

/// Fraction of records inside the central interval of mass `alpha`.
pub fn fic(records: &[EvalRecord], alpha: f64) -> Result<f64, MetricsError> {
    check_level(alpha)?;
    let dists = distributions(records)?;
    let (lo, hi) = (0.5 * (1.0 - alpha), 0.5 * (1.0 + alpha));
    let hits = dists
        .iter()
        .zip(records)
        .filter(|(d, r)| quantile(d, lo) <= r.truth && r.truth <= quantile(d, hi))
        .count();
    Ok(hits as f64 / records.len() as f64)
}

pub fn crps_mean(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    let dists = distributions(records)?;
    let total: f64 = dists.iter().zip(records).map(|(d, r)| d.crps(r.truth)).sum();
    Ok(total / records.len() as f64)
}

/// Full report. Probabilistic fields are filled only when every record
/// carries a distribution.
pub fn evaluate(records: &[EvalRecord]) -> Result<MetricsReport, MetricsError> {
    let (mse, mae, rmse) = point_metrics(records)?;
    let n_dist = records
        .iter()
        .filter(|r| r.forecast.distribution().is_some())
        .count();
    let mut report = MetricsReport {
        mse,
        mae,
        rmse,
        crps: None,
        ql: None,
        cov: None,
        fic: None,
        count: records.len(),
    };
    if n_dist == 0 {
        return Ok(report);
    }
    if n_dist != records.len() {
        return Err(MetricsError::MixedKinds);
    }
    let triple = |f: &dyn Fn(f64) -> Result<f64, MetricsError>| -> Result<[f64; 3], MetricsError> {
        Ok([f(LEVELS[0])?, f(LEVELS[1])?, f(LEVELS[2])?])
    };
    report.crps = Some(crps_mean(records)?);
    report.ql = Some(triple(&|a| quantile_loss(records, a))?);
    report.cov = Some(triple(&|a| coverage(records, a))?);
    report.fic = Some(triple(&|a| fic(records, a))?);
    Ok(report)
}
