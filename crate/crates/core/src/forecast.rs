//! Growth-curve fitting, horizon-weighted model selection and wear-limit
//! crossing prediction.
//!
//! Candidates are fitted on successively longer prefixes of the corrected
//! series (at least four points) and scored on the points that follow. The
//! per-prefix error weights each look-ahead step `j` by the bell
//!
//! ```text
//! f(j) = exp(-decay * (ceil(alpha / 2) - j)^2)
//! ```
//!
//! and is computed literally as `(1/J) * sum_j sqrt(f(j) * (pred - truth)^2)`.
//! Since `sqrt(x^2) = |x|`, this is a weighted mean *absolute* error even
//! though it is conventionally labelled RMSE. The aggregate loss sums the
//! per-prefix errors weighted by `1/beta`, which rewards candidates that are
//! accurate with little data.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expert::{CorrectedSeries, Measurement};

pub const MIN_TRAIN_POINTS: usize = 4;
pub const MIN_SERIES_POINTS: usize = MIN_TRAIN_POINTS + 1;
pub const DEFAULT_ALPHA: u32 = 7;
pub const WEIGHT_DECAY: f64 = 0.15;
pub const DEFAULT_WEAR_LIMIT_MM2: f64 = 0.9;
pub const DEFAULT_BAND: f64 = 0.20;
pub const CROSSING_WINDOW: f64 = 1e4;
pub const CROSSING_TOLERANCE: f64 = 1e-6;
pub const SCAN_INTERVAL_HOURS: f64 = 4.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForecastError {
    #[error("{kind} fit needs at least {needed} points, got {got}")]
    InsufficientFitData {
        kind: CandidateKind,
        needed: usize,
        got: usize,
    },
    #[error("forecasting needs at least {needed} points (four to train, one to evaluate), got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("exponential fit requires positive areas, found {area} at t={t}")]
    NonPositiveArea { t: u32, area: f64 },
    #[error("{kind} least-squares system is singular")]
    Singular { kind: CandidateKind },
    #[error("fit on the first {beta} points failed: {source}")]
    PrefixFit {
        beta: usize,
        #[source]
        source: Box<ForecastError>,
    },
    #[error("evaluation window is empty")]
    EmptyWindow,
    #[error("every candidate failed: {}", .0.iter().map(|(k, e)| format!("{k}: {e}")).collect::<Vec<_>>().join("; "))]
    AllCandidatesFailed(Vec<(CandidateKind, String)>),
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateKind {
    Linear,
    Poly2,
    Poly3,
    Exponential,
}

impl CandidateKind {
    pub const ALL: [CandidateKind; 4] = [
        CandidateKind::Linear,
        CandidateKind::Poly2,
        CandidateKind::Poly3,
        CandidateKind::Exponential,
    ];

    pub fn coefficient_count(self) -> usize {
        match self {
            CandidateKind::Linear | CandidateKind::Exponential => 2,
            CandidateKind::Poly2 => 3,
            CandidateKind::Poly3 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CandidateKind::Linear => "linear",
            CandidateKind::Poly2 => "poly2",
            CandidateKind::Poly3 => "poly3",
            CandidateKind::Exponential => "exponential",
        }
    }
}

impl fmt::Display for CandidateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CandidateKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CandidateKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown candidate kind {s:?}"))
    }
}

/// A fitted growth curve.
///
/// Polynomial coefficients are in ascending powers of `t`; the exponential
/// stores `(c, b)` for `c * exp(b * t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub kind: CandidateKind,
    pub coefficients: Vec<f64>,
    pub train_count: usize,
    /// Timestep of the last training point; look-ahead steps count from here.
    pub last_t: u32,
    /// Residual sum of squares on the training points, in area units.
    pub rss: f64,
}

impl FitResult {
    pub fn predict(&self, t: f64) -> f64 {
        let v = match self.kind {
            CandidateKind::Exponential => self.coefficients[0] * (self.coefficients[1] * t).exp(),
            _ => self.coefficients.iter().rev().fold(0.0, |acc, c| acc * t + c),
        };
        if v.is_nan() {
            0.0
        } else {
            v.clamp(f64::MIN, f64::MAX)
        }
    }
}

/// Least-squares fit of `kind` to `points`.
pub fn fit(kind: CandidateKind, points: &[Measurement]) -> Result<FitResult, ForecastError> {
    if points.len() < MIN_TRAIN_POINTS {
        return Err(ForecastError::InsufficientFitData {
            kind,
            needed: MIN_TRAIN_POINTS,
            got: points.len(),
        });
    }
    let ts: Vec<f64> = points.iter().map(|m| m.t as f64).collect();
    let coefficients = match kind {
        CandidateKind::Exponential => {
            if let Some(m) = points.iter().find(|m| m.area.is_nan() || m.area <= 0.0) {
                return Err(ForecastError::NonPositiveArea { t: m.t, area: m.area });
            }
            let logs: Vec<f64> = points.iter().map(|m| m.area.ln()).collect();
            let line = polyfit(&ts, &logs, 1).ok_or(ForecastError::Singular { kind })?;
            vec![line[0].exp(), line[1]]
        }
        _ => {
            let ys: Vec<f64> = points.iter().map(|m| m.area).collect();
            polyfit(&ts, &ys, kind.coefficient_count() - 1).ok_or(ForecastError::Singular { kind })?
        }
    };
    let mut result = FitResult {
        kind,
        coefficients,
        train_count: points.len(),
        last_t: points.last().map_or(0, |m| m.t),
        rss: 0.0,
    };
    result.rss = points
        .iter()
        .map(|m| (result.predict(m.t as f64) - m.area).powi(2))
        .sum();
    Ok(result)
}

// Vandermonde least squares with column equilibration, solved by SVD.
fn polyfit(ts: &[f64], ys: &[f64], degree: usize) -> Option<Vec<f64>> {
    let n = ts.len();
    let cols = degree + 1;
    let mut a = DMatrix::from_fn(n, cols, |i, j| ts[i].powi(j as i32));
    let mut scale = vec![1.0; cols];
    for (j, s) in scale.iter_mut().enumerate() {
        let norm = a.column(j).norm();
        if norm > 0.0 {
            *s = norm;
            a.column_mut(j).scale_mut(1.0 / norm);
        }
    }
    let b = DVector::from_column_slice(ys);
    let svd = a.svd(true, true);
    let max_sv = svd.singular_values.max();
    if svd.singular_values.min() <= max_sv * 1e-13 {
        return None;
    }
    let x = svd.solve(&b, 0.0).ok()?;
    let coeffs: Vec<f64> = x.iter().zip(&scale).map(|(c, s)| c / s).collect();
    coeffs.iter().all(|c| c.is_finite()).then_some(coeffs)
}

/// Weighting and horizon of the prefix error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: u32,
    pub decay: f64,
    /// Maximum look-ahead; `None` evaluates on all remaining points.
    pub horizon: Option<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            decay: WEIGHT_DECAY,
            horizon: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ForecastError> {
        if self.alpha.is_multiple_of(2) {
            return Err(ForecastError::InvalidConfig(format!(
                "alpha must be an odd positive integer, got {}",
                self.alpha
            )));
        }
        if !(self.decay.is_finite() && self.decay >= 0.0) {
            return Err(ForecastError::InvalidConfig(format!("decay must be >= 0, got {}", self.decay)));
        }
        if self.horizon == Some(0) {
            return Err(ForecastError::InvalidConfig("horizon must be at least 1".into()));
        }
        Ok(())
    }

    /// Look-ahead step with the highest weight, `ceil(alpha / 2)`.
    pub fn peak(&self) -> u32 {
        self.alpha.div_ceil(2)
    }

    pub fn weight(&self, j: u32) -> f64 {
        let d = self.peak() as f64 - j as f64;
        (-self.decay * d * d).exp()
    }
}

/// Horizon-weighted error of `fit` on the points after its training data.
pub fn weighted_error(
    fit: &FitResult,
    truth: &[Measurement],
    cfg: &LossConfig,
) -> Result<f64, ForecastError> {
    error_with_weights(fit, truth, |j| cfg.weight(j))
}

/// Unweighted base error `(1/J) sum |pred - truth|`.
pub fn base_error(fit: &FitResult, truth: &[Measurement]) -> Result<f64, ForecastError> {
    error_with_weights(fit, truth, |_| 1.0)
}

fn error_with_weights(
    fit: &FitResult,
    truth: &[Measurement],
    weight: impl Fn(u32) -> f64,
) -> Result<f64, ForecastError> {
    if truth.is_empty() {
        return Err(ForecastError::EmptyWindow);
    }
    let sum: f64 = truth
        .iter()
        .map(|m| {
            let j = m.t.saturating_sub(fit.last_t);
            let diff = fit.predict(m.t as f64) - m.area;
            (weight(j) * diff * diff).sqrt()
        })
        .sum();
    Ok(sum / truth.len() as f64)
}

/// Per-prefix terms of the aggregate loss: `(beta, error)` pairs.
pub fn prefix_errors(
    kind: CandidateKind,
    series: &[Measurement],
    cfg: &LossConfig,
) -> Result<Vec<(usize, f64)>, ForecastError> {
    cfg.validate()?;
    let n = series.len();
    if n < MIN_SERIES_POINTS {
        return Err(ForecastError::InsufficientData {
            needed: MIN_SERIES_POINTS,
            got: n,
        });
    }
    (MIN_TRAIN_POINTS..n)
        .map(|beta| {
            let f = fit(kind, &series[..beta]).map_err(|e| ForecastError::PrefixFit {
                beta,
                source: Box::new(e),
            })?;
            let remaining = n - beta;
            let j = cfg.horizon.map_or(remaining, |h| h.min(remaining));
            Ok((beta, weighted_error(&f, &series[beta..beta + j], cfg)?))
        })
        .collect()
}

/// `sum over beta of error(beta) / beta`, for beta from 4 to N-1.
pub fn aggregate_loss(
    kind: CandidateKind,
    series: &[Measurement],
    cfg: &LossConfig,
) -> Result<f64, ForecastError> {
    Ok(prefix_errors(kind, series, cfg)?
        .into_iter()
        .map(|(beta, e)| e / beta as f64)
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateLoss {
    pub kind: CandidateKind,
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub losses: Vec<CandidateLoss>,
    pub selected: CandidateKind,
}

// Losses this close are treated as equal so that float noise on exact
// fits does not override the parsimony tie-break.
fn loss_ties(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 + 1e-9 * a.abs().max(b.abs())
}

/// Score every candidate and pick the smallest aggregate loss. Ties go to
/// fewer coefficients, then to enumeration order.
pub fn select_model(series: &[Measurement], cfg: &LossConfig) -> Result<Selection, ForecastError> {
    cfg.validate()?;
    if series.len() < MIN_SERIES_POINTS {
        return Err(ForecastError::InsufficientData {
            needed: MIN_SERIES_POINTS,
            got: series.len(),
        });
    }
    let losses: Vec<CandidateLoss> = CandidateKind::ALL
        .iter()
        .map(|&kind| match aggregate_loss(kind, series, cfg) {
            Ok(loss) => CandidateLoss {
                kind,
                loss: Some(loss),
                error: None,
            },
            Err(e) => CandidateLoss {
                kind,
                loss: None,
                error: Some(e.to_string()),
            },
        })
        .collect();

    let mut best: Option<(CandidateKind, f64)> = None;
    for c in &losses {
        let Some(loss) = c.loss else { continue };
        best = match best {
            None => Some((c.kind, loss)),
            Some((bk, bl)) => {
                let replace = if loss_ties(loss, bl) {
                    c.kind.coefficient_count() < bk.coefficient_count()
                } else {
                    loss < bl
                };
                if replace { Some((c.kind, loss)) } else { Some((bk, bl)) }
            }
        };
    }
    match best {
        Some((selected, _)) => Ok(Selection { losses, selected }),
        None => Err(ForecastError::AllCandidatesFailed(
            losses
                .into_iter()
                .map(|c| (c.kind, c.error.unwrap_or_default()))
                .collect(),
        )),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub t_low: Option<f64>,
    pub t_star: Option<f64>,
    pub t_high: Option<f64>,
}

/// Earliest times at or after the last training step where the fitted curve
/// reaches `limit * (1 - band)`, `limit` and `limit * (1 + band)`.
pub fn predict_crossing(fit: &FitResult, limit: f64, band: f64) -> Crossing {
    let start = fit.last_t as f64;
    Crossing {
        t_low: first_crossing(fit, limit * (1.0 - band), start),
        t_star: first_crossing(fit, limit, start),
        t_high: first_crossing(fit, limit * (1.0 + band), start),
    }
}

fn first_crossing(fit: &FitResult, level: f64, start: f64) -> Option<f64> {
    if fit.predict(start) >= level {
        return Some(start);
    }
    let end = start + CROSSING_WINDOW;
    let mut lo = start;
    while lo < end {
        let hi = (lo + 1.0).min(end);
        if fit.predict(hi) >= level {
            let (mut a, mut b) = (lo, hi);
            while b - a > CROSSING_TOLERANCE {
                let mid = 0.5 * (a + b);
                if fit.predict(mid) >= level {
                    b = mid;
                } else {
                    a = mid;
                }
            }
            return Some(b);
        }
        lo = hi;
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastConfig {
    pub loss: LossConfig,
    pub wear_limit: f64,
    pub band: f64,
    /// Train on the first `n` points only; `None` uses the whole series.
    pub train_points: Option<usize>,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            wear_limit: DEFAULT_WEAR_LIMIT_MM2,
            band: DEFAULT_BAND,
            train_points: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub track_id: u32,
    pub losses: Vec<CandidateLoss>,
    pub selected: CandidateKind,
    pub coefficients: Vec<f64>,
    pub train_count: usize,
    pub last_train_t: u32,
    pub wear_limit: f64,
    pub band: f64,
    pub t_low: Option<f64>,
    pub t_star: Option<f64>,
    pub t_high: Option<f64>,
    pub config: ForecastConfig,
    pub scan_interval_hours: f64,
}

impl ForecastReport {
    pub fn fit(&self) -> FitResult {
        FitResult {
            kind: self.selected,
            coefficients: self.coefficients.clone(),
            train_count: self.train_count,
            last_t: self.last_train_t,
            rss: 0.0,
        }
    }
}

/// Select a model on the training prefix, refit it on the whole prefix and
/// locate the wear-limit crossings.
pub fn forecast(series: &CorrectedSeries, cfg: &ForecastConfig) -> Result<ForecastReport, ForecastError> {
    if !(cfg.wear_limit > 0.0 && cfg.wear_limit.is_finite()) {
        return Err(ForecastError::InvalidConfig(format!("wear limit must be > 0, got {}", cfg.wear_limit)));
    }
    if !(0.0..1.0).contains(&cfg.band) {
        return Err(ForecastError::InvalidConfig(format!("band must be in [0, 1), got {}", cfg.band)));
    }
    let mut points = series.measurements();
    if let Some(n) = cfg.train_points {
        points.truncate(n);
    }
    let selection = select_model(&points, &cfg.loss)?;
    let fitted = fit(selection.selected, &points)?;
    let crossing = predict_crossing(&fitted, cfg.wear_limit, cfg.band);
    Ok(ForecastReport {
        track_id: series.track_id,
        losses: selection.losses,
        selected: selection.selected,
        coefficients: fitted.coefficients.clone(),
        train_count: fitted.train_count,
        last_train_t: fitted.last_t,
        wear_limit: cfg.wear_limit,
        band: cfg.band,
        t_low: crossing.t_low,
        t_star: crossing.t_star,
        t_high: crossing.t_high,
        config: *cfg,
        scan_interval_hours: SCAN_INTERVAL_HOURS,
    })
}

pub fn write_loss_csv<W: std::io::Write>(out: W, losses: &[CandidateLoss]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["kind", "loss"])?;
    for c in losses {
        w.write_record([c.kind.name().to_string(), c.loss.map(|l| l.to_string()).unwrap_or_default()])?;
    }
    w.flush()?;
    Ok(())
}
