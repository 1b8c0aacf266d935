//! Rule-based correction of measured defect areas.
//!
//! A surface defect cannot shrink. Each new measurement is compared with
//! the previous corrected value `p`:
//!
//! * `p <= a <= p * growth_ratio_max`: plausible growth, kept as measured;
//! * `a > p * growth_ratio_max`: an outlier (typically pollution), replaced by
//!   the mean of `a` and the two preceding corrected values (one at the
//!   second point of a series);
//! * `a < p`: impossible shrinkage, the previous value is carried forward.
//!
//! The averaged value is finally clamped to `p`, so the output is
//! non-decreasing for every input.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_GROWTH_RATIO_MAX: f64 = 1.5;

#[derive(Debug, Error, PartialEq)]
pub enum ExpertError {
    #[error("cannot correct an empty area series")]
    EmptySeries,
    #[error("area {area} at t={t} is negative or not finite")]
    InvalidArea { t: u32, area: f64 },
    #[error("timesteps must be strictly increasing, found {prev} then {next}")]
    UnorderedTimesteps { prev: u32, next: u32 },
    #[error("growth_ratio_max must be finite and > 1, got {0}")]
    InvalidRatio(f64),
    #[error(transparent)]
    Csv(#[from] CsvError),
}

// csv::Error is not PartialEq; keep the message only
#[derive(Debug, Error, PartialEq)]
#[error("{0}")]
pub struct CsvError(pub String);

impl From<csv::Error> for ExpertError {
    fn from(e: csv::Error) -> Self {
        ExpertError::Csv(CsvError(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub t: u32,
    /// mm²
    pub area: f64,
}

impl Measurement {
    pub fn new(t: u32, area: f64) -> Self {
        Self { t, area }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaSeries {
    pub track_id: u32,
    pub points: Vec<Measurement>,
}

impl AreaSeries {
    pub fn new(track_id: u32, points: Vec<Measurement>) -> Result<Self, ExpertError> {
        for w in points.windows(2) {
            if w[1].t <= w[0].t {
                return Err(ExpertError::UnorderedTimesteps {
                    prev: w[0].t,
                    next: w[1].t,
                });
            }
        }
        for m in &points {
            if !(m.area.is_finite() && m.area >= 0.0) {
                return Err(ExpertError::InvalidArea { t: m.t, area: m.area });
            }
        }
        Ok(Self { track_id, points })
    }

    pub fn from_areas(track_id: u32, areas: &[(u32, f64)]) -> Result<Self, ExpertError> {
        Self::new(
            track_id,
            areas.iter().map(|&(t, a)| Measurement::new(t, a)).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    pub growth_ratio_max: f64,
}

impl ExpertConfig {
    pub fn new(growth_ratio_max: f64) -> Result<Self, ExpertError> {
        if growth_ratio_max.is_finite() && growth_ratio_max > 1.0 {
            Ok(Self { growth_ratio_max })
        } else {
            Err(ExpertError::InvalidRatio(growth_ratio_max))
        }
    }
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            growth_ratio_max: DEFAULT_GROWTH_RATIO_MAX,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectionCase {
    First,
    Accepted,
    Averaged,
    Clamped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectedPoint {
    pub t: u32,
    pub area: f64,
    pub case: CorrectionCase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectedSeries {
    pub track_id: u32,
    pub points: Vec<CorrectedPoint>,
}

impl CorrectedSeries {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn measurements(&self) -> Vec<Measurement> {
        self.points.iter().map(|p| Measurement::new(p.t, p.area)).collect()
    }

    /// The first `n` points (all of them when `n` exceeds the length).
    pub fn prefix(&self, n: usize) -> CorrectedSeries {
        CorrectedSeries {
            track_id: self.track_id,
            points: self.points[..n.min(self.points.len())].to_vec(),
        }
    }
}

pub fn correct(series: &AreaSeries, cfg: &ExpertConfig) -> Result<CorrectedSeries, ExpertError> {
    // re-validate: fields are public
    let series = AreaSeries::new(series.track_id, series.points.clone())?;
    if series.is_empty() {
        return Err(ExpertError::EmptySeries);
    }
    let mut out: Vec<CorrectedPoint> = Vec::with_capacity(series.len());
    for (i, m) in series.points.iter().enumerate() {
        if i == 0 {
            out.push(CorrectedPoint {
                t: m.t,
                area: m.area,
                case: CorrectionCase::First,
            });
            continue;
        }
        let prev = out[i - 1].area;
        let a = m.area;
        let (area, case) = if a <= prev {
            if a == prev {
                (a, CorrectionCase::Accepted)
            } else {
                (prev, CorrectionCase::Clamped)
            }
        } else if a <= prev * cfg.growth_ratio_max {
            (a, CorrectionCase::Accepted)
        } else {
            let mean = if i >= 2 {
                (a + prev + out[i - 2].area) / 3.0
            } else {
                (a + prev) / 2.0
            };
            (mean.max(prev), CorrectionCase::Averaged)
        };
        out.push(CorrectedPoint { t: m.t, area, case });
    }
    Ok(CorrectedSeries {
        track_id: series.track_id,
        points: out,
    })
}

#[derive(Debug, Deserialize)]
struct RawRow {
    t: u32,
    area_mm2: f64,
}

#[derive(Debug, Serialize)]
struct CorrectedRow {
    t: u32,
    area_mm2: f64,
    case: CorrectionCase,
}

/// Parse `t,area_mm2[,case]`. A case column, if present, is ignored.
pub fn read_series_csv<R: std::io::Read>(track_id: u32, input: R) -> Result<AreaSeries, ExpertError> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let mut points = Vec::new();
    for row in reader.deserialize::<RawRow>() {
        let row = row?;
        points.push(Measurement::new(row.t, row.area_mm2));
    }
    AreaSeries::new(track_id, points)
}

pub fn write_series_csv<W: std::io::Write>(out: W, series: &AreaSeries) -> Result<(), ExpertError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "area_mm2"])?;
    for m in &series.points {
        w.write_record([m.t.to_string(), m.area.to_string()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_corrected_csv<W: std::io::Write>(
    out: W,
    series: &CorrectedSeries,
) -> Result<(), ExpertError> {
    let mut w = csv::Writer::from_writer(out);
    for p in &series.points {
        w.serialize(CorrectedRow {
            t: p.t,
            area_mm2: p.area,
            case: p.case,
        })?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
