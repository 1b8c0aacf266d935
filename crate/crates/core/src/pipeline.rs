//! End-to-end orchestration: detect, quantify, correct, forecast.
//!
//! Two ingestion modes exist. A directory of graymap frames runs the full
//! chain; an area CSV (`t,area_mm2`) skips detection and segmentation and
//! goes straight to correction and forecasting.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{self, BoxSource, DefectTrack, Tracker, TrackerConfig};
use crate::expert::{self, AreaSeries, CorrectedSeries, ExpertConfig, ExpertError, Measurement};
use crate::forecast::{self, ForecastConfig, ForecastError, ForecastReport, LossConfig};
use crate::plot;
use crate::raster::{GrayImage, RasterError, StructuringElement};
use crate::segment::{self, AreaRow, Calibration, Morphology};
use crate::synth::GroundTruthRow;
use crate::threshold::{self, ClassifierModel, ThresholdClass, ThresholdDecision, ThresholdError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("config file: {0}")]
    ConfigParse(#[from] toml::de::Error),
    #[error("config serialization: {0}")]
    ConfigWrite(#[from] toml::ser::Error),
    #[error("no readable .pgm frames in {0}")]
    NoFrames(PathBuf),
    #[error("no defect track produced a forecast: {0}")]
    NoReports(String),
    #[error("track {track_id}: {source}")]
    Track {
        track_id: u32,
        #[source]
        source: Box<PipelineError>,
    },
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error(transparent)]
    Threshold(#[from] ThresholdError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Plot(#[from] crate::plot::PlotError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// `fixed:<value>`, `otsu` or `classifier:<model path>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ThresholdSpec {
    Fixed(ThresholdClass),
    Otsu,
    Classifier(PathBuf),
}

impl fmt::Display for ThresholdSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdSpec::Fixed(c) => write!(f, "fixed:{}", c.value()),
            ThresholdSpec::Otsu => f.write_str("otsu"),
            ThresholdSpec::Classifier(p) => write!(f, "classifier:{}", p.display()),
        }
    }
}

impl FromStr for ThresholdSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            None if s == "otsu" => Ok(ThresholdSpec::Otsu),
            Some(("fixed", v)) => {
                let value: u32 = v.parse().map_err(|_| format!("bad threshold value {v:?}"))?;
                ThresholdClass::from_value(value)
                    .map(ThresholdSpec::Fixed)
                    .map_err(|e| e.to_string())
            }
            Some(("classifier", p)) if !p.is_empty() => Ok(ThresholdSpec::Classifier(PathBuf::from(p))),
            _ => Err(format!(
                "threshold must be fixed:<value>, otsu or classifier:<path>, got {s:?}"
            )),
        }
    }
}

/// `annotations:<csv path>` or `propose:<min area px²>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DetectionSpec {
    Annotations(PathBuf),
    Propose(usize),
}

impl fmt::Display for DetectionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DetectionSpec::Annotations(p) => write!(f, "annotations:{}", p.display()),
            DetectionSpec::Propose(a) => write!(f, "propose:{a}"),
        }
    }
}

impl FromStr for DetectionSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            Some(("annotations", p)) if !p.is_empty() => Ok(DetectionSpec::Annotations(PathBuf::from(p))),
            Some(("propose", a)) => match a.parse::<usize>() {
                Ok(n) if n > 0 => Ok(DetectionSpec::Propose(n)),
                _ => Err(format!("propose needs a positive minimum area, got {a:?}")),
            },
            _ => Err(format!(
                "detection must be annotations:<path> or propose:<min_area>, got {s:?}"
            )),
        }
    }
}

macro_rules! string_serde {
    ($t:ty) => {
        impl Serialize for $t {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

string_serde!(ThresholdSpec);
string_serde!(DetectionSpec);

/// Which area feeds the forecast: segmented pixels or the bounding box itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AreaSource {
    Pixels,
    Box,
}

impl FromStr for AreaSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pixels" => Ok(AreaSource::Pixels),
            "box" => Ok(AreaSource::Box),
            _ => Err(format!("area_source must be pixels or box, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub mm_per_pixel: f64,
    pub threshold: ThresholdSpec,
    pub se_radius: u32,
    pub dilation_passes: u32,
    pub erosion_passes: u32,
    pub growth_ratio_max: f64,
    pub alpha: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    pub wear_limit: f64,
    pub band: f64,
    pub detection: DetectionSpec,
    pub grow: f64,
    pub iou_floor: f64,
    pub box_margin: u32,
    pub area_source: AreaSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_points: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mm_per_pixel: segment::DEFAULT_MM_PER_PIXEL,
            threshold: ThresholdSpec::Otsu,
            se_radius: 1,
            dilation_passes: 1,
            erosion_passes: 1,
            growth_ratio_max: expert::DEFAULT_GROWTH_RATIO_MAX,
            alpha: forecast::DEFAULT_ALPHA,
            horizon: None,
            wear_limit: forecast::DEFAULT_WEAR_LIMIT_MM2,
            band: forecast::DEFAULT_BAND,
            detection: DetectionSpec::Propose(20),
            grow: detect::DEFAULT_GROW,
            iou_floor: detect::DEFAULT_IOU_FLOOR,
            box_margin: 3,
            area_source: AreaSource::Pixels,
            train_points: None,
        }
    }
}

impl PipelineConfig {
    pub const KEYS: [&'static str; 16] = [
        "mm_per_pixel",
        "threshold",
        "se_radius",
        "dilation_passes",
        "erosion_passes",
        "growth_ratio_max",
        "alpha",
        "horizon",
        "wear_limit",
        "band",
        "detection",
        "grow",
        "iou_floor",
        "box_margin",
        "area_source",
        "train_points",
    ];

    pub fn from_toml_str(s: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String, PipelineError> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::from_toml_str(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// Override one field from its textual form. `none` clears optional fields.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, PipelineError>
        where
            T::Err: fmt::Display,
        {
            value
                .parse()
                .map_err(|e| PipelineError::Config(format!("{key}: {e}")))
        }
        fn optional(key: &str, value: &str) -> Result<Option<usize>, PipelineError> {
            if value == "none" {
                Ok(None)
            } else {
                parse(key, value).map(Some)
            }
        }
        match key {
            "mm_per_pixel" => self.mm_per_pixel = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "se_radius" => self.se_radius = parse(key, value)?,
            "dilation_passes" => self.dilation_passes = parse(key, value)?,
            "erosion_passes" => self.erosion_passes = parse(key, value)?,
            "growth_ratio_max" => self.growth_ratio_max = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "horizon" => self.horizon = optional(key, value)?,
            "wear_limit" => self.wear_limit = parse(key, value)?,
            "band" => self.band = parse(key, value)?,
            "detection" => self.detection = parse(key, value)?,
            "grow" => self.grow = parse(key, value)?,
            "iou_floor" => self.iou_floor = parse(key, value)?,
            "box_margin" => self.box_margin = parse(key, value)?,
            "area_source" => self.area_source = parse(key, value)?,
            "train_points" => self.train_points = optional(key, value)?,
            _ => return Err(PipelineError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |m: String| Err(PipelineError::Config(m));
        if !(self.mm_per_pixel.is_finite() && self.mm_per_pixel > 0.0) {
            return fail(format!("mm_per_pixel must be > 0, got {}", self.mm_per_pixel));
        }
        if !(self.growth_ratio_max.is_finite() && self.growth_ratio_max > 1.0) {
            return fail(format!("growth_ratio_max must be > 1, got {}", self.growth_ratio_max));
        }
        if self.alpha.is_multiple_of(2) {
            return fail(format!("alpha must be odd, got {}", self.alpha));
        }
        if self.horizon == Some(0) {
            return fail("horizon must be >= 1".into());
        }
        if !(self.wear_limit.is_finite() && self.wear_limit > 0.0) {
            return fail(format!("wear_limit must be > 0, got {}", self.wear_limit));
        }
        if !(0.0..1.0).contains(&self.band) {
            return fail(format!("band must be in [0, 1), got {}", self.band));
        }
        if !(self.grow.is_finite() && self.grow >= 1.0) {
            return fail(format!("grow must be >= 1, got {}", self.grow));
        }
        if !(0.0..=1.0).contains(&self.iou_floor) {
            return fail(format!("iou_floor must be in [0, 1], got {}", self.iou_floor));
        }
        if self.train_points.is_some_and(|n| n < forecast::MIN_SERIES_POINTS) {
            return fail(format!("train_points must be >= {}", forecast::MIN_SERIES_POINTS));
        }
        Ok(())
    }

    pub fn calibration(&self) -> Calibration {
        Calibration {
            mm_per_pixel: self.mm_per_pixel,
        }
    }

    pub fn morphology(&self) -> Morphology {
        Morphology {
            se: StructuringElement::square(self.se_radius),
            dilation_passes: self.dilation_passes,
            erosion_passes: self.erosion_passes,
        }
    }

    pub fn expert(&self) -> ExpertConfig {
        ExpertConfig {
            growth_ratio_max: self.growth_ratio_max,
        }
    }

    pub fn forecast(&self) -> ForecastConfig {
        ForecastConfig {
            loss: LossConfig {
                alpha: self.alpha,
                decay: forecast::WEIGHT_DECAY,
                horizon: self.horizon,
            },
            wear_limit: self.wear_limit,
            band: self.band,
            train_points: self.train_points,
        }
    }

    pub fn tracker(&self) -> TrackerConfig {
        TrackerConfig {
            iou_floor: self.iou_floor,
            grow: self.grow,
        }
    }
}

/// Resolved threshold strategy; loads the classifier model once.
#[derive(Debug, Clone)]
pub enum ThresholdSelector {
    Fixed(ThresholdClass),
    Otsu,
    Classifier(ClassifierModel),
}

impl ThresholdSelector {
    pub fn from_spec(spec: &ThresholdSpec) -> Result<Self, PipelineError> {
        Ok(match spec {
            ThresholdSpec::Fixed(c) => ThresholdSelector::Fixed(*c),
            ThresholdSpec::Otsu => ThresholdSelector::Otsu,
            ThresholdSpec::Classifier(path) => ThresholdSelector::Classifier(ClassifierModel::load(path)?),
        })
    }

    pub fn decide(&self, img: &GrayImage) -> ThresholdDecision {
        match self {
            ThresholdSelector::Fixed(c) => ThresholdDecision::fixed(*c),
            ThresholdSelector::Otsu => threshold::otsu(img),
            ThresholdSelector::Classifier(m) => threshold::predict_class(m, img),
        }
    }
}

/// Sorted `.pgm` files of a directory; unreadable frames are `None`.
pub fn load_frames(dir: &Path) -> Result<Vec<(PathBuf, Option<GrayImage>)>, PipelineError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
        .collect();
    paths.sort();
    Ok(paths
        .into_par_iter()
        .map(|p| {
            let img = match GrayImage::load_pgm(&p) {
                Ok(img) => Some(img),
                Err(e) => {
                    warn!("skipping frame: {e}");
                    None
                }
            };
            (p, img)
        })
        .collect())
}

/// Per-track rows of the areas CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackAreas {
    pub track_id: u32,
    pub rows: Vec<AreaRow>,
}

impl TrackAreas {
    pub fn series(&self) -> Result<AreaSeries, ExpertError> {
        AreaSeries::new(
            self.track_id,
            self.rows.iter().map(|r| Measurement::new(r.timestep, r.area_mm2)).collect(),
        )
    }
}

/// Build defect tracks over the frame sequence. Frame index is the timestep.
pub fn track_frames(
    cfg: &PipelineConfig,
    frames: &[Option<GrayImage>],
    selector: &ThresholdSelector,
) -> Result<Vec<DefectTrack>, PipelineError> {
    let bounds = frames
        .iter()
        .flatten()
        .map(|f| (f.width(), f.height()))
        .next()
        .ok_or_else(|| PipelineError::Config("no readable frames".into()))?;
    match &cfg.detection {
        DetectionSpec::Annotations(path) => {
            let file = fs::File::open(path).map_err(io_err(path))?;
            let annotations = detect::read_annotations(file)?;
            Ok(detect::tracks_from_annotations(
                &annotations,
                frames.len() as u32,
                cfg.grow,
                bounds,
            ))
        }
        DetectionSpec::Propose(min_area) => {
            let proposals: Vec<Vec<detect::BoundingBox>> = frames
                .par_iter()
                .map(|f| match f {
                    Some(img) => detect::propose_boxes(
                        img,
                        selector.decide(img),
                        *min_area,
                        cfg.morphology(),
                        cfg.box_margin,
                    ),
                    None => Vec::new(),
                })
                .collect();
            let mut tracker = Tracker::new(cfg.tracker(), bounds);
            for (t, boxes) in proposals.iter().enumerate() {
                tracker.step(t as u32, boxes, BoxSource::Proposed);
            }
            Ok(tracker.into_tracks())
        }
    }
}

/// Measure every track inside its per-frame box.
pub fn measure_tracks(
    cfg: &PipelineConfig,
    frames: &[Option<GrayImage>],
    tracks: &[DefectTrack],
    selector: &ThresholdSelector,
) -> Vec<TrackAreas> {
    let cal = cfg.calibration();
    let morph = cfg.morphology();
    tracks
        .iter()
        .map(|track| {
            let rows = track
                .entries
                .par_iter()
                .filter_map(|e| {
                    let Some(img) = frames.get(e.t as usize).and_then(|f| f.as_ref()) else {
                        warn!("track {}: frame {} unreadable, no measurement", track.track_id, e.t);
                        return None;
                    };
                    let b = e.bbox.clip(img.width(), img.height())?;
                    let roi = img.crop(b.x, b.y, b.w, b.h).ok()?;
                    let decision = selector.decide(&roi);
                    let mut result = segment::measure(&roi, decision, morph, cal);
                    if cfg.area_source == AreaSource::Box {
                        result.area_px = b.area() as usize;
                        result.area_mm2 = cal.px_to_mm2(result.area_px as f64);
                    }
                    Some(AreaRow::new(e.t as usize, e.t, &result))
                })
                .collect();
            TrackAreas {
                track_id: track.track_id,
                rows,
            }
        })
        .collect()
}

/// Correct then forecast one series.
pub fn forecast_series(
    cfg: &PipelineConfig,
    series: &AreaSeries,
) -> Result<(CorrectedSeries, ForecastReport), PipelineError> {
    let corrected = expert::correct(series, &cfg.expert())?;
    let report = forecast::forecast(&corrected, &cfg.forecast())?;
    Ok((corrected, report))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PipelineInput {
    Frames(PathBuf),
    AreaCsv(PathBuf),
}

impl PipelineInput {
    /// Directories are frame sequences, files are area CSVs.
    pub fn detect(path: &Path) -> Self {
        if path.is_dir() {
            PipelineInput::Frames(path.to_path_buf())
        } else {
            PipelineInput::AreaCsv(path.to_path_buf())
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub reports: Vec<ForecastReport>,
    pub corrected: Vec<CorrectedSeries>,
    pub artifacts: Vec<PathBuf>,
}

fn write_file(path: &Path, bytes: &[u8], artifacts: &mut Vec<PathBuf>) -> Result<(), PipelineError> {
    fs::write(path, bytes).map_err(io_err(path))?;
    artifacts.push(path.to_path_buf());
    Ok(())
}

pub fn areas_file_name(track_id: u32) -> String {
    format!("areas_track{track_id}.csv")
}

/// Detection and quantification over a frame directory, writing
/// `tracks.json` and one areas CSV per track.
pub fn quantify(
    cfg: &PipelineConfig,
    frames_dir: &Path,
    out_dir: &Path,
    artifacts: &mut Vec<PathBuf>,
) -> Result<Vec<TrackAreas>, PipelineError> {
    let loaded = load_frames(frames_dir)?;
    if loaded.iter().all(|(_, f)| f.is_none()) {
        return Err(PipelineError::NoFrames(frames_dir.to_path_buf()));
    }
    let frames: Vec<Option<GrayImage>> = loaded.into_iter().map(|(_, f)| f).collect();
    let selector = ThresholdSelector::from_spec(&cfg.threshold)?;
    let tracks = track_frames(cfg, &frames, &selector)?;
    write_file(
        &out_dir.join("tracks.json"),
        detect::tracks_to_json(&tracks)?.as_bytes(),
        artifacts,
    )?;
    let areas = measure_tracks(cfg, &frames, &tracks, &selector);
    for ta in &areas {
        let mut buf = Vec::new();
        segment::write_area_csv(&mut buf, &ta.rows)?;
        write_file(&out_dir.join(areas_file_name(ta.track_id)), &buf, artifacts)?;
    }
    Ok(areas)
}

/// Run the full chain and write all artifacts into `out_dir`.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    input: &PipelineInput,
    out_dir: &Path,
) -> Result<PipelineOutput, PipelineError> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut artifacts = Vec::new();

    let series: Vec<AreaSeries> = match input {
        PipelineInput::AreaCsv(path) => {
            let file = fs::File::open(path).map_err(io_err(path))?;
            vec![expert::read_series_csv(0, file)?]
        }
        PipelineInput::Frames(dir) => quantify(cfg, dir, out_dir, &mut artifacts)?
            .iter()
            .map(TrackAreas::series)
            .collect::<Result<_, _>>()?,
    };

    let single = series.len() == 1;
    let mut reports = Vec::new();
    let mut corrected_all = Vec::new();
    let mut failures = Vec::new();
    for s in &series {
        match forecast_series(cfg, s) {
            Ok((corrected, report)) => {
                let mut buf = Vec::new();
                expert::write_corrected_csv(&mut buf, &corrected)?;
                write_file(
                    &out_dir.join(format!("corrected_track{}.csv", s.track_id)),
                    &buf,
                    &mut artifacts,
                )?;
                let prefix = format!("track{}_", s.track_id);
                artifacts.extend(plot::emit_plot_data(&report, Some(s), &corrected, out_dir, &prefix)?);
                reports.push(report);
                corrected_all.push(corrected);
            }
            Err(e) if single => return Err(e),
            Err(e) => {
                warn!("track {}: {e}", s.track_id);
                failures.push(format!("track {}: {e}", s.track_id));
            }
        }
    }
    if reports.is_empty() {
        return Err(PipelineError::NoReports(if failures.is_empty() {
            "no defect tracks found".into()
        } else {
            failures.join("; ")
        }));
    }
    write_file(
        &out_dir.join("report.json"),
        serde_json::to_string_pretty(&reports)?.as_bytes(),
        &mut artifacts,
    )?;
    Ok(PipelineOutput {
        reports,
        corrected: corrected_all,
        artifacts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub matched: usize,
    pub mean_abs_error_mm2: f64,
    pub max_rel_error: f64,
    pub within_5pct: usize,
    pub within_10pct: usize,
}

/// Compare measured `(t, area_mm2)` pairs with ground truth at equal timesteps.
/// Timesteps with zero true area are counted only in the absolute error.
pub fn evaluate(measured: &[(u32, f64)], truth: &[GroundTruthRow]) -> Evaluation {
    let mut matched = 0;
    let mut abs_sum = 0.0;
    let mut max_rel: f64 = 0.0;
    let (mut w5, mut w10) = (0, 0);
    for &(t, area) in measured {
        let Some(gt) = truth.iter().find(|g| g.t == t) else { continue };
        matched += 1;
        let err = (area - gt.area_mm2).abs();
        abs_sum += err;
        if gt.area_mm2 > 0.0 {
            let rel = err / gt.area_mm2;
            max_rel = max_rel.max(rel);
            if rel <= 0.05 {
                w5 += 1;
            }
            if rel <= 0.10 {
                w10 += 1;
            }
        }
    }
    Evaluation {
        matched,
        mean_abs_error_mm2: if matched > 0 { abs_sum / matched as f64 } else { 0.0 },
        max_rel_error: max_rel,
        within_5pct: w5,
        within_10pct: w10,
    }
}
