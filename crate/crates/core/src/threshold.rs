//! Threshold selection for defect binarization.
//!
//! Three strategies produce a [`ThresholdDecision`]: one of the six fixed
//! threshold classes, Otsu's between-class-variance maximizer, or a
//! nearest-centroid classifier over histogram features that maps an image
//! to one of the six classes.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{GrayImage, RasterError};

/// The six admissible threshold values, ascending.
pub const THRESHOLD_VALUES: [u8; 6] = [35, 40, 45, 52, 62, 72];

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ThresholdError {
    #[error("{0} is not one of the threshold classes {THRESHOLD_VALUES:?}")]
    UnknownClass(u32),
    #[error("training set has no samples for threshold classes {0:?}")]
    MissingClasses(Vec<u8>),
    #[error("unsupported classifier model version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed classifier model: {0}")]
    MalformedModel(String),
    #[error("manifest {path}: {source}")]
    Manifest {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ThresholdClass(u8);

impl ThresholdClass {
    pub fn from_index(index: usize) -> Option<Self> {
        (index < THRESHOLD_VALUES.len()).then_some(Self(index as u8))
    }

    pub fn from_value(value: u32) -> Result<Self, ThresholdError> {
        THRESHOLD_VALUES
            .iter()
            .position(|&v| u32::from(v) == value)
            .map(|i| Self(i as u8))
            .ok_or(ThresholdError::UnknownClass(value))
    }

    pub fn all() -> impl Iterator<Item = ThresholdClass> {
        (0..THRESHOLD_VALUES.len()).map(|i| Self(i as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn value(self) -> u8 {
        THRESHOLD_VALUES[self.0 as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMethod {
    Fixed,
    Otsu,
    Classifier,
}

impl fmt::Display for ThresholdMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThresholdMethod::Fixed => "fixed",
            ThresholdMethod::Otsu => "otsu",
            ThresholdMethod::Classifier => "classifier",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdDecision {
    pub threshold: u8,
    pub method: ThresholdMethod,
    /// 1.0 for fixed and Otsu decisions.
    pub confidence: f64,
    /// Set when Otsu ran on a constant image and had nothing to split.
    #[serde(default)]
    pub degenerate: bool,
}

impl ThresholdDecision {
    pub fn fixed(class: ThresholdClass) -> Self {
        Self {
            threshold: class.value(),
            method: ThresholdMethod::Fixed,
            confidence: 1.0,
            degenerate: false,
        }
    }
}

/// Otsu's threshold together with the degenerate flag.
///
/// The two classes are `{v <= t}` and `{v > t}`, matching the strict
/// comparison in [`crate::raster::threshold`]. Between-class variance
/// `w0*w1*(mu0-mu1)^2` is proportional to `(N*S0 - n0*S)^2 / (n0*n1)`,
/// which is evaluated in integers so that ties are exact; the smallest
/// maximizing threshold wins.
pub fn otsu(img: &GrayImage) -> ThresholdDecision {
    let mut hist = [0u64; 256];
    for &v in img.pixels() {
        hist[v as usize] += 1;
    }
    let total = img.len() as u64;
    let total_sum: u64 = hist.iter().enumerate().map(|(v, &c)| v as u64 * c).sum();

    let mut best: Option<(u8, u128, u128)> = None;
    let mut n0 = 0u64;
    let mut s0 = 0u64;
    for t in 0..=255u8 {
        n0 += hist[t as usize];
        s0 += t as u64 * hist[t as usize];
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let diff = (total as i128 * s0 as i128 - n0 as i128 * total_sum as i128).unsigned_abs();
        let num = diff * diff;
        let den = n0 as u128 * n1 as u128;
        let better = match best {
            None => true,
            Some((_, bn, bd)) => ratio_gt(num, den, bn, bd),
        };
        if better {
            best = Some((t, num, den));
        }
    }

    match best {
        Some((t, num, _)) if num > 0 => ThresholdDecision {
            threshold: t,
            method: ThresholdMethod::Otsu,
            confidence: 1.0,
            degenerate: false,
        },
        _ => ThresholdDecision {
            threshold: img.pixels()[0],
            method: ThresholdMethod::Otsu,
            confidence: 1.0,
            degenerate: true,
        },
    }
}

pub fn otsu_threshold(img: &GrayImage) -> u8 {
    otsu(img).threshold
}

// a/b > c/d for positive denominators
fn ratio_gt(a: u128, b: u128, c: u128, d: u128) -> bool {
    match (a.checked_mul(d), c.checked_mul(b)) {
        (Some(l), Some(r)) => l > r,
        // only reachable for multi-megapixel inputs
        _ => (a as f64 / b as f64) > (c as f64 / d as f64),
    }
}

pub const FEATURE_LEN: usize = 256 + 3;

/// Normalized histogram followed by mean, standard deviation and median,
/// the last three scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramFeatures {
    pub histogram: [f64; 256],
    pub mean: f64,
    pub std_dev: f64,
    pub median: f64,
}

impl HistogramFeatures {
    pub fn from_image(img: &GrayImage) -> Self {
        let mut counts = [0u64; 256];
        for &v in img.pixels() {
            counts[v as usize] += 1;
        }
        let n = img.len() as f64;
        let mut histogram = [0.0; 256];
        for (h, &c) in histogram.iter_mut().zip(&counts) {
            *h = c as f64 / n;
        }
        let mean = counts
            .iter()
            .enumerate()
            .map(|(v, &c)| v as f64 * c as f64)
            .sum::<f64>()
            / n;
        let var = counts
            .iter()
            .enumerate()
            .map(|(v, &c)| (v as f64 - mean).powi(2) * c as f64)
            .sum::<f64>()
            / n;
        // lower median
        let half = (img.len() as u64).div_ceil(2);
        let mut acc = 0u64;
        let mut median = 0usize;
        for (v, &c) in counts.iter().enumerate() {
            acc += c;
            if acc >= half {
                median = v;
                break;
            }
        }
        Self {
            histogram,
            mean: mean / 255.0,
            std_dev: var.sqrt() / 255.0,
            median: median as f64 / 255.0,
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(FEATURE_LEN);
        v.extend_from_slice(&self.histogram);
        v.extend([self.mean, self.std_dev, self.median]);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCentroid {
    pub value: u8,
    pub centroid: Vec<f64>,
    pub samples: usize,
}

/// Nearest-centroid threshold classifier. Immutable once trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub version: u32,
    pub classes: Vec<ClassCentroid>,
}

impl ClassifierModel {
    /// Build a model from explicit centroids, ordered by class index.
    pub fn from_centroids(centroids: Vec<(Vec<f64>, usize)>) -> Result<Self, ThresholdError> {
        let model = Self {
            version: MODEL_VERSION,
            classes: centroids
                .into_iter()
                .zip(THRESHOLD_VALUES)
                .map(|((centroid, samples), value)| ClassCentroid {
                    value,
                    centroid,
                    samples,
                })
                .collect(),
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<(), ThresholdError> {
        if self.version != MODEL_VERSION {
            return Err(ThresholdError::UnsupportedVersion(self.version));
        }
        if self.classes.len() != THRESHOLD_VALUES.len() {
            return Err(ThresholdError::MalformedModel(format!(
                "expected {} classes, found {}",
                THRESHOLD_VALUES.len(),
                self.classes.len()
            )));
        }
        for (c, &value) in self.classes.iter().zip(&THRESHOLD_VALUES) {
            if c.value != value {
                return Err(ThresholdError::MalformedModel(format!(
                    "class value {} out of order, expected {value}",
                    c.value
                )));
            }
            if c.centroid.len() != FEATURE_LEN {
                return Err(ThresholdError::MalformedModel(format!(
                    "centroid for class {value} has {} features, expected {FEATURE_LEN}",
                    c.centroid.len()
                )));
            }
            if c.samples == 0 {
                return Err(ThresholdError::MalformedModel(format!(
                    "class {value} trained from zero samples"
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, ThresholdError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, ThresholdError> {
        let model: Self = serde_json::from_str(s)?;
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self, ThresholdError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ThresholdError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

pub fn train_classifier(
    samples: &[(GrayImage, ThresholdClass)],
) -> Result<ClassifierModel, ThresholdError> {
    let mut sums = vec![vec![0.0; FEATURE_LEN]; THRESHOLD_VALUES.len()];
    let mut counts = vec![0usize; THRESHOLD_VALUES.len()];
    for (img, class) in samples {
        let f = HistogramFeatures::from_image(img).to_vec();
        for (s, v) in sums[class.index()].iter_mut().zip(f) {
            *s += v;
        }
        counts[class.index()] += 1;
    }
    let missing: Vec<u8> = ThresholdClass::all()
        .filter(|c| counts[c.index()] == 0)
        .map(ThresholdClass::value)
        .collect();
    if !missing.is_empty() {
        return Err(ThresholdError::MissingClasses(missing));
    }
    let centroids = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| (s.into_iter().map(|v| v / n as f64).collect(), n))
        .collect();
    ClassifierModel::from_centroids(centroids)
}

pub fn predict_class(model: &ClassifierModel, img: &GrayImage) -> ThresholdDecision {
    predict_features(model, &HistogramFeatures::from_image(img).to_vec())
}

/// Nearest centroid by Euclidean distance, lower class index on ties.
/// Confidence is the chosen class's share of the summed inverse distances.
pub fn predict_features(model: &ClassifierModel, features: &[f64]) -> ThresholdDecision {
    const EPS: f64 = 1e-12;
    let distances: Vec<f64> = model
        .classes
        .iter()
        .map(|c| {
            c.centroid
                .iter()
                .zip(features)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut best = 0;
    for (i, &d) in distances.iter().enumerate().skip(1) {
        if d < distances[best] {
            best = i;
        }
    }
    let inv: Vec<f64> = distances.iter().map(|d| 1.0 / (d + EPS)).collect();
    let confidence = inv[best] / inv.iter().sum::<f64>();
    ThresholdDecision {
        threshold: model.classes[best].value,
        method: ThresholdMethod::Classifier,
        confidence,
        degenerate: false,
    }
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    image_path: PathBuf,
    threshold_class_value: u32,
}

/// Read an `image_path,threshold_class_value` manifest. Relative image
/// paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<(GrayImage, ThresholdClass)>, ThresholdError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(path).map_err(|source| ThresholdError::Manifest {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for row in reader.deserialize::<ManifestRow>() {
        let row = row.map_err(|source| ThresholdError::Manifest {
            path: path.display().to_string(),
            source,
        })?;
        let class = ThresholdClass::from_value(row.threshold_class_value)?;
        let img = GrayImage::load_pgm(&base.join(&row.image_path))?;
        out.push((img, class));
    }
    Ok(out)
}
