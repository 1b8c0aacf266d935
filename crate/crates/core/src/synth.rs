//! Synthetic defect-growth sequences with known ground truth.
//!
//! Each sequence draws one irregular star-shaped polygon from the seed and
//! rescales it per frame so that its rasterized pixel count matches the
//! growth law. Frames are independent given the seed, so they are rendered
//! in parallel from per-frame derived seeds.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expert::{AreaSeries, Measurement};
use crate::raster::{GrayImage, RasterError};
use crate::segment::Calibration;
use crate::threshold::THRESHOLD_VALUES;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("need at least one frame")]
    NoFrames,
    #[error("growth law reaches {area:.1} px² at t={t}, which does not fit a {width}x{height} image")]
    TooLarge {
        t: u32,
        area: f64,
        width: u32,
        height: u32,
    },
    #[error("growth law gives invalid area {area} at t={t}")]
    InvalidArea { t: u32, area: f64 },
    #[error("invalid synth configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Defect area in px² as a function of the frame index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "lowercase")]
pub enum GrowthLaw {
    /// `initial + rate * t`
    Linear { initial: f64, rate: f64 },
    /// `initial * exp(rate * t)`
    Exponential { initial: f64, rate: f64 },
}

impl GrowthLaw {
    pub fn area(&self, t: u32) -> f64 {
        let t = t as f64;
        match *self {
            GrowthLaw::Linear { initial, rate } => initial + rate * t,
            GrowthLaw::Exponential { initial, rate } => initial * (rate * t).exp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub width: u32,
    pub height: u32,
    pub background: u8,
    /// Standard deviation of per-pixel Gaussian texture noise, in intensity levels.
    pub noise_sigma: f64,
    pub defect_intensity: u8,
    pub growth: GrowthLaw,
    /// Expected number of dark pollution specks per frame.
    pub pollution_rate: f64,
    /// Probability that a frame renders the defect at a wrong size.
    pub outlier_probability: f64,
    /// Relative size error of an outlier frame, e.g. 0.5 renders 50% too large or small.
    pub outlier_magnitude: f64,
    pub vertices: usize,
    /// Radial jitter of the polygon vertices, in `[0, 1)`.
    pub irregularity: f64,
    pub mm_per_pixel: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 190,
            height: 190,
            background: 160,
            noise_sigma: 0.0,
            defect_intensity: 25,
            growth: GrowthLaw::Linear {
                initial: 100.0,
                rate: 20.0,
            },
            pollution_rate: 0.0,
            outlier_probability: 0.0,
            outlier_magnitude: 0.5,
            vertices: 12,
            irregularity: 0.3,
            mm_per_pixel: crate::segment::DEFAULT_MM_PER_PIXEL,
            seed: 42,
        }
    }
}

impl SynthConfig {
    /// Threshold class nearest to the midpoint between defect and background.
    pub fn suggested_threshold(&self) -> u8 {
        let mid = (self.background as i32 + self.defect_intensity as i32) / 2;
        *THRESHOLD_VALUES
            .iter()
            .min_by_key(|&&v| (v as i32 - mid).abs())
            .expect("non-empty")
    }

    pub fn calibration(&self) -> Calibration {
        Calibration::new(self.mm_per_pixel).unwrap_or_default()
    }

    fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: &str| Err(SynthError::InvalidConfig(msg.to_string()));
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive");
        }
        if self.vertices < 3 {
            return bad("polygon needs at least 3 vertices");
        }
        if !(0.0..1.0).contains(&self.irregularity) {
            return bad("irregularity must be in [0, 1)");
        }
        if !(self.noise_sigma >= 0.0 && self.pollution_rate >= 0.0) {
            return bad("noise and pollution rate must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.outlier_probability) || !(0.0..1.0).contains(&self.outlier_magnitude) {
            return bad("outlier probability must be in [0, 1] and magnitude in [0, 1)");
        }
        if self.mm_per_pixel.is_nan() || self.mm_per_pixel <= 0.0 {
            return bad("mm_per_pixel must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthFrame {
    pub image: GrayImage,
    /// Growth-law area for this frame.
    pub true_area_px: f64,
    /// Pixel count of the rendered defect mask (before noise and pollution).
    pub rendered_area_px: usize,
    pub outlier: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSequence {
    pub frames: Vec<SynthFrame>,
    pub ground_truth: Vec<Measurement>,
}

impl SynthSequence {
    pub fn images(&self) -> Vec<GrayImage> {
        self.frames.iter().map(|f| f.image.clone()).collect()
    }

    pub fn ground_truth_series(&self, track_id: u32) -> AreaSeries {
        AreaSeries::new(track_id, self.ground_truth.clone()).expect("ground truth is ordered and non-negative")
    }
}

// Unit-scale star polygon: vertex i at angle theta_i with radius r_i.
#[derive(Debug, Clone)]
struct StarShape {
    vertices: Vec<(f64, f64)>,
    max_radius: f64,
    unit_area: f64,
}

impl StarShape {
    fn random(rng: &mut ChaCha8Rng, n: usize, irregularity: f64) -> Self {
        let step = std::f64::consts::TAU / n as f64;
        let vertices: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let theta = (i as f64 + rng.random_range(-0.3..0.3)) * step;
                let r = 1.0 + irregularity * rng.random_range(-1.0..1.0);
                (r * theta.cos(), r * theta.sin())
            })
            .collect();
        let max_radius = vertices
            .iter()
            .map(|(x, y)| (x * x + y * y).sqrt())
            .fold(0.0, f64::max);
        let unit_area = 0.5
            * vertices
                .iter()
                .zip(vertices.iter().cycle().skip(1))
                .map(|(a, b)| a.0 * b.1 - b.0 * a.1)
                .sum::<f64>()
                .abs();
        Self {
            vertices,
            max_radius,
            unit_area,
        }
    }

    fn contains(&self, px: f64, py: f64, scale: f64) -> bool {
        let mut inside = false;
        let n = self.vertices.len();
        let mut j = n - 1;
        for i in 0..n {
            let (xi, yi) = (self.vertices[i].0 * scale, self.vertices[i].1 * scale);
            let (xj, yj) = (self.vertices[j].0 * scale, self.vertices[j].1 * scale);
            if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    fn rasterize(&self, width: u32, height: u32, center: (f64, f64), scale: f64) -> Vec<bool> {
        let mut mask = vec![false; width as usize * height as usize];
        if scale <= 0.0 {
            return mask;
        }
        let reach = self.max_radius * scale + 1.0;
        let x0 = (center.0 - reach).floor().max(0.0) as u32;
        let x1 = ((center.0 + reach).ceil() as u32).min(width);
        let y0 = (center.1 - reach).floor().max(0.0) as u32;
        let y1 = ((center.1 + reach).ceil() as u32).min(height);
        for y in y0..y1 {
            for x in x0..x1 {
                let px = x as f64 + 0.5 - center.0;
                let py = y as f64 + 0.5 - center.1;
                if self.contains(px, py, scale) {
                    mask[y as usize * width as usize + x as usize] = true;
                }
            }
        }
        mask
    }

    /// Mask whose pixel count is closest to `target`.
    fn rasterize_area(&self, width: u32, height: u32, center: (f64, f64), target: f64) -> Vec<bool> {
        if target <= 0.0 {
            return vec![false; width as usize * height as usize];
        }
        let count = |s: f64| self.rasterize(width, height, center, s).iter().filter(|&&p| p).count();
        // pixel count is monotone in scale for a star shape about its center
        let mut lo = 0.0;
        let mut hi = 2.0 * (target / self.unit_area).sqrt() + 2.0;
        for _ in 0..48 {
            let mid = 0.5 * (lo + hi);
            if (count(mid) as f64) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let below = self.rasterize(width, height, center, lo);
        let above = self.rasterize(width, height, center, hi);
        let nb = below.iter().filter(|&&p| p).count() as f64;
        let na = above.iter().filter(|&&p| p).count() as f64;
        if (target - nb).abs() < (na - target).abs() {
            below
        } else {
            above
        }
    }
}

fn frame_seed(seed: u64, k: u32) -> u64 {
    seed ^ (k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn generate_sequence(cfg: &SynthConfig, n_frames: u32) -> Result<SynthSequence, SynthError> {
    cfg.validate()?;
    if n_frames == 0 {
        return Err(SynthError::NoFrames);
    }
    let mut shape_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shape = StarShape::random(&mut shape_rng, cfg.vertices, cfg.irregularity);
    let center = (cfg.width as f64 / 2.0, cfg.height as f64 / 2.0);
    let room = center.0.min(center.1) - 1.0;
    let worst_case = 1.0 + cfg.outlier_magnitude;

    for t in 0..n_frames {
        let area = cfg.growth.area(t);
        if !(area.is_finite() && area >= 0.0) {
            return Err(SynthError::InvalidArea { t, area });
        }
        let reach = shape.max_radius * (area * worst_case / shape.unit_area).sqrt();
        if area > (cfg.width as f64 * cfg.height as f64) || reach > room {
            return Err(SynthError::TooLarge {
                t,
                area,
                width: cfg.width,
                height: cfg.height,
            });
        }
    }

    let frames = (0..n_frames)
        .into_par_iter()
        .map(|k| render_frame(cfg, &shape, center, k))
        .collect::<Result<Vec<_>, _>>()?;
    let cal = cfg.calibration();
    let ground_truth = (0..n_frames)
        .map(|t| Measurement::new(t, cal.px_to_mm2(cfg.growth.area(t))))
        .collect();
    Ok(SynthSequence {
        frames,
        ground_truth,
    })
}

fn render_frame(
    cfg: &SynthConfig,
    shape: &StarShape,
    center: (f64, f64),
    k: u32,
) -> Result<SynthFrame, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(cfg.seed, k));
    let true_area = cfg.growth.area(k);
    let outlier = cfg.outlier_probability > 0.0 && rng.random_bool(cfg.outlier_probability);
    let rendered_target = if outlier {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        true_area * (1.0 + sign * cfg.outlier_magnitude)
    } else {
        true_area
    };
    let mask = shape.rasterize_area(cfg.width, cfg.height, center, rendered_target);
    let rendered_area_px = mask.iter().filter(|&&p| p).count();

    let mut levels: Vec<f64> = mask
        .iter()
        .map(|&m| if m { cfg.defect_intensity } else { cfg.background } as f64)
        .collect();

    if cfg.pollution_rate > 0.0 {
        let specks = Poisson::new(cfg.pollution_rate)
            .map(|p| p.sample(&mut rng) as u32)
            .unwrap_or(0);
        for _ in 0..specks {
            let sx = rng.random_range(0..cfg.width) as i64;
            let sy = rng.random_range(0..cfg.height) as i64;
            let r: i64 = rng.random_range(1..=2);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (x, y) = (sx + dx, sy + dy);
                    if dx * dx + dy * dy <= r * r
                        && (0..cfg.width as i64).contains(&x)
                        && (0..cfg.height as i64).contains(&y)
                    {
                        levels[y as usize * cfg.width as usize + x as usize] = cfg.defect_intensity as f64;
                    }
                }
            }
        }
    }

    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma)
            .map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
        for v in levels.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }

    let data = levels.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    Ok(SynthFrame {
        image: GrayImage::new(cfg.width, cfg.height, data)?,
        true_area_px: true_area,
        rendered_area_px,
        outlier,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRow {
    pub t: u32,
    pub area_px: f64,
    pub area_mm2: f64,
}

pub fn write_ground_truth<W: std::io::Write>(out: W, seq: &SynthSequence) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for (f, m) in seq.frames.iter().zip(&seq.ground_truth) {
        w.serialize(GroundTruthRow {
            t: m.t,
            area_px: f.true_area_px,
            area_mm2: m.area,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ground_truth<R: std::io::Read>(input: R) -> Result<Vec<GroundTruthRow>, csv::Error> {
    csv::Reader::from_reader(input).deserialize().collect()
}

pub fn frame_file_name(k: usize) -> String {
    format!("frame_{k:04}.pgm")
}

/// Write `frame_NNNN.pgm` files and `ground_truth.csv` into `dir`.
pub fn write_sequence(dir: &Path, seq: &SynthSequence) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir)?;
    for (k, f) in seq.frames.iter().enumerate() {
        f.image.save_pgm(&dir.join(frame_file_name(k)))?;
    }
    let file = std::fs::File::create(dir.join("ground_truth.csv"))?;
    write_ground_truth(file, seq)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_law_areas_within_tolerance() {
        let seq = generate_sequence(&SynthConfig::default(), 5).unwrap();
        let expect = [100.0, 120.0, 140.0, 160.0, 180.0];
        for (f, e) in seq.frames.iter().zip(expect) {
            assert_eq!(f.true_area_px, e);
            let rel = (f.rendered_area_px as f64 - e).abs() / e;
            assert!(rel <= 0.02, "rendered {} vs {e}", f.rendered_area_px);
            let dark = f.image.pixels().iter().filter(|&&v| v < 100).count();
            assert_eq!(dark, f.rendered_area_px);
        }
    }

    #[test]
    fn single_frame() {
        let seq = generate_sequence(&SynthConfig::default(), 1).unwrap();
        assert_eq!(seq.frames.len(), 1);
        assert_eq!(seq.ground_truth.len(), 1);
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = SynthConfig {
            noise_sigma: 10.0,
            pollution_rate: 3.0,
            outlier_probability: 0.3,
            ..SynthConfig::default()
        };
        let a = generate_sequence(&cfg, 6).unwrap();
        let b = generate_sequence(&cfg, 6).unwrap();
        assert_eq!(a, b);
        let c = generate_sequence(&SynthConfig { seed: 7, ..cfg }, 6).unwrap();
        assert_ne!(a.frames[0].image, c.frames[0].image);
    }

    #[test]
    fn oversized_growth_rejected() {
        let cfg = SynthConfig {
            growth: GrowthLaw::Linear {
                initial: 100.0,
                rate: 5000.0,
            },
            ..SynthConfig::default()
        };
        assert!(matches!(generate_sequence(&cfg, 10), Err(SynthError::TooLarge { .. })));
        assert!(matches!(generate_sequence(&SynthConfig::default(), 0), Err(SynthError::NoFrames)));
    }

    #[test]
    fn suggested_threshold_is_a_class() {
        assert_eq!(SynthConfig::default().suggested_threshold(), 72);
    }

    #[test]
    fn writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let seq = generate_sequence(&SynthConfig::default(), 3).unwrap();
        write_sequence(dir.path(), &seq).unwrap();
        assert!(dir.path().join("frame_0002.pgm").exists());
        let gt = std::fs::read_to_string(dir.path().join("ground_truth.csv")).unwrap();
        assert_eq!(gt.lines().next().unwrap(), "t,area_px,area_mm2");
        assert_eq!(gt.lines().count(), 4);
        let back = GrayImage::load_pgm(&dir.path().join("frame_0000.pgm")).unwrap();
        assert_eq!(back, seq.frames[0].image);
    }
}
