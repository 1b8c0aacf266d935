use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use pitwear::detect;
use pitwear::expert;
use pitwear::pipeline::{self, PipelineConfig, PipelineInput, ThresholdSelector};
use pitwear::segment;
use pitwear::synth::{self, GrowthLaw, SynthConfig};
use pitwear::threshold;

#[derive(Parser, Debug)]
#[command(name = "pitwear", version, about = "Detect, measure and forecast surface pitting from image sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic frame sequence with ground truth
    Synth(SynthArgs),
    /// Detect defects and measure their areas per frame
    Segment {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Detect defects and write their tracks
    Track {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Correct and forecast a `t,area_mm2` series
    Forecast {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Full pipeline over a frame directory or an area CSV
    Run {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Compare measured areas with a ground-truth CSV
    Evaluate {
        /// Areas CSV from `segment` or a `t,area_mm2` series
        #[arg(long)]
        areas: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Train the threshold classifier from a labelled manifest
    Train {
        /// CSV of `image_path,threshold_class_value`
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Config file plus one override flag per config key.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// TOML config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "mm_per_pixel", value_name = "MM")]
    mm_per_pixel: Option<String>,
    /// fixed:<value>, otsu or classifier:<path>
    #[arg(long = "threshold", value_name = "METHOD")]
    threshold: Option<String>,
    #[arg(long = "se_radius", value_name = "PX")]
    se_radius: Option<String>,
    #[arg(long = "dilation_passes", value_name = "N")]
    dilation_passes: Option<String>,
    #[arg(long = "erosion_passes", value_name = "N")]
    erosion_passes: Option<String>,
    #[arg(long = "growth_ratio_max", value_name = "RATIO")]
    growth_ratio_max: Option<String>,
    #[arg(long = "alpha", value_name = "ODD")]
    alpha: Option<String>,
    /// Look-ahead cap, or `none`
    #[arg(long = "horizon", value_name = "STEPS")]
    horizon: Option<String>,
    #[arg(long = "wear_limit", value_name = "MM2")]
    wear_limit: Option<String>,
    #[arg(long = "band", value_name = "FRACTION")]
    band: Option<String>,
    /// annotations:<path> or propose:<min_area>
    #[arg(long = "detection", value_name = "SOURCE")]
    detection: Option<String>,
    #[arg(long = "grow", value_name = "FACTOR")]
    grow: Option<String>,
    #[arg(long = "iou_floor", value_name = "IOU")]
    iou_floor: Option<String>,
    #[arg(long = "box_margin", value_name = "PX")]
    box_margin: Option<String>,
    /// pixels or box
    #[arg(long = "area_source", value_name = "SOURCE")]
    area_source: Option<String>,
    /// Training prefix length, or `none`
    #[arg(long = "train_points", value_name = "N")]
    train_points: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> [(&'static str, Option<&String>); 16] {
        [
            ("mm_per_pixel", self.mm_per_pixel.as_ref()),
            ("threshold", self.threshold.as_ref()),
            ("se_radius", self.se_radius.as_ref()),
            ("dilation_passes", self.dilation_passes.as_ref()),
            ("erosion_passes", self.erosion_passes.as_ref()),
            ("growth_ratio_max", self.growth_ratio_max.as_ref()),
            ("alpha", self.alpha.as_ref()),
            ("horizon", self.horizon.as_ref()),
            ("wear_limit", self.wear_limit.as_ref()),
            ("band", self.band.as_ref()),
            ("detection", self.detection.as_ref()),
            ("grow", self.grow.as_ref()),
            ("iou_floor", self.iou_floor.as_ref()),
            ("box_margin", self.box_margin.as_ref()),
            ("area_source", self.area_source.as_ref()),
            ("train_points", self.train_points.as_ref()),
        ]
    }

    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        for (key, value) in self.overrides() {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Law {
    Linear,
    Exponential,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 12)]
    frames: u32,
    #[arg(long, default_value_t = 190)]
    width: u32,
    #[arg(long, default_value_t = 190)]
    height: u32,
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    pollution_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    outlier_probability: f64,
    #[arg(long, default_value_t = 0.5)]
    outlier_magnitude: f64,
    #[arg(long, value_enum, default_value = "linear")]
    law: Law,
    /// Area at t = 0, px²
    #[arg(long, default_value_t = 100.0)]
    initial: f64,
    /// px² per step (linear) or growth constant per step (exponential)
    #[arg(long, default_value_t = 20.0)]
    rate: f64,
    #[arg(long, default_value_t = segment::DEFAULT_MM_PER_PIXEL)]
    mm_per_pixel: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

impl SynthArgs {
    fn config(&self) -> SynthConfig {
        SynthConfig {
            width: self.width,
            height: self.height,
            noise_sigma: self.noise_sigma,
            pollution_rate: self.pollution_rate,
            outlier_probability: self.outlier_probability,
            outlier_magnitude: self.outlier_magnitude,
            growth: match self.law {
                Law::Linear => GrowthLaw::Linear {
                    initial: self.initial,
                    rate: self.rate,
                },
                Law::Exponential => GrowthLaw::Exponential {
                    initial: self.initial,
                    rate: self.rate,
                },
            },
            mm_per_pixel: self.mm_per_pixel,
            seed: self.seed,
            ..SynthConfig::default()
        }
    }
}

fn print_reports(reports: &[pitwear::forecast::ForecastReport]) {
    for r in reports {
        let fmt = |t: Option<f64>| t.map_or("none".to_string(), |t| format!("{t:.2}"));
        println!(
            "track {}: {} on {} points, t_star {} (band {} to {})",
            r.track_id,
            r.selected,
            r.train_count,
            fmt(r.t_star),
            fmt(r.t_low),
            fmt(r.t_high)
        );
    }
}

fn read_measured(path: &Path) -> Result<Vec<(u32, f64)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let header = text.lines().next().unwrap_or_default();
    if header.split(',').any(|c| c == "timestep") {
        let rows = segment::read_area_csv(text.as_bytes())?;
        Ok(rows.iter().map(|r| (r.timestep, r.area_mm2)).collect())
    } else {
        let series = expert::read_series_csv(0, text.as_bytes())?;
        Ok(series.points.iter().map(|m| (m.t, m.area)).collect())
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => {
            let seq = synth::generate_sequence(&args.config(), args.frames)?;
            synth::write_sequence(&args.out, &seq)?;
            println!("wrote {} frames to {}", seq.frames.len(), args.out.display());
        }
        Command::Segment { frames, out, config } => {
            let cfg = config.resolve()?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let mut artifacts = Vec::new();
            let areas = pipeline::quantify(&cfg, &frames, &out, &mut artifacts)?;
            for a in &areas {
                println!("track {}: {} measurements", a.track_id, a.rows.len());
            }
        }
        Command::Track { frames, out, config } => {
            let cfg = config.resolve()?;
            let loaded: Vec<_> = pipeline::load_frames(&frames)?.into_iter().map(|(_, f)| f).collect();
            if loaded.iter().all(Option::is_none) {
                bail!("no readable .pgm frames in {}", frames.display());
            }
            let selector = ThresholdSelector::from_spec(&cfg.threshold)?;
            let tracks = pipeline::track_frames(&cfg, &loaded, &selector)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let path = out.join("tracks.json");
            fs::write(&path, detect::tracks_to_json(&tracks)?)
                .with_context(|| format!("writing {}", path.display()))?;
            println!("{} tracks over {} frames", tracks.len(), loaded.len());
        }
        Command::Forecast { input, out, config } => {
            let cfg = config.resolve()?;
            let output = pipeline::run_pipeline(&cfg, &PipelineInput::AreaCsv(input), &out)?;
            print_reports(&output.reports);
        }
        Command::Run { input, out, config } => {
            let cfg = config.resolve()?;
            if !input.exists() {
                bail!("input {} does not exist", input.display());
            }
            let output = pipeline::run_pipeline(&cfg, &PipelineInput::detect(&input), &out)?;
            info!("{} artifacts written", output.artifacts.len());
            print_reports(&output.reports);
        }
        Command::Evaluate { areas, truth } => {
            let measured = read_measured(&areas)?;
            let file = fs::File::open(&truth).with_context(|| format!("opening {}", truth.display()))?;
            let truth = synth::read_ground_truth(file)?;
            let eval = pipeline::evaluate(&measured, &truth);
            println!("{}", serde_json::to_string_pretty(&eval)?);
        }
        Command::Train { manifest, out } => {
            let samples = threshold::load_manifest(&manifest)?;
            let model = threshold::train_classifier(&samples)?;
            model.save(&out)?;
            println!("trained on {} images, {} classes", samples.len(), model.classes.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
