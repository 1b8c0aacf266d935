//! Plot data and a static SVG chart for one forecast.
//!
//! Output is a pure function of its inputs: fixed sample counts and fixed
//! number formatting, so identical runs produce identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::expert::{AreaSeries, CorrectedSeries};
use crate::forecast::{self, ForecastReport};

pub const CURVE_SAMPLES: usize = 200;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One row per corrected point; `raw` is empty when no raw series is given.
pub fn series_csv(report: &ForecastReport, raw: Option<&AreaSeries>, corrected: &CorrectedSeries) -> String {
    let fit = report.fit();
    let mut s = String::from("t,raw_mm2,corrected_mm2,fitted_mm2\n");
    for p in &corrected.points {
        let raw_value = raw
            .and_then(|r| r.points.iter().find(|m| m.t == p.t))
            .map(|m| format!("{:.9}", m.area))
            .unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{:.9},{:.9}",
            p.t,
            raw_value,
            p.area,
            fit.predict(p.t as f64)
        );
    }
    s
}

/// Time span shown on the chart: first observation to past the upper crossing.
pub fn curve_span(report: &ForecastReport, corrected: &CorrectedSeries) -> (f64, f64) {
    let first = corrected.points.first().map_or(0.0, |p| p.t as f64);
    let last = corrected.points.last().map_or(first, |p| p.t as f64);
    let horizon = report
        .t_high
        .or(report.t_star)
        .unwrap_or(last)
        .max(last);
    let end = horizon + 0.1 * (horizon - first).max(1.0);
    (first, end)
}

/// Fitted curve sampled evenly over [`curve_span`], with the limit band.
pub fn forecast_csv(report: &ForecastReport, corrected: &CorrectedSeries) -> String {
    let fit = report.fit();
    let (t0, t1) = curve_span(report, corrected);
    let lo = report.wear_limit * (1.0 - report.band);
    let hi = report.wear_limit * (1.0 + report.band);
    let mut s = String::from("t,fitted_mm2,limit_low_mm2,limit_mm2,limit_high_mm2\n");
    for i in 0..CURVE_SAMPLES {
        let t = t0 + (t1 - t0) * i as f64 / (CURVE_SAMPLES - 1) as f64;
        let _ = writeln!(
            s,
            "{t:.6},{:.9},{lo:.9},{:.9},{hi:.9}",
            fit.predict(t),
            report.wear_limit
        );
    }
    s
}

pub fn losses_csv(report: &ForecastReport) -> Result<String, csv::Error> {
    let mut buf = Vec::new();
    forecast::write_loss_csv(&mut buf, &report.losses)?;
    Ok(String::from_utf8(buf).expect("csv writer emits utf-8"))
}

const W: f64 = 900.0;
const H: f64 = 420.0;
const M: f64 = 50.0;
const CHART_W: f64 = 560.0;

/// Two panels: area over time with fit and limit band, and candidate losses.
pub fn render_svg(report: &ForecastReport, raw: Option<&AreaSeries>, corrected: &CorrectedSeries) -> String {
    let fit = report.fit();
    let (t0, t1) = curve_span(report, corrected);
    let hi_limit = report.wear_limit * (1.0 + report.band);
    let mut y_max = hi_limit;
    for p in &corrected.points {
        y_max = y_max.max(p.area);
    }
    if let Some(r) = raw {
        for m in &r.points {
            y_max = y_max.max(m.area);
        }
    }
    y_max *= 1.05;
    let x_of = |t: f64| M + (t - t0) / (t1 - t0).max(f64::EPSILON) * (CHART_W - M);
    let y_of = |a: f64| H - M - (a.clamp(0.0, y_max) / y_max) * (H - 2.0 * M);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{M}" y="20" font-size="13">track {} ({}), t* = {}</text>"#,
        report.track_id,
        report.selected,
        report.t_star.map_or("none".into(), |t| format!("{t:.2}"))
    );

    // limit band and line
    let lo_limit = report.wear_limit * (1.0 - report.band);
    let _ = writeln!(
        s,
        r##"<rect x="{M}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#f4cccc" opacity="0.6"/>"##,
        y_of(hi_limit),
        CHART_W - M,
        y_of(lo_limit) - y_of(hi_limit)
    );
    let _ = writeln!(
        s,
        r##"<line x1="{M}" y1="{y:.2}" x2="{CHART_W}" y2="{y:.2}" stroke="#cc0000" stroke-dasharray="4 3"/>"##,
        y = y_of(report.wear_limit)
    );

    // axes
    let _ = writeln!(
        s,
        r#"<path d="M{M} {M} V{:.2} H{CHART_W}" fill="none" stroke="black"/>"#,
        H - M
    );
    let _ = writeln!(s, r#"<text x="{M}" y="{:.2}">{t0:.0}</text>"#, H - M + 15.0);
    let _ = writeln!(
        s,
        r#"<text x="{CHART_W}" y="{:.2}" text-anchor="end">{t1:.1}</text>"#,
        H - M + 15.0
    );
    let _ = writeln!(s, r#"<text x="{:.2}" y="{M}" text-anchor="end">{y_max:.3}</text>"#, M - 4.0);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}">t (scans of {} h)</text>"#,
        (M + CHART_W) / 2.0 - 40.0,
        H - 12.0,
        report.scan_interval_hours
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{:.2}" transform="rotate(-90 12 {:.2})">area (mm²)</text>"#,
        H / 2.0,
        H / 2.0
    );

    // fitted curve
    let mut d = String::new();
    for i in 0..CURVE_SAMPLES {
        let t = t0 + (t1 - t0) * i as f64 / (CURVE_SAMPLES - 1) as f64;
        let _ = write!(
            d,
            "{}{:.2} {:.2}",
            if i == 0 { "M" } else { " L" },
            x_of(t),
            y_of(fit.predict(t))
        );
    }
    let _ = writeln!(s, r##"<path d="{d}" fill="none" stroke="#1f5fbf" stroke-width="1.5"/>"##);

    if let Some(r) = raw {
        for m in &r.points {
            let _ = writeln!(
                s,
                r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="none" stroke="#888888"/>"##,
                x_of(m.t as f64),
                y_of(m.area)
            );
        }
    }
    for p in &corrected.points {
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="5" height="5" fill="black"/>"#,
            x_of(p.t as f64) - 2.5,
            y_of(p.area) - 2.5
        );
    }
    if let Some(ts) = report.t_star {
        let x = x_of(ts);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{M}" x2="{x:.2}" y2="{:.2}" stroke="#cc0000"/>"##,
            H - M
        );
    }

    // loss panel
    let px0 = CHART_W + 60.0;
    let pw = W - px0 - 20.0;
    let _ = writeln!(s, r#"<text x="{px0}" y="{M}">aggregate loss</text>"#);
    let max_loss = report
        .losses
        .iter()
        .filter_map(|c| c.loss)
        .fold(0.0_f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let bar_h = 28.0;
    for (i, c) in report.losses.iter().enumerate() {
        let y = M + 20.0 + i as f64 * (bar_h + 18.0);
        let fill = if c.kind == report.selected { "#1f5fbf" } else { "#9db7e0" };
        let _ = writeln!(s, r#"<text x="{px0}" y="{:.2}">{}</text>"#, y - 3.0, c.kind);
        match c.loss {
            Some(l) => {
                let _ = writeln!(
                    s,
                    r#"<rect x="{px0}" y="{y:.2}" width="{:.2}" height="{bar_h}" fill="{fill}"/>"#,
                    (l / max_loss * pw).max(1.0)
                );
                let _ = writeln!(
                    s,
                    r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{l:.4e}</text>"#,
                    px0 + pw,
                    y + bar_h + 12.0
                );
            }
            None => {
                let _ = writeln!(s, r#"<text x="{px0}" y="{:.2}">not fitted</text>"#, y + 18.0);
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Write `<prefix>series.csv`, `<prefix>losses.csv`, `<prefix>forecast.csv`
/// and `<prefix>forecast.svg` into `dir`.
pub fn emit_plot_data(
    report: &ForecastReport,
    raw: Option<&AreaSeries>,
    corrected: &CorrectedSeries,
    dir: &Path,
    prefix: &str,
) -> Result<Vec<PathBuf>, PlotError> {
    let files = [
        ("series.csv", series_csv(report, raw, corrected)),
        ("losses.csv", losses_csv(report)?),
        ("forecast.csv", forecast_csv(report, corrected)),
        ("forecast.svg", render_svg(report, raw, corrected)),
    ];
    let mut written = Vec::with_capacity(files.len());
    for (name, body) in files {
        let path = dir.join(format!("{prefix}{name}"));
        fs::write(&path, body).map_err(|source| PlotError::Io {
            path: path.clone(),
            source,
        })?;
        written.push(path);
    }
    Ok(written)
}
