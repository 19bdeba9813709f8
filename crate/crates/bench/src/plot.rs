//! SVG line charts from benchmark CSV files.

use std::path::Path;

use plotters::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("column {0:?} not found")]
    Column(String),
    #[error("no numeric rows")]
    Empty,
    #[error("drawing: {0}")]
    Draw(String),
}

fn draw_err<E: std::fmt::Display>(e: E) -> PlotError {
    PlotError::Draw(e.to_string())
}

/// Numeric columns of a CSV file by header name.
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self, PlotError> {
        let mut rd = csv::Reader::from_path(path)?;
        let headers: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            rows.push(rec.iter().map(|v| v.parse::<f64>().unwrap_or(f64::NAN)).collect());
        }
        Ok(Table { headers, rows })
    }

    pub fn column(&self, name: &str) -> Result<usize, PlotError> {
        self.headers.iter().position(|h| h == name).ok_or_else(|| PlotError::Column(name.to_string()))
    }
}

pub struct PlotSpec<'a> {
    pub x: &'a str,
    pub ys: Vec<&'a str>,
    pub title: &'a str,
    pub log_x: bool,
}

impl<'a> PlotSpec<'a> {
    /// A sensible chart for the known CSV layouts; otherwise the first
    /// column against the second.
    pub fn guess(t: &'a Table, title: &'a str) -> Self {
        let has = |n: &str| t.headers.iter().any(|h| h == n);
        if has("cdf") && has("value") {
            PlotSpec { x: "value", ys: vec!["cdf"], title, log_x: false }
        } else if has("workers") && has("qps") {
            PlotSpec { x: "workers", ys: vec!["qps"], title, log_x: false }
        } else if has("batch_size") && has("mean_ms_per_cert") {
            PlotSpec { x: "batch_size", ys: vec!["mean_ms_per_cert"], title, log_x: true }
        } else {
            PlotSpec { x: &t.headers[0], ys: vec![t.headers.get(1).map_or(&t.headers[0], |s| s)], title, log_x: false }
        }
    }
}

const COLORS: [RGBColor; 4] = [BLUE, RED, GREEN, MAGENTA];

pub fn plot(t: &Table, spec: &PlotSpec, out: &Path) -> Result<(), PlotError> {
    let xi = t.column(spec.x)?;
    let yis = spec.ys.iter().map(|y| t.column(y)).collect::<Result<Vec<_>, _>>()?;
    let series: Vec<Vec<(f64, f64)>> = yis
        .iter()
        .map(|&yi| {
            t.rows
                .iter()
                .map(|r| (r[xi], r[yi]))
                .filter(|(x, y)| x.is_finite() && y.is_finite() && (!spec.log_x || *x > 0.0))
                .collect()
        })
        .collect();
    let all: Vec<(f64, f64)> = series.iter().flatten().copied().collect();
    if all.is_empty() {
        return Err(PlotError::Empty);
    }
    let (mut x0, mut x1) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (mut y0, mut y1) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    if x0 == x1 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    y0 = y0.min(0.0);
    if y0 == y1 {
        y1 += 1.0;
    }

    let root = SVGBackend::new(out, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut b = ChartBuilder::on(&root);
    b.caption(spec.title, ("sans-serif", 20)).margin(15).x_label_area_size(40).y_label_area_size(70);
    if spec.log_x {
        let mut chart = b.build_cartesian_2d((x0..x1).log_scale(), y0..y1 * 1.05).map_err(draw_err)?;
        chart.configure_mesh().x_desc(spec.x).y_desc(spec.ys.join(", ")).draw().map_err(draw_err)?;
        for (i, s) in series.into_iter().enumerate() {
            chart.draw_series(LineSeries::new(s, COLORS[i % COLORS.len()])).map_err(draw_err)?;
        }
    } else {
        let mut chart = b.build_cartesian_2d(x0..x1, y0..y1 * 1.05).map_err(draw_err)?;
        chart.configure_mesh().x_desc(spec.x).y_desc(spec.ys.join(", ")).draw().map_err(draw_err)?;
        for (i, s) in series.into_iter().enumerate() {
            chart.draw_series(LineSeries::new(s, COLORS[i % COLORS.len()])).map_err(draw_err)?;
        }
    }
    root.present().map_err(draw_err)?;
    Ok(())
}
