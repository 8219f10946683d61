//! SVG line charts, each with a CSV sidecar holding the plotted points.

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Figure<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub series: Vec<Series>,
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

/// Writes `{stem}.svg` and `{stem}.csv` into `dir`; returns both paths.
pub fn write_figure(dir: &Path, stem: &str, fig: &Figure) -> Result<(PathBuf, PathBuf), CliError> {
    let finite = |p: &&(f64, f64)| p.0.is_finite() && p.1.is_finite();
    if fig.series.iter().all(|s| s.points.iter().filter(finite).count() == 0) {
        return Err(CliError::Runtime(format!("nothing to plot for `{stem}`")));
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| CliError::Runtime(e.to_string()))?;
    w.write_record(["series", fig.x_label, fig.y_label]).map_err(|e| CliError::Runtime(e.to_string()))?;
    for s in &fig.series {
        for (x, y) in &s.points {
            w.write_record([s.name.clone(), x.to_string(), y.to_string()])
                .map_err(|e| CliError::Runtime(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))?;

    let svg_path = dir.join(format!("{stem}.svg"));
    let all = || fig.series.iter().flat_map(|s| s.points.iter().filter(finite));
    let (x0, x1) = bounds(all().map(|p| p.0));
    let (y0, y1) = bounds(all().map(|p| p.1));
    let draw = || -> Result<(), Box<dyn std::error::Error>> {
        let root = SVGBackend::new(&svg_path, (800, 500)).into_drawing_area();
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(fig.title, ("sans-serif", 22))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(x0..x1, y0..y1)?;
        chart.configure_mesh().x_desc(fig.x_label).y_desc(fig.y_label).draw()?;
        for (i, s) in fig.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<(f64, f64)> = s.points.iter().filter(finite).copied().collect();
            chart
                .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))?
                .label(s.name.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
            chart.draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| CliError::Runtime(format!("{}: {e}", svg_path.display())))?;
    Ok((svg_path, csv_path))
}
