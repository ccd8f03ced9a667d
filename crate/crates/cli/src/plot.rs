//! Static SVG line charts of the CSV files written by the other commands,
//! plus the plotted series as a tidy `panel,series,x,y` CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::CliError;

pub const KINDS: [&str; 3] = ["train-log", "adjacency", "metrics"];

const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];
const WIDTH: f64 = 800.0;
const PANEL_HEIGHT: f64 = 260.0;
const MARGIN: f64 = 50.0;

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub series: Vec<Series>,
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Self, CliError> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = reader
            .records()
            .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<Result<Vec<Vec<String>>, _>>()
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        if header.iter().all(String::is_empty) || rows.is_empty() {
            return Err(CliError::config(format!(
                "{}: no data rows to plot",
                path.display()
            )));
        }
        Ok(Table { header, rows })
    }

    fn column(&self, name: &str) -> Result<usize, CliError> {
        self.header.iter().position(|h| h == name).ok_or_else(|| {
            CliError::config(format!(
                "column `{name}` not found (have {})",
                self.header.join(",")
            ))
        })
    }

    /// `(x, y)` pairs for rows whose `x` and `y` cells are numeric.
    fn series(&self, x: Option<&str>, y: &str) -> Result<Series, CliError> {
        let xi = x.map(|x| self.column(x)).transpose()?;
        let yi = self.column(y)?;
        let points = self
            .rows
            .iter()
            .enumerate()
            .filter_map(|(i, r)| {
                let xv = match xi {
                    Some(c) => r.get(c)?.parse().ok()?,
                    None => i as f64,
                };
                let yv: f64 = r.get(yi)?.parse().ok()?;
                yv.is_finite().then_some((xv, yv))
            })
            .collect();
        Ok(Series {
            name: y.to_string(),
            points,
        })
    }
}

fn panels_for(kind: &str, table: &Table) -> Result<Vec<Panel>, CliError> {
    let panel = |title: &str, x_label: &str, series: Vec<Series>| Panel {
        title: title.into(),
        x_label: x_label.into(),
        series,
    };
    match kind {
        "train-log" => Ok(vec![panel(
            "MAE per epoch",
            "epoch",
            vec![
                table.series(Some("epoch"), "train_mae")?,
                table.series(Some("epoch"), "val_mae")?,
            ],
        )]),
        "adjacency" => {
            let first = &table.rows[0][table.column("timestamp")?];
            let last = &table.rows[table.rows.len() - 1][table.column("timestamp")?];
            let x_label = format!("window ({first} .. {last})");
            Ok(vec![
                panel(
                    "Traffic signal",
                    &x_label,
                    vec![
                        table.series(None, "speed_i")?,
                        table.series(None, "speed_j")?,
                    ],
                ),
                panel(
                    "Progressive adjacency weight",
                    &x_label,
                    vec![
                        table.series(None, "weight_ij")?,
                        table.series(None, "weight_ji")?,
                        table.series(None, "weight_ij_ma12")?,
                    ],
                ),
            ])
        }
        "metrics" => Ok(vec![
            panel(
                "Error by horizon",
                "horizon (minutes)",
                vec![
                    table.series(Some("horizon_minutes"), "mae")?,
                    table.series(Some("horizon_minutes"), "rmse")?,
                ],
            ),
            panel(
                "MAPE by horizon",
                "horizon (minutes)",
                vec![table.series(Some("horizon_minutes"), "mape_percent")?],
            ),
        ]),
        other => Err(CliError::config(format!(
            "unknown plot kind `{other}` (expected one of: {})",
            KINDS.join(", ")
        ))),
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

pub fn render_svg(panels: &[Panel]) -> String {
    let height = PANEL_HEIGHT * panels.len() as f64;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (p, panel) in panels.iter().enumerate() {
        let top = p as f64 * PANEL_HEIGHT;
        let (x0, x1) = bounds(
            panel
                .series
                .iter()
                .flat_map(|s| s.points.iter().map(|q| q.0)),
        );
        let (y0, y1) = bounds(
            panel
                .series
                .iter()
                .flat_map(|s| s.points.iter().map(|q| q.1)),
        );
        let plot_w = WIDTH - 2.0 * MARGIN;
        let plot_h = PANEL_HEIGHT - 2.0 * MARGIN;
        let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * plot_w;
        let sy = |y: f64| top + MARGIN + (1.0 - (y - y0) / (y1 - y0)) * plot_h;
        let _ = writeln!(
            svg,
            "<text x=\"{MARGIN}\" y=\"{}\" font-size=\"13\">{}</text>",
            top + MARGIN - 20.0,
            escape(&panel.title)
        );
        let _ = writeln!(
            svg,
            "<rect x=\"{MARGIN}\" y=\"{}\" width=\"{plot_w}\" height=\"{plot_h}\" fill=\"none\" stroke=\"#888\"/>",
            top + MARGIN
        );
        let _ = writeln!(
            svg,
            "<text x=\"4\" y=\"{}\">{}</text>",
            top + MARGIN + 4.0,
            fmt_tick(y1)
        );
        let _ = writeln!(
            svg,
            "<text x=\"4\" y=\"{}\">{}</text>",
            top + MARGIN + plot_h,
            fmt_tick(y0)
        );
        let axis_y = top + MARGIN + plot_h + 14.0;
        let _ = writeln!(
            svg,
            "<text x=\"{MARGIN}\" y=\"{axis_y}\">{}</text>",
            fmt_tick(x0)
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{axis_y}\" text-anchor=\"end\">{}</text>",
            MARGIN + plot_w,
            fmt_tick(x1)
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            MARGIN + plot_w / 2.0,
            axis_y + 14.0,
            escape(&panel.x_label)
        );
        for (k, s) in panel.series.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let _ = writeln!(
                svg,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
                pts.join(" ")
            );
            let ly = top + MARGIN + 12.0 + 14.0 * k as f64;
            let lx = MARGIN + plot_w - 150.0;
            let _ = writeln!(
                svg,
                "<line x1=\"{lx}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"2\"/><text x=\"{}\" y=\"{ly}\">{}</text>",
                ly - 4.0,
                lx + 20.0,
                ly - 4.0,
                lx + 25.0,
                escape(&s.name)
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1000.0 || (v != 0.0 && v.abs() < 0.01) {
        format!("{v:.3e}")
    } else {
        format!("{v:.3}")
    }
}

pub fn tidy_csv(panels: &[Panel]) -> String {
    let mut out = String::from("panel,series,x,y\n");
    for p in panels {
        for s in &p.series {
            for (x, y) in &s.points {
                let _ = writeln!(out, "{},{},{x},{y}", p.title, s.name);
            }
        }
    }
    out
}

/// Renders `csv_path` as `kind`, writing `<out>.svg` and `<out>_series.csv`.
/// Returns the two paths.
pub fn plot(
    csv_path: &Path,
    kind: &str,
    out: Option<&Path>,
) -> Result<(PathBuf, PathBuf), CliError> {
    if !KINDS.contains(&kind) {
        return Err(CliError::config(format!(
            "unknown plot kind `{kind}` (expected one of: {})",
            KINDS.join(", ")
        )));
    }
    let table = Table::read(csv_path)?;
    let panels = panels_for(kind, &table)?;
    if panels
        .iter()
        .all(|p| p.series.iter().all(|s| s.points.is_empty()))
    {
        return Err(CliError::config(format!(
            "{}: no numeric values to plot",
            csv_path.display()
        )));
    }
    let stem = match out {
        Some(p) => p.with_extension(""),
        None => csv_path.with_extension(""),
    };
    let svg_path = stem.with_extension("svg");
    let csv_out = PathBuf::from(format!("{}_series.csv", stem.display()));
    let write = |p: &Path, text: String| {
        fs::write(p, text).map_err(|e| CliError::data(format!("{}: {e}", p.display())))
    };
    write(&svg_path, render_svg(&panels))?;
    write(&csv_out, tidy_csv(&panels))?;
    Ok((svg_path, csv_out))
}
