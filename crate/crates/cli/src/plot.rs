//! Minimal standalone SVG plots of pipeline artifacts.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Result;
use clap::ValueEnum;

use crate::commands::{create, open};
use crate::InputError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    /// `hour, draw0, ...` from `sample`.
    Scenario,
    /// `hour, demand, d_*` from `sample`; Jacobian columns drawn as arrows.
    Gradient,
    /// Planner trajectory: objective, ev_flex, generator and branch additions.
    Trajectory,
}

const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

/// Header plus numeric rows.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(open(path)?);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|v| {
                    v.trim().parse::<f64>().map_err(|_| {
                        InputError(format!("{} row {}: `{v}` is not a number", path.display(), i + 1))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(InputError(format!("{} has no data rows", path.display())).into());
        }
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    fn require(&self, name: &str) -> Result<Vec<f64>> {
        self.column(name)
            .ok_or_else(|| InputError(format!("missing column `{name}`")).into())
    }
}

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

struct Arrow {
    x: f64,
    from: f64,
    to: f64,
    color: &'static str,
}

struct Panel {
    title: String,
    x_label: String,
    series: Vec<Series>,
    arrows: Vec<Arrow>,
}

fn range(values: impl Iterator<Item = f64>, pad: f64) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = lo.abs().max(1.0) * 0.05;
        return (lo - pad, hi + pad);
    }
    let pad = pad * (hi - lo);
    (lo - pad, hi + pad)
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

impl Panel {
    fn render(&self, svg: &mut String, x0: f64, y0: f64, w: f64, h: f64) {
        let (left, right, top, bottom) = (70.0, 15.0, 30.0, 40.0);
        let (pw, ph) = (w - left - right, h - top - bottom);
        let xs = self.series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
        let (xlo, xhi) = range(xs.chain(self.arrows.iter().map(|a| a.x)), 0.0);
        let ys = self.series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
        let (ylo, yhi) = range(ys.chain(self.arrows.iter().flat_map(|a| [a.from, a.to])), 0.05);
        let px = |x: f64| x0 + left + (x - xlo) / (xhi - xlo) * pw;
        let py = |y: f64| y0 + top + (1.0 - (y - ylo) / (yhi - ylo)) * ph;

        let _ = writeln!(
            svg,
            r##"<text x="{:.1}" y="{:.1}" font-size="14" text-anchor="middle">{}</text>"##,
            x0 + left + pw / 2.0,
            y0 + 18.0,
            self.title
        );
        let _ = writeln!(
            svg,
            r##"<rect x="{:.1}" y="{:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="#444"/>"##,
            x0 + left,
            y0 + top
        );
        for (v, anchor_y) in [(ylo, y0 + top + ph), (yhi, y0 + top + 10.0)] {
            let _ = writeln!(
                svg,
                r##"<text x="{:.1}" y="{anchor_y:.1}" font-size="10" text-anchor="end">{}</text>"##,
                x0 + left - 4.0,
                fmt_tick(v)
            );
        }
        for (v, anchor) in [(xlo, "start"), (xhi, "end")] {
            let _ = writeln!(
                svg,
                r##"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="{anchor}">{}</text>"##,
                px(v),
                y0 + top + ph + 14.0,
                fmt_tick(v)
            );
        }
        let _ = writeln!(
            svg,
            r##"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"##,
            x0 + left + pw / 2.0,
            y0 + top + ph + 30.0,
            self.x_label
        );
        for (i, s) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect();
            let _ = writeln!(
                svg,
                r##"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"##,
                pts.join(" ")
            );
            let _ = writeln!(
                svg,
                r##"<text x="{:.1}" y="{:.1}" font-size="10" fill="{color}">{}</text>"##,
                x0 + left + 6.0,
                y0 + top + 14.0 + 12.0 * i as f64,
                s.label
            );
        }
        for a in &self.arrows {
            let (x, y1, y2) = (px(a.x), py(a.from), py(a.to));
            let _ = writeln!(
                svg,
                r##"<line x1="{x:.2}" y1="{y1:.2}" x2="{x:.2}" y2="{y2:.2}" stroke="{}" stroke-width="1.2" marker-end="url(#head-{})"/>"##,
                a.color,
                &a.color[1..]
            );
        }
    }
}

fn document(panels: &[Panel], columns: usize) -> String {
    let (w, h) = (480.0, 300.0);
    let rows = panels.len().div_ceil(columns);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif">"##,
        w * columns as f64,
        h * rows as f64
    );
    let _ = writeln!(svg, "<defs>");
    for c in COLORS {
        let _ = writeln!(
            svg,
            r##"<marker id="head-{}" markerWidth="6" markerHeight="6" refX="3" refY="3" orient="auto"><path d="M0,0 L6,3 L0,6 z" fill="{c}"/></marker>"##,
            &c[1..]
        );
    }
    let _ = writeln!(svg, "</defs>");
    let _ = writeln!(svg, r##"<rect width="100%" height="100%" fill="white"/>"##);
    for (i, p) in panels.iter().enumerate() {
        let (r, c) = (i / columns, i % columns);
        p.render(&mut svg, c as f64 * w, r as f64 * h, w, h);
    }
    svg.push_str("</svg>\n");
    svg
}

fn scenario_panels(t: &Table) -> Result<Vec<Panel>> {
    let hours = t.require("hour")?;
    let series: Vec<Series> = t
        .header
        .iter()
        .filter(|h| *h != "hour")
        .map(|h| Series {
            label: h.clone(),
            points: hours.iter().copied().zip(t.column(h).unwrap()).collect(),
        })
        .collect();
    if series.is_empty() {
        return Err(InputError("scenario file has no demand columns".into()).into());
    }
    Ok(vec![Panel {
        title: "Generated load scenario (p.u.)".into(),
        x_label: "hour".into(),
        series,
        arrows: vec![],
    }])
}

/// One panel per Jacobian column; arrows are scaled so the longest spans a
/// fifth of the demand range.
fn gradient_panels(t: &Table) -> Result<Vec<Panel>> {
    let hours = t.require("hour")?;
    let demand = t.require("demand")?;
    let cols: Vec<&String> = t.header.iter().filter(|h| h.starts_with("d_")).collect();
    if cols.is_empty() {
        return Err(InputError("gradient file has no d_* columns".into()).into());
    }
    let (lo, hi) = range(demand.iter().copied(), 0.0);
    let mut panels = Vec::new();
    for (i, name) in cols.iter().enumerate() {
        let g = t.column(name).unwrap();
        let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let scale = if gmax > 0.0 { 0.2 * (hi - lo) / gmax } else { 0.0 };
        let color = COLORS[(i + 1) % COLORS.len()];
        panels.push(Panel {
            title: format!("Scenario and {name} (arrow scale {scale:.3})"),
            x_label: "hour".into(),
            series: vec![Series {
                label: "demand".into(),
                points: hours.iter().copied().zip(demand.iter().copied()).collect(),
            }],
            arrows: hours
                .iter()
                .zip(&demand)
                .zip(&g)
                .filter(|(_, g)| g.abs() > 1e-12)
                .map(|((&x, &d), &g)| Arrow {
                    x,
                    from: d,
                    to: d + scale * g,
                    color,
                })
                .collect(),
        });
    }
    Ok(panels)
}

fn trajectory_panels(t: &Table) -> Result<Vec<Panel>> {
    let iters = t.require("iter")?;
    let line = |label: &str, values: Vec<f64>| Series {
        label: label.to_string(),
        points: iters.iter().copied().zip(values).collect(),
    };
    let group = |prefix: &str| -> Vec<Series> {
        t.header
            .iter()
            .filter(|h| h.starts_with("eta_") && h[4..].starts_with(prefix))
            .map(|h| line(h, t.column(h).unwrap()))
            .collect()
    };
    let panel = |title: &str, series: Vec<Series>| Panel {
        title: title.to_string(),
        x_label: "iteration".into(),
        series,
        arrows: vec![],
    };
    Ok(vec![
        panel("Planning objective ($)", vec![line("J_hat", t.require("J_hat")?)]),
        panel("EV flexibility", vec![line("pi_ev_flex", t.require("pi_ev_flex")?)]),
        panel("Generator additions (MW)", group("g")),
        panel("Branch additions (MW)", group("b")),
    ])
}

/// Renders `input` as `kind` into `output`. Nothing is written if the input
/// does not fit the kind.
pub fn plot(input: &Path, kind: PlotKind, output: &Path) -> Result<()> {
    let table = Table::read(input)?;
    let (panels, columns) = match kind {
        PlotKind::Scenario => (scenario_panels(&table)?, 1),
        PlotKind::Gradient => (gradient_panels(&table)?, 2),
        PlotKind::Trajectory => (trajectory_panels(&table)?, 2),
    };
    let svg = document(&panels, columns);
    let mut w = create(output)?;
    std::io::Write::write_all(&mut w, svg.as_bytes())?;
    std::io::Write::flush(&mut w)?;
    Ok(())
}
