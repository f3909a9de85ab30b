//! ROUGE vs. novelty Pareto frontiers and their CSV/SVG rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub label: String,
    pub family: String,
    /// ROUGE-n F-score.
    pub x: f64,
    /// Novel n-gram percentage of the same order.
    pub y: f64,
}

impl ParetoPoint {
    pub fn new(label: impl Into<String>, family: impl Into<String>, x: f64, y: f64) -> Result<Self> {
        let p = Self {
            label: label.into(),
            family: family.into(),
            x,
            y,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.x.is_finite() || !self.y.is_finite() || !(0.0..=100.0).contains(&self.y) {
            return Err(Error::Data(format!(
                "point {:?} has invalid coordinates ({}, {})",
                self.label, self.x, self.y
            )));
        }
        Ok(())
    }

    /// `self` is at least as good on both axes and strictly better on one.
    pub fn dominates(&self, other: &ParetoPoint) -> bool {
        self.x >= other.x && self.y >= other.y && (self.x > other.x || self.y > other.y)
    }
}

/// Non-dominated points sorted by increasing `x`. Exact duplicates are all kept.
pub fn pareto_frontier(points: &[ParetoPoint]) -> Result<Vec<ParetoPoint>> {
    if points.is_empty() {
        return Err(Error::EmptyInput("pareto points"));
    }
    for p in points {
        p.validate()?;
    }
    let mut sorted: Vec<&ParetoPoint> = points.iter().collect();
    sorted.sort_by(|a, b| {
        b.x.total_cmp(&a.x)
            .then(b.y.total_cmp(&a.y))
            .then_with(|| a.label.cmp(&b.label))
    });
    let mut frontier = Vec::new();
    let mut best_right = f64::NEG_INFINITY;
    let mut i = 0;
    while i < sorted.len() {
        // sorted[i] has the largest y among points sharing its x
        let x = sorted[i].x;
        let top = sorted[i].y;
        let mut j = i;
        while j < sorted.len() && sorted[j].x == x {
            if sorted[j].y == top && top > best_right {
                frontier.push(sorted[j].clone());
            }
            j += 1;
        }
        best_right = best_right.max(top);
        i = j;
    }
    frontier.reverse();
    Ok(frontier)
}

/// Frontier of each family, keyed by family name.
pub fn frontiers_by_family(points: &[ParetoPoint]) -> Result<BTreeMap<String, Vec<ParetoPoint>>> {
    let mut groups: BTreeMap<String, Vec<ParetoPoint>> = BTreeMap::new();
    for p in points {
        groups.entry(p.family.clone()).or_default().push(p.clone());
    }
    groups
        .into_iter()
        .map(|(k, v)| Ok((k, pareto_frontier(&v)?)))
        .collect()
}

pub fn write_points_csv(points: &[ParetoPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if points.is_empty() {
        w.write_record(["label", "family", "x", "y"]).map_err(csv_err)?;
    }
    for p in points {
        w.serialize(p).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_points_csv(path: &Path) -> Result<Vec<ParetoPoint>> {
    parse_points(csv::Reader::from_path(path).map_err(csv_err)?)
}

/// Points from CSV text with a `label,family,x,y` header.
pub fn parse_points_csv(text: &str) -> Result<Vec<ParetoPoint>> {
    parse_points(csv::Reader::from_reader(text.as_bytes()))
}

fn parse_points<R: std::io::Read>(mut r: csv::Reader<R>) -> Result<Vec<ParetoPoint>> {
    let points = r
        .deserialize()
        .collect::<std::result::Result<Vec<ParetoPoint>, _>>()
        .map_err(csv_err)?;
    for p in &points {
        p.validate()?;
    }
    Ok(points)
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Data(format!("csv: {other:?}")),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlotFiles {
    pub csv: PathBuf,
    pub svg: PathBuf,
}

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Scatter of every point with one frontier polyline per family.
pub fn render_svg(points: &[ParetoPoint], frontiers: &BTreeMap<String, Vec<ParetoPoint>>, x_label: &str, y_label: &str) -> String {
    let (mut x0, mut x1) = (0.0f64, 1.0f64);
    for p in points {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
    }
    let (y0, y1) = (0.0, points.iter().map(|p| p.y).fold(1.0f64, f64::max));
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{t}" x2="{m}" y2="{b}" stroke="black"/>"#,
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
        t = MARGIN
    );
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{fx:.2}</text><text x="{:.1}" y="{:.1}" text-anchor="end">{fy:.2}</text>"#,
            sx(fx),
            H - MARGIN + 16.0,
            MARGIN - 6.0,
            sy(fy) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text><text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        W / 2.0,
        H - 16.0,
        escape(x_label),
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    let color_of: BTreeMap<&str, &str> = frontiers
        .keys()
        .enumerate()
        .map(|(i, f)| (f.as_str(), COLORS[i % COLORS.len()]))
        .collect();
    for (i, (family, front)) in frontiers.iter().enumerate() {
        let color = color_of[family.as_str()];
        let pts: Vec<String> = front.iter().map(|p| format!("{:.2},{:.2}", sx(p.x), sy(p.y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline class="frontier" data-family="{}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            escape(family),
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{}</text>"#,
            W - MARGIN - 120.0,
            MARGIN + 16.0 * i as f64,
            escape(family)
        );
    }
    for p in points {
        let color = color_of.get(p.family.as_str()).copied().unwrap_or("black");
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{color}"><title>{} ({}, {})</title></circle>"#,
            sx(p.x),
            sy(p.y),
            escape(&p.label),
            p.x,
            p.y
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `<stem>.csv` with every point and `<stem>.svg` with the scatter
/// and per-family frontiers. An empty point set gives a header-only CSV and
/// bare axes.
pub fn emit_plots(
    points: &[ParetoPoint],
    frontiers: &BTreeMap<String, Vec<ParetoPoint>>,
    dir: &Path,
    stem: &str,
    axis_labels: (&str, &str),
) -> Result<PlotFiles> {
    fs::create_dir_all(dir)?;
    let files = PlotFiles {
        csv: dir.join(format!("{stem}.csv")),
        svg: dir.join(format!("{stem}.svg")),
    };
    write_points_csv(points, &files.csv)?;
    fs::write(&files.svg, render_svg(points, frontiers, axis_labels.0, axis_labels.1))?;
    Ok(files)
}
