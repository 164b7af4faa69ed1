//! Static SVG plots rendered from CSV text. Every plot is a pure function of
//! the CSV it was drawn from, so figures can be rebuilt offline.

use std::collections::BTreeMap;
use std::fmt::Write;

use anyhow::{anyhow, Context, Result};

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"];

/// What to draw from a CSV table.
#[derive(Clone, Debug)]
pub struct PlotSpec<'a> {
    pub title: &'a str,
    pub x: &'a str,
    /// One line per column, or per `group` value when `group` is set (then
    /// exactly one column is expected).
    pub y: &'a [&'a str],
    pub group: Option<&'a str>,
    pub log_y: bool,
    /// Points instead of polylines.
    pub scatter: bool,
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn parse(text: &str) -> Result<Table> {
        let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let header = rdr.headers()?.iter().map(str::to_string).collect();
        let rows = rdr
            .records()
            .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Table { header, rows })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow!("column `{name}` not in CSV header {:?}", self.header))
    }

    fn num(&self, row: usize, col: usize) -> Result<f64> {
        let s = &self.rows[row][col];
        s.parse().with_context(|| format!("non-numeric value `{s}`"))
    }
}

type Series = Vec<(String, Vec<(f64, f64)>)>;

fn collect_series(t: &Table, spec: &PlotSpec) -> Result<Series> {
    let xi = t.col(spec.x)?;
    let mut out: Series = Vec::new();
    match spec.group {
        Some(g) => {
            let gi = t.col(g)?;
            let yi = t.col(spec.y.first().ok_or_else(|| anyhow!("no y column"))?)?;
            // first-appearance order keeps the legend stable
            let mut index: BTreeMap<String, usize> = BTreeMap::new();
            for r in 0..t.rows.len() {
                let key = t.rows[r][gi].clone();
                let k = *index.entry(key.clone()).or_insert_with(|| {
                    out.push((key, Vec::new()));
                    out.len() - 1
                });
                out[k].1.push((t.num(r, xi)?, t.num(r, yi)?));
            }
        }
        None => {
            for name in spec.y {
                let yi = t.col(name)?;
                let pts = (0..t.rows.len()).map(|r| Ok((t.num(r, xi)?, t.num(r, yi)?))).collect::<Result<_>>()?;
                out.push((name.to_string(), pts));
            }
        }
    }
    if spec.log_y {
        for (_, pts) in &mut out {
            pts.retain(|p| p.1 > 0.0);
            pts.iter_mut().for_each(|p| p.1 = p.1.log10());
        }
    }
    for (_, pts) in &mut out {
        pts.retain(|p| p.0.is_finite() && p.1.is_finite());
    }
    Ok(out)
}

fn bounds(series: &Series) -> (f64, f64, f64, f64) {
    let mut b = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (_, pts) in series {
        for &(x, y) in pts {
            b = (b.0.min(x), b.1.max(x), b.2.min(y), b.3.max(y));
        }
    }
    if !b.0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |lo: f64, hi: f64| {
        if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            let p = 0.05 * (hi - lo);
            (lo - p, hi + p)
        }
    };
    let (x0, x1) = pad(b.0, b.1);
    let (y0, y1) = pad(b.2, b.3);
    (x0, x1, y0, y1)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders `spec` from `csv_text`.
pub fn render(csv_text: &str, spec: &PlotSpec) -> Result<String> {
    let table = Table::parse(csv_text)?;
    let series = collect_series(&table, spec)?;
    let (x0, x1, y0, y1) = bounds(&series);
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, LEFT + pw / 2.0, escape(spec.title));
    let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let ylabel = if spec.log_y { format!("1e{yv:.2}") } else { format!("{yv:.3}") };
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle">{xv:.3}</text>"#, sx(xv), H - BOTTOM + 16.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{ylabel}</text>"#, LEFT - 6.0, sy(yv) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 12.0, escape(spec.x));
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        if spec.scatter {
            for &(x, y) in pts {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="1.5" fill="{color}" fill-opacity="0.6"/>"#, sx(x), sy(y));
            }
        } else {
            let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, coords.join(" "));
        }
        let ly = TOP + 16.0 * i as f64 + 8.0;
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/>"#, W - RIGHT + 12.0, ly - 8.0);
        let _ = writeln!(s, r#"<text x="{}" y="{ly}">{}</text>"#, W - RIGHT + 28.0, escape(name));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// The plots each command emits, keyed by CSV file name.
pub fn plot_for(csv_name: &str) -> Option<PlotSpec<'static>> {
    let spec = match csv_name {
        "train_log.csv" => PlotSpec {
            title: "training loss",
            x: "step",
            y: &["loss", "score_term"],
            group: None,
            log_y: true,
            scatter: false,
        },
        "sensitivity.csv" => PlotSpec {
            title: "normalized sensitivity by depth",
            x: "depth",
            y: &["normalized"],
            group: Some("series"),
            log_y: false,
            scatter: false,
        },
        "samples.csv" => PlotSpec {
            title: "generated samples",
            x: "x0",
            y: &["x1"],
            group: None,
            log_y: false,
            scatter: true,
        },
        "pfode_check.csv" => PlotSpec {
            title: "SDE vs probability-flow marginals",
            x: "t",
            y: &["mean_diff", "cov_diff", "tolerance"],
            group: None,
            log_y: false,
            scatter: false,
        },
        "depth_scaling.csv" => PlotSpec {
            title: "loss by depth",
            x: "depth",
            y: &["eval_loss"],
            group: Some("mode"),
            log_y: true,
            scatter: false,
        },
        "variants.csv" => PlotSpec {
            title: "sliced Wasserstein by seed",
            x: "seed",
            y: &["sw"],
            group: Some("variant"),
            log_y: false,
            scatter: true,
        },
        _ => return None,
    };
    Some(spec)
}

/// SVG file name for a CSV file name.
pub fn svg_name(csv_name: &str) -> String {
    csv_name.strip_suffix(".csv").unwrap_or(csv_name).to_string() + ".svg"
}
