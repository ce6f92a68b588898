//! CSV and SVG emission, with the matching CSV parser.
//!
//! CSV is the canonical tabular output; every file this crate writes can be
//! read back by [`parse_csv`], and tests hold emitters to that. The dialect
//! is deliberately tiny — comma-separated, newline-terminated, no quoting —
//! so writers reject fields that would need escaping instead of growing a
//! quoting scheme nothing here requires.
//!
//! SVG charts are hand-emitted polylines: one `<polyline>` per series, axes
//! with min/max ticks, and a text legend. They are a convenience rendering
//! of the CSV next to them, not a charting surface.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{PopError, Result};

/// Characters that would require CSV quoting; fields containing them are
/// rejected at write time.
fn csv_hostile(field: &str) -> bool {
    field.contains(',') || field.contains('"') || field.contains('\n') || field.contains('\r')
}

/// Renders a header and rows as CSV text. Every row must have the header's
/// width and every field must be quote-free.
pub fn csv_string(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    if header.is_empty() {
        return Err(PopError::Contract("CSV needs at least one column".into()));
    }
    for field in header {
        if csv_hostile(field) {
            return Err(PopError::Contract(format!(
                "CSV header field {field:?} would need quoting"
            )));
        }
    }
    let mut out = header.join(",");
    out.push('\n');
    for (i, row) in rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(PopError::Contract(format!(
                "CSV row {i} has {} fields, header has {}",
                row.len(),
                header.len()
            )));
        }
        for field in row {
            if csv_hostile(field) {
                return Err(PopError::Contract(format!(
                    "CSV field {field:?} in row {i} would need quoting"
                )));
            }
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}

/// Writes `csv_string(header, rows)` to `path`.
pub fn write_csv(path: impl AsRef<Path>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let path = path.as_ref();
    let text = csv_string(header, rows)?;
    std::fs::write(path, text).map_err(|e| PopError::io(path, e))
}

/// Parses CSV text produced by [`csv_string`]: first line is the header,
/// every later line must have the same field count. Returns (header, rows).
pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut lines = text.split('\n');
    let header_line = lines
        .next()
        .filter(|l| !l.is_empty())
        .ok_or_else(|| PopError::Format("CSV is empty: missing header line".into()))?;
    let header: Vec<String> = header_line.split(',').map(str::to_owned).collect();

    let mut rows = Vec::new();
    let rest: Vec<&str> = lines.collect();
    for (i, line) in rest.iter().enumerate() {
        if line.is_empty() {
            if i + 1 == rest.len() {
                break; // trailing newline
            }
            return Err(PopError::Format(format!("CSV line {} is empty", i + 2)));
        }
        let row: Vec<String> = line.split(',').map(str::to_owned).collect();
        if row.len() != header.len() {
            return Err(PopError::Format(format!(
                "CSV line {} has {} fields, header has {}",
                i + 2,
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// Reads and parses a CSV file.
pub fn read_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| PopError::io(path, e))?;
    parse_csv(&text)
}

/// One line of a chart.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const CHART_W: f64 = 640.0;
const CHART_H: f64 = 400.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn escape_xml(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(c),
        }
    }
    out
}

/// (min, max) over finite values, padded when degenerate so the scale never
/// divides by zero.
fn axis_range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        return None;
    }
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    Some((lo, hi))
}

/// Minimal line chart: one polyline per series, min/max axis ticks, legend.
/// Non-finite points are dropped; at least one finite point across all
/// series is required.
pub fn svg_line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<String> {
    let finite: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            s.points
                .iter()
                .copied()
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .collect()
        })
        .collect();
    let all = finite.iter().flatten().copied();
    let (x_lo, x_hi) = match axis_range(all.clone().map(|(x, _)| x)) {
        Some(r) => r,
        None => {
            return Err(PopError::Contract(
                "chart has no finite points to plot".into(),
            ))
        }
    };
    let (y_lo, y_hi) = axis_range(all.map(|(_, y)| y)).expect("x range implies y range");

    let plot_w = CHART_W - MARGIN_L - MARGIN_R;
    let plot_h = CHART_H - MARGIN_T - MARGIN_B;
    let sx = |x: f64| MARGIN_L + (x - x_lo) / (x_hi - x_lo) * plot_w;
    let sy = |y: f64| MARGIN_T + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {CHART_W} {CHART_H}\" \
         font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(
        svg,
        "  <rect width=\"{CHART_W}\" height=\"{CHART_H}\" fill=\"white\"/>"
    );
    let _ = writeln!(
        svg,
        "  <text x=\"{:.1}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
        MARGIN_L + plot_w / 2.0,
        escape_xml(title)
    );

    // Axes with min/max tick labels.
    let x0 = MARGIN_L;
    let y0 = MARGIN_T + plot_h;
    let _ = writeln!(
        svg,
        "  <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{:.1}\" y2=\"{y0}\" stroke=\"black\"/>",
        MARGIN_L + plot_w
    );
    let _ = writeln!(
        svg,
        "  <line x1=\"{x0}\" y1=\"{MARGIN_T}\" x2=\"{x0}\" y2=\"{y0}\" stroke=\"black\"/>"
    );
    for (val, x) in [(x_lo, x0), (x_hi, MARGIN_L + plot_w)] {
        let _ = writeln!(
            svg,
            "  <text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{val:.4}</text>",
            y0 + 18.0
        );
    }
    for (val, y) in [(y_lo, y0), (y_hi, MARGIN_T)] {
        let _ = writeln!(
            svg,
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{val:.4}</text>",
            x0 - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        svg,
        "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
        MARGIN_L + plot_w / 2.0,
        CHART_H - 12.0,
        escape_xml(x_label)
    );
    let _ = writeln!(
        svg,
        "  <text transform=\"rotate(-90 14 {:.1})\" x=\"14\" y=\"{:.1}\" \
         text-anchor=\"middle\">{}</text>",
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0,
        escape_xml(y_label)
    );

    for (i, pts) in finite.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            svg,
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" \
             points=\"{}\"/>",
            coords.join(" ")
        );
        // Legend entry.
        let ly = MARGIN_T + 14.0 * i as f64;
        let lx = MARGIN_L + plot_w + 12.0;
        let _ = writeln!(
            svg,
            "  <line x1=\"{lx:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" \
             stroke=\"{color}\" stroke-width=\"1.5\"/>",
            ly - 4.0,
            lx + 18.0,
            ly - 4.0
        );
        let _ = writeln!(
            svg,
            "  <text x=\"{:.1}\" y=\"{ly:.1}\">{}</text>",
            lx + 24.0,
            escape_xml(&series[i].name)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
