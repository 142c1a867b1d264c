//! Report emission: human-readable summaries, diffable data tables, and
//! static SVG charts (grouped bars and the stacked gap decomposition).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::eval::RunSummary;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN_LEFT: f64 = 56.0;
const MARGIN_BOTTOM: f64 = 64.0;
const MARGIN_TOP: f64 = 40.0;

fn svg_header(title: &str) -> String {
    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    );
    // Y axis with 0 / 0.5 / 1.0 gridlines.
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    for tick in [0.0f64, 0.25, 0.5, 0.75, 1.0] {
        let y = MARGIN_TOP + plot_h * (1.0 - tick);
        let _ = write!(
            svg,
            "<line x1=\"{MARGIN_LEFT}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" \
             stroke=\"#dddddd\" stroke-width=\"1\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"end\">{tick:.2}</text>\n",
            WIDTH - 16.0,
            MARGIN_LEFT - 6.0,
            y + 3.5,
        );
    }
    svg
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Bar chart of values in [0, 1], one bar per label, with optional ±std
/// whiskers.
pub fn bar_chart_svg(title: &str, labels: &[String], values: &[f64], stds: Option<&[f64]>) -> String {
    let mut svg = svg_header(title);
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let plot_w = WIDTH - MARGIN_LEFT - 16.0;
    let n = labels.len().max(1) as f64;
    let slot = plot_w / n;
    let bar_w = (slot * 0.6).min(80.0);
    for (i, (label, value)) in labels.iter().zip(values).enumerate() {
        let clamped = value.clamp(0.0, 1.0);
        let x = MARGIN_LEFT + slot * i as f64 + (slot - bar_w) / 2.0;
        let h = plot_h * clamped;
        let y = MARGIN_TOP + plot_h - h;
        let _ = write!(
            svg,
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bar_w:.1}\" height=\"{h:.1}\" fill=\"#4878a8\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"middle\">{:.3}</text>\n",
            x + bar_w / 2.0,
            y - 4.0,
            value,
        );
        if let Some(stds) = stds {
            let std = stds[i];
            let top = MARGIN_TOP + plot_h - plot_h * (clamped + std).clamp(0.0, 1.0);
            let bottom = MARGIN_TOP + plot_h - plot_h * (clamped - std).clamp(0.0, 1.0);
            let cx = x + bar_w / 2.0;
            let _ = writeln!(
                svg,
                "<line x1=\"{cx:.1}\" y1=\"{top:.1}\" x2=\"{cx:.1}\" y2=\"{bottom:.1}\" stroke=\"#222222\" stroke-width=\"1.5\"/>"
            );
        }
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"middle\">{}</text>",
            x + bar_w / 2.0,
            HEIGHT - MARGIN_BOTTOM + 16.0,
            escape(label),
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Stacked decomposition per label: usable knowledge at the bottom, gap 2
/// (known but unusable) in the middle, gap 1 (never acquired) on top.
pub fn stacked_gap_svg(title: &str, labels: &[String], rows: &[(f64, f64, f64)]) -> String {
    let mut svg = svg_header(title);
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let plot_w = WIDTH - MARGIN_LEFT - 16.0;
    let n = labels.len().max(1) as f64;
    let slot = plot_w / n;
    let bar_w = (slot * 0.6).min(80.0);
    let colors = ["#3d8a51", "#888888", "#d7d7d7"];
    for (i, (label, (usable, gap2, gap1))) in labels.iter().zip(rows).enumerate() {
        let x = MARGIN_LEFT + slot * i as f64 + (slot - bar_w) / 2.0;
        let mut base = MARGIN_TOP + plot_h;
        for (value, color) in [(usable, colors[0]), (gap2, colors[1]), (gap1, colors[2])] {
            let h = plot_h * value.clamp(0.0, 1.0);
            base -= h;
            let _ = writeln!(
                svg,
                "<rect x=\"{x:.1}\" y=\"{base:.1}\" width=\"{bar_w:.1}\" height=\"{h:.1}\" fill=\"{color}\" stroke=\"white\" stroke-width=\"0.5\"/>"
            );
        }
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"middle\">{}</text>",
            x + bar_w / 2.0,
            HEIGHT - MARGIN_BOTTOM + 16.0,
            escape(label),
        );
    }
    let legend = [
        ("usable knowledge", colors[0]),
        ("gap 2: known, unusable", colors[1]),
        ("gap 1: not acquired", colors[2]),
    ];
    for (i, (name, color)) in legend.iter().enumerate() {
        let y = HEIGHT - 34.0 + i as f64 * 11.0;
        let _ = write!(
            svg,
            "<rect x=\"{MARGIN_LEFT}\" y=\"{:.1}\" width=\"9\" height=\"9\" fill=\"{color}\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"9\">{name}</text>\n",
            y - 8.0,
            MARGIN_LEFT + 13.0,
            y,
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Tab-separated table with a header row.
pub fn table_tsv(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = headers.join("\t");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    out
}

pub fn summary_text(summary: &RunSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "backend: {}", summary.backend_id);
    let _ = writeln!(
        out,
        "runs: {}/{} ({})",
        summary.runs,
        summary.expected_runs,
        if summary.complete { "complete" } else { "PARTIAL" }
    );
    for (name, stats) in [
        ("extraction fraction", &summary.extraction_fraction),
        ("downstream accuracy", &summary.downstream_accuracy),
        ("usable knowledge", &summary.usable_knowledge),
        ("gap 1 (not acquired)", &summary.gap1),
        ("gap 2 (known, unusable)", &summary.gap2),
    ] {
        let _ = writeln!(out, "{name:>24}: {:.4} ± {:.4}", stats.mean, stats.std);
    }
    out
}

pub fn write_if_changed(path: &Path, content: &str) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    if let Ok(existing) = fs::read_to_string(path) {
        if existing == content {
            return Ok(());
        }
    }
    fs::write(path, content)
}
