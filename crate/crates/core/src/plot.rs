//! Grouped per-dataset bar charts as standalone SVG.
//!
//! Every bar carries `data-method`, `data-dataset` and `data-value`
//! attributes holding the exact plotted number, so charts can be checked
//! against the results files they came from.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{format_pct, MetricsTable, ReportSplit};

#[derive(Clone, Debug, PartialEq)]
pub struct PlotBar {
    pub method: String,
    pub dataset: String,
    pub value: f64,
}

const PALETTE: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#9c755f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn unescape(s: &str) -> String {
    s.replace("&quot;", "\"")
        .replace("&gt;", ">")
        .replace("&lt;", "<")
        .replace("&amp;", "&")
}

/// Series are (table, method) pairs in input order; datasets are those every table reports.
pub fn emit_comparison_plot(tables: &[MetricsTable], split: ReportSplit) -> Result<String> {
    if tables.is_empty() || tables.iter().all(|t| t.rows.is_empty()) {
        return Err(Error::Contract("nothing to plot".into()));
    }
    let mut datasets = tables[0].datasets();
    for t in &tables[1..] {
        let other = t.datasets();
        datasets.retain(|d| other.contains(d));
    }
    for t in tables {
        for d in t.datasets() {
            if !datasets.contains(&d) {
                log::warn!("dataset {d} is not in every results file; left out of the plot");
            }
        }
    }
    if datasets.is_empty() {
        return Err(Error::Contract("results files share no dataset".into()));
    }
    let mut series: Vec<(String, &MetricsTable, String)> = Vec::new();
    for t in tables {
        for m in t.methods() {
            let n = series.iter().filter(|(_, _, orig)| *orig == m).count();
            let name = if n == 0 { m.clone() } else { format!("{m} ({})", n + 1) };
            series.push((name, t, m));
        }
    }

    let bar_w = 14.0;
    let group_gap = 24.0;
    let group_w = bar_w * series.len() as f64 + group_gap;
    let left = 60.0;
    let top = 20.0;
    let plot_h = 240.0;
    let legend_h = 18.0 * series.len() as f64 + 10.0;
    let width = left + group_w * datasets.len() as f64 + 20.0;
    let height = top + plot_h + 90.0 + legend_h;
    let y = |v: f64| top + plot_h * (1.0 - v / 100.0);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for tick in (0..=100).step_by(20) {
        let ty = y(tick as f64);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{ty:.1}" x2="{:.1}" y2="{ty:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{tick}</text>"##,
            width - 20.0,
            left - 6.0,
            ty + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">accuracy (%)</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0
    );
    for (di, d) in datasets.iter().enumerate() {
        let gx = left + group_gap / 2.0 + group_w * di as f64;
        for (si, (name, table, method)) in series.iter().enumerate() {
            let x = gx + bar_w * si as f64;
            match table.seed_mean(method, d, split) {
                Some(v) => {
                    let _ = writeln!(
                        s,
                        r#"<rect class="bar" x="{x:.1}" y="{:.1}" width="{bar_w}" height="{:.1}" fill="{}" data-method="{}" data-dataset="{}" data-value="{v}"><title>{} on {}: {}</title></rect>"#,
                        y(v),
                        plot_h * v / 100.0,
                        PALETTE[si % PALETTE.len()],
                        escape(name),
                        escape(d),
                        escape(name),
                        escape(d),
                        format_pct(v)
                    );
                }
                None => {
                    let _ = writeln!(
                        s,
                        r#"<text class="gap" x="{:.1}" y="{:.1}" text-anchor="middle" font-size="8" data-method="{}" data-dataset="{}">n/a</text>"#,
                        x + bar_w / 2.0,
                        top + plot_h - 3.0,
                        escape(name),
                        escape(d)
                    );
                }
            }
        }
        let cx = gx + bar_w * series.len() as f64 / 2.0;
        let ly = top + plot_h + 14.0;
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{ly:.1}" text-anchor="end" transform="rotate(-35 {cx:.1} {ly:.1})">{}</text>"#,
            escape(d)
        );
    }
    let ly0 = top + plot_h + 80.0;
    for (si, (name, _, _)) in series.iter().enumerate() {
        let ly = ly0 + 18.0 * si as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{left}" y="{:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{ly:.1}">{}</text>"#,
            ly - 10.0,
            PALETTE[si % PALETTE.len()],
            left + 18.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn write_comparison_plot(results: &[&Path], out: &Path, split: ReportSplit) -> Result<()> {
    let tables = results
        .iter()
        .map(|p| MetricsTable::read_csv(p))
        .collect::<Result<Vec<_>>>()?;
    std::fs::write(out, emit_comparison_plot(&tables, split)?)?;
    Ok(())
}

fn attr(tag: &str, name: &str) -> Option<String> {
    let key = format!(" {name}=\"");
    let start = tag.find(&key)? + key.len();
    let end = start + tag[start..].find('"')?;
    Some(unescape(&tag[start..end]))
}

/// Bars of a chart written by [`emit_comparison_plot`], in drawing order.
pub fn parse_plot(svg: &str) -> Result<Vec<PlotBar>> {
    svg.lines()
        .filter(|l| l.starts_with("<rect class=\"bar\""))
        .map(|l| {
            let get = |n: &str| attr(l, n).ok_or_else(|| Error::Serialization(format!("bar without {n}")));
            Ok(PlotBar {
                method: get("data-method")?,
                dataset: get("data-dataset")?,
                value: get("data-value")?
                    .parse()
                    .map_err(|_| Error::Serialization("bar value is not a number".into()))?,
            })
        })
        .collect()
}
