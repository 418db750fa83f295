//! Error and statistics reports: two CSV tables and grouped-bar SVG panels.

use std::fmt::Write as _;
use std::path::Path;

use fordn_core::eval::{EvalRegion, RegionStats, ERROR_METRIC};
use fordn_core::stats::PairedStats;

use crate::error::{CliError, Result};
use crate::io::write_text;

pub const ERRORS_HEADER: &str = "region,method,mean,std,n,metric";
pub const STATS_HEADER: &str = "pair,region,n,t,p,d,degenerate,metric";

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRow {
    pub region: EvalRegion,
    pub method: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Paired comparison `a_vs_b`; positive d means `a` has the larger errors.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsRow {
    pub a: String,
    pub b: String,
    pub region: EvalRegion,
    pub n: usize,
    pub t: f64,
    pub p: f64,
    pub d: f64,
    pub degenerate: bool,
}

impl StatsRow {
    pub fn new(a: &str, b: &str, region: EvalRegion, s: &PairedStats) -> Self {
        Self {
            a: a.to_string(),
            b: b.to_string(),
            region,
            n: s.n,
            t: s.t,
            p: s.p,
            d: s.d,
            degenerate: s.degenerate,
        }
    }

    pub fn pair(&self) -> String {
        format!("{}_vs_{}", self.a, self.b)
    }
}

impl ErrorRow {
    pub fn new(method: &str, region: EvalRegion, s: &RegionStats) -> Self {
        Self {
            region,
            method: method.to_string(),
            mean: s.mean,
            std: s.std,
            n: s.n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub errors: Vec<ErrorRow>,
    pub stats: Vec<StatsRow>,
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Splits one CSV line, honoring double quotes.
fn csv_fields(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => out.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    out.push(cur);
    out
}

pub fn format_errors_csv(rows: &[ErrorRow]) -> String {
    let metric = csv_escape(ERROR_METRIC);
    let mut out = format!("{ERRORS_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{},{metric}", r.region.name(), r.method, r.mean, r.std, r.n).unwrap();
    }
    out
}

pub fn format_stats_csv(rows: &[StatsRow]) -> String {
    let metric = csv_escape(ERROR_METRIC);
    let mut out = format!("{STATS_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{metric}",
            r.pair(),
            r.region.name(),
            r.n,
            r.t,
            r.p,
            r.d,
            r.degenerate
        )
        .unwrap();
    }
    out
}

fn parse_rows<T>(path: &Path, text: &str, header: &str, parse: impl Fn(&[String]) -> Option<T>) -> Result<Vec<T>> {
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(CliError::format(path, format!("expected header '{header}'")));
    }
    let columns = header.split(',').count();
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let fields = csv_fields(l);
            (fields.len() == columns)
                .then(|| parse(&fields))
                .flatten()
                .ok_or_else(|| CliError::format(path, format!("row {}: malformed '{l}'", i + 1)))
        })
        .collect()
}

pub fn parse_errors_csv(path: &Path, text: &str) -> Result<Vec<ErrorRow>> {
    parse_rows(path, text, ERRORS_HEADER, |f| {
        Some(ErrorRow {
            region: EvalRegion::parse(&f[0]).ok()?,
            method: f[1].clone(),
            mean: f[2].parse().ok()?,
            std: f[3].parse().ok()?,
            n: f[4].parse().ok()?,
        })
    })
}

pub fn parse_stats_csv(path: &Path, text: &str) -> Result<Vec<StatsRow>> {
    parse_rows(path, text, STATS_HEADER, |f| {
        let (a, b) = f[0].split_once("_vs_")?;
        Some(StatsRow {
            a: a.to_string(),
            b: b.to_string(),
            region: EvalRegion::parse(&f[1]).ok()?,
            n: f[2].parse().ok()?,
            t: f[3].parse().ok()?,
            p: f[4].parse().ok()?,
            d: f[5].parse().ok()?,
            degenerate: f[6].parse().ok()?,
        })
    })
}

/// One bar group per category, one bar per series.
#[derive(Debug, Clone)]
pub struct BarChart {
    pub title: String,
    pub y_label: String,
    pub categories: Vec<String>,
    /// `(series name, value per category, optional error bar per category)`
    pub series: Vec<(String, Vec<f64>, Option<Vec<f64>>)>,
}

const PALETTE: [&str; 6] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#b07aa1"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Static SVG 1.1 grouped bar chart. Non-finite values are drawn as empty
/// bars.
pub fn render_bar_chart(chart: &BarChart) -> String {
    let (width, height) = (720.0, 420.0);
    let (left, right, top, bottom) = (70.0, 150.0, 40.0, 50.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let finite = |v: f64| if v.is_finite() { v } else { 0.0 };
    let mut lo = 0.0f64;
    let mut hi = 0.0f64;
    for (_, values, errs) in &chart.series {
        for (i, &v) in values.iter().enumerate() {
            let e = errs.as_ref().map_or(0.0, |e| finite(e[i]));
            hi = hi.max(finite(v) + e);
            lo = lo.min(finite(v) - e);
        }
    }
    if hi - lo <= 0.0 {
        hi = lo + 1.0;
    }
    let span = hi - lo;
    let y_of = |v: f64| top + plot_h * (hi - v) / span;

    let mut s = String::new();
    writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#).unwrap();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    )
    .unwrap();
    writeln!(s, "<title>{}</title>", xml_escape(&chart.title)).unwrap();
    writeln!(s, r#"<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
        left + plot_w / 2.0,
        xml_escape(&chart.title)
    )
    .unwrap();
    for tick in 0..=5 {
        let v = lo + span * tick as f64 / 5.0;
        let y = y_of(v);
        writeln!(
            s,
            r##"<line x1="{left}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/>"##,
            left + plot_w
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.2}</text>"#,
            left - 6.0,
            y + 4.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="16" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0,
        xml_escape(&chart.y_label)
    )
    .unwrap();

    let groups = chart.categories.len().max(1) as f64;
    let group_w = plot_w / groups;
    let bars = chart.series.len().max(1) as f64;
    let bar_w = group_w * 0.8 / bars;
    let zero = y_of(0.0);
    for (c, category) in chart.categories.iter().enumerate() {
        let gx = left + group_w * c as f64;
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
            gx + group_w / 2.0,
            top + plot_h + 20.0,
            xml_escape(category)
        )
        .unwrap();
        for (b, (_, values, errs)) in chart.series.iter().enumerate() {
            let v = finite(values[c]);
            let x = gx + group_w * 0.1 + bar_w * b as f64;
            let (y0, y1) = (y_of(v).min(zero), y_of(v).max(zero));
            writeln!(
                s,
                r#"<rect x="{x:.2}" y="{y0:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                bar_w * 0.9,
                y1 - y0,
                PALETTE[b % PALETTE.len()]
            )
            .unwrap();
            if let Some(e) = errs.as_ref().map(|e| finite(e[c])).filter(|&e| e > 0.0) {
                let cx = x + bar_w * 0.45;
                writeln!(
                    s,
                    r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="black"/>"#,
                    y_of(v + e),
                    y_of(v - e)
                )
                .unwrap();
            }
        }
    }
    writeln!(
        s,
        r#"<line x1="{left}" y1="{zero:.2}" x2="{:.2}" y2="{zero:.2}" stroke="black"/>"#,
        left + plot_w
    )
    .unwrap();
    for (b, (name, _, _)) in chart.series.iter().enumerate() {
        let y = top + 18.0 * b as f64;
        let x = width - right + 15.0;
        writeln!(
            s,
            r#"<rect x="{x}" y="{y}" width="12" height="12" fill="{}"/>"#,
            PALETTE[b % PALETTE.len()]
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12">{}</text>"#,
            x + 18.0,
            y + 10.0,
            xml_escape(name)
        )
        .unwrap();
    }
    writeln!(s, "</svg>").unwrap();
    s
}

fn methods_in_order(rows: &[ErrorRow]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in rows {
        if !out.contains(&r.method) {
            out.push(r.method.clone());
        }
    }
    out
}

pub fn errors_chart(rows: &[ErrorRow]) -> BarChart {
    let categories: Vec<String> = EvalRegion::ALL.iter().map(|r| r.name().to_string()).collect();
    let series = methods_in_order(rows)
        .into_iter()
        .map(|m| {
            let pick = |f: fn(&ErrorRow) -> f64| {
                EvalRegion::ALL
                    .iter()
                    .map(|&reg| rows.iter().find(|r| r.method == m && r.region == reg).map_or(f64::NAN, f))
                    .collect::<Vec<_>>()
            };
            (m.to_uppercase(), pick(|r| r.mean), Some(pick(|r| r.std)))
        })
        .collect();
    BarChart {
        title: "FO errors (mean and standard deviation)".into(),
        y_label: "FO error (degrees)".into(),
        categories,
        series,
    }
}

pub fn effect_size_chart(rows: &[StatsRow]) -> BarChart {
    let mut pairs: Vec<String> = Vec::new();
    for r in rows {
        if !pairs.contains(&r.pair()) {
            pairs.push(r.pair());
        }
    }
    let series = pairs
        .into_iter()
        .map(|p| {
            let values = EvalRegion::ALL
                .iter()
                .map(|&reg| rows.iter().find(|r| r.pair() == p && r.region == reg).map_or(f64::NAN, |r| r.d))
                .collect();
            (p.replace("_vs_", " vs "), values, None)
        })
        .collect();
    BarChart {
        title: "Effect sizes (Cohen's d, positive: second method better)".into(),
        y_label: "Cohen's d".into(),
        categories: EvalRegion::ALL.iter().map(|r| r.name().to_string()).collect(),
        series,
    }
}

/// Writes `errors.csv`, `stats.csv`, `errors.svg` and (with stats)
/// `effect_sizes.svg` into `dir`.
pub fn emit_report(dir: &Path, report: &Report) -> Result<()> {
    if report.errors.is_empty() {
        return Err(CliError::Validation("report has no error rows".into()));
    }
    write_text(&dir.join("errors.csv"), &format_errors_csv(&report.errors))?;
    write_text(&dir.join("stats.csv"), &format_stats_csv(&report.stats))?;
    write_text(&dir.join("errors.svg"), &render_bar_chart(&errors_chart(&report.errors)))?;
    if !report.stats.is_empty() {
        write_text(&dir.join("effect_sizes.svg"), &render_bar_chart(&effect_size_chart(&report.stats)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Report {
        let mut errors = Vec::new();
        for (m, base) in [("cfari", 6.0), ("fordn", 3.0)] {
            for (i, reg) in EvalRegion::ALL.into_iter().enumerate() {
                errors.push(ErrorRow {
                    region: reg,
                    method: m.into(),
                    mean: base + i as f64 * 0.1234567891234,
                    std: 1.0 / 3.0,
                    n: 100 + i,
                });
            }
        }
        let stats = EvalRegion::ALL
            .into_iter()
            .map(|reg| StatsRow {
                a: "cfari".into(),
                b: "fordn".into(),
                region: reg,
                n: 100,
                t: 12.5,
                p: 1.2345e-30,
                d: if reg == EvalRegion::ThreeCrossing { f64::INFINITY } else { 0.75 },
                degenerate: reg == EvalRegion::ThreeCrossing,
            })
            .collect();
        Report { errors, stats }
    }

    #[test]
    fn two_methods_give_eight_rows() {
        let r = sample();
        let text = format_errors_csv(&r.errors);
        assert_eq!(text.lines().count(), 9);
        assert!(text.lines().skip(1).all(|l| l.ends_with(ERROR_METRIC)));
    }

    #[test]
    fn csv_round_trip() {
        let r = sample();
        let p = Path::new("x.csv");
        assert_eq!(parse_errors_csv(p, &format_errors_csv(&r.errors)).unwrap(), r.errors);
        assert_eq!(parse_stats_csv(p, &format_stats_csv(&r.stats)).unwrap(), r.stats);
        assert!(parse_errors_csv(p, "region,method\n").is_err());
        assert!(parse_errors_csv(p, &format!("{ERRORS_HEADER}\nall,cfari,x,1,2,m\n")).is_err());
    }

    #[test]
    fn csv_fields_handle_quotes() {
        assert_eq!(csv_fields(r#"a,"b,c","d""e""#), vec!["a", "b,c", "d\"e"]);
    }

    #[test]
    fn svg_is_well_formed() {
        let r = sample();
        for svg in [render_bar_chart(&errors_chart(&r.errors)), render_bar_chart(&effect_size_chart(&r.stats))] {
            assert!(svg.contains("<svg") && svg.trim_end().ends_with("</svg>"));
            assert!(!svg.contains("NaN") && !svg.contains("inf"));
            let doc = roxmltree::Document::parse(&svg).unwrap();
            assert_eq!(doc.root_element().tag_name().name(), "svg");
            assert!(!svg.contains("<script"));
        }
    }

    #[test]
    fn emit_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(dir.path(), &sample()).unwrap();
        for f in ["errors.csv", "stats.csv", "errors.svg", "effect_sizes.svg"] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        assert!(emit_report(dir.path(), &Report::default()).is_err());
    }
}
