//! Report files: per-case metrics CSV, agreement CSV and SVG plots, JSON.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::experiment::{Indicator, Report, Structure};
use crate::metrics::{BlandAltmanResult, MetricsRecord, LIMIT_Z};

pub const METRICS_CSV: &str = "metrics.csv";
pub const AGREEMENT_CSV: &str = "bland_altman.csv";
pub const REPORT_JSON: &str = "report.json";

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub case_id: String,
    pub structure: Structure,
    pub dsc: f64,
    pub recall: f64,
    pub precision: f64,
    pub area_mm2: f64,
    pub volume_mm3: f64,
    pub burden_index: f64,
}

impl MetricsRow {
    pub fn new(case_id: &str, structure: Structure, r: &MetricsRecord) -> Self {
        MetricsRow {
            case_id: case_id.to_string(),
            structure,
            dsc: r.dsc,
            recall: r.recall,
            precision: r.precision,
            area_mm2: r.area_mm2,
            volume_mm3: r.volume_mm3,
            burden_index: r.burden_index,
        }
    }

    pub fn record(&self) -> MetricsRecord {
        MetricsRecord {
            dsc: self.dsc,
            recall: self.recall,
            precision: self.precision,
            area_mm2: self.area_mm2,
            volume_mm3: self.volume_mm3,
            burden_index: self.burden_index,
        }
    }
}

/// One line of `bland_altman.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub indicator: Indicator,
    pub n: usize,
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub lower_limit: f64,
    pub upper_limit: f64,
    pub fraction_within: f64,
}

pub fn metrics_rows(report: &Report) -> Vec<MetricsRow> {
    report
        .cases
        .iter()
        .flat_map(|c| c.records.iter().map(|(s, r)| MetricsRow::new(&c.case_id, *s, r)))
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub const METRICS_HEADER: [&str; 8] = ["case_id", "structure", "dsc", "recall", "precision", "area_mm2", "volume_mm3", "burden_index"];
const AGREEMENT_HEADER: [&str; 7] = ["indicator", "n", "mean_diff", "sd_diff", "lower_limit", "upper_limit", "fraction_within"];

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?)
}

pub fn read_agreement_csv(path: &Path) -> Result<Vec<AgreementRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<AgreementRow>, _>>()?)
}

/// Shortest text that parses back to the same `f64`, as used in the CSVs.
pub fn num(v: f64) -> String {
    format!("{v}")
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 60.0;

struct Axis {
    lo: f64,
    hi: f64,
    from: f64,
    to: f64,
}

impl Axis {
    fn new(values: impl Iterator<Item = f64>, from: f64, to: f64) -> Self {
        let (mut lo, mut hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        if !lo.is_finite() || !hi.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        let pad = if hi > lo { 0.08 * (hi - lo) } else { lo.abs().max(1.0) * 0.1 };
        Axis { lo: lo - pad, hi: hi + pad, from, to }
    }

    fn map(&self, v: f64) -> f64 {
        self.from + (v - self.lo) / (self.hi - self.lo) * (self.to - self.from)
    }
}

/// Scatter of `(mean, difference)` with the mean and limit lines. Every
/// number printed in the plot is also carried in a `data-value` attribute.
pub fn bland_altman_svg(indicator: Indicator, ba: &BlandAltmanResult) -> String {
    let x = Axis::new(ba.points.iter().map(|p| p.0), MARGIN, W - MARGIN);
    let ys = ba.points.iter().map(|p| p.1).chain([ba.lower_limit, ba.upper_limit, ba.mean_diff]);
    let y = Axis::new(ys, H - MARGIN, MARGIN);
    let unit = indicator.unit();
    let unit_suffix = if unit.is_empty() { String::new() } else { format!(" ({unit})") };
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<title>Bland-Altman: {}</title>"#, indicator.as_str());
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r##"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="#888"/>"##,
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">mean of manual and automatic{unit_suffix}</text>"#,
        W / 2.0,
        H - 18.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" font-size="13" transform="rotate(-90 16 {})" text-anchor="middle">automatic - manual{unit_suffix}</text>"#,
        H / 2.0,
        H / 2.0
    );
    let lines = [
        ("mean", ba.mean_diff, "#1f4e9c", "none"),
        ("upper", ba.upper_limit, "#b22222", "6 4"),
        ("lower", ba.lower_limit, "#b22222", "6 4"),
    ];
    for (class, v, colour, dash) in lines {
        let py = y.map(v);
        let _ = writeln!(
            s,
            r#"<line class="{class}" data-value="{}" x1="{MARGIN}" y1="{py:.2}" x2="{}" y2="{py:.2}" stroke="{colour}" stroke-dasharray="{dash}"/>"#,
            num(v),
            W - MARGIN
        );
        let label = match class {
            "mean" => "mean".to_string(),
            "upper" => format!("+{LIMIT_Z} SD"),
            _ => format!("-{LIMIT_Z} SD"),
        };
        let _ = writeln!(
            s,
            r#"<text class="{class}-label" data-value="{}" x="{}" y="{:.2}" font-size="11" text-anchor="end">{label}: {}</text>"#,
            num(v),
            W - MARGIN - 4.0,
            py - 4.0,
            num(v)
        );
    }
    for &(m, d) in &ba.points {
        let _ = writeln!(
            s,
            r##"<circle class="point" data-mean="{}" data-diff="{}" cx="{:.2}" cy="{:.2}" r="3.5" fill="#333" fill-opacity="0.7"/>"##,
            num(m),
            num(d),
            x.map(m),
            y.map(d)
        );
    }
    let _ = writeln!(s, "</svg>");
    s
}

pub fn svg_name(indicator: Indicator) -> String {
    format!("bland_altman_{}.svg", indicator.as_str())
}

/// Writes `metrics.csv`, `bland_altman.csv`, one SVG per indicator and
/// `report.json` into `out_dir`.
pub fn emit_report(report: &Report, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    write_csv(&out_dir.join(METRICS_CSV), &metrics_rows(report), &METRICS_HEADER)?;
    let agreement: Vec<AgreementRow> = report
        .bland_altman
        .iter()
        .map(|(ind, ba)| AgreementRow {
            indicator: *ind,
            n: ba.points.len(),
            mean_diff: ba.mean_diff,
            sd_diff: ba.sd_diff,
            lower_limit: ba.lower_limit,
            upper_limit: ba.upper_limit,
            fraction_within: ba.fraction_within,
        })
        .collect();
    write_csv(&out_dir.join(AGREEMENT_CSV), &agreement, &AGREEMENT_HEADER)?;
    for (ind, ba) in &report.bland_altman {
        fs::write(out_dir.join(svg_name(*ind)), bland_altman_svg(*ind, ba))?;
    }
    fs::write(out_dir.join(REPORT_JSON), serde_json::to_string_pretty(report)? + "\n")?;
    Ok(())
}

/// Loads a report written by [`emit_report`].
pub fn load_report(dir: &Path) -> Result<Report> {
    Ok(serde_json::from_slice(&fs::read(dir.join(REPORT_JSON))?)?)
}
