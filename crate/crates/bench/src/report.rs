//! CSV and SVG emission of precision and success curves.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::metrics::EvalCurve;
use crate::BenchError;

/// Two sections, each a `# name` line, a column header and `threshold,value` rows.
/// Values use the shortest representation that parses back to the same `f64`.
pub fn format_csv(precision: &EvalCurve, success: &EvalCurve) -> String {
    let mut out = String::new();
    for (name, column, curve) in [("precision", "threshold", precision), ("success", "overlap", success)] {
        let _ = writeln!(out, "# {name}\n{column},value");
        for &(t, v) in &curve.samples {
            let _ = writeln!(out, "{t},{v:?}");
        }
    }
    out
}

/// Inverse of [`format_csv`].
pub fn parse_csv(text: &str) -> Result<(EvalCurve, EvalCurve), BenchError> {
    let mut precision = None;
    let mut success = None;
    let mut current: Option<(&str, Vec<(f64, f64)>)> = None;
    let err = |line: usize, reason: String| BenchError::Parse {
        file: "report csv".into(),
        line,
        reason,
    };
    let mut finish = |cur: Option<(&str, Vec<(f64, f64)>)>| {
        if let Some((name, samples)) = cur {
            let c = Some(EvalCurve { samples });
            if name == "precision" {
                precision = c;
            } else {
                success = c;
            }
        }
    };
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if let Some(name) = line.strip_prefix('#') {
            let name = match name.trim() {
                "precision" => "precision",
                "success" => "success",
                other => return Err(err(i + 1, format!("unknown section `{other}`"))),
            };
            finish(current.take());
            current = Some((name, Vec::new()));
        } else if line.is_empty() || line.ends_with(",value") {
            continue;
        } else {
            let (_, samples) = current.as_mut().ok_or_else(|| err(i + 1, "data before any section".into()))?;
            let (t, v) = line.split_once(',').ok_or_else(|| err(i + 1, format!("expected `t,value`, found `{line}`")))?;
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| err(i + 1, format!("`{s}` is not a number")));
            samples.push((parse(t)?, parse(v)?));
        }
    }
    finish(current.take());
    match (precision, success) {
        (Some(p), Some(s)) => Ok((p, s)),
        _ => Err(err(0, "both precision and success sections are required".into())),
    }
}

const CHART_W: f64 = 360.0;
const CHART_H: f64 = 260.0;
const MARGIN: f64 = 50.0;

fn chart(out: &mut String, left: f64, title: &str, xlabel: &str, x_max: f64, curve: &EvalCurve, summary: &str) {
    let x0 = left + MARGIN;
    let y0 = MARGIN;
    let pw = CHART_W - 1.5 * MARGIN;
    let ph = CHART_H - 2.0 * MARGIN;
    let px = |t: f64| x0 + t / x_max * pw;
    let py = |v: f64| y0 + (1.0 - v) * ph;
    let _ = writeln!(out, r#"<g font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="13">{title}</text>"#, x0 + pw / 2.0, y0 - 20.0);
    let _ = writeln!(
        out,
        r#"<rect x="{x0:.1}" y="{y0:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="black"/>"#
    );
    for k in 0..=5 {
        let f = k as f64 / 5.0;
        let (gx, gy) = (px(f * x_max), py(f));
        let _ = writeln!(out, r#"<line x1="{gx:.1}" y1="{:.1}" x2="{gx:.1}" y2="{:.1}" stroke="black"/>"#, y0 + ph, y0 + ph + 4.0);
        let _ = writeln!(out, r#"<text x="{gx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, y0 + ph + 16.0, trim_num(f * x_max));
        let _ = writeln!(out, r#"<line x1="{:.1}" y1="{gy:.1}" x2="{x0:.1}" y2="{gy:.1}" stroke="black"/>"#, x0 - 4.0);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, x0 - 6.0, gy + 4.0, trim_num(f));
    }
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xlabel}</text>"#, x0 + pw / 2.0, y0 + ph + 34.0);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" transform="rotate(-90 {:.1} {:.1})">fraction of frames</text>"#,
        x0 - 36.0,
        y0 + ph / 2.0,
        x0 - 36.0,
        y0 + ph / 2.0,
    );
    let points: Vec<String> = curve.samples.iter().map(|&(t, v)| format!("{:.2},{:.2}", px(t), py(v))).collect();
    let _ = writeln!(out, r#"<polyline fill="none" stroke="crimson" stroke-width="2" points="{}"/>"#, points.join(" "));
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{summary}</text>"#, x0 + pw - 6.0, y0 + 16.0);
    let _ = writeln!(out, "</g>");
}

fn trim_num(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_owned()
}

pub fn format_svg(precision: &EvalCurve, success: &EvalCurve) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = 2.0 * CHART_W,
        h = CHART_H
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let p_max = precision.samples.last().map_or(50.0, |s| s.0.max(1.0));
    let p20 = precision.value_at(20.0).map_or(String::new(), |v| format!("P@20 = {v:.3}"));
    chart(&mut out, 0.0, "Precision plot", "location error threshold (px)", p_max, precision, &p20);
    let auc = format!("AUC = {:.3}", success.mean());
    chart(&mut out, CHART_W, "Success plot", "overlap threshold", 1.0, success, &auc);
    out.push_str("</svg>\n");
    out
}

pub fn emit_report(precision: &EvalCurve, success: &EvalCurve, csv_path: impl AsRef<Path>, svg_path: Option<&Path>) -> Result<(), BenchError> {
    let csv_path = csv_path.as_ref();
    fs::write(csv_path, format_csv(precision, success)).map_err(|e| BenchError::io(csv_path, e))?;
    if let Some(svg) = svg_path {
        fs::write(svg, format_svg(precision, success)).map_err(|e| BenchError::io(svg, e))?;
    }
    Ok(())
}
