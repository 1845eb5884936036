//! Static SVG figures: ROC curves and reliability diagrams on the unit
//! square.

use std::fmt::Write;

const SIZE: f64 = 420.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// One named series of `(x, y)` points in `[0, 1]²`.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn sx(x: f64) -> f64 {
    MARGIN + x.clamp(0.0, 1.0) * SIZE
}

fn sy(y: f64) -> f64 {
    MARGIN + (1.0 - y.clamp(0.0, 1.0)) * SIZE
}

fn frame(out: &mut String, title: &str, xlabel: &str, ylabel: &str) {
    let full = SIZE + 2.0 * MARGIN;
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{full}" height="{full}" viewBox="0 0 {full} {full}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{full}" height="{full}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="14">{title}</text>"#,
        MARGIN + SIZE / 2.0,
        MARGIN / 2.0
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(
            out,
            r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#e5e5e5"/>"##,
            sx(v),
            sy(0.0),
            sx(v),
            sy(1.0)
        );
        let _ = writeln!(
            out,
            r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#e5e5e5"/>"##,
            sx(0.0),
            sy(v),
            sx(1.0),
            sy(v)
        );
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.1}</text>"#, sx(v), sy(0.0) + 18.0);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#, sx(0.0) - 6.0, sy(v) + 4.0);
    }
    let _ = writeln!(
        out,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        out,
        r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#777777" stroke-dasharray="5,4"/>"##,
        sx(0.0),
        sy(0.0),
        sx(1.0),
        sy(1.0)
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xlabel}</text>"#,
        MARGIN + SIZE / 2.0,
        MARGIN + SIZE + 38.0
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{ylabel}</text>"#,
        MARGIN + SIZE / 2.0,
        MARGIN + SIZE / 2.0
    );
}

fn legend(out: &mut String, series: &[Series]) {
    for (i, s) in series.iter().enumerate() {
        let y = MARGIN + SIZE - 14.0 - 18.0 * (series.len() - 1 - i) as f64;
        let x = MARGIN + SIZE - 130.0;
        let c = COLORS[i % COLORS.len()];
        let _ = writeln!(out, r#"<line x1="{x:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{c}" stroke-width="2"/>"#, x + 22.0);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, x + 28.0, y + 4.0, escape(&s.name));
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn polyline(out: &mut String, points: &[(f64, f64)], color: &str) {
    let coords: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
    let _ = writeln!(
        out,
        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
        coords.join(" ")
    );
}

/// ROC curves with the chance diagonal.
pub fn roc_svg(series: &[Series]) -> String {
    let mut out = String::new();
    frame(&mut out, "ROC curve", "False positive rate", "True positive rate");
    for (i, s) in series.iter().enumerate() {
        polyline(&mut out, &s.points, COLORS[i % COLORS.len()]);
    }
    legend(&mut out, series);
    out.push_str("</svg>\n");
    out
}

/// Reliability diagram: observed event frequency against mean predicted
/// probability per non-empty bin, with the ideal diagonal.
pub fn calibration_svg(series: &[Series]) -> String {
    let mut out = String::new();
    frame(&mut out, "Calibration", "Mean predicted probability", "Observed frequency");
    for (i, s) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        polyline(&mut out, &s.points, c);
        for &(x, y) in &s.points {
            let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{c}"/>"#, sx(x), sy(y));
        }
    }
    legend(&mut out, series);
    out.push_str("</svg>\n");
    out
}
