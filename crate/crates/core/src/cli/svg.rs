//! Minimal hand-written SVG: heatmaps and line charts. Output depends only on
//! the inputs, so reruns are byte-identical.

use std::fmt::Write as _;

/// Heatmap description. `None` cells are drawn hatched gray.
#[derive(Clone, Debug)]
pub struct HeatmapSpec {
    pub title: String,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
    /// Color scale bounds; values are clamped into `[min, max]`.
    pub min: f64,
    pub max: f64,
}

impl HeatmapSpec {
    /// Scale spanning the finite values (or `[0, 1]` when there are none).
    pub fn auto_scale(
        title: &str,
        row_labels: Vec<String>,
        col_labels: Vec<String>,
        values: Vec<Vec<Option<f64>>>,
    ) -> Self {
        let finite: Vec<f64> = values
            .iter()
            .flatten()
            .flatten()
            .copied()
            .filter(|v| v.is_finite())
            .collect();
        let (mut min, mut max) = finite
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        if finite.is_empty() {
            (min, max) = (0.0, 1.0);
        }
        Self {
            title: title.to_string(),
            row_labels,
            col_labels,
            values,
            min,
            max,
        }
    }
}

const CELL: usize = 48;
const LEFT: usize = 90;
const TOP: usize = 50;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// White to dark blue.
fn ramp(t: f64) -> String {
    let t = if t.is_finite() {
        t.clamp(0.0, 1.0)
    } else {
        0.0
    };
    let mix = |lo: f64, hi: f64| (lo + (hi - lo) * t).round() as u8;
    format!(
        "#{:02x}{:02x}{:02x}",
        mix(255.0, 8.0),
        mix(255.0, 48.0),
        mix(255.0, 107.0)
    )
}

pub fn heatmap(spec: &HeatmapSpec) -> String {
    let rows = spec.values.len();
    let cols = spec.values.first().map_or(0, Vec::len);
    let width = LEFT + cols * CELL + 120;
    let height = TOP + rows * CELL + 40;
    let span = spec.max - spec.min;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif">"#
    );
    s.push_str(concat!(
        r#"<defs><pattern id="hatch" width="6" height="6" patternUnits="userSpaceOnUse" patternTransform="rotate(45)">"#,
        r##"<rect width="6" height="6" fill="#d9d9d9"/><line x1="0" y1="0" x2="0" y2="6" stroke="#8c8c8c" stroke-width="2"/>"##,
        "</pattern></defs>\n"
    ));
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-size="15" text-anchor="middle">{}</text>"#,
        width / 2,
        escape(&spec.title)
    );
    for (c, label) in spec.col_labels.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{}</text>"#,
            LEFT + c * CELL + CELL / 2,
            TOP - 6,
            escape(label)
        );
    }
    for (r, row) in spec.values.iter().enumerate() {
        let y = TOP + r * CELL;
        if let Some(label) = spec.row_labels.get(r) {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{}</text>"#,
                LEFT - 6,
                y + CELL / 2 + 4,
                escape(label)
            );
        }
        for (c, v) in row.iter().enumerate() {
            let x = LEFT + c * CELL;
            match v {
                Some(v) if v.is_finite() => {
                    let t = if span > 0.0 {
                        (v - spec.min) / span
                    } else {
                        1.0
                    };
                    let _ = writeln!(
                        s,
                        r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{}" stroke="#ffffff"/>"##,
                        ramp(t)
                    );
                    let ink = if t > 0.55 { "#ffffff" } else { "#000000" };
                    let _ = writeln!(
                        s,
                        r#"<text x="{}" y="{}" font-size="10" text-anchor="middle" fill="{ink}">{}</text>"#,
                        x + CELL / 2,
                        y + CELL / 2 + 4,
                        format_value(*v)
                    );
                }
                _ => {
                    let _ = writeln!(
                        s,
                        r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="url(#hatch)" stroke="#ffffff"/>"##
                    );
                }
            }
        }
    }
    // Color bar.
    let bar_x = LEFT + cols * CELL + 30;
    let bar_h = rows * CELL;
    for k in 0..10 {
        let t = 1.0 - k as f64 / 9.0;
        let _ = writeln!(
            s,
            r#"<rect x="{bar_x}" y="{}" width="16" height="{}" fill="{}"/>"#,
            TOP + k * bar_h / 10,
            bar_h / 10 + 1,
            ramp(t)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="10">{}</text>"#,
        bar_x + 20,
        TOP + 8,
        format_value(spec.max)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="10">{}</text>"#,
        bar_x + 20,
        TOP + bar_h,
        format_value(spec.min)
    );
    s.push_str("</svg>\n");
    s
}

fn format_value(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

/// One named series of `(x, y)` points.
#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640usize, 400usize);
    let (left, right, top, bottom) = (70.0, 160.0, 40.0, 50.0);
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let (mut x0, mut x1, mut y0, mut y1) = pts.iter().fold(
        (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        ),
        |(a, b, c, d), &(x, y)| (a.min(x), b.max(x), c.min(y), d.max(y)),
    );
    if pts.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        let pad = if y0 == 0.0 { 1.0 } else { y0.abs() * 0.1 };
        y0 -= pad;
        y1 += pad;
    }
    let pw = w as f64 - left - right;
    let ph = h as f64 - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" font-size="15" text-anchor="middle">{}</text>"#,
        w / 2,
        escape(title)
    );
    let _ = writeln!(
        s,
        r##"<rect x="{left:.1}" y="{top:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="#444444"/>"##
    );
    for k in 0..=4 {
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{}</text>"#,
            left - 6.0,
            sy(fy) + 3.0,
            format_value(fy)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{}</text>"#,
            sx(fx),
            top + ph + 16.0,
            format_value(fx)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{}" font-size="12" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 10,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (k, ser) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        let ly = top + 14.0 + 18.0 * k as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}
