//! Minimal hand-written SVG: line charts and shaded-cell heatmaps.

use std::fmt::Write;

use super::pgm::quantize;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub(crate) fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn open(out: &mut String, w: f64, h: f64, provenance: Option<&str>) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    if let Some(p) = provenance {
        let _ = writeln!(out, "<metadata>{}</metadata>", escape(p));
    }
}

/// One polyline per series over x = 0..n. `values[s][i]` is drawn as given;
/// each point also carries its formatted value as a tooltip.
pub(crate) fn line_chart(
    title: &str,
    names: &[String],
    values: &[Vec<f64>],
    formatted: &[Vec<String>],
    provenance: Option<&str>,
) -> String {
    let (w, h, m) = (640.0, 400.0, 56.0);
    let n = values.first().map_or(0, Vec::len);
    let ymax = values.iter().flatten().copied().fold(0.0, f64::max);
    let ymax = if ymax > 0.0 { ymax * 1.1 } else { 1.0 };
    let x = |i: usize| m + (w - 2.0 * m) * if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
    let y = |v: f64| h - m - (h - 2.0 * m) * v / ymax;
    let mut out = String::new();
    open(&mut out, w, h, provenance);
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    );
    for i in 0..n {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{i}</text>"#,
            x(i),
            h - m + 16.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">layer</text>"#,
        w / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{m}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">{ymax:.3e}</text>"#,
        m - 4.0
    );
    for (s, (name, vals)) in names.iter().zip(values).enumerate() {
        let color = PALETTE[s % PALETTE.len()];
        let pts: Vec<String> = vals.iter().enumerate().map(|(i, &v)| format!("{:.2},{:.2}", x(i), y(v))).collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        for (i, &v) in vals.iter().enumerate() {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"><title>{} layer {i}: {}</title></circle>"#,
                x(i),
                y(v),
                escape(name),
                formatted[s][i]
            );
        }
        let ly = m + 18.0 * s as f64;
        let _ = writeln!(
            out,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#,
            w - m - 190.0,
            w - m - 170.0,
            w - m - 165.0,
            ly + 4.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Grid of gray cells, one per matrix entry (`[0,1]`, black to white),
/// quantized exactly like the PGM raster.
pub(crate) fn heatmap(matrix_rows: usize, matrix_cols: usize, data: &[f64], provenance: Option<&str>) -> String {
    let cell = (480.0 / matrix_rows.max(matrix_cols) as f64).clamp(2.0, 24.0);
    let (w, h) = (cell * matrix_cols as f64, cell * matrix_rows as f64);
    let mut out = String::new();
    open(&mut out, w, h, provenance);
    out.push_str(r#"<g shape-rendering="crispEdges">"#);
    out.push('\n');
    for r in 0..matrix_rows {
        for c in 0..matrix_cols {
            let g = (quantize(data[r * matrix_cols + c]) >> 8) as u8;
            let _ = writeln!(
                out,
                r##"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="#{g:02x}{g:02x}{g:02x}"/>"##,
                c as f64 * cell,
                r as f64 * cell
            );
        }
    }
    out.push_str("</g>\n</svg>\n");
    out
}
