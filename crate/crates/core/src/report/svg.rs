use std::fmt::Write;

use super::CurvePlot;

const W: f64 = 640.0;
const H: f64 = 360.0;
const LEFT: f64 = 56.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 44.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders an evidence curve with the layer on the x axis.
///
/// The value for gap `k` is drawn at layer `k + 1`, the layer a peak there
/// would be reported as. Detected boundaries get dashed vertical markers.
pub fn curve_svg(plot: &CurvePlot) -> String {
    let n = plot.evidence.len();
    let num_layers = n + 1;
    let ys: Vec<f64> = plot.evidence.iter().map(|v| if v.is_finite() { *v } else { 0.0 }).collect();
    let ymax = ys.iter().cloned().fold(0.0, f64::max);
    let ymax = if ymax > 0.0 { ymax } else { 1.0 };
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let x_of = |layer: f64| LEFT + pw * layer / (num_layers.max(2) - 1) as f64;
    let y_of = |v: f64| TOP + ph * (1.0 - v / ymax);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        W / 2.0,
        escape(&plot.model_name)
    );
    let (x0, y0) = (LEFT, TOP + ph);
    let _ = writeln!(
        s,
        r#"<path d="M{x0:.1},{TOP:.1} L{x0:.1},{y0:.1} L{:.1},{y0:.1}" stroke="black" fill="none"/>"#,
        LEFT + pw
    );
    let step = (num_layers / 16).max(1);
    for layer in (0..num_layers).step_by(step) {
        let x = x_of(layer as f64);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.1}" y1="{y0:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{layer}</text>"#,
            y0 + 4.0,
            y0 + 16.0
        );
    }
    for frac in [0.0, 0.5, 1.0] {
        let y = y_of(frac * ymax);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#,
            LEFT - 6.0,
            y + 4.0,
            frac * ymax
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">layer</text>"#,
        LEFT + pw / 2.0,
        H - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">evidence E</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    if let Some((li, ig)) = plot.boundaries {
        for (layer, label) in [(li, "L-I"), (ig, "I-G")] {
            let x = x_of(layer as f64);
            let _ = writeln!(
                s,
                r##"<line x1="{x:.1}" y1="{TOP:.1}" x2="{x:.1}" y2="{y0:.1}" stroke="#c0392b" stroke-dasharray="4 3"/><text x="{x:.1}" y="{:.1}" text-anchor="middle" fill="#c0392b">{label} {layer}</text>"##,
                TOP - 4.0
            );
        }
    }
    if !ys.is_empty() {
        let pts: Vec<String> = ys
            .iter()
            .enumerate()
            .map(|(k, v)| format!("{:.1},{:.1}", x_of((k + 1) as f64), y_of(*v)))
            .collect();
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="#1f4e79" stroke-width="1.5"/>"##,
            pts.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}
