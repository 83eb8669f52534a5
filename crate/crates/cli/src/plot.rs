//! Minimal SVG line chart of aged-class curves.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLORS: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

/// One polyline per `(label, values)` over the x labels `new, p-1, …`;
/// the y axis spans 0 to 100.
pub fn curves_svg(title: &str, series: &[(String, Vec<f64>)]) -> String {
    let points = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0).max(2);
    let x = |i: usize| MARGIN + (WIDTH - 2.0 * MARGIN) * i as f64 / (points - 1) as f64;
    let y = |v: f64| HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * v.clamp(0.0, 100.0) / 100.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, WIDTH / 2.0, escape(title));
    for tick in (0..=100).step_by(20) {
        let ty = y(tick as f64);
        let _ = writeln!(
            svg,
            r##"<line x1="{MARGIN}" y1="{ty}" x2="{}" y2="{ty}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{tick}</text>"##,
            WIDTH - MARGIN,
            MARGIN - 6.0,
            ty + 4.0
        );
    }
    for i in 0..points {
        let label = if i == 0 { "new".to_string() } else { format!("p-{i}") };
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{label}</text>"#,
            x(i),
            HEIGHT - MARGIN + 18.0
        );
    }
    for (k, (label, values)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let path: Vec<String> = values.iter().enumerate().map(|(i, v)| format!("{:.1},{:.1}", x(i), y(*v))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        let ly = MARGIN + 16.0 * k as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{ly}" fill="{color}">{}</text>"#,
            WIDTH - MARGIN - 120.0,
            escape(label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_polyline_per_series() {
        let svg = curves_svg("t<1>", &[("a".into(), vec![50.0, 40.0]), ("b".into(), vec![10.0, 5.0, 1.0])]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("t&lt;1&gt;"));
        assert!(svg.contains(">p-2<"));
    }
}
