//! Self-contained SVG charts: observed vs predicted time series and
//! observed/predicted scatter with the correlation coefficient.

use std::fmt::Write;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 50.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn header(out: &mut String, width: f64, height: f64, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, width: f64, height: f64, x_label: &str, y_label: &str, y: (f64, f64)) {
    let (x0, y0, x1, y1) = (MARGIN, height - MARGIN, width - MARGIN / 2.0, MARGIN / 1.5);
    let _ = writeln!(
        out,
        r#"<path d="M{x0:.1},{y1:.1} L{x0:.1},{y0:.1} L{x1:.1},{y0:.1}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.2}</text>"#, x0 - 4.0, y0, y.0);
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.2}</text>"#, x0 - 4.0, y1 + 8.0, y.1);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        height - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

/// Observed (black) and predicted (red) rainfall against time.
pub fn line_chart(title: &str, times: &[String], observed: &[f64], predicted: &[f64]) -> String {
    let mut out = String::new();
    header(&mut out, WIDTH, HEIGHT, title);
    let (lo, hi) = bounds(observed.iter().chain(predicted));
    axes(&mut out, WIDTH, HEIGHT, "time (UTC)", "rainfall (mm)", (lo, hi));
    let n = observed.len().max(2) - 1;
    let px = |i: usize| MARGIN + (WIDTH - 1.5 * MARGIN) * i as f64 / n as f64;
    let py = |v: f64| (HEIGHT - MARGIN) - (HEIGHT - MARGIN - MARGIN / 1.5) * (v - lo) / (hi - lo);
    for (series, colour) in [(observed, "black"), (predicted, "#d62728")] {
        let mut points = String::new();
        for (i, &v) in series.iter().enumerate() {
            let _ = write!(points, "{:.1},{:.1} ", px(i), py(v));
        }
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1"/>"#,
            points.trim_end()
        );
    }
    if let (Some(first), Some(last)) = (times.first(), times.last()) {
        let y = HEIGHT - MARGIN + 14.0;
        let _ = writeln!(out, r#"<text x="{MARGIN:.1}" y="{y:.1}">{}</text>"#, escape(first));
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{y:.1}" text-anchor="end">{}</text>"#,
            WIDTH - MARGIN / 2.0,
            escape(last)
        );
    }
    let _ = writeln!(
        out,
        r##"<text x="{:.1}" y="40" text-anchor="end"><tspan fill="black">observed</tspan> <tspan fill="#d62728">predicted</tspan></text>"##,
        WIDTH - MARGIN / 2.0
    );
    out.push_str("</svg>\n");
    out
}

/// Predicted against observed with a 1:1 line and `R = ...` annotation.
pub fn scatter_chart(title: &str, observed: &[f64], predicted: &[f64], r: Option<f64>) -> String {
    let side = 420.0;
    let mut out = String::new();
    header(&mut out, side, side, title);
    let (lo, hi) = bounds(observed.iter().chain(predicted));
    axes(&mut out, side, side, "observed (mm)", "predicted (mm)", (lo, hi));
    let span = side - 1.5 * MARGIN;
    let px = |v: f64| MARGIN + span * (v - lo) / (hi - lo);
    let py = |v: f64| (side - MARGIN) - (side - MARGIN - MARGIN / 1.5) * (v - lo) / (hi - lo);
    let _ = writeln!(
        out,
        r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="grey" stroke-dasharray="4 3"/>"#,
        px(lo),
        py(lo),
        px(hi),
        py(hi)
    );
    for (&o, &p) in observed.iter().zip(predicted) {
        let _ = writeln!(
            out,
            r##"<circle cx="{:.1}" cy="{:.1}" r="1.5" fill="#1f77b4" fill-opacity="0.5"/>"##,
            px(o),
            py(p)
        );
    }
    let label = match r {
        Some(r) => format!("R = {r:.3}"),
        None => "R = n/a".to_string(),
    };
    let _ = writeln!(out, r#"<text x="{:.1}" y="50" font-size="14">{label}</text>"#, MARGIN + 10.0);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed_and_annotated() {
        let times = vec!["2011-01-01T00:00:00Z".to_string(), "2011-01-01T01:00:00Z".to_string()];
        let line = line_chart("grid 1 <6h>", &times, &[0.0, 1.0], &[0.5, 0.5]);
        assert!(line.starts_with("<svg") && line.ends_with("</svg>\n"));
        assert!(line.contains("grid 1 &lt;6h&gt;"));
        assert_eq!(line.matches("<polyline").count(), 2);
        let scatter = scatter_chart("s", &[0.0, 1.0, 2.0], &[0.1, 0.9, 2.2], Some(0.987654));
        assert!(scatter.contains("R = 0.988"));
        assert_eq!(scatter.matches("<circle").count(), 3);
        assert!(scatter_chart("s", &[1.0, 1.0], &[1.0, 1.0], None).contains("R = n/a"));
    }
}
