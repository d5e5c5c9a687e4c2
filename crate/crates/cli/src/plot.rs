//! Static SVG/HTML rendering of report figures.

use std::fmt::Write as _;

use dzlab::episode::Decision;
use dzlab::eval::TimingRow;

const W: f64 = 640.0;
const H: f64 = 420.0;
const PAD: f64 = 56.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Scatter of refined time-to-line against decision latency, one marker
/// colour per decision.
pub fn timing_svg(rows: &[TimingRow]) -> String {
    let xs = rows.iter().map(|r| r.latency_s);
    let ys = rows.iter().map(|r| r.time_to_line_s);
    let (x0, x1) = bounds(xs);
    let (y0, y1) = bounds(ys);
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * f64::from(k) / 4.0;
        let fy = y0 + (y1 - y0) * f64::from(k) / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{fx:.2}</text><text x="{:.1}" y="{:.1}" text-anchor="end">{fy:.2}</text>"#,
            sx(fx),
            H - PAD + 16.0,
            PAD - 6.0,
            sy(fy) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">decision latency after yellow onset (s)</text>"#,
        W / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate(16 {}) rotate(-90)" text-anchor="middle">time to stop-line at decision (s)</text>"#,
        H / 2.0
    );
    for r in rows {
        let colour = match r.decision {
            Decision::Stop => "#c0392b",
            Decision::Go => "#27ae60",
        };
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{colour}" fill-opacity="0.6"/>"#,
            sx(r.latency_s),
            sy(r.time_to_line_s)
        );
    }
    let _ = writeln!(
        svg,
        r##"<circle cx="{a}" cy="{PAD}" r="4" fill="#c0392b"/><text x="{b}" y="{c}">stop</text><circle cx="{d}" cy="{PAD}" r="4" fill="#27ae60"/><text x="{e}" y="{c}">go</text>"##,
        a = W - PAD - 90.0,
        b = W - PAD - 82.0,
        c = PAD + 4.0,
        d = W - PAD - 40.0,
        e = W - PAD - 32.0
    );
    svg.push_str("</svg>\n");
    svg
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        return (lo - 0.5, hi + 0.5);
    }
    let m = 0.05 * (hi - lo);
    (lo - m, hi + m)
}

/// Single self-contained page with preformatted tables and inline figures.
pub fn html_page(title: &str, sections: &[(String, String)], figures: &[(String, String)]) -> String {
    let mut html = String::new();
    let _ = writeln!(
        html,
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{t}</title>\
         <style>body{{font-family:sans-serif;margin:2em}}pre{{background:#f6f6f6;padding:1em}}</style>\
         </head><body><h1>{t}</h1>",
        t = escape(title)
    );
    for (heading, body) in sections {
        let _ = writeln!(html, "<h2>{}</h2><pre>{}</pre>", escape(heading), escape(body));
    }
    for (heading, svg) in figures {
        let _ = writeln!(html, "<h2>{}</h2>{svg}", escape(heading));
    }
    html.push_str("</body></html>\n");
    html
}
