//! Static SVG charts.

use std::fmt::Write as _;

use crate::mesh::{Point, Rectangle};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: [f64; 4] = [60.0, 20.0, 30.0, 50.0]; // left, right, top, bottom
const COLORS: [&str; 6] = ["#0072bd", "#d95319", "#edb120", "#7e2f8e", "#77ac30", "#4dbeee"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            label: label.into(),
            points,
            dashed: false,
        }
    }

    pub fn dashed(mut self) -> Self {
        self.dashed = true;
        self
    }
}

fn open(s: &mut String, w: f64, h: f64) {
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart with a logarithmic y axis. Nonpositive values are dropped.
pub fn log_chart(title: &str, x_label: &str, series: &[Series]) -> String {
    let finite = |&(x, y): &(f64, f64)| x.is_finite() && y.is_finite() && y > 0.0;
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied().filter(finite)).collect();
    let (mut x0, mut x1) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (ly0, ly1) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1.log10()), b.max(p.1.log10())));
    if all.is_empty() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let (d0, mut d1) = if all.is_empty() { (0.0, 1.0) } else { (ly0.floor(), ly1.ceil()) };
    if d1 <= d0 {
        d1 = d0 + 1.0;
    }
    let (l, r, t, b) = (MARGIN[0], MARGIN[1], MARGIN[2], MARGIN[3]);
    let pw = WIDTH - l - r;
    let ph = HEIGHT - t - b;
    let sx = |x: f64| l + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| t + (d1 - y.log10()) / (d1 - d0) * ph;

    let mut s = String::new();
    open(&mut s, WIDTH, HEIGHT);
    writeln!(s, r#"<text x="{:.1}" y="18" text-anchor="middle">{}</text>"#, WIDTH / 2.0, escape(title)).unwrap();
    writeln!(s, r##"<rect x="{l}" y="{t}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>"##).unwrap();
    for e in d0 as i32..=d1 as i32 {
        let y = sy(10f64.powi(e));
        writeln!(
            s,
            r##"<line x1="{l}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.1}" y="{:.2}" text-anchor="end">1e{e}</text>"##,
            l + pw,
            l - 6.0,
            y + 4.0
        )
        .unwrap();
    }
    let ticks = 5;
    for k in 0..=ticks {
        let x = x0 + (x1 - x0) * k as f64 / ticks as f64;
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(x),
            t + ph + 16.0,
            (x * 100.0).round() / 100.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        l + pw / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    )
    .unwrap();
    for (i, se) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = se
            .points
            .iter()
            .filter(|p| finite(p))
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let dash = if se.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#,
            pts.join(" ")
        )
        .unwrap();
        let ly = t + 14.0 + 16.0 * i as f64;
        writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="1.5"{dash}/><text x="{:.1}" y="{:.1}">{}</text>"#,
            l + pw - 150.0,
            l + pw - 125.0,
            l + pw - 120.0,
            ly + 4.0,
            escape(&se.label)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Paths of the site midpoints inside the rectangle, with the start marked by a
/// square and the truth by a circle of the site radius.
pub fn midpoint_paths(domain: Rectangle, paths: &[Vec<Point>], truth: Option<&[Point]>, radii: &[f64]) -> String {
    let size = 480.0;
    let pad = 30.0;
    let scale = (size - 2.0 * pad) / domain.width.max(domain.height);
    let sx = |x: f64| pad + x * scale;
    let sy = |y: f64| size - pad - y * scale;
    let mut s = String::new();
    open(&mut s, size, size);
    writeln!(
        s,
        r##"<rect x="{pad}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#000"/>"##,
        sy(domain.height),
        domain.width * scale,
        domain.height * scale
    )
    .unwrap();
    if let Some(truth) = truth {
        for (p, r) in truth.iter().zip(radii) {
            writeln!(
                s,
                r##"<circle cx="{:.2}" cy="{:.2}" r="{:.2}" fill="none" stroke="#000" stroke-dasharray="3 3"/>"##,
                sx(p[0]),
                sy(p[1]),
                r * scale
            )
            .unwrap();
        }
    }
    for (i, path) in paths.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = path.iter().map(|p| format!("{:.2},{:.2}", sx(p[0]), sy(p[1]))).collect();
        writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, pts.join(" ")).unwrap();
        if let Some(p) = path.first() {
            writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="8" height="8" fill="{color}"/>"#,
                sx(p[0]) - 4.0,
                sy(p[1]) - 4.0
            )
            .unwrap();
        }
        if let Some(p) = path.last() {
            writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(p[0]), sy(p[1])).unwrap();
        }
    }
    s.push_str("</svg>\n");
    s
}
