//! Self-contained SVG line plots and histograms.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// A named series of `(x, y, error)` points.
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64, f64)>,
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    log_x: bool,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        let (x, a, b) = if self.log_x {
            (x.log10(), self.x0.log10(), self.x1.log10())
        } else {
            (x, self.x0, self.x1)
        };
        LEFT + (x - a) / (b - a).max(f64::MIN_POSITIVE) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y0) / (self.y1 - self.y0).max(f64::MIN_POSITIVE) * (H - TOP - BOTTOM)
    }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(hi - lo > 1e-9 * lo.abs().max(1.0)) {
        let mid = 0.5 * (lo + hi);
        return (mid - 0.5, mid + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn header(out: &mut String, title: &str, xlabel: &str, ylabel: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 10.0, escape(xlabel));
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
}

fn axes(out: &mut String, f: &Frame) {
    let (xa, xb, ya, yb) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(out, r#"<path d="M{xa},{ya} L{xa},{yb} L{xb},{yb}" fill="none" stroke="black"/>"#);
    for i in 0..=4 {
        let y = f.y0 + (f.y1 - f.y0) * i as f64 / 4.0;
        let py = f.py(y);
        let _ = writeln!(out, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, LEFT - 6.0, py + 4.0, tick(y));
    }
    let xs: Vec<f64> = if f.log_x {
        let (a, b) = (f.x0.log10().ceil() as i32, f.x1.log10().floor() as i32);
        (a..=b).map(|e| 10f64.powi(e)).collect()
    } else {
        (0..=4).map(|i| f.x0 + (f.x1 - f.x0) * i as f64 / 4.0).collect()
    };
    for x in xs {
        let px = f.px(x);
        let _ = writeln!(out, r#"<text x="{px:.1}" y="{}" text-anchor="middle">{}</text>"#, H - BOTTOM + 16.0, tick(x));
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.0e}")
    } else {
        format!("{:.2}", v)
    }
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 10.0 + 16.0 * i as f64;
        let c = COLORS[i % COLORS.len()];
        let _ = writeln!(out, r#"<rect x="{}" y="{}" width="10" height="10" fill="{c}"/>"#, W - RIGHT - 150.0, y - 9.0);
        let _ = writeln!(out, r#"<text x="{}" y="{y}">{}</text>"#, W - RIGHT - 135.0, escape(name));
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line plot with error bars on a log-scaled x axis and an optional
/// horizontal reference line.
pub fn curve_svg(title: &str, xlabel: &str, ylabel: &str, series: &[Series], reference: Option<f64>) -> String {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0 > 0.0 && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y, e) in pts {
        let e = if e.is_finite() { e } else { 0.0 };
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y - e);
        y1 = y1.max(y + e);
    }
    if let Some(r) = reference {
        y0 = y0.min(r);
        y1 = y1.max(r);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (1.0, 10.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 * 10.0;
    }
    let (y0, y1) = padded(y0, y1);
    let f = Frame { x0, x1, y0, y1, log_x: true };
    let mut out = String::new();
    header(&mut out, title, xlabel, ylabel);
    axes(&mut out, &f);
    if let Some(r) = reference {
        let py = f.py(r);
        let _ = writeln!(
            out,
            r#"<line x1="{LEFT}" y1="{py:.1}" x2="{}" y2="{py:.1}" stroke="gray" stroke-dasharray="4 3"/>"#,
            W - RIGHT
        );
    }
    for (i, s) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let valid: Vec<_> = s.points.iter().filter(|p| p.0 > 0.0 && p.1.is_finite()).collect();
        let path: Vec<String> = valid
            .iter()
            .enumerate()
            .map(|(j, p)| format!("{}{:.1},{:.1}", if j == 0 { "M" } else { "L" }, f.px(p.0), f.py(p.1)))
            .collect();
        let _ = writeln!(out, r#"<path d="{}" fill="none" stroke="{c}" stroke-width="1.5"/>"#, path.join(" "));
        for p in valid {
            let (px, py) = (f.px(p.0), f.py(p.1));
            if p.2.is_finite() && p.2 > 0.0 {
                let _ = writeln!(
                    out,
                    r#"<line x1="{px:.1}" y1="{:.1}" x2="{px:.1}" y2="{:.1}" stroke="{c}"/>"#,
                    f.py(p.1 - p.2),
                    f.py(p.1 + p.2)
                );
            }
            let _ = writeln!(out, r#"<circle cx="{px:.1}" cy="{py:.1}" r="3" fill="{c}"/>"#);
        }
    }
    legend(&mut out, &series.iter().map(|s| s.name.as_str()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Bin edges and counts of `values` over `[lo, hi]`.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<(f64, f64, usize)> {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        if v.is_finite() && v >= lo && v <= hi {
            let i = (((v - lo) / width) as usize).min(bins - 1);
            counts[i] += 1;
        }
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + width * i as f64, lo + width * (i + 1) as f64, c))
        .collect()
}

/// Overlaid histograms on a common range, counts on a log scale.
pub fn histogram_svg(title: &str, xlabel: &str, data: &[(&str, &[f64])], bins: usize) -> String {
    let all = data.iter().flat_map(|d| d.1.iter()).filter(|v| v.is_finite());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (lo, hi) = if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo > 1e-9 * lo.abs().max(1.0) {
        padded(lo, hi)
    } else {
        // center a constant sample inside the middle bin
        let w = 1.0 / bins as f64;
        let a = 0.5 * (lo + hi) - w * (bins / 2) as f64 - 0.5 * w;
        (a, a + 1.0)
    };
    let hists: Vec<_> = data.iter().map(|d| histogram(d.1, lo, hi, bins)).collect();
    let max = hists.iter().flatten().map(|h| h.2).max().unwrap_or(1).max(1);
    let f = Frame {
        x0: lo,
        x1: hi,
        y0: 0.0,
        y1: (max as f64 + 1.0).log10(),
        log_x: false,
    };
    let mut out = String::new();
    header(&mut out, title, xlabel, "log10(1 + count)");
    axes(&mut out, &f);
    for (i, h) in hists.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        for &(a, b, n) in h {
            if n == 0 {
                continue;
            }
            let top = f.py((n as f64 + 1.0).log10());
            let _ = writeln!(
                out,
                r#"<rect x="{:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="{c}" fill-opacity="0.45" data-lo="{a}" data-count="{n}"/>"#,
                f.px(a),
                (f.px(b) - f.px(a)).max(0.5),
                f.py(0.0) - top
            );
        }
    }
    legend(&mut out, &data.iter().map(|d| d.0).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}
