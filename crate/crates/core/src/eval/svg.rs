//! Minimal deterministic SVG charts. Coordinates are printed with two
//! decimals so output is byte-stable.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
    /// Symmetric error bar per point (same length as `points`), or empty.
    pub err: Vec<f64>,
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn header(s: &mut String, title: &str, x_label: &str, y_label: &str) {
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#).unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="16">{}</text>"#, W / 2.0, escape(title)).unwrap();
    writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12">{}</text>"#,
        LEFT + (W - LEFT - RIGHT) / 2.0,
        H - 10.0,
        escape(x_label)
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {:.2})">{}</text>"#,
        TOP + (H - TOP - BOTTOM) / 2.0,
        TOP + (H - TOP - BOTTOM) / 2.0,
        escape(y_label)
    )
    .unwrap();
}

fn axes(s: &mut String, (x0, x1): (f64, f64), (y0, y1): (f64, f64)) {
    let (px0, px1, py0, py1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
    writeln!(s, r#"<line x1="{px0:.2}" y1="{py0:.2}" x2="{px1:.2}" y2="{py0:.2}" stroke="black"/>"#).unwrap();
    writeln!(s, r#"<line x1="{px0:.2}" y1="{py0:.2}" x2="{px0:.2}" y2="{py1:.2}" stroke="black"/>"#).unwrap();
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let yv = y0 + f * (y1 - y0);
        let py = py0 + f * (py1 - py0);
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10">{}</text>"#, px0 - 4.0, py + 3.0, tick(yv)).unwrap();
        let xv = x0 + f * (x1 - x0);
        let px = px0 + f * (px1 - px0);
        writeln!(s, r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle" font-size="10">{}</text>"#, py0 + 14.0, tick(xv)).unwrap();
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, n) in names.iter().enumerate() {
        let y = TOP + 10.0 + 16.0 * i as f64;
        let x = W - RIGHT - 150.0;
        writeln!(s, r#"<rect x="{x:.2}" y="{:.2}" width="12" height="4" fill="{}"/>"#, y - 4.0, COLORS[i % COLORS.len()]).unwrap();
        writeln!(s, r#"<text x="{:.2}" y="{y:.2}" font-size="11">{}</text>"#, x + 18.0, escape(n)).unwrap();
    }
}

/// Polyline chart; non-finite points break the line and are skipped.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series<'_>]) -> String {
    let xr = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let yr = range(series.iter().flat_map(|s| {
        s.points.iter().enumerate().flat_map(move |(i, p)| {
            let e = s.err.get(i).copied().filter(|e| e.is_finite()).unwrap_or(0.0);
            [p.1 - e, p.1 + e]
        })
    }));
    let sx = |x: f64| LEFT + (x - xr.0) / (xr.1 - xr.0) * (W - LEFT - RIGHT);
    let sy = |y: f64| H - BOTTOM - (y - yr.0) / (yr.1 - yr.0) * (H - TOP - BOTTOM);
    let mut s = String::new();
    header(&mut s, title, x_label, y_label);
    axes(&mut s, xr, yr);
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut segment: Vec<String> = Vec::new();
        let flush = |seg: &mut Vec<String>, s: &mut String| {
            if seg.len() > 1 {
                writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, seg.join(" ")).unwrap();
            }
            seg.clear();
        };
        for (k, &(x, y)) in ser.points.iter().enumerate() {
            if !(x.is_finite() && y.is_finite()) {
                flush(&mut segment, &mut s);
                continue;
            }
            segment.push(format!("{:.2},{:.2}", sx(x), sy(y)));
            writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(x), sy(y)).unwrap();
            if let Some(&e) = ser.err.get(k).filter(|e| e.is_finite() && **e > 0.0) {
                writeln!(
                    s,
                    r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}"/>"#,
                    sx(x),
                    sy(y - e),
                    sx(x),
                    sy(y + e)
                )
                .unwrap();
            }
        }
        flush(&mut segment, &mut s);
    }
    legend(&mut s, &series.iter().map(|x| x.name).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Grouped bar chart: one group per category, one bar per series.
/// Non-finite values are drawn as missing bars.
pub fn bar_plot(title: &str, x_label: &str, y_label: &str, series: &[(&str, Vec<f64>)]) -> String {
    let n = series.iter().map(|s| s.1.len()).max().unwrap_or(0).max(1);
    let (lo, hi) = range(series.iter().flat_map(|s| s.1.iter().copied()).chain([0.0]));
    let sy = |y: f64| H - BOTTOM - (y - lo) / (hi - lo) * (H - TOP - BOTTOM);
    let group = (W - LEFT - RIGHT) / n as f64;
    let bar = group * 0.8 / series.len().max(1) as f64;
    let mut s = String::new();
    header(&mut s, title, x_label, y_label);
    axes(&mut s, (0.0, n as f64), (lo, hi));
    for (k, (_, vals)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        for (i, &v) in vals.iter().enumerate() {
            if !v.is_finite() {
                continue;
            }
            let x = LEFT + group * i as f64 + group * 0.1 + bar * k as f64;
            let (y0, y1) = (sy(0.0), sy(v));
            writeln!(
                s,
                r#"<rect x="{x:.2}" y="{:.2}" width="{bar:.2}" height="{:.2}" fill="{color}"/>"#,
                y0.min(y1),
                (y1 - y0).abs()
            )
            .unwrap();
        }
    }
    legend(&mut s, &series.iter().map(|x| x.0).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_is_stable_and_well_formed() {
        let ser = [Series { name: "a", points: vec![(1.0, 2.0), (2.0, f64::NAN), (3.0, 5.0)], err: vec![0.1, 0.0, 0.2] }];
        let a = line_plot("t", "x", "y", &ser);
        let b = line_plot("t", "x", "y", &ser);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg") && a.ends_with("</svg>\n"));
        let bars = bar_plot("f", "state", "F", &[("ref", vec![1.0, f64::INFINITY]), ("gen", vec![0.5, 2.0])]);
        assert_eq!(bars.matches("<rect").count(), 1 + 3 + 2);
    }
}
