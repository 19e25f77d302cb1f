//! Minimal SVG charts: line plots of training curves and a point projection.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 40.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn header(title: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    let _ = writeln!(s, "<text x=\"{PAD}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>");
    let _ = writeln!(
        s,
        "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#888\"/>",
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    s
}

/// One polyline per series, each scaled to its own range; the legend shows the ranges.
pub fn line_chart(title: &str, series: &[(&str, Vec<f64>)]) -> String {
    let mut s = header(title);
    for (i, (name, ys)) in series.iter().enumerate() {
        let (lo, hi) = bounds(ys.iter().copied());
        let n = ys.len().max(2) - 1;
        let pts: Vec<String> = ys
            .iter()
            .enumerate()
            .filter(|(_, y)| y.is_finite())
            .map(|(x, y)| {
                let px = PAD + (W - 2.0 * PAD) * x as f64 / n as f64;
                let py = H - PAD - (H - 2.0 * PAD) * (y - lo) / (hi - lo);
                format!("{px:.1},{py:.1}")
            })
            .collect();
        let color = COLORS[i % COLORS.len()];
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>", pts.join(" "));
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\" font-family=\"sans-serif\" font-size=\"11\">{name} [{lo:.3}, {hi:.3}]</text>",
            W - PAD - 180.0,
            PAD + 14.0 * (i + 1) as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Side view (x against z) of one or more clouds.
pub fn scatter_xz(title: &str, clouds: &[&[[f32; 3]]]) -> String {
    let mut s = header(title);
    let (xl, xh) = bounds(clouds.iter().flat_map(|c| c.iter().map(|p| p[0] as f64)));
    let (zl, zh) = bounds(clouds.iter().flat_map(|c| c.iter().map(|p| p[2] as f64)));
    for (i, c) in clouds.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        for p in c.iter() {
            let px = PAD + (W - 2.0 * PAD) * (p[0] as f64 - xl) / (xh - xl);
            let py = H - PAD - (H - 2.0 * PAD) * (p[2] as f64 - zl) / (zh - zl);
            let _ = writeln!(s, "<circle cx=\"{px:.1}\" cy=\"{py:.1}\" r=\"1\" fill=\"{color}\" fill-opacity=\"0.6\"/>");
        }
    }
    s.push_str("</svg>\n");
    s
}
