//! Minimal SVG charts for reports.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD_L: f64 = 60.0;
const PAD_R: f64 = 20.0;
const PAD_T: f64 = 40.0;
const PAD_B: f64 = 50.0;
const COLORS: [&str; 6] = ["#4472c4", "#ed7d31", "#70ad47", "#a5a5a5", "#ffc000", "#5b9bd5"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(title: &str) -> String {
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title)).unwrap();
    s
}

fn axes(s: &mut String, lo: f64, hi: f64, y_label: &str) {
    let (x0, x1, y0, y1) = (PAD_L, W - PAD_R, H - PAD_B, PAD_T);
    writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#).unwrap();
    writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#).unwrap();
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = y0 - (y0 - y1) * i as f64 / 4.0;
        writeln!(s, r##"<line x1="{x0}" y1="{y:.1}" x2="{x1}" y2="{y:.1}" stroke="#e0e0e0"/>"##).unwrap();
        writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, x0 - 6.0, y + 4.0).unwrap();
    }
    writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    )
    .unwrap();
}

fn range(values: impl Iterator<Item = f64>, include_zero: bool) -> (f64, f64) {
    let (mut lo, mut hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if include_zero {
        lo = lo.min(0.0);
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let pad = 0.05 * (hi - lo);
    (if include_zero && lo == 0.0 { 0.0 } else { lo - pad }, hi + pad)
}

/// Vertical bars with labels under each bar.
pub fn bar_chart_svg(title: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let mut s = header(title);
    let (lo, hi) = range(bars.iter().map(|b| b.1), true);
    axes(&mut s, lo, hi, y_label);
    let n = bars.len().max(1) as f64;
    let slot = (W - PAD_L - PAD_R) / n;
    let scale = (H - PAD_B - PAD_T) / (hi - lo);
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = PAD_L + slot * i as f64 + slot * 0.15;
        let top = H - PAD_B - (v - lo) * scale;
        let h = (v - lo) * scale;
        writeln!(
            s,
            r#"<rect x="{x:.1}" y="{top:.1}" width="{:.1}" height="{h:.1}" fill="{}"/>"#,
            slot * 0.7,
            COLORS[i % COLORS.len()]
        )
        .unwrap();
        let cx = x + slot * 0.35;
        writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{v:.3}</text>"#, top - 4.0).unwrap();
        writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, H - PAD_B + 16.0, escape(label)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// One polyline per series over a shared x axis.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut s = header(title);
    let (ylo, yhi) = range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)), false);
    let (xlo, xhi) = range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)), false);
    axes(&mut s, ylo, yhi, y_label);
    let sx = (W - PAD_L - PAD_R) / (xhi - xlo);
    let sy = (H - PAD_B - PAD_T) / (yhi - ylo);
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", PAD_L + (x - xlo) * sx, H - PAD_B - (y - ylo) * sy))
            .collect();
        writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" ")).unwrap();
        let ly = PAD_T + 14.0 * i as f64;
        writeln!(s, r#"<rect x="{}" y="{:.1}" width="10" height="10" fill="{color}"/>"#, W - PAD_R - 150.0, ly).unwrap();
        writeln!(s, r#"<text x="{}" y="{:.1}">{}</text>"#, W - PAD_R - 135.0, ly + 9.0, escape(name)).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(x_label)).unwrap();
    writeln!(s, r#"<text x="{PAD_L}" y="{}" text-anchor="middle">{xlo:.0}</text>"#, H - PAD_B + 16.0).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{xhi:.0}</text>"#, W - PAD_R, H - PAD_B + 16.0).unwrap();
    s.push_str("</svg>\n");
    s
}
