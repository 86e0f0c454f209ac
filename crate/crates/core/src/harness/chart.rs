//! Return-vs-ε line chart as standalone SVG.

use std::collections::BTreeMap;
use std::fmt::Write;

use super::SweepResult;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 56.0;
const COLORS: [&str; 8] = [
    "#444444", "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
];

/// One polyline per attack through the seed-mean return at each ε.
pub fn render_svg(result: &SweepResult, title: &str) -> String {
    let mut order: Vec<&str> = Vec::new();
    let mut series: BTreeMap<&str, BTreeMap<u64, (f64, f64, usize)>> = BTreeMap::new();
    for r in &result.rows {
        if !order.contains(&r.attack.as_str()) {
            order.push(&r.attack);
        }
        let e = series
            .entry(&r.attack)
            .or_default()
            .entry(r.epsilon.to_bits())
            .or_insert((r.epsilon, 0.0, 0));
        e.1 += r.ret;
        e.2 += 1;
    }
    let eps_max = result.rows.iter().map(|r| r.epsilon).fold(0.0, f64::max).max(1e-12);
    let (mut lo, mut hi) = result
        .rows
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), r| (l.min(r.ret), h.max(r.ret)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        lo -= 0.5;
        hi += 0.5;
    }
    let x = |e: f64| PAD + e / eps_max * (W - 2.0 * PAD);
    let y = |v: f64| H - PAD - (v - lo) / (hi - lo) * (H - 2.0 * PAD);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r#"<path d="M{PAD} {PAD} V{} H{}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD
    );
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">epsilon</text>"#, W / 2.0, H - 16.0);
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">return</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (v, label) in [(lo, lo), (hi, hi)] {
        let _ = writeln!(svg, r#"<text x="{}" y="{:.1}" text-anchor="end">{label:.3}</text>"#, PAD - 4.0, y(v) + 4.0);
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{eps_max}</text>"#, W - PAD, H - PAD + 16.0);
    for (i, name) in order.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = series[name]
            .values()
            .map(|(e, sum, n)| format!("{:.2},{:.2}", x(*e), y(sum / *n as f64)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - PAD + 4.0 - 120.0,
            PAD + 14.0 * i as f64,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
