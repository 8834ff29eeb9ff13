//! Static SVG line chart of sweep results.

use std::fmt::Write as _;

use super::sweep::{aggregate, SweepRow};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesPoint {
    pub count: usize,
    pub success: f64,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 140.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Mean success against log2(instruction count), one line per algorithm.
pub fn sweep_plot_svg(rows: &[SweepRow]) -> String {
    let agg = aggregate(rows);
    let mut series: Vec<(String, Vec<SeriesPoint>)> = Vec::new();
    for (alg, count, success) in agg {
        match series.iter_mut().find(|(a, _)| *a == alg) {
            Some((_, pts)) => pts.push(SeriesPoint { count, success }),
            None => series.push((alg, vec![SeriesPoint { count, success }])),
        }
    }
    let max_log = series
        .iter()
        .flat_map(|(_, p)| p.iter().map(|q| (q.count.max(1) as f64).log2()))
        .fold(1.0f64, f64::max)
        .ceil();
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let x = |c: usize| LEFT + (c.max(1) as f64).log2() / max_log * pw;
    let y = |s: f64| TOP + (1.0 - s) * ph;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<line x1="{LEFT}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        TOP + ph,
        LEFT + pw,
        TOP + ph
    );
    let _ = writeln!(out, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#, TOP + ph);
    for k in 0..=(max_log as usize) {
        let px = x(1 << k);
        let _ = writeln!(
            out,
            r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            TOP + ph + 18.0,
            1usize << k
        );
    }
    for k in 0..=4 {
        let s = k as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{s:.2}</text>"#,
            LEFT - 6.0,
            y(s) + 4.0
        );
        let _ = writeln!(
            out,
            r##"<line x1="{LEFT}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#dddddd"/>"##,
            y(s),
            LEFT + pw,
            y(s)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">number of instructions</text>"#,
        LEFT + pw / 2.0,
        H - 10.0
    );
    let _ = writeln!(
        out,
        r#"<text x="15" y="{:.1}" text-anchor="middle" transform="rotate(-90 15 {:.1})">success rate</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    for (k, (alg, pts)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let coords: Vec<String> = pts.iter().map(|p| format!("{:.1},{:.1}", x(p.count), y(p.success))).collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            coords.join(" ")
        );
        for p in pts {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                x(p.count),
                y(p.success)
            );
        }
        let ly = TOP + 20.0 * k as f64 + 10.0;
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            W - RIGHT + 15.0,
            W - RIGHT + 40.0
        );
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">{alg}</text>"#, W - RIGHT + 46.0, ly + 4.0);
    }
    out.push_str("</svg>\n");
    out
}
