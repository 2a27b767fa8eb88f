//! Minimal SVG charts for experiment summaries.

use super::Summary;
use std::collections::BTreeMap;
use std::fmt::Write;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

/// Mean and spread of one point or bar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<Point>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn plot_h() -> f64 {
    HEIGHT - TOP - BOTTOM
}

fn plot_w() -> f64 {
    WIDTH - LEFT - RIGHT
}

/// Maps a score in [0, 1] to a y pixel.
fn y_of(v: f64) -> f64 {
    TOP + plot_h() * (1.0 - v.clamp(0.0, 1.0))
}

fn frame(svg: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, LEFT + plot_w() / 2.0, escape(title));
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let y = y_of(v);
        let _ = writeln!(svg, r##"<line x1="{LEFT}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##, LEFT + plot_w());
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#, LEFT - 6.0, y + 4.0);
    }
    let _ = writeln!(svg, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.1}" stroke="black"/>"#, TOP + plot_h());
    let _ = writeln!(svg, r#"<line x1="{LEFT}" y1="{0:.1}" x2="{1:.1}" y2="{0:.1}" stroke="black"/>"#, TOP + plot_h(), LEFT + plot_w());
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, LEFT + plot_w() / 2.0, HEIGHT - 12.0, escape(x_label));
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{0:.1}" text-anchor="middle" transform="rotate(-90 16 {0:.1})">{1}</text>"#,
        TOP + plot_h() / 2.0,
        escape(y_label)
    );
}

fn legend(svg: &mut String, labels: &[String]) {
    for (i, label) in labels.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let x = LEFT + plot_w() + 14.0;
        let _ = writeln!(svg, r#"<rect x="{x:.1}" y="{:.1}" width="12" height="12" fill="{}"/>"#, y - 10.0, PALETTE[i % PALETTE.len()]);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{y:.1}">{}</text>"#, x + 18.0, escape(label));
    }
}

fn error_bar(svg: &mut String, x: f64, p: &Point) {
    if p.std > 0.0 && p.std.is_finite() {
        let (lo, hi) = (y_of(p.mean - p.std), y_of(p.mean + p.std));
        let _ = writeln!(svg, r#"<line x1="{x:.1}" y1="{lo:.1}" x2="{x:.1}" y2="{hi:.1}" stroke="black"/>"#);
        for y in [lo, hi] {
            let _ = writeln!(svg, r#"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="black"/>"#, x - 3.0, x + 3.0);
        }
    }
}

/// Grouped bars: one group per category, one bar per series. Point `x`
/// values index the categories.
pub fn bar_chart(title: &str, categories: &[String], series: &[Series], y_label: &str) -> String {
    let mut svg = String::new();
    frame(&mut svg, title, "", y_label);
    let group_w = plot_w() / categories.len().max(1) as f64;
    let bar_w = 0.8 * group_w / series.len().max(1) as f64;
    for (ci, cat) in categories.iter().enumerate() {
        let gx = LEFT + group_w * ci as f64;
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, gx + group_w / 2.0, TOP + plot_h() + 18.0, escape(cat));
        for (si, s) in series.iter().enumerate() {
            let Some(p) = s.points.iter().find(|p| p.x as usize == ci) else { continue };
            if !p.mean.is_finite() {
                continue;
            }
            let x = gx + 0.1 * group_w + bar_w * si as f64;
            let y = y_of(p.mean);
            let _ = writeln!(
                svg,
                r#"<rect x="{x:.1}" y="{y:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                bar_w * 0.9,
                TOP + plot_h() - y,
                PALETTE[si % PALETTE.len()]
            );
            error_bar(&mut svg, x + bar_w * 0.45, p);
        }
    }
    legend(&mut svg, &series.iter().map(|s| s.label.clone()).collect::<Vec<_>>());
    svg.push_str("</svg>\n");
    svg
}

/// Lines over x in [0, 1] with error bars.
pub fn line_plot(title: &str, series: &[Series], x_label: &str, y_label: &str) -> String {
    let mut svg = String::new();
    frame(&mut svg, title, x_label, y_label);
    let x_of = |x: f64| LEFT + plot_w() * x.clamp(0.0, 1.0);
    for i in 0..=10 {
        let x = i as f64 / 10.0;
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{x:.1}</text>"#, x_of(x), TOP + plot_h() + 18.0);
    }
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let pts: Vec<&Point> = s.points.iter().filter(|p| p.mean.is_finite()).collect();
        let path: Vec<String> = pts.iter().map(|p| format!("{:.1},{:.1}", x_of(p.x), y_of(p.mean))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.join(" "));
        for p in pts {
            let _ = writeln!(svg, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, x_of(p.x), y_of(p.mean));
            error_bar(&mut svg, x_of(p.x), p);
        }
    }
    legend(&mut svg, &series.iter().map(|s| s.label.clone()).collect::<Vec<_>>());
    svg.push_str("</svg>\n");
    svg
}

/// F1 bars per song, one series per (mode, side).
pub fn f1_bars(title: &str, summaries: &[Summary]) -> String {
    let mut songs: Vec<String> = summaries.iter().map(|s| s.song.clone()).collect();
    songs.sort();
    songs.dedup();
    let mut by_series: BTreeMap<String, Vec<Point>> = BTreeMap::new();
    for s in summaries {
        let ci = songs.iter().position(|n| *n == s.song).expect("song listed");
        by_series.entry(format!("{} {}", s.mode, s.side)).or_default().push(Point { x: ci as f64, mean: s.f1_mean, std: s.f1_std });
    }
    let series: Vec<Series> = by_series.into_iter().map(|(label, points)| Series { label, points }).collect();
    bar_chart(title, &songs, &series, "F1")
}

/// F1 against DR intensity, one line per side.
pub fn f1_by_intensity(title: &str, summaries: &[Summary]) -> String {
    let mut by_side: BTreeMap<String, Vec<Point>> = BTreeMap::new();
    for s in summaries {
        by_side.entry(format!("{} F1", s.side)).or_default().push(Point { x: s.c_dr, mean: s.f1_mean, std: s.f1_std });
    }
    let series: Vec<Series> = by_side
        .into_iter()
        .map(|(label, mut points)| {
            points.sort_by(|a, b| a.x.total_cmp(&b.x));
            Series { label, points }
        })
        .collect();
    line_plot(title, &series, "DR intensity c_dr", "F1")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_plot_has_one_polyline_per_series() {
        let s = |label: &str| Series {
            label: label.into(),
            points: vec![Point { x: 0.0, mean: 0.8, std: 0.1 }, Point { x: 1.0, mean: 0.5, std: 0.0 }],
        };
        let svg = line_plot("t", &[s("sim"), s("plant")], "x", "y");
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<circle").count(), 4);
    }

    #[test]
    fn bars_skip_missing_values() {
        let series = vec![Series {
            label: "a<b".into(),
            points: vec![Point { x: 0.0, mean: 0.5, std: 0.1 }, Point { x: 1.0, mean: f64::NAN, std: f64::NAN }],
        }];
        let svg = bar_chart("t", &["x".into(), "y".into()], &series, "F1");
        assert_eq!(svg.matches("<rect x").count(), 1 + 1);
        assert!(svg.contains("a&lt;b"));
    }
}
