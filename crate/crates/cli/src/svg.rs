//! Minimal static SVG line charts. Each file carries its plotted data as a
//! CSV table inside an XML comment, and nothing time-dependent.

use std::fmt::Write;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub color: &'static str,
    pub dashed: bool,
    pub markers: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub title: String,
    pub series: Vec<Series>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Fixed y range; derived from the data when absent.
    pub y_range: Option<(f64, f64)>,
    pub panels: Vec<Panel>,
    pub columns: usize,
}

pub const TREATMENT_COLOR: &str = "#c0392b";
pub const CONTROL_COLOR: &str = "#2471a3";
pub const NEUTRAL_COLOR: &str = "#444444";

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 280.0;
const MARGIN_L: f64 = 56.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 44.0;
const TITLE_H: f64 = 34.0;
const LEGEND_H: f64 = 26.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// XML comments may not contain `--`.
fn comment_safe(s: &str) -> String {
    let mut out = s.to_string();
    while out.contains("--") {
        out = out.replace("--", "- -");
    }
    out
}

fn bounds(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    (lo <= hi).then_some((lo, hi))
}

fn padded((lo, hi): (f64, f64)) -> (f64, f64) {
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = (hi - lo) * 0.08;
        (lo - pad, hi + pad)
    }
}

impl Chart {
    pub fn render(&self) -> String {
        let cols = self.columns.max(1).min(self.panels.len().max(1));
        let rows = self.panels.len().div_ceil(cols).max(1);
        let width = cols as f64 * PANEL_W;
        let height = TITLE_H + LEGEND_H + rows as f64 * PANEL_H;
        let all_points = || self.panels.iter().flat_map(|p| p.series.iter().flat_map(|s| s.points.iter()));
        let x_range = match bounds(all_points().map(|p| p.0)) {
            Some((a, b)) if b - a > 1e-12 => (a, b),
            Some((a, _)) => (a - 0.5, a + 0.5),
            None => (0.0, 1.0),
        };
        let y_range = self.y_range.unwrap_or_else(|| padded(bounds(all_points().map(|p| p.1)).unwrap_or((0.0, 1.0))));

        let mut s = String::new();
        writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
        )
        .unwrap();
        s.push_str("<!-- data\npanel,series,x,y\n");
        for p in &self.panels {
            for series in &p.series {
                for (x, y) in &series.points {
                    writeln!(s, "{},{},{x},{y}", comment_safe(&p.title), comment_safe(&series.label)).unwrap();
                }
            }
        }
        s.push_str("-->\n");
        writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#, width / 2.0, esc(&self.title)).unwrap();

        // legend from the first panel's series
        if let Some(first) = self.panels.first() {
            let mut x = 16.0;
            let y = TITLE_H + 12.0;
            for series in &first.series {
                let dash = if series.dashed { r#" stroke-dasharray="4 3""# } else { "" };
                writeln!(
                    s,
                    r#"<line x1="{x:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{}" stroke-width="2"{dash}/>"#,
                    x + 22.0,
                    series.color
                )
                .unwrap();
                writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, x + 27.0, y + 4.0, esc(&series.label)).unwrap();
                x += 40.0 + 6.5 * series.label.chars().count() as f64;
            }
        }

        for (i, p) in self.panels.iter().enumerate() {
            let ox = (i % cols) as f64 * PANEL_W;
            let oy = TITLE_H + LEGEND_H + (i / cols) as f64 * PANEL_H;
            self.panel(&mut s, p, ox, oy, x_range, y_range);
        }
        s.push_str("</svg>\n");
        s
    }

    fn panel(&self, s: &mut String, p: &Panel, ox: f64, oy: f64, (x0, x1): (f64, f64), (y0, y1): (f64, f64)) {
        let (pl, pt) = (ox + MARGIN_L, oy + MARGIN_T);
        let (pw, ph) = (PANEL_W - MARGIN_L - MARGIN_R, PANEL_H - MARGIN_T - MARGIN_B);
        let sx = |x: f64| pl + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| pt + ph - (y - y0) / (y1 - y0) * ph;
        writeln!(s, r#"<g>"#).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">{}</text>"#, pl + pw / 2.0, oy + 18.0, esc(&p.title))
            .unwrap();
        writeln!(s, r##"<rect x="{pl:.1}" y="{pt:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="#999"/>"##).unwrap();
        for t in 0..=4 {
            let v = y0 + (y1 - y0) * t as f64 / 4.0;
            let y = sy(v);
            writeln!(s, r##"<line x1="{pl:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#eee"/>"##, pl + pw).unwrap();
            writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, pl - 4.0, y + 4.0).unwrap();
        }
        for t in 0..=5 {
            let v = x0 + (x1 - x0) * t as f64 / 5.0;
            writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.0}</text>"#, sx(v), pt + ph + 14.0).unwrap();
        }
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, pl + pw / 2.0, pt + ph + 32.0, esc(&self.x_label)).unwrap();
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" transform="rotate(-90 {:.1} {:.1})">{}</text>"#,
            ox + 14.0,
            pt + ph / 2.0,
            ox + 14.0,
            pt + ph / 2.0,
            esc(&self.y_label)
        )
        .unwrap();
        for series in &p.series {
            let pts: Vec<String> = series
                .points
                .iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            if pts.is_empty() {
                continue;
            }
            let dash = if series.dashed { r#" stroke-dasharray="4 3""# } else { "" };
            let width = if series.dashed { 1.2 } else { 2.2 };
            writeln!(
                s,
                r#"<polyline fill="none" stroke="{}" stroke-width="{width}"{dash} points="{}"/>"#,
                series.color,
                pts.join(" ")
            )
            .unwrap();
            if series.markers {
                for pt in &pts {
                    let (cx, cy) = pt.split_once(',').expect("formatted pair");
                    writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="1.8" fill="{}"/>"#, series.color).unwrap();
                }
            }
        }
        writeln!(s, "</g>").unwrap();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chart() -> Chart {
        Chart {
            title: "a <b> & c".into(),
            x_label: "round".into(),
            y_label: "score".into(),
            y_range: Some((0.0, 1.0)),
            panels: vec![Panel {
                title: "p--1".into(),
                series: vec![Series {
                    label: "treatment".into(),
                    points: vec![(0.0, 0.1), (1.0, 0.4)],
                    color: TREATMENT_COLOR,
                    dashed: false,
                    markers: true,
                }],
            }],
            columns: 2,
        }
    }

    #[test]
    fn embeds_data_and_escapes_text() {
        let svg = chart().render();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("p- -1,treatment,0,0.1\n"));
        assert!(svg.contains("a &lt;b&gt; &amp; c"));
        let comment = &svg[svg.find("<!--").unwrap() + 4..svg.find("-->").unwrap()];
        assert!(!comment.contains("--"));
        assert_eq!(svg, chart().render());
    }
}
