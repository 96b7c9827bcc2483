//! Small SVG line/scatter plot writer.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: (f64, f64, f64, f64) = (60.0, 20.0, 30.0, 50.0); // left, right, top, bottom
const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Style {
    Line,
    Points,
}

#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub style: Style,
}

#[derive(Clone, Debug, Default)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Fixed y range; derived from the data when absent.
    pub y_range: Option<(f64, f64)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    (0..=4).map(|i| lo + (hi - lo) * i as f64 / 4.0).collect()
}

fn label(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{}", (v * 1000.0).round() / 1000.0)
    }
}

impl Plot {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Plot {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            ..Plot::default()
        }
    }

    pub fn with(mut self, name: &str, style: Style, points: Vec<(f64, f64)>) -> Self {
        self.series.push(Series {
            name: name.into(),
            points,
            style,
        });
        self
    }

    pub fn render(&self) -> String {
        let all = || self.series.iter().flat_map(|s| s.points.iter().copied());
        let (x0, x1) = range(all().map(|p| p.0));
        let (y0, y1) = self.y_range.unwrap_or_else(|| range(all().map(|p| p.1)));
        let (l, r, t, b) = MARGIN;
        let sx = |x: f64| l + (x - x0) / (x1 - x0) * (W - l - r);
        let sy = |y: f64| H - b - (y - y0) / (y1 - y0) * (H - t - b);
        let mut s = String::new();
        writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#).unwrap();
        writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
        writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, esc(&self.title)).unwrap();
        writeln!(s, r#"<line x1="{l}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - b, W - r, H - b).unwrap();
        writeln!(s, r#"<line x1="{l}" y1="{t}" x2="{l}" y2="{}" stroke="black"/>"#, H - b).unwrap();
        for v in ticks(x0, x1) {
            writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, sx(v), H - b + 15.0, label(v)).unwrap();
        }
        for v in ticks(y0, y1) {
            writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, l - 5.0, sy(v) + 4.0, label(v)).unwrap();
            writeln!(s, r##"<line x1="{l}" y1="{0:.1}" x2="{1}" y2="{0:.1}" stroke="#ddd"/>"##, sy(v), W - r).unwrap();
        }
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, esc(&self.x_label)).unwrap();
        writeln!(s, r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#, H / 2.0, H / 2.0, esc(&self.y_label)).unwrap();
        for (i, ser) in self.series.iter().enumerate() {
            let c = PALETTE[i % PALETTE.len()];
            match ser.style {
                Style::Line => {
                    let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
                    writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{}"/>"#, pts.join(" ")).unwrap();
                }
                Style::Points => {
                    for &(x, y) in &ser.points {
                        writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{c}" fill-opacity="0.7"/>"#, sx(x), sy(y)).unwrap();
                    }
                }
            }
            let ly = t + 14.0 * i as f64 + 6.0;
            writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{c}"/>"#, W - r - 110.0, ly).unwrap();
            writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, W - r - 95.0, ly + 9.0, esc(&ser.name)).unwrap();
        }
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_every_point() {
        let svg = Plot::new("t <1>", "x", "y")
            .with("a", Style::Line, vec![(0.0, 1.0), (1.0, 2.0)])
            .with("b", Style::Points, vec![(0.5, 0.5); 3])
            .render();
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<circle").count(), 3);
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(svg.contains("t &lt;1&gt;"));
    }

    #[test]
    fn degenerate_ranges_are_finite() {
        let svg = Plot::new("", "", "").with("a", Style::Points, vec![(1.0, 1.0)]).render();
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
        let empty = Plot::new("", "", "").render();
        assert!(!empty.contains("NaN"));
    }
}
