//! Minimal hand-written SVG charts.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#7f7f7f"];

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    Lines,
    Bars,
}

#[derive(Debug, Clone)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    pub style: Style,
    pub log_y: bool,
    /// Category names for the x axis; points then use x = 0, 1, 2, ...
    pub x_names: Option<Vec<String>>,
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn t(&self, v: f64) -> f64 {
        let (v, lo, hi) = if self.log {
            (v.max(f64::MIN_POSITIVE).log10(), self.lo.log10(), self.hi.log10())
        } else {
            (v, self.lo, self.hi)
        };
        if hi > lo {
            (v - lo) / (hi - lo)
        } else {
            0.5
        }
    }

    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let (a, b) = (self.lo.log10().floor() as i32, self.hi.log10().ceil() as i32);
            return (a..=b).map(|e| 10f64.powi(e)).filter(|&v| v >= self.lo && v <= self.hi).collect();
        }
        let span = self.hi - self.lo;
        if span <= 0.0 {
            return vec![self.lo];
        }
        let raw = span / 5.0;
        let mag = 10f64.powf(raw.log10().floor());
        let step = [1.0, 2.0, 5.0, 10.0].iter().map(|s| s * mag).find(|&s| s >= raw).unwrap_or(10.0 * mag);
        let mut v = (self.lo / step).ceil() * step;
        let mut out = Vec::new();
        while v <= self.hi + step * 1e-9 {
            out.push(if v.abs() < step * 1e-9 { 0.0 } else { v });
            v += step;
        }
        out
    }
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-2) {
        format!("{v:.0e}")
    } else if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Chart {
    pub fn render(&self) -> String {
        let pts = || self.series.iter().flat_map(|s| s.points.iter().copied());
        let (mut xlo, mut xhi) = pts().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (x, _)| (a.min(x), b.max(x)));
        let ys = pts().map(|p| p.1).filter(|y| !self.log_y || *y > 0.0);
        let (mut ylo, mut yhi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
        if !xlo.is_finite() {
            (xlo, xhi) = (0.0, 1.0);
        }
        if !ylo.is_finite() {
            (ylo, yhi) = (if self.log_y { 1.0 } else { 0.0 }, 1.0);
        }
        if self.style == Style::Bars {
            (xlo, xhi) = (xlo - 0.5, xhi + 0.5);
        }
        if self.log_y {
            ylo = 10f64.powf(ylo.log10().floor());
            yhi = 10f64.powf(yhi.log10().ceil()).max(ylo * 10.0);
        } else {
            ylo = ylo.min(0.0);
            yhi = yhi.max(0.0);
            let pad = (yhi - ylo).max(1e-12) * 0.05;
            yhi += pad;
            if ylo < 0.0 {
                ylo -= pad;
            }
        }
        let xa = Axis { lo: xlo, hi: xhi, log: false };
        let ya = Axis { lo: ylo, hi: yhi, log: self.log_y };
        let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
        let sx = |x: f64| LEFT + xa.t(x) * pw;
        let sy = |y: f64| TOP + (1.0 - ya.t(y)) * ph;

        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(&self.title));
        for y in ya.ticks() {
            let py = sy(y);
            let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#e0e0e0"/>"##, W - RIGHT);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, LEFT - 6.0, py + 4.0, fmt_tick(y));
        }
        let xticks: Vec<(f64, String)> = match &self.x_names {
            Some(names) => names.iter().enumerate().map(|(i, n)| (i as f64, n.clone())).collect(),
            None => xa.ticks().into_iter().map(|x| (x, fmt_tick(x))).collect(),
        };
        for (x, label) in xticks {
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, sx(x), H - BOTTOM + 16.0, escape(&label));
        }
        let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#333"/>"##, H - BOTTOM, W - RIGHT, H - BOTTOM);
        let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.1}" stroke="#333"/>"##, H - BOTTOM);
        if !self.log_y && ylo < 0.0 {
            let z = sy(0.0);
            let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{z:.1}" x2="{:.1}" y2="{z:.1}" stroke="#333" stroke-dasharray="3,3"/>"##, W - RIGHT);
        }
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 12.0, escape(&self.x_label));
        let _ = writeln!(s, r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#, TOP + ph / 2.0, TOP + ph / 2.0, escape(&self.y_label));

        let groups = self.series.len().max(1) as f64;
        let slot = pw / (xhi - xlo).max(1e-12);
        for (k, series) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            match self.style {
                Style::Lines => {
                    let path: Vec<String> = series
                        .points
                        .iter()
                        .filter(|p| !self.log_y || p.1 > 0.0)
                        .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
                        .collect();
                    let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
                    for p in &path {
                        let (x, y) = p.split_once(',').unwrap();
                        let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="2.5" fill="{color}"/>"#);
                    }
                }
                Style::Bars => {
                    let bw = slot * 0.8 / groups;
                    let base = if self.log_y { ylo } else { 0.0 };
                    for &(x, y) in &series.points {
                        if self.log_y && y <= 0.0 {
                            continue;
                        }
                        let x0 = sx(x) - slot * 0.4 + bw * k as f64;
                        let (y0, y1) = (sy(y.max(base)), sy(y.min(base)));
                        let _ = writeln!(s, r#"<rect x="{x0:.1}" y="{y0:.1}" width="{bw:.1}" height="{:.1}" fill="{color}"/>"#, (y1 - y0).max(0.0));
                    }
                }
            }
            let ly = TOP + 14.0 * k as f64;
            let _ = writeln!(s, r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{color}"/>"#, W - RIGHT - 150.0, ly);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, W - RIGHT - 135.0, ly + 9.0, escape(&series.name));
        }
        s.push_str("</svg>\n");
        s
    }
}
