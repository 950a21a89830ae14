//! Self-contained SVG charts — grouped bars and line/scatter plots with
//! optional log axes — for run reports and scaling figures. The output is a
//! plain `<svg>` document with no external references, so the files render
//! anywhere and diff cleanly.

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 66.0;
const MARGIN_R: f64 = 18.0;
const MARGIN_T: f64 = 42.0;
const MARGIN_B: f64 = 54.0;

const PALETTE: [&str; 6] = ["#2166ac", "#b2182b", "#1b7837", "#e08214", "#762a83", "#35978f"];
const AXIS_COLOR: &str = "#333333";
const GRID_COLOR: &str = "#dddddd";

/// One line/scatter series. `dashed` is meant for fitted or reference lines;
/// dashed series are drawn without point markers.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

impl Series {
    pub fn new(name: &str, points: Vec<(f64, f64)>) -> Self {
        Series { name: name.to_string(), points, dashed: false }
    }

    pub fn dashed(name: &str, points: Vec<(f64, f64)>) -> Self {
        Series { name: name.to_string(), points, dashed: true }
    }
}

/// Line plot, linear or logarithmic per axis. Non-finite points — and, on a
/// log axis, non-positive ones — are dropped rather than rendered.
#[derive(Debug, Clone)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
}

/// Grouped bar chart: one group per label, one bar per series within a group.
#[derive(Debug, Clone)]
pub struct BarChart {
    pub title: String,
    pub y_label: String,
    pub labels: Vec<String>,
    pub series: Vec<(String, Vec<f64>)>,
    /// Fixed y-axis top (e.g. 1.0 for unit scores); `None` scales to the data.
    pub y_max: Option<f64>,
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Short decimal label for a tick value.
fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if (1e4..1e16).contains(&a) || a < 1e-3 {
        let mut s = format!("{:e}", v);
        if let Some(rest) = s.strip_suffix("e0") {
            s = rest.to_string();
        }
        s
    } else {
        let mut s = format!("{:.4}", v);
        while s.contains('.') && (s.ends_with('0') || s.ends_with('.')) {
            s.pop();
        }
        s
    }
}

/// Tick positions covering [lo, hi] with a 1/2/5 step close to `target` ticks.
fn linear_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / target.max(2) as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let step = if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    } * mag;
    let first = (lo / step - 1e-9).ceil() as i64;
    let last = (hi / step + 1e-9).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

/// Decade tick positions (values, not logs) covering [lo, hi] in log space.
fn decade_ticks(lo_log: f64, hi_log: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut k = lo_log.ceil() as i64;
    while (k as f64) <= hi_log + 1e-9 {
        out.push(10f64.powi(k as i32));
        k += 1;
    }
    out
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn sx(&self, v: f64) -> f64 {
        MARGIN_L + (v - self.x0) / (self.x1 - self.x0) * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn sy(&self, v: f64) -> f64 {
        // SVG y grows downward.
        HEIGHT - MARGIN_B - (v - self.y0) / (self.y1 - self.y0) * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

fn svg_open(title: &str) -> String {
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{tx}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\" fill=\"{ax}\">{t}</text>\n"
        ),
        w = WIDTH,
        h = HEIGHT,
        tx = WIDTH / 2.0,
        ax = AXIS_COLOR,
        t = escape_xml(title),
    )
}

fn axis_labels(out: &mut String, x_label: &str, y_label: &str) {
    if !x_label.is_empty() {
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"{}\">{}</text>\n",
            (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
            HEIGHT - 12.0,
            AXIS_COLOR,
            escape_xml(x_label)
        ));
    }
    if !y_label.is_empty() {
        out.push_str(&format!(
            "<text x=\"16\" y=\"{my}\" text-anchor=\"middle\" fill=\"{c}\" transform=\"rotate(-90 16 {my})\">{t}</text>\n",
            my = (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
            c = AXIS_COLOR,
            t = escape_xml(y_label)
        ));
    }
}

fn legend(out: &mut String, names: &[(String, usize, bool)]) {
    if names.len() < 2 {
        return;
    }
    let mut y = MARGIN_T + 4.0;
    for (name, color_idx, dashed) in names {
        let color = PALETTE[color_idx % PALETTE.len()];
        let x = WIDTH - MARGIN_R - 150.0;
        let dash = if *dashed { " stroke-dasharray=\"6 4\"" } else { "" };
        out.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"{c}\" stroke-width=\"2\"{dash}/>\n",
            x = x,
            x2 = x + 22.0,
            y = y,
            c = color,
            dash = dash
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{}\">{}</text>\n",
            x + 28.0,
            y + 4.0,
            AXIS_COLOR,
            escape_xml(name)
        ));
        y += 16.0;
    }
}

impl LineChart {
    pub fn to_svg(&self) -> String {
        // Transform into plot coordinates, dropping points a log axis cannot show.
        let tx = |v: f64| if self.log_x { v.log10() } else { v };
        let ty = |v: f64| if self.log_y { v.log10() } else { v };
        let usable = |p: &(f64, f64)| {
            p.0.is_finite()
                && p.1.is_finite()
                && (!self.log_x || p.0 > 0.0)
                && (!self.log_y || p.1 > 0.0)
        };
        let mut xs: Vec<f64> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        for s in &self.series {
            for p in s.points.iter().filter(|p| usable(p)) {
                xs.push(tx(p.0));
                ys.push(ty(p.1));
            }
        }
        let (mut x0, mut x1) = extent(&xs);
        let (mut y0, mut y1) = extent(&ys);
        pad_extent(&mut x0, &mut x1);
        pad_extent(&mut y0, &mut y1);
        let f = Frame { x0, x1, y0, y1 };

        let mut out = svg_open(&self.title);
        // Grid and ticks.
        let xticks: Vec<f64> = if self.log_x { decade_ticks(x0, x1) } else { linear_ticks(x0, x1, 6) };
        let yticks: Vec<f64> = if self.log_y { decade_ticks(y0, y1) } else { linear_ticks(y0, y1, 6) };
        for &t in &xticks {
            let v = if self.log_x { t.log10() } else { t };
            let x = f.sx(v);
            out.push_str(&format!(
                "<line x1=\"{x}\" y1=\"{t0}\" x2=\"{x}\" y2=\"{t1}\" stroke=\"{c}\"/>\n",
                x = x,
                t0 = MARGIN_T,
                t1 = HEIGHT - MARGIN_B,
                c = GRID_COLOR
            ));
            out.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"{}\">{}</text>\n",
                x,
                HEIGHT - MARGIN_B + 18.0,
                AXIS_COLOR,
                fmt_tick(t)
            ));
        }
        for &t in &yticks {
            let v = if self.log_y { t.log10() } else { t };
            let y = f.sy(v);
            out.push_str(&format!(
                "<line x1=\"{x0}\" y1=\"{y}\" x2=\"{x1}\" y2=\"{y}\" stroke=\"{c}\"/>\n",
                x0 = MARGIN_L,
                x1 = WIDTH - MARGIN_R,
                y = y,
                c = GRID_COLOR
            ));
            out.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" fill=\"{}\">{}</text>\n",
                MARGIN_L - 6.0,
                y + 4.0,
                AXIS_COLOR,
                fmt_tick(t)
            ));
        }
        frame_rect(&mut out);

        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<(f64, f64)> =
                s.points.iter().filter(|p| usable(p)).map(|p| (f.sx(tx(p.0)), f.sy(ty(p.1)))).collect();
            if pts.len() >= 2 {
                let joined: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", x, y)).collect();
                let dash = if s.dashed { " stroke-dasharray=\"6 4\"" } else { "" };
                out.push_str(&format!(
                    "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"{}/>\n",
                    joined.join(" "),
                    color,
                    dash
                ));
            }
            if !s.dashed {
                for (x, y) in &pts {
                    out.push_str(&format!(
                        "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3.2\" fill=\"{}\"/>\n",
                        x, y, color
                    ));
                }
            }
        }
        legend(&mut out, &named(&self.series));
        axis_labels(&mut out, &self.x_label, &self.y_label);
        out.push_str("</svg>\n");
        out
    }
}

impl BarChart {
    pub fn to_svg(&self) -> String {
        let data_max = self
            .series
            .iter()
            .flat_map(|(_, vs)| vs.iter())
            .cloned()
            .filter(|v| v.is_finite())
            .fold(0.0f64, f64::max);
        let top = self.y_max.unwrap_or(data_max * 1.05).max(1e-9);
        let f = Frame { x0: 0.0, x1: self.labels.len().max(1) as f64, y0: 0.0, y1: top };

        let mut out = svg_open(&self.title);
        for &t in &linear_ticks(0.0, top, 5) {
            let y = f.sy(t);
            out.push_str(&format!(
                "<line x1=\"{x0}\" y1=\"{y}\" x2=\"{x1}\" y2=\"{y}\" stroke=\"{c}\"/>\n",
                x0 = MARGIN_L,
                x1 = WIDTH - MARGIN_R,
                y = y,
                c = GRID_COLOR
            ));
            out.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" fill=\"{}\">{}</text>\n",
                MARGIN_L - 6.0,
                y + 4.0,
                AXIS_COLOR,
                fmt_tick(t)
            ));
        }
        frame_rect(&mut out);

        let nser = self.series.len().max(1) as f64;
        let group_w = f.sx(1.0) - f.sx(0.0);
        let bar_w = group_w * 0.8 / nser;
        for (gi, label) in self.labels.iter().enumerate() {
            let gx = f.sx(gi as f64) + group_w * 0.1;
            for (si, (_, vals)) in self.series.iter().enumerate() {
                let v = vals.get(gi).copied().unwrap_or(0.0);
                if !v.is_finite() {
                    continue;
                }
                let v = v.clamp(0.0, top);
                let y = f.sy(v);
                let h = f.sy(0.0) - y;
                out.push_str(&format!(
                    "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"/>\n",
                    gx + si as f64 * bar_w,
                    y,
                    bar_w.max(1.0),
                    h.max(0.0),
                    PALETTE[si % PALETTE.len()]
                ));
            }
            out.push_str(&format!(
                "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\" fill=\"{}\">{}</text>\n",
                f.sx(gi as f64 + 0.5),
                HEIGHT - MARGIN_B + 18.0,
                AXIS_COLOR,
                escape_xml(label)
            ));
        }
        let names: Vec<(String, usize, bool)> =
            self.series.iter().enumerate().map(|(i, (n, _))| (n.clone(), i, false)).collect();
        legend(&mut out, &names);
        axis_labels(&mut out, "", &self.y_label);
        out.push_str("</svg>\n");
        out
    }
}

fn named(series: &[Series]) -> Vec<(String, usize, bool)> {
    series.iter().enumerate().map(|(i, s)| (s.name.clone(), i, s.dashed)).collect()
}

fn frame_rect(out: &mut String) {
    out.push_str(&format!(
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"{}\"/>\n",
        MARGIN_L,
        MARGIN_T,
        WIDTH - MARGIN_L - MARGIN_R,
        HEIGHT - MARGIN_T - MARGIN_B,
        AXIS_COLOR
    ));
}

fn extent(vs: &[f64]) -> (f64, f64) {
    if vs.is_empty() {
        return (0.0, 1.0);
    }
    let lo = vs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

fn pad_extent(lo: &mut f64, hi: &mut f64) {
    if *hi - *lo < 1e-12 {
        *lo -= 0.5;
        *hi += 0.5;
    } else {
        let pad = (*hi - *lo) * 0.06;
        *lo -= pad;
        *hi += pad;
    }
}
