//! Self-contained SVG line charts (axes, ticks, labels, one polyline per
//! series). Text output only; no rendering dependencies.

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

const COLORS: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];
const W: f64 = 720.0;
const H: f64 = 440.0;
const ML: f64 = 70.0;
const MR: f64 = 20.0;
const MT: f64 = 40.0;
const MB: f64 = 55.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if !(hi - lo).is_finite() || hi <= lo {
        return vec![lo];
    }
    let span = hi - lo;
    let raw = span / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let step = if norm < 1.5 {
        1.0
    } else if norm < 3.0 {
        2.0
    } else if norm < 7.0 {
        5.0
    } else {
        10.0
    } * mag;
    let start = (lo / step).ceil() * step;
    let mut ticks = Vec::new();
    let mut t = start;
    while t <= hi + step * 1e-9 {
        ticks.push(t);
        t += step;
    }
    ticks
}

impl Chart {
    pub fn render(&self) -> String {
        let mut xs: Vec<f64> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        for s in &self.series {
            for &(x, y) in &s.points {
                if x.is_finite() && y.is_finite() {
                    xs.push(x);
                    ys.push(y);
                }
            }
        }
        let (x_lo, x_hi) = match (xs.iter().cloned().reduce(f64::min), xs.iter().cloned().reduce(f64::max)) {
            (Some(a), Some(b)) if b > a => (a, b),
            (Some(a), _) => (a - 0.5, a + 0.5),
            _ => (0.0, 1.0),
        };
        let (y_lo, y_hi) = match (ys.iter().cloned().reduce(f64::min), ys.iter().cloned().reduce(f64::max)) {
            (Some(a), Some(b)) if b > a => (a, b),
            (Some(a), _) => (a - 0.5, a + 0.5),
            _ => (0.0, 1.0),
        };
        let px = |x: f64| ML + (x - x_lo) / (x_hi - x_lo) * (W - ML - MR);
        let py = |y: f64| H - MB - (y - y_lo) / (y_hi - y_lo) * (H - MT - MB);

        let mut out = String::new();
        out.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
        ));
        out.push_str(&format!(
            "  <rect x=\"0\" y=\"0\" width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
        ));
        out.push_str(&format!(
            "  <text x=\"{}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\" font-family=\"sans-serif\">{}</text>\n",
            W / 2.0,
            esc(&self.title)
        ));
        // axes
        out.push_str(&format!(
            "  <line x1=\"{ML}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
            H - MB,
            W - MR,
            H - MB
        ));
        out.push_str(&format!(
            "  <line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{}\" stroke=\"black\"/>\n",
            H - MB
        ));
        for t in nice_ticks(x_lo, x_hi, 6) {
            let x = px(t);
            out.push_str(&format!(
                "  <line x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{}\" stroke=\"black\"/>\n",
                H - MB,
                H - MB + 5.0
            ));
            out.push_str(&format!(
                "  <text x=\"{x}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\" font-family=\"sans-serif\">{}</text>\n",
                H - MB + 18.0,
                trim_num(t)
            ));
        }
        for t in nice_ticks(y_lo, y_hi, 6) {
            let y = py(t);
            out.push_str(&format!(
                "  <line x1=\"{}\" y1=\"{y}\" x2=\"{ML}\" y2=\"{y}\" stroke=\"black\"/>\n",
                ML - 5.0
            ));
            out.push_str(&format!(
                "  <text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\" font-family=\"sans-serif\">{}</text>\n",
                ML - 8.0,
                y + 4.0,
                trim_num(t)
            ));
        }
        out.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\" font-family=\"sans-serif\">{}</text>\n",
            (ML + W - MR) / 2.0,
            H - 12.0,
            esc(&self.x_label)
        ));
        out.push_str(&format!(
            "  <text x=\"18\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\" font-family=\"sans-serif\" transform=\"rotate(-90 18 {})\">{}</text>\n",
            (MT + H - MB) / 2.0,
            (MT + H - MB) / 2.0,
            esc(&self.y_label)
        ));
        for (i, s) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let pts: Vec<String> = s
                .points
                .iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect();
            out.push_str(&format!(
                "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                pts.join(" ")
            ));
            let ly = MT + 16.0 * i as f64;
            out.push_str(&format!(
                "  <line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
                W - MR - 150.0,
                W - MR - 130.0
            ));
            out.push_str(&format!(
                "  <text x=\"{}\" y=\"{}\" font-size=\"12\" font-family=\"sans-serif\">{}</text>\n",
                W - MR - 124.0,
                ly + 4.0,
                esc(&s.label)
            ));
        }
        out.push_str("</svg>\n");
        out
    }
}

fn trim_num(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if v.abs() >= 1000.0 || v.abs() < 0.001 {
        return format!("{v:.2e}");
    }
    let s = format!("{v:.4}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Minimal well-formedness check: tags balance and polyline count
    /// matches the series count.
    pub fn assert_well_formed(svg: &str, expected_polylines: usize) {
        let mut stack: Vec<String> = Vec::new();
        let mut rest = svg;
        while let Some(start) = rest.find('<') {
            let end = rest[start..].find('>').expect("unclosed tag") + start;
            let tag = &rest[start + 1..end];
            rest = &rest[end + 1..];
            if let Some(name) = tag.strip_prefix('/') {
                assert_eq!(stack.pop().as_deref(), Some(name), "tag mismatch");
            } else if !tag.ends_with('/') && !tag.starts_with('?') && !tag.starts_with('!') {
                let name = tag.split_whitespace().next().unwrap().to_string();
                stack.push(name);
            }
        }
        assert!(stack.is_empty(), "unbalanced tags: {stack:?}");
        assert_eq!(svg.matches("<polyline").count(), expected_polylines);
    }

    #[test]
    fn chart_is_well_formed_with_one_polyline_per_series() {
        let chart = Chart {
            title: "loss & accuracy".into(),
            x_label: "iteration".into(),
            y_label: "value".into(),
            series: vec![
                Series {
                    label: "loss".into(),
                    points: (0..50).map(|i| (i as f64, 1.0 / (1.0 + i as f64))).collect(),
                },
                Series {
                    label: "acc".into(),
                    points: (0..50).map(|i| (i as f64, i as f64 / 50.0)).collect(),
                },
            ],
        };
        let svg = chart.render();
        assert_well_formed(&svg, 2);
        assert!(svg.contains("iteration"));
    }

    #[test]
    fn degenerate_inputs_do_not_panic() {
        let chart = Chart {
            title: "empty".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![Series {
                label: "s".into(),
                points: vec![(1.0, f64::NAN), (1.0, 2.0)],
            }],
        };
        assert_well_formed(&chart.render(), 1);
    }
}
