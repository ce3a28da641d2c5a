//! Minimal self-contained SVG line charts: axes, ticks, polylines, legend.
//! Log-scale is available for the y axis since loss curves span many decades.

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 520.0;
const MARGIN_LEFT: f64 = 80.0;
const MARGIN_RIGHT: f64 = 30.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 60.0;

const PALETTE: [&str; 8] =
    ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f"];

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
    pub series: Vec<Series>,
}

impl LineChart {
    pub fn new(title: &str, x_label: &str, y_label: &str, log_y: bool) -> Self {
        LineChart {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            log_y,
            series: Vec::new(),
        }
    }

    pub fn add_series(&mut self, name: &str, points: Vec<(f64, f64)>) {
        self.series.push(Series { name: name.into(), points });
    }

    fn y_transform(&self, y: f64) -> Option<f64> {
        if self.log_y {
            if y > 0.0 {
                Some(y.log10())
            } else {
                None
            }
        } else {
            Some(y)
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
        ));
        out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
        out.push_str(&format!(
            "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
            WIDTH / 2.0,
            escape(&self.title)
        ));

        // Data ranges after transform.
        let mut pts: Vec<(f64, f64)> = Vec::new();
        for s in &self.series {
            for (x, y) in &s.points {
                if let Some(ty) = self.y_transform(*y) {
                    if x.is_finite() && ty.is_finite() {
                        pts.push((*x, ty));
                    }
                }
            }
        }
        let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
        let (x0, x1, y0, y1) = if pts.is_empty() {
            (0.0, 1.0, 0.0, 1.0)
        } else {
            let mut x0 = f64::INFINITY;
            let mut x1 = f64::NEG_INFINITY;
            let mut y0 = f64::INFINITY;
            let mut y1 = f64::NEG_INFINITY;
            for (x, y) in &pts {
                x0 = x0.min(*x);
                x1 = x1.max(*x);
                y0 = y0.min(*y);
                y1 = y1.max(*y);
            }
            if x0 == x1 {
                x1 = x0 + 1.0;
            }
            if y0 == y1 {
                y1 = y0 + 1.0;
            }
            (x0, x1, y0, y1)
        };
        let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * plot_w;
        let sy = |y: f64| MARGIN_TOP + (1.0 - (y - y0) / (y1 - y0)) * plot_h;

        // Axes and ticks.
        out.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333\"/>\n",
            MARGIN_LEFT,
            MARGIN_TOP + plot_h,
            MARGIN_LEFT + plot_w,
            MARGIN_TOP + plot_h
        ));
        out.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333\"/>\n",
            MARGIN_LEFT,
            MARGIN_TOP,
            MARGIN_LEFT,
            MARGIN_TOP + plot_h
        ));
        for t in 0..=5 {
            let fx = x0 + (x1 - x0) * t as f64 / 5.0;
            let px = sx(fx);
            out.push_str(&format!(
                "<line x1=\"{px}\" y1=\"{}\" x2=\"{px}\" y2=\"{}\" stroke=\"#ccc\"/>\n",
                MARGIN_TOP,
                MARGIN_TOP + plot_h
            ));
            out.push_str(&format!(
                "<text x=\"{px}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
                MARGIN_TOP + plot_h + 18.0,
                tick_label(fx)
            ));
            let fy = y0 + (y1 - y0) * t as f64 / 5.0;
            let py = sy(fy);
            out.push_str(&format!(
                "<line x1=\"{}\" y1=\"{py}\" x2=\"{}\" y2=\"{py}\" stroke=\"#ccc\"/>\n",
                MARGIN_LEFT,
                MARGIN_LEFT + plot_w
            ));
            let label = if self.log_y { format!("1e{}", tick_label(fy)) } else { tick_label(fy) };
            out.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{label}</text>\n",
                MARGIN_LEFT - 6.0,
                py + 4.0
            ));
        }
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">{}</text>\n",
            MARGIN_LEFT + plot_w / 2.0,
            HEIGHT - 16.0,
            escape(&self.x_label)
        ));
        out.push_str(&format!(
            "<text x=\"18\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{}</text>\n",
            MARGIN_TOP + plot_h / 2.0,
            MARGIN_TOP + plot_h / 2.0,
            escape(&self.y_label)
        ));

        // Polylines and legend.
        for (idx, s) in self.series.iter().enumerate() {
            let color = PALETTE[idx % PALETTE.len()];
            let coords: Vec<String> = s
                .points
                .iter()
                .filter_map(|(x, y)| self.y_transform(*y).map(|ty| (x, ty)))
                .map(|(x, ty)| format!("{:.2},{:.2}", sx(*x), sy(ty)))
                .collect();
            if !coords.is_empty() {
                out.push_str(&format!(
                    "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                    coords.join(" ")
                ));
            }
            let ly = MARGIN_TOP + 16.0 * idx as f64;
            out.push_str(&format!(
                "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
                MARGIN_LEFT + plot_w - 150.0,
                MARGIN_LEFT + plot_w - 130.0
            ));
            out.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
                MARGIN_LEFT + plot_w - 124.0,
                ly + 4.0,
                escape(&s.name)
            ));
        }
        out.push_str("</svg>\n");
        out
    }
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_well_formed_svg() {
        let mut chart = LineChart::new("loss", "iter", "mse", true);
        chart.add_series("m=768", vec![(0.0, 100.0), (1.0, 10.0), (2.0, 1.0)]);
        chart.add_series("m=48", vec![(0.0, 100.0), (1.0, 90.0), (2.0, 80.0)]);
        let svg = chart.render();
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("m=768"));
    }

    #[test]
    fn log_scale_drops_nonpositive_points() {
        let mut chart = LineChart::new("t", "x", "y", true);
        chart.add_series("s", vec![(0.0, 0.0), (1.0, -1.0)]);
        let svg = chart.render();
        assert_eq!(svg.matches("<polyline").count(), 0);
    }
}
