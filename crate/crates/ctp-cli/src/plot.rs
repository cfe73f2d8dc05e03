//! Minimal SVG renderers for sweep results: a lambda-x-p heat map and
//! line charts over shots/ways grids.

use anyhow::{bail, Result};

pub struct Series {
    pub label: String,
    /// (x, mean, std)
    pub points: Vec<(f64, f64, f64)>,
}

fn fmt(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.3}").trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Blue (low) to red (high) two-stop ramp.
fn heat_color(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let r = (40.0 + 205.0 * t) as u8;
    let g = (60.0 + 80.0 * (1.0 - (2.0 * t - 1.0).abs())) as u8;
    let b = (200.0 - 170.0 * t) as u8;
    format!("rgb({r},{g},{b})")
}

/// Heat map over a (lambda, p) grid; one cell per row, annotated with
/// the mean.
pub fn heatmap_svg(rows: &[(f64, f64, f64)]) -> Result<String> {
    if rows.is_empty() {
        bail!("no data rows");
    }
    let mut lambdas: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let mut ps: Vec<f64> = rows.iter().map(|r| r.1).collect();
    lambdas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    lambdas.dedup();
    ps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ps.dedup();
    let lo = rows.iter().map(|r| r.2).fold(f64::INFINITY, f64::min);
    let hi = rows.iter().map(|r| r.2).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };

    let cell = 64.0;
    let left = 70.0;
    let top = 40.0;
    let w = left + cell * ps.len() as f64 + 24.0;
    let h = top + cell * lambdas.len() as f64 + 50.0;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str("<style>text{font-family:sans-serif;font-size:12px}</style>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"20\" font-weight=\"bold\">accuracy over lambda x p</text>\n",
        left
    ));
    for (li, lambda) in lambdas.iter().enumerate() {
        let y = top + li as f64 * cell;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">lambda={}</text>\n",
            left - 8.0,
            y + cell / 2.0 + 4.0,
            fmt(*lambda)
        ));
        for (pi, p) in ps.iter().enumerate() {
            let x = left + pi as f64 * cell;
            let Some(row) = rows.iter().find(|r| r.0 == *lambda && r.1 == *p) else {
                continue;
            };
            let t = (row.2 - lo) / span;
            svg.push_str(&format!(
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"{}\" stroke=\"white\"/>\n",
                heat_color(t)
            ));
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"white\">{:.3}</text>\n",
                x + cell / 2.0,
                y + cell / 2.0 + 4.0,
                row.2
            ));
        }
    }
    for (pi, p) in ps.iter().enumerate() {
        let x = left + pi as f64 * cell;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">p={}</text>\n",
            x + cell / 2.0,
            top + lambdas.len() as f64 * cell + 18.0,
            fmt(*p)
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Line chart with error bars; one or two series with a legend.
pub fn line_svg(series: &[Series], x_label: &str) -> Result<String> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        bail!("no data rows");
    }
    let (w, h) = (520.0, 340.0);
    let (left, right, top, bottom) = (60.0, 20.0, 30.0, 50.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;

    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let x_min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let x_max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let x_span = if x_max > x_min { x_max - x_min } else { 1.0 };
    let y_min = 0.0;
    let y_max = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1 + p.2))
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 1.05;

    let sx = |x: f64| left + (x - x_min) / x_span * plot_w;
    let sy = |y: f64| top + (1.0 - (y - y_min) / (y_max - y_min)) * plot_h;

    let colors = ["#1f6fb4", "#e07b39"];
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str("<style>text{font-family:sans-serif;font-size:12px}</style>\n");
    svg.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - bottom,
        w - right,
        h - bottom
    ));
    svg.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - bottom
    ));
    for i in 0..=4 {
        let yv = y_min + (y_max - y_min) * i as f64 / 4.0;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.2}</text>\n",
            left - 6.0,
            sy(yv) + 4.0,
            yv
        ));
    }
    let mut xt: Vec<f64> = xs.clone();
    xt.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xt.dedup();
    for x in &xt {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            sx(*x),
            h - bottom + 16.0,
            fmt(*x)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>\n",
        left + plot_w / 2.0,
        h - 12.0
    ));

    for (si, s) in series.iter().enumerate() {
        let color = colors[si % colors.len()];
        let mut pts: Vec<(f64, f64, f64)> = s.points.clone();
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let path: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1))).collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            path.join(" ")
        ));
        for p in &pts {
            svg.push_str(&format!(
                "<line x1=\"{0:.2}\" y1=\"{1:.2}\" x2=\"{0:.2}\" y2=\"{2:.2}\" stroke=\"{color}\"/>\n",
                sx(p.0),
                sy(p.1 - p.2),
                sy(p.1 + p.2)
            ));
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                sx(p.0),
                sy(p.1)
            ));
        }
        let ly = top + 16.0 * si as f64;
        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"12\" height=\"3\" fill=\"{color}\"/>\n",
            w - right - 150.0,
            ly
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\">{}</text>\n",
            w - right - 132.0,
            ly + 5.0,
            s.label
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_renders_all_cells() {
        let rows = vec![
            (0.1, 0.1, 0.5),
            (0.1, 0.3, 0.6),
            (0.3, 0.1, 0.55),
            (0.3, 0.3, 0.65),
        ];
        let svg = heatmap_svg(&rows).unwrap();
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<rect").count(), 4);
        assert!(svg.contains("lambda=0.1"));
        assert!(svg.contains("p=0.3"));
    }

    #[test]
    fn empty_heatmap_is_an_error() {
        assert!(heatmap_svg(&[]).is_err());
    }

    #[test]
    fn line_chart_with_two_series_has_legend() {
        let series = vec![
            Series {
                label: "model".to_string(),
                points: vec![(3.0, 0.6, 0.05), (5.0, 0.5, 0.04)],
            },
            Series {
                label: "baseline".to_string(),
                points: vec![(3.0, 0.5, 0.05), (5.0, 0.42, 0.04)],
            },
        ];
        let svg = line_svg(&series, "shots").unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains(">model<"));
        assert!(svg.contains(">baseline<"));
    }
}
