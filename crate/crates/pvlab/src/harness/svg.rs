//! Minimal SVG 1.1 figures: scatter, multi-line and log-heatmap plots.
//! Deterministic output, no external renderer.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const MARGIN: f64 = 56.0;

struct Frame {
    min_x: f64,
    max_x: f64,
    min_y: f64,
    max_y: f64,
}

impl Frame {
    fn from_points<'a>(points: impl Iterator<Item = &'a (f64, f64)>) -> Frame {
        let mut f = Frame { min_x: f64::INFINITY, max_x: f64::NEG_INFINITY, min_y: f64::INFINITY, max_y: f64::NEG_INFINITY };
        for (x, y) in points {
            if x.is_finite() {
                f.min_x = f.min_x.min(*x);
                f.max_x = f.max_x.max(*x);
            }
            if y.is_finite() {
                f.min_y = f.min_y.min(*y);
                f.max_y = f.max_y.max(*y);
            }
        }
        for (lo, hi) in [(&mut f.min_x, &mut f.max_x), (&mut f.min_y, &mut f.max_y)] {
            if !lo.is_finite() || !hi.is_finite() {
                *lo = 0.0;
                *hi = 1.0;
            } else if *lo == *hi {
                *lo -= 0.5;
                *hi += 0.5;
            }
        }
        f
    }

    fn sx(&self, x: f64) -> f64 {
        MARGIN + (x - self.min_x) / (self.max_x - self.min_x) * (WIDTH - 2.0 * MARGIN)
    }

    fn sy(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.min_y) / (self.max_y - self.min_y) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn open_svg(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n",
        WIDTH / 2.0,
        xml_escape(title)
    )
}

fn axes(out: &mut String, f: &Frame, x_label: &str, y_label: &str) {
    let _ = writeln!(
        out,
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>",
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN,
        t = MARGIN
    );
    for i in 0..=4 {
        let fx = f.min_x + (f.max_x - f.min_x) * i as f64 / 4.0;
        let fy = f.min_y + (f.max_y - f.min_y) * i as f64 / 4.0;
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{}</text>",
            f.sx(fx),
            HEIGHT - MARGIN + 16.0,
            short(fx)
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{}</text>",
            MARGIN - 6.0,
            f.sy(fy) + 3.0,
            short(fy)
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
        WIDTH / 2.0,
        HEIGHT - 12.0,
        xml_escape(x_label)
    );
    let _ = writeln!(
        out,
        "<text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\" transform=\"rotate(-90 14 {:.1})\">{}</text>",
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        xml_escape(y_label)
    );
}

fn short(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Rank-colored gradient (blue to red) over `0..=n`.
fn rank_color(rank: usize, n: usize) -> String {
    let t = if n == 0 { 0.0 } else { rank as f64 / n as f64 };
    let r = (40.0 + 200.0 * t) as u8;
    let g = (60.0 + 60.0 * (1.0 - (2.0 * t - 1.0).abs())) as u8;
    let b = (220.0 - 190.0 * t) as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Scatter plot with points colored by their index (position order).
pub fn scatter_plot(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let f = Frame::from_points(points.iter());
    let mut out = open_svg(title);
    axes(&mut out, &f, x_label, y_label);
    for (i, (x, y)) in points.iter().enumerate() {
        let _ = writeln!(
            out,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.85\"/>",
            f.sx(*x),
            f.sy(*y),
            rank_color(i, points.len().saturating_sub(1))
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Multi-series line plot with a small legend.
pub fn line_plot(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> String {
    let f = Frame::from_points(series.iter().flat_map(|(_, pts)| pts.iter()));
    let mut out = open_svg(title);
    axes(&mut out, &f, x_label, y_label);
    let palette = ["#1f66ad", "#d1362b", "#2c9343", "#8150a0", "#c97f10", "#3aa8b8"];
    for (si, (label, pts)) in series.iter().enumerate() {
        let color = palette[si % palette.len()];
        let mut path = String::new();
        for (i, (x, y)) in pts.iter().enumerate() {
            if !x.is_finite() || !y.is_finite() {
                continue;
            }
            let _ = write!(path, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, f.sx(*x), f.sy(*y));
        }
        let _ = writeln!(
            out,
            "<path d=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.6\"/>",
            path.trim_end()
        );
        let ly = MARGIN + 14.0 * si as f64;
        let _ = writeln!(
            out,
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\">{}</text>",
            WIDTH - MARGIN - 110.0,
            WIDTH - MARGIN - 90.0,
            WIDTH - MARGIN - 84.0,
            ly + 3.0,
            xml_escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Log-scale heatmap of a lower-triangular attention map.
pub fn heatmap_log(title: &str, map: &crate::numerics::Matrix) -> String {
    let n = map.rows();
    let mut out = open_svg(title);
    let side = (WIDTH.min(HEIGHT) - 2.0 * MARGIN) / n as f64;
    // log range over positive cells
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        for j in 0..=i.min(map.cols() - 1) {
            let v = map.get(i, j) as f64;
            if v > 0.0 {
                lo = lo.min(v.ln());
                hi = hi.max(v.ln());
            }
        }
    }
    if !lo.is_finite() {
        lo = -1.0;
        hi = 0.0;
    }
    if lo == hi {
        lo -= 1.0;
    }
    for i in 0..n {
        for j in 0..=i.min(map.cols() - 1) {
            let v = map.get(i, j) as f64;
            let t = if v > 0.0 { (v.ln() - lo) / (hi - lo) } else { 0.0 };
            let r = (255.0 * t) as u8;
            let g = (64.0 + 80.0 * t) as u8;
            let b = (160.0 * (1.0 - t)) as u8;
            let _ = writeln!(
                out,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#{r:02x}{g:02x}{b:02x}\"/>",
                MARGIN + j as f64 * side,
                MARGIN + i as f64 * side,
                side.max(0.5),
                side.max(0.5),
            );
        }
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\">keys right, queries down; log scale</text>",
        MARGIN,
        HEIGHT - 16.0
    );
    out.push_str("</svg>\n");
    out
}

/// Write an SVG next to its CSV sibling.
pub fn write_svg(path: &std::path::Path, svg: &str) -> super::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scatter_is_valid_ish_svg_and_deterministic() {
        let pts: Vec<(f64, f64)> = (0..20).map(|i| (i as f64, (i * i) as f64)).collect();
        let a = scatter_plot("t", "x", "y", &pts);
        let b = scatter_plot("t", "x", "y", &pts);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.ends_with("</svg>\n"));
        assert_eq!(a.matches("<circle").count(), 20);
    }

    #[test]
    fn line_plot_handles_nan_gaps() {
        let series = vec![("s".to_string(), vec![(0.0, 1.0), (1.0, f64::NAN), (2.0, 3.0)])];
        let svg = line_plot("t", "x", "y", &series);
        assert!(svg.contains("<path"));
    }

    #[test]
    fn heatmap_renders_lower_triangle() {
        let m = crate::numerics::Matrix::from_fn(4, 4, |i, j| if j <= i { 0.25 } else { 0.0 });
        let svg = heatmap_log("t", &m);
        assert_eq!(svg.matches("<rect").count(), 1 + 10); // background + cells
    }
}
