//! Minimal native SVG rendering for the two artifact panel types: log-log
//! energy spectra and linear RMSE-vs-step curves.

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const W: f64 = 640.0;
const H: f64 = 480.0;
const ML: f64 = 70.0;
const MR: f64 = 20.0;
const MT: f64 = 36.0;
const MB: f64 = 56.0;

pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if !(hi > lo) {
        return vec![lo];
    }
    let span = hi - lo;
    let raw = span / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let step = if norm < 1.5 {
        mag
    } else if norm < 3.5 {
        2.0 * mag
    } else if norm < 7.5 {
        5.0 * mag
    } else {
        10.0 * mag
    };
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-12 * span {
        out.push(t);
        t += step;
    }
    out
}

fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-3 {
        format!("{v:.1e}")
    } else {
        format!("{v}")
    }
}

/// Render a multi-series plot; log-log when `log_axes` is set (points with
/// nonpositive coordinates are dropped there).
pub fn plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series], log_axes: bool) -> String {
    let map = |v: f64| if log_axes { v.log10() } else { v };
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for s in series {
        for (&x, &y) in s.x.iter().zip(&s.y) {
            if log_axes && (x <= 0.0 || y <= 0.0) {
                continue;
            }
            if !x.is_finite() || !y.is_finite() {
                continue;
            }
            xmin = xmin.min(map(x));
            xmax = xmax.max(map(x));
            ymin = ymin.min(map(y));
            ymax = ymax.max(map(y));
        }
    }
    if !xmin.is_finite() {
        xmin = 0.0;
        xmax = 1.0;
        ymin = 0.0;
        ymax = 1.0;
    }
    if xmax - xmin < 1e-12 {
        xmax = xmin + 1.0;
    }
    if ymax - ymin < 1e-12 {
        ymax = ymin + 1.0;
    }
    let px = |x: f64| ML + (x - xmin) / (xmax - xmin) * (W - ML - MR);
    let py = |y: f64| H - MB - (y - ymin) / (ymax - ymin) * (H - MT - MB);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">{title}</text>\n",
        W / 2.0
    ));
    // axes
    svg.push_str(&format!(
        "<rect x=\"{ML}\" y=\"{MT}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#333\"/>\n",
        W - ML - MR,
        H - MT - MB
    ));
    // ticks
    let xticks = if log_axes {
        let lo = xmin.floor() as i64;
        let hi = xmax.ceil() as i64;
        (lo..=hi).map(|e| e as f64).collect::<Vec<_>>()
    } else {
        nice_ticks(xmin, xmax, 6)
    };
    for &t in &xticks {
        if t < xmin - 1e-9 || t > xmax + 1e-9 {
            continue;
        }
        let x = px(t);
        svg.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{}\" x2=\"{x:.1}\" y2=\"{}\" stroke=\"#999\" stroke-width=\"0.5\"/>\n",
            H - MB,
            H - MB + 5.0
        ));
        let label = if log_axes {
            format!("1e{}", t as i64)
        } else {
            fmt_num(t)
        };
        svg.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{label}</text>\n",
            H - MB + 18.0
        ));
    }
    let yticks = if log_axes {
        let lo = ymin.floor() as i64;
        let hi = ymax.ceil() as i64;
        (lo..=hi).map(|e| e as f64).collect::<Vec<_>>()
    } else {
        nice_ticks(ymin, ymax, 6)
    };
    for &t in &yticks {
        if t < ymin - 1e-9 || t > ymax + 1e-9 {
            continue;
        }
        let y = py(t);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y:.1}\" x2=\"{}\" y2=\"{y:.1}\" stroke=\"#999\" stroke-width=\"0.5\"/>\n",
            ML - 5.0,
            ML
        ));
        let label = if log_axes {
            format!("1e{}", t as i64)
        } else {
            fmt_num(t)
        };
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{label}</text>\n",
            ML - 8.0,
            y + 4.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">{xlabel}</text>\n",
        W / 2.0,
        H - 14.0
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" transform=\"rotate(-90 18 {})\">{ylabel}</text>\n",
        H / 2.0,
        H / 2.0
    ));
    // series
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut path = String::new();
        let mut pen_up = true;
        for (&x, &y) in s.x.iter().zip(&s.y) {
            if (log_axes && (x <= 0.0 || y <= 0.0)) || !x.is_finite() || !y.is_finite() {
                pen_up = true;
                continue;
            }
            let cmd = if pen_up { 'M' } else { 'L' };
            path.push_str(&format!("{cmd}{:.1} {:.1} ", px(map(x)), py(map(y))));
            pen_up = false;
        }
        svg.push_str(&format!(
            "<path d=\"{path}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.6\"/>\n"
        ));
        let ly = MT + 16.0 + 16.0 * i as f64;
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{ly:.1}\" x2=\"{}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            W - MR - 150.0,
            W - MR - 120.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
            W - MR - 112.0,
            ly + 4.0,
            s.label
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_wellformed_svg() {
        let s = plot(
            "spectrum",
            "k",
            "E(k)",
            &[Series {
                label: "dns".into(),
                x: vec![1.0, 2.0, 4.0, 8.0],
                y: vec![1.0, 0.2, 0.05, 0.001],
            }],
            true,
        );
        assert!(s.starts_with("<svg"));
        assert!(s.ends_with("</svg>\n"));
        assert!(s.contains("path"));
    }

    #[test]
    fn handles_flat_and_empty_data() {
        let s = plot(
            "rmse",
            "step",
            "rmse",
            &[Series {
                label: "a".into(),
                x: vec![0.0, 1.0],
                y: vec![0.5, 0.5],
            }],
            false,
        );
        assert!(s.contains("svg"));
        let empty = plot("x", "x", "y", &[], false);
        assert!(empty.contains("svg"));
    }
}
