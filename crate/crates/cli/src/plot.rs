//! Self-contained SVG charts. The plotted numbers are repeated as CSV inside
//! an XML comment so a chart can be diffed or re-read without the image.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(title: &str, data: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    // "--" may not appear inside an XML comment
    let _ = writeln!(out, "<!-- data\n{}-->", data.replace("--", "- -"));
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    out
}

fn axes(out: &mut String, lo: f64, hi: f64) {
    let (x0, y0, y1) = (MARGIN, HEIGHT - MARGIN, MARGIN);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{}" y2="{y0}" stroke="black"/>"#, WIDTH - MARGIN / 2.0);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = y0 - (y0 - y1) * k as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="11">{}</text>"#,
            x0 - 6.0,
            y + 4.0,
            tick(v)
        );
    }
}

fn tick(v: f64) -> String {
    if v == 0.0 || (v.abs() >= 0.01 && v.abs() < 1e4) {
        format!("{v:.3}").trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.2e}")
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

/// Line chart of several series over a shared x index.
pub fn line_chart(title: &str, x_label: &str, series: &[(&str, Vec<f64>)]) -> String {
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let mut data = format!("{x_label}");
    for (name, _) in series {
        let _ = write!(data, ",{name}");
    }
    data.push('\n');
    for i in 0..n {
        let _ = write!(data, "{i}");
        for (_, v) in series {
            match v.get(i) {
                Some(x) => {
                    let _ = write!(data, ",{x}");
                }
                None => data.push(','),
            }
        }
        data.push('\n');
    }
    let mut out = header(title, &data);
    let (lo, hi) = range(series.iter().flat_map(|(_, v)| v.iter().copied()));
    axes(&mut out, lo, hi);
    let plot_w = WIDTH - 1.5 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    for (k, (name, values)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let denom = (n.max(2) - 1) as f64;
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, v)| {
                let x = MARGIN + plot_w * i as f64 / denom;
                let y = HEIGHT - MARGIN - plot_h * (v - lo) / (hi - lo);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, points.join(" "));
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="{color}">{}</text>"#,
            WIDTH - MARGIN * 2.5,
            MARGIN + 16.0 * k as f64,
            escape(name)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 16.0,
        escape(x_label)
    );
    out.push_str("</svg>\n");
    out
}

/// Vertical bar chart, one bar per labelled value.
pub fn bar_chart(title: &str, value_label: &str, bars: &[(String, f64)]) -> String {
    let mut data = format!("label,{value_label}\n");
    for (label, v) in bars {
        let _ = writeln!(data, "{label},{v}");
    }
    let mut out = header(title, &data);
    let (_, hi) = range(bars.iter().map(|(_, v)| *v).chain([0.0]));
    let hi = if hi <= 0.0 { 1.0 } else { hi };
    axes(&mut out, 0.0, hi);
    let plot_w = WIDTH - 1.5 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let slot = plot_w / bars.len().max(1) as f64;
    for (k, (label, v)) in bars.iter().enumerate() {
        let h = plot_h * v.max(0.0) / hi;
        let x = MARGIN + slot * k as f64 + slot * 0.15;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="{}"/>"#,
            HEIGHT - MARGIN - h,
            slot * 0.7,
            COLORS[k % COLORS.len()]
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="10">{}</text>"#,
            x + slot * 0.35,
            HEIGHT - MARGIN + 14.0,
            escape(label)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="10">{}</text>"#,
            x + slot * 0.35,
            HEIGHT - MARGIN - h - 4.0,
            tick(*v)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// The CSV block embedded by either chart.
#[cfg(test)]
pub fn embedded_data(svg: &str) -> Option<&str> {
    let start = svg.find("<!-- data\n")? + "<!-- data\n".len();
    let end = svg[start..].find("-->")? + start;
    Some(&svg[start..end])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bar_chart_embeds_every_value() {
        let bars: Vec<(String, f64)> = vec![("T_pos".into(), 3.5), ("T_pos+T_neg".into(), 2.25)];
        let svg = bar_chart("MAE", "MAE", &bars);
        assert_eq!(embedded_data(&svg).unwrap(), "label,MAE\nT_pos,3.5\nT_pos+T_neg,2.25\n");
        assert_eq!(svg.matches("<rect").count(), 3);
    }

    #[test]
    fn line_chart_handles_ragged_and_flat_series() {
        let svg = line_chart("loss", "step", &[("a", vec![1.0, 1.0]), ("b", vec![2.0])]);
        assert_eq!(embedded_data(&svg).unwrap(), "step,a,b\n0,1,2\n1,1,\n");
        assert!(svg.ends_with("</svg>\n"));
    }
}
