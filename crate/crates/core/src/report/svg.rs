use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) =
        values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn frame(out: &mut String, title: &str, x_label: &str, y_label: &str, y: (f64, f64)) {
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(out, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        WIDTH / 2.0,
        escape(title)
    );
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN / 2.0, HEIGHT - MARGIN, MARGIN / 2.0 + 8.0);
    let _ = writeln!(out, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>");
    let _ = writeln!(out, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>");
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        (x0 + x1) / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        "<text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">{}</text>",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
    let _ = writeln!(out, "<text x=\"{}\" y=\"{y0}\" text-anchor=\"end\">{}</text>", x0 - 4.0, short(y.0));
    let _ = writeln!(out, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>", x0 - 4.0, y1 + 4.0, short(y.1));
}

fn short(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn legend(out: &mut String, labels: &[&str]) {
    for (i, label) in labels.iter().enumerate() {
        let y = MARGIN / 2.0 + 16.0 + 16.0 * i as f64;
        let x = WIDTH - MARGIN / 2.0 - 150.0;
        let _ = writeln!(
            out,
            "<rect x=\"{x}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/>",
            y - 9.0,
            PALETTE[i % PALETTE.len()]
        );
        let _ = writeln!(out, "<text x=\"{}\" y=\"{y}\">{}</text>", x + 14.0, escape(label));
    }
}

/// Polyline chart of each series over a shared linear axis.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let xs = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let ys = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let mut out = String::new();
    frame(&mut out, title, x_label, y_label, ys);
    let _ = writeln!(
        out,
        "<text x=\"{MARGIN}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        HEIGHT - MARGIN + 14.0,
        short(xs.0)
    );
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        WIDTH - MARGIN / 2.0,
        HEIGHT - MARGIN + 14.0,
        short(xs.1)
    );
    let sx = (WIDTH - 1.5 * MARGIN) / (xs.1 - xs.0);
    let sy = (HEIGHT - 1.5 * MARGIN - 8.0) / (ys.1 - ys.0);
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", MARGIN + (x - xs.0) * sx, HEIGHT - MARGIN - (y - ys.0) * sy))
            .collect();
        let _ = writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>",
            PALETTE[i % PALETTE.len()],
            pts.join(" ")
        );
    }
    legend(&mut out, &series.iter().map(|s| s.label.as_str()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Grouped bars: one group per category, one bar per series.
pub fn bar_chart(title: &str, y_label: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    let ys = bounds(series.iter().flat_map(|s| s.1.iter().copied()).chain([0.0]));
    let mut out = String::new();
    frame(&mut out, title, "", y_label, ys);
    let plot_w = WIDTH - 1.5 * MARGIN;
    let group_w = plot_w / categories.len().max(1) as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    let sy = (HEIGHT - 1.5 * MARGIN - 8.0) / (ys.1 - ys.0);
    let zero = HEIGHT - MARGIN - (0.0 - ys.0) * sy;
    for (c, cat) in categories.iter().enumerate() {
        let gx = MARGIN + c as f64 * group_w + group_w * 0.1;
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            gx + group_w * 0.4,
            HEIGHT - MARGIN + 14.0,
            escape(cat)
        );
        for (i, (_, values)) in series.iter().enumerate() {
            let Some(&v) = values.get(c) else { continue };
            if !v.is_finite() {
                continue;
            }
            let top = HEIGHT - MARGIN - (v - ys.0) * sy;
            let _ = writeln!(
                out,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"/>",
                gx + i as f64 * bar_w,
                top.min(zero),
                bar_w,
                (zero - top).abs(),
                PALETTE[i % PALETTE.len()]
            );
        }
    }
    legend(&mut out, &series.iter().map(|s| s.0.as_str()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}
