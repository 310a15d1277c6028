//! Comparison arithmetic, CSV tables and static SVG charts.

mod svg;
mod table;

pub use svg::{bar_chart, line_chart, Series};
pub use table::{fmt_opt, fmt_pct, Table};

/// `b − a`.
pub fn delta(a: f64, b: f64) -> f64 {
    b - a
}

/// `b / a`; `None` when `a` is zero.
pub fn ratio(a: f64, b: f64) -> Option<f64> {
    (a != 0.0).then(|| b / a)
}

/// `(b − a) / a × 100`; `None` when `a` is zero.
pub fn pct_change(a: f64, b: f64) -> Option<f64> {
    (a != 0.0).then(|| (b - a) / a * 100.0)
}
