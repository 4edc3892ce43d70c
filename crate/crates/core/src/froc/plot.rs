use std::fmt::Write as _;

use super::FrocCurve;

const W: f64 = 640.0;
const H: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;
/// Smallest FP rate shown on a logarithmic axis.
const LOG_FLOOR: f64 = 0.01;

/// Self-contained SVG with the FROC step curves (sensitivity against
/// FP/image); `log_x` selects a logarithmic false-positive axis.
pub fn froc_svg(curves: &[&FrocCurve], log_x: bool) -> String {
    let max_fp = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.fp_per_image))
        .fold(0.0f64, f64::max);
    let (x_lo, x_hi) = if log_x {
        (LOG_FLOOR.log10(), max_fp.max(LOG_FLOOR * 10.0).log10().ceil())
    } else {
        (0.0, nice_ceil(max_fp.max(1.0)))
    };
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let sx = |fp: f64| {
        let v = if log_x { fp.max(LOG_FLOOR).log10() } else { fp };
        LEFT + (v - x_lo) / (x_hi - x_lo) * plot_w
    };
    let sy = |s: f64| TOP + (1.0 - s) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    for i in 0..=10 {
        let s = i as f64 / 10.0;
        let y = sy(s);
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{s:.1}</text>"##,
            LEFT + plot_w,
            LEFT - 6.0,
            y + 4.0
        );
    }
    let ticks: Vec<f64> = if log_x {
        (x_lo as i32..=x_hi as i32).map(|e| 10f64.powi(e)).collect()
    } else {
        let step = x_hi / 5.0;
        (0..=5).map(|i| i as f64 * step).collect()
    };
    for t in ticks {
        let x = sx(t);
        let _ = writeln!(
            svg,
            r##"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="#ddd"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
            TOP + plot_h,
            TOP + plot_h + 18.0,
            trim_number(t)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">false positives per image{}</text>"#,
        LEFT + plot_w / 2.0,
        H - 15.0,
        if log_x { " (log scale)" } else { "" }
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">sensitivity</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );
    let colours = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e"];
    for (i, curve) in curves.iter().enumerate() {
        let colour = colours[i % colours.len()];
        // Walk from the highest threshold (fewest FPs) down, drawing stairs.
        let mut path = String::new();
        let (mut last_x, mut last_y) = (sx(0.0), sy(0.0));
        let _ = write!(path, "M{last_x:.2},{last_y:.2}");
        for p in curve.points.iter().rev() {
            let (x, y) = (sx(p.fp_per_image), sy(p.sensitivity));
            if x != last_x {
                let _ = write!(path, " L{x:.2},{last_y:.2}");
            }
            if y != last_y {
                let _ = write!(path, " L{x:.2},{y:.2}");
            }
            last_x = x;
            last_y = y;
        }
        let _ = writeln!(
            svg,
            r#"<path d="{path}" fill="none" stroke="{colour}" stroke-width="2"/>"#
        );
        let ly = TOP + 20.0 + 18.0 * i as f64;
        let lx = LEFT + plot_w - 150.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{colour}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}-based</text>"#,
            lx + 24.0,
            lx + 30.0,
            ly + 4.0,
            curve.kind.as_str()
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn nice_ceil(v: f64) -> f64 {
    let mag = 10f64.powf(v.log10().floor());
    for m in [1.0, 2.0, 5.0, 10.0] {
        if m * mag >= v {
            return m * mag;
        }
    }
    10.0 * mag
}

fn trim_number(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}
