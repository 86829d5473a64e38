//! Minimal SVG line chart for the masking-ratio trajectory.

use std::fmt::Write;

use maskpolicy_core::trainer::RatioTrajectory;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;

/// Ratio against iteration on a fixed `[0, 1]` vertical axis.
pub fn ratio_svg(traj: &RatioTrajectory, title: &str) -> String {
    let last = traj.points.last().map_or(1, |p| p.iter.max(1)) as f64;
    let (pw, ph) = (WIDTH - 2.0 * MARGIN, HEIGHT - 2.0 * MARGIN);
    let x = |it: usize| MARGIN + pw * it as f64 / last;
    let y = |r: f64| MARGIN + ph * (1.0 - r.clamp(0.0, 1.0));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    for k in 0..=4 {
        let r = k as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<line x1="{MARGIN}" y1="{0:.2}" x2="{1:.2}" y2="{0:.2}" stroke="#ddd"/><text x="{2:.2}" y="{3:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{r:.2}</text>"##,
            y(r),
            WIDTH - MARGIN,
            MARGIN - 6.0,
            y(r) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{0}" stroke="black"/>"#,
        HEIGHT - MARGIN,
        WIDTH - MARGIN
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">iteration (0 to {})</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0,
        last as usize
    );
    let mut pts = String::new();
    for p in &traj.points {
        let _ = write!(pts, "{:.2},{:.2} ", x(p.iter), y(p.masking_ratio));
    }
    let _ = writeln!(
        s,
        r#"<polyline fill="none" stroke="steelblue" stroke-width="1" points="{}"/>"#,
        pts.trim_end()
    );
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
