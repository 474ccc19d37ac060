//! SVG figures: the world with trajectories, plus optional weight-vs-time panels.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::bench::scenario::Scenario;
use crate::error::{Error, Result};
use crate::geometry::Trajectory;

const WORLD: f64 = 400.0;
const PANEL_H: f64 = 120.0;
const PAD: f64 = 10.0;
const FRAME_COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// A styled trajectory to draw.
#[derive(Debug, Clone)]
pub struct Curve<'a> {
    pub trajectory: &'a Trajectory,
    pub color: &'a str,
    pub width: f64,
    pub opacity: f64,
}

impl<'a> Curve<'a> {
    pub fn demo(trajectory: &'a Trajectory) -> Self {
        Curve { trajectory, color: "#888888", width: 1.0, opacity: 0.5 }
    }

    pub fn generated(trajectory: &'a Trajectory) -> Self {
        Curve { trajectory, color: "#000000", width: 2.0, opacity: 1.0 }
    }
}

fn wx(x: f64) -> f64 {
    PAD + x * WORLD
}

fn wy(y: f64) -> f64 {
    PAD + (1.0 - y) * WORLD
}

fn num(v: f64) -> String {
    format!("{:.2}", if v.abs() < 5e-3 { 0.0 } else { v })
}

fn check_weights(name: &str, w: &Array2<f64>) -> Result<()> {
    if w.iter().any(|v| !v.is_finite() || *v < -1e-9 || *v > 1.0 + 1e-9) {
        return Err(Error::InvalidInput(format!("{name} weights must lie in [0, 1]")));
    }
    Ok(())
}

fn panel(out: &mut String, top: f64, title: &str, w: &Array2<f64>) {
    let (t, k) = w.dim();
    let x = |i: usize| PAD + WORLD * i as f64 / (t.max(2) - 1) as f64;
    let y = |v: f64| top + PANEL_H * (1.0 - v.clamp(0.0, 1.0));
    let _ = writeln!(
        out,
        r##"<g class="panel"><rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#cccccc"/><text x="{}" y="{}" font-size="11">{title}</text>"##,
        num(PAD),
        num(top),
        num(WORLD),
        num(PANEL_H),
        num(PAD + 4.0),
        num(top + 12.0)
    );
    for j in 0..k {
        let pts: Vec<String> = (0..t).map(|i| format!("{},{}", num(x(i)), num(y(w[[i, j]])))).collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            pts.join(" "),
            FRAME_COLORS[j % FRAME_COLORS.len()]
        );
    }
    out.push_str("</g>\n");
}

/// The figure as a string. Weight panels are `T×K` with entries in [0, 1].
pub fn render_svg(scenario: &Scenario, curves: &[Curve], attention: Option<&Array2<f64>>, alpha: Option<&Array2<f64>>) -> Result<String> {
    for (name, w) in [("attention", attention), ("alpha", alpha)] {
        if let Some(w) = w {
            check_weights(name, w)?;
        }
    }
    let panels = attention.is_some() as usize + alpha.is_some() as usize;
    let width = WORLD + 2.0 * PAD;
    let height = WORLD + 2.0 * PAD + panels as f64 * (PANEL_H + PAD);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"#,
        num(width),
        num(height),
        num(width),
        num(height)
    );
    let _ = writeln!(
        out,
        r##"<rect x="{}" y="{}" width="{}" height="{}" fill="white" stroke="#000000"/>"##,
        num(PAD),
        num(PAD),
        num(WORLD),
        num(WORLD)
    );
    for w in scenario.walls() {
        let _ = writeln!(
            out,
            r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#333333" stroke-width="3"/>"##,
            num(wx(w.a.x)),
            num(wy(w.a.y)),
            num(wx(w.b.x)),
            num(wy(w.b.y))
        );
    }
    if let Some(o) = &scenario.obstacle {
        let _ = writeln!(
            out,
            r##"<circle cx="{}" cy="{}" r="{}" fill="#f4a582" stroke="#b2182b"/>"##,
            num(wx(o.center[0])),
            num(wy(o.center[1])),
            num(o.radius * WORLD)
        );
    }
    for (k, p) in scenario.frame_poses().iter().enumerate() {
        let tip = p.position() + p.axis() * 0.05;
        let _ = writeln!(
            out,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{}" stroke-width="2"/>"#,
            num(wx(p.x)),
            num(wy(p.y)),
            num(wx(tip.x)),
            num(wy(tip.y)),
            FRAME_COLORS[k % FRAME_COLORS.len()]
        );
    }
    for c in curves {
        let pts: Vec<String> = (0..c.trajectory.len())
            .map(|t| {
                let p = c.trajectory.point(t);
                format!("{},{}", num(wx(p[0])), num(wy(p[1])))
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="{}" stroke-opacity="{}"/>"#,
            pts.join(" "),
            c.color,
            num(c.width),
            num(c.opacity)
        );
    }
    let mut top = WORLD + 2.0 * PAD;
    if let Some(w) = attention {
        panel(&mut out, top, "attention", w);
        top += PANEL_H + PAD;
    }
    if let Some(w) = alpha {
        panel(&mut out, top, "alpha", w);
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Writes [`render_svg`] to `path`.
pub fn emit_svg(
    scenario: &Scenario,
    curves: &[Curve],
    attention: Option<&Array2<f64>>,
    alpha: Option<&Array2<f64>>,
    path: &Path,
) -> Result<()> {
    let svg = render_svg(scenario, curves, attention, alpha)?;
    std::fs::write(path, svg)?;
    Ok(())
}
