//! Small-multiples SVG of a [`VizDocument`]: one isometric panel per
//! fragment, then one strip chart per kernel trace.

use std::fmt::Write as _;

use super::{KernelTrace, TrajectoryFragment, VizDocument};

const COLS: usize = 4;
const CELL: f64 = 180.0;
const STRIP_H: f64 = 90.0;
const STRIP_W: f64 = 4.0 * CELL;

/// Fixed isometric projection onto the page; +z points up.
fn project(p: [f64; 3]) -> (f64, f64) {
    let c = 30f64.to_radians().cos();
    let s = 0.5;
    ((p[0] - p[1]) * c, (p[0] + p[1]) * s - p[2])
}

fn polyline(points: &[(f64, f64)]) -> String {
    let mut s = String::new();
    for (i, (x, y)) in points.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{x:.2},{y:.2}");
    }
    s
}

fn panel(out: &mut String, f: &TrajectoryFragment, ox: f64, oy: f64) {
    let pivot = f.points[f.points.len() / 2];
    let norm = (f.output_vector.iter().map(|v| v * v).sum::<f64>()).sqrt();
    // the arrow shows direction and the share of |output| in the vector part
    let tip = if norm > 0.0 && f.activation > 0.0 {
        let k = 1.0 / f.activation;
        [0, 1, 2].map(|d| pivot[d] + k * f.output_vector[d])
    } else {
        pivot
    };
    let projected: Vec<(f64, f64)> = f.points.iter().map(|&p| project(p)).collect();
    let extent = projected
        .iter()
        .chain([project(tip), (0.0, 0.0)].iter())
        .fold(1e-9f64, |m, &(x, y)| m.max(x.abs()).max(y.abs()));
    let scale = 0.4 * CELL / extent;
    let (cx, cy) = (ox + CELL / 2.0, oy + CELL / 2.0 + 8.0);
    let page = |(x, y): (f64, f64)| (cx + scale * x, cy + scale * y);

    let _ = writeln!(
        out,
        r##"<rect x="{ox:.2}" y="{oy:.2}" width="{CELL:.2}" height="{CELL:.2}" fill="none" stroke="#ccc"/>"##
    );
    let _ = writeln!(
        out,
        r##"<text x="{:.2}" y="{:.2}" font-size="11">L{} k{}  |f|={:.3}</text>"##,
        ox + 6.0,
        oy + 14.0,
        f.kernel.layer,
        f.kernel.out_channel,
        f.activation
    );
    let (zx, zy) = page((0.0, 0.0));
    let _ = writeln!(out, r##"<circle cx="{zx:.2}" cy="{zy:.2}" r="2.5" fill="#888"/>"##);
    let pts: Vec<(f64, f64)> = projected.iter().map(|&p| page(p)).collect();
    let _ = writeln!(out, r##"<polyline points="{}" fill="none" stroke="#1f4e9c" stroke-width="1.5"/>"##, polyline(&pts));
    if let Some(&(sx, sy)) = pts.first() {
        let _ = writeln!(out, r##"<circle cx="{sx:.2}" cy="{sy:.2}" r="2" fill="#1f4e9c"/>"##);
    }
    let (px, py) = page(project(pivot));
    let (tx, ty) = page(project(tip));
    let _ = writeln!(
        out,
        r##"<line x1="{px:.2}" y1="{py:.2}" x2="{tx:.2}" y2="{ty:.2}" stroke="#c0392b" stroke-width="1.5" marker-end="url(#arrow)"/>"##
    );
}

fn strip(out: &mut String, t: &KernelTrace, ox: f64, oy: f64) {
    let n = t.outputs.len().max(2);
    let top = t.outputs.iter().fold(1e-9f64, |m, p| m.max(p.magnitude));
    let x = |i: usize| ox + STRIP_W * i as f64 / (n - 1) as f64;
    let y = |v: f64| oy + STRIP_H - 10.0 - (STRIP_H - 24.0) * v / top;
    let _ = writeln!(
        out,
        r##"<text x="{:.2}" y="{:.2}" font-size="11">trace L{} k{} on cycle {} (line: |f|, bars: real part)</text>"##,
        ox,
        oy + 10.0,
        t.kernel.layer,
        t.kernel.out_channel,
        t.cycle
    );
    for p in &t.outputs {
        let (y0, y1) = (y(0.0), y(p.real.abs()));
        let shade = if p.real >= 0.0 { "#e59866" } else { "#85c1e9" };
        let _ = writeln!(
            out,
            r##"<line x1="{x:.2}" y1="{y0:.2}" x2="{x:.2}" y2="{y1:.2}" stroke="{shade}" stroke-width="2"/>"##,
            x = x(p.position)
        );
    }
    let pts: Vec<(f64, f64)> = t.outputs.iter().map(|p| (x(p.position), y(p.magnitude))).collect();
    let _ = writeln!(out, r##"<polyline points="{}" fill="none" stroke="#333" stroke-width="1.2"/>"##, polyline(&pts));
}

/// Renders the document; depends on nothing but its argument.
pub fn render_svg(doc: &VizDocument) -> String {
    let rows = doc.fragments.len().div_ceil(COLS);
    let width = COLS as f64 * CELL;
    let height = rows as f64 * CELL + doc.traces.len() as f64 * (STRIP_H + 10.0) + 30.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif">"##
    );
    out.push_str(
        "<defs><marker id=\"arrow\" viewBox=\"0 0 10 10\" refX=\"9\" refY=\"5\" markerWidth=\"6\" markerHeight=\"6\" orient=\"auto\"><path d=\"M0,0 L10,5 L0,10 z\" fill=\"#c0392b\"/></marker></defs>\n",
    );
    let _ = writeln!(
        out,
        r##"<text x="6" y="18" font-size="12">{} · layer {} · seed {}</text>"##,
        escape(&doc.checkpoint),
        doc.layer,
        doc.seed
    );
    for (i, f) in doc.fragments.iter().enumerate() {
        panel(&mut out, f, (i % COLS) as f64 * CELL, 26.0 + (i / COLS) as f64 * CELL);
    }
    let base = 26.0 + rows as f64 * CELL;
    for (i, t) in doc.traces.iter().enumerate() {
        strip(&mut out, t, 4.0, base + i as f64 * (STRIP_H + 10.0));
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::viz::{KernelId, TracePoint};

    fn doc() -> VizDocument {
        VizDocument {
            checkpoint: "a<b>.ckpt".into(),
            layer: 0,
            seed: 1,
            fragments: (0..5)
                .map(|k| TrajectoryFragment {
                    kernel: KernelId { layer: 0, out_channel: k },
                    points: vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
                    output_vector: [0.5, 0.0, 0.0],
                    output_real: 0.1,
                    activation: 0.51,
                })
                .collect(),
            traces: vec![KernelTrace {
                kernel: KernelId { layer: 0, out_channel: 0 },
                cycle: 0,
                outputs: (0..4)
                    .map(|i| TracePoint {
                        position: i,
                        real: i as f64 - 1.5,
                        vector: [0.0; 3],
                        magnitude: 1.0 + i as f64,
                    })
                    .collect(),
            }],
        }
    }

    #[test]
    fn renders_every_panel_and_trace() {
        let s = render_svg(&doc());
        assert!(s.starts_with("<svg"));
        assert!(s.trim_end().ends_with("</svg>"));
        assert_eq!(s.matches("marker-end").count(), 5);
        assert_eq!(s.matches("<polyline").count(), 6);
        assert!(s.contains("a&lt;b&gt;.ckpt"));
        assert_eq!(render_svg(&doc()), s);
    }

    #[test]
    fn isometric_axes() {
        let (x, y) = project([0.0, 0.0, 1.0]);
        assert_eq!((x, y), (0.0, -1.0));
        let (x1, _) = project([1.0, 0.0, 0.0]);
        let (x2, _) = project([0.0, 1.0, 0.0]);
        assert!((x1 + x2).abs() < 1e-15);
    }
}
