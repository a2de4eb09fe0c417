//! Static SVG 1.1 rendering of density rasters with trajectory overlays.
//!
//! Output is a pure function of the inputs: fixed decimal formatting, no
//! timestamps, no random ids.

use std::fmt::Write as _;

use crate::analysis::DensityGrid;

const CANVAS: f64 = 480.0;
/// Log-density range shown below the peak; lower values share the floor color.
const DYNAMIC_RANGE: f64 = 8.0;
const LEVELS: usize = 64;

const VIRIDIS: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

#[derive(Debug, Clone, PartialEq)]
pub struct Overlay {
    pub label: String,
    pub color: String,
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Marker {
    pub label: String,
    pub at: [f64; 2],
}

fn color(level: usize) -> String {
    let x = level as f64 / (LEVELS - 1) as f64 * (VIRIDIS.len() - 1) as f64;
    let i = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let f = x - i as f64;
    let c: Vec<u8> = (0..3)
        .map(|k| (VIRIDIS[i][k] + f * (VIRIDIS[i + 1][k] - VIRIDIS[i][k])).round() as u8)
        .collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

struct Frame {
    x0: f64,
    y1: f64,
    scale_x: f64,
    scale_y: f64,
}

impl Frame {
    fn map(&self, p: [f64; 2]) -> (f64, f64) {
        ((p[0] - self.x0) * self.scale_x, (self.y1 - p[1]) * self.scale_y)
    }
}

/// Heatmap of `grid` with each overlay drawn as a polyline and each marker as
/// a labelled dot, all in the raster's coordinates.
pub fn render_density(grid: &DensityGrid, title: &str, overlays: &[Overlay], markers: &[Marker]) -> String {
    let width_world = grid.spacing[0] * grid.nx as f64;
    let height_world = grid.spacing[1] * grid.ny as f64;
    let x0 = grid.origin[0] - grid.spacing[0] / 2.0;
    let y0 = grid.origin[1] - grid.spacing[1] / 2.0;
    let height = (CANVAS * height_world / width_world).round();
    let frame = Frame {
        x0,
        y1: y0 + height_world,
        scale_x: CANVAS / width_world,
        scale_y: height / height_world,
    };
    let peak = grid.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let level = |v: f64| {
        let u = ((v - peak + DYNAMIC_RANGE) / DYNAMIC_RANGE).clamp(0.0, 1.0);
        (u * (LEVELS - 1) as f64).round() as usize
    };

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{CANVAS:.0}" height="{height:.0}" viewBox="0 0 {CANVAS:.0} {height:.0}">"#
    );
    let _ = writeln!(s, "<title>{}</title>", escape(title));
    let _ = writeln!(s, r#"<g shape-rendering="crispEdges">"#);
    let (pw, ph) = (grid.spacing[0] * frame.scale_x, grid.spacing[1] * frame.scale_y);
    for iy in 0..grid.ny {
        let top = height - (iy + 1) as f64 * ph;
        let mut ix = 0;
        while ix < grid.nx {
            let l = level(grid.value(ix, iy));
            let mut end = ix + 1;
            while end < grid.nx && level(grid.value(end, iy)) == l {
                end += 1;
            }
            let _ = writeln!(
                s,
                r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="{}"/>"#,
                ix as f64 * pw,
                top,
                (end - ix) as f64 * pw,
                ph,
                color(l)
            );
            ix = end;
        }
    }
    let _ = writeln!(s, "</g>");
    for o in overlays {
        let pts: Vec<String> = o
            .points
            .iter()
            .map(|&p| {
                let (x, y) = frame.map(p);
                format!("{x:.3},{y:.3}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"><title>{}</title></polyline>"#,
            escape(&o.color),
            pts.join(" "),
            escape(&o.label)
        );
    }
    for m in markers {
        let (x, y) = frame.map(m.at);
        let _ = writeln!(
            s,
            r##"<circle cx="{x:.3}" cy="{y:.3}" r="3" fill="#ffffff" stroke="#000000"/><text x="{:.3}" y="{:.3}" font-family="sans-serif" font-size="11" fill="#ffffff">{}</text>"##,
            x + 5.0,
            y - 5.0,
            escape(&m.label)
        );
    }
    let _ = writeln!(s, "</svg>");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> DensityGrid {
        DensityGrid {
            t: 0,
            origin: [0.5, 0.5],
            spacing: [1.0, 1.0],
            nx: 3,
            ny: 2,
            values: vec![-1.0, -1.0, 0.0, -20.0, -20.0, -20.0],
        }
    }

    #[test]
    fn rows_are_run_length_merged() {
        let svg = render_density(&grid(), "t", &[], &[]);
        assert_eq!(svg.matches("<rect").count(), 3);
        assert!(svg.contains(&format!(r#"fill="{}""#, color(LEVELS - 1))));
        assert!(svg.contains(&format!(r#"fill="{}""#, color(0))));
    }

    #[test]
    fn overlays_map_into_the_canvas() {
        let o = Overlay {
            label: "a<b".into(),
            color: "#ff0000".into(),
            points: vec![[0.0, 0.0], [3.0, 2.0]],
        };
        let svg = render_density(&grid(), "t", &[o], &[]);
        // world (0,0) is the bottom-left corner, (3,2) the top-right
        assert!(svg.contains(r#"points="0.000,320.000 480.000,0.000""#));
        assert!(svg.contains("a&lt;b"));
    }

    #[test]
    fn output_is_deterministic() {
        let m = [Marker {
            label: "x".into(),
            at: [1.0, 1.0],
        }];
        assert_eq!(
            render_density(&grid(), "t", &[], &m),
            render_density(&grid(), "t", &[], &m)
        );
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(color(0), "#440154");
        assert_eq!(color(LEVELS - 1), "#fde725");
    }
}
