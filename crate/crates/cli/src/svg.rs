//! Plain SVG rendering of cost maps and paths.

use ftfoot::costmap::GlobalCostMap;
use std::fmt::Write;

/// Pixels per map cell.
const SCALE: f64 = 4.0;

pub struct Polyline<'a> {
    pub points: Vec<[f64; 2]>,
    pub color: &'a str,
    pub width: f64,
    pub label: &'a str,
}

/// The map drawn with +y up, unknown cells hatched blue-gray, and the
/// polylines and markers on top.
pub fn render(map: &GlobalCostMap, lines: &[Polyline], markers: &[([f64; 2], &str)]) -> String {
    let (w, h) = (map.width(), map.height());
    let (pw, ph) = (w as f64 * SCALE, h as f64 * SCALE);
    let [ox, oy, _, _] = map.bounds();
    let r = map.resolution();
    let to_px = |p: [f64; 2]| ((p[0] - ox) / r * SCALE, ph - (p[1] - oy) / r * SCALE);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{pw}" height="{ph}" viewBox="0 0 {pw} {ph}">"#).unwrap();
    writeln!(s, r##"<rect width="{pw}" height="{ph}" fill="#8899aa"/>"##).unwrap();
    for iy in 0..h {
        for ix in 0..w {
            if map.hits(ix, iy) == 0 {
                continue;
            }
            let g = ((1.0 - map.cost(ix, iy)) * 255.0).round() as u8;
            let (x, y) = (ix as f64 * SCALE, ph - (iy + 1) as f64 * SCALE);
            writeln!(s, r#"<rect x="{x}" y="{y}" width="{SCALE}" height="{SCALE}" fill="rgb({g},{g},{g})"/>"#).unwrap();
        }
    }
    for l in lines {
        let pts: Vec<String> = l
            .points
            .iter()
            .map(|&p| {
                let (x, y) = to_px(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="{}"><title>{}</title></polyline>"#,
            pts.join(" "),
            l.color,
            l.width,
            l.label
        )
        .unwrap();
    }
    for (p, color) in markers {
        let (x, y) = to_px(*p);
        writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="{}" fill="{color}"/>"#, 1.5 * SCALE).unwrap();
    }
    s.push_str("</svg>\n");
    s
}
