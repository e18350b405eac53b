use std::fmt::Write;

use crate::frenet::CandidateSet;
use crate::geometry::{Point, VectorMap};
use crate::scene::{Scene, Trajectory};

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Lanes as black paths, candidates as thin polylines, trajectories as bold
/// paths and initial poses as dots with heading ticks. Exactly one `<path>`
/// is emitted per lane and per trajectory.
pub fn render_svg(
    map: &VectorMap,
    scene: Option<&Scene>,
    candidates: &[CandidateSet],
    trajectories: &[Trajectory],
) -> String {
    let [x0, y0, x1, y1] = map.bounds;
    let (w, h) = ((x1 - x0).max(1e-9), (y1 - y0).max(1e-9));
    // SVG y grows downward.
    let tx = |p: Point| (p[0] - x0, y1 - p[1]);
    let coords = |pts: &[Point]| {
        pts.iter()
            .map(|&p| {
                let (x, y) = tx(p);
                format!("{x:.3},{y:.3}")
            })
            .collect::<Vec<_>>()
    };
    let path_d = |pts: &[Point]| {
        let c = coords(pts);
        if c.is_empty() {
            String::new()
        } else {
            format!("M{}", c.join(" L"))
        }
    };
    let stroke = w.max(h) / 400.0;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {w:.3} {h:.3}" width="800" height="{:.0}">"#,
        800.0 * h / w
    );
    let _ = writeln!(s, r#"<rect width="{w:.3}" height="{h:.3}" fill="white"/>"#);
    for lane in &map.lanes {
        let _ = writeln!(
            s,
            r#"<path class="lane" d="{}" fill="none" stroke="black" stroke-width="{:.3}"/>"#,
            path_d(&lane.points),
            stroke
        );
    }
    for (i, set) in candidates.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for c in &set.candidates {
            let _ = writeln!(
                s,
                r#"<polyline class="candidate" points="{}" fill="none" stroke="{color}" stroke-opacity="0.5" stroke-width="{:.3}"/>"#,
                coords(&c.xy).join(" "),
                stroke * 0.5
            );
        }
    }
    for t in trajectories {
        let color = PALETTE[t.agent_index % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<path class="trajectory" d="{}" fill="none" stroke="{color}" stroke-width="{:.3}"/>"#,
            path_d(&t.points),
            stroke * 2.5
        );
    }
    if let Some(scene) = scene {
        let r = stroke * 3.0;
        for (i, a) in scene.agents.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let (cx, cy) = tx(a.position());
            let tick = 4.0 * r;
            let (hx, hy) = (cx + tick * a.theta.cos(), cy - tick * a.theta.sin());
            let _ = writeln!(s, r#"<circle class="agent" cx="{cx:.3}" cy="{cy:.3}" r="{r:.3}" fill="{color}"/>"#);
            let _ = writeln!(
                s,
                r#"<line class="heading" x1="{cx:.3}" y1="{cy:.3}" x2="{hx:.3}" y2="{hy:.3}" stroke="{color}" stroke-width="{stroke:.3}"/>"#
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::AgentInit;

    #[test]
    fn one_path_per_lane_and_trajectory() {
        let map = VectorMap::from_polylines(
            &[vec![[0.0, 0.0], [50.0, 0.0]], vec![[0.0, 4.0], [50.0, 4.0]]],
            10.0,
        )
        .unwrap();
        let scene = Scene {
            agents: vec![AgentInit::new(5.0, 0.0, 0.0, 3.0, 0)],
            map_ref: 0,
        };
        let traj = vec![Trajectory::new(vec![[5.0, 0.0], [8.0, 0.0], [11.0, 0.0]], 0)];
        let svg = render_svg(&map, Some(&scene), &[], &traj);
        assert_eq!(svg.matches("<path").count(), 3);
        assert_eq!(svg.matches("class=\"trajectory\"").count(), 1);
        assert_eq!(svg.matches("<circle").count(), 1);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
}
