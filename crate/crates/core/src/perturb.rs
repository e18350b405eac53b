//! Parametric lane-geometry perturbations for out-of-distribution maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    arclength_parameterize, cart_to_frenet, frenet_to_cart, nearest_lanes, wrap_angle, FrenetCoord, Lane, Point,
    VectorMap,
};
use crate::scene::{AgentInit, Scene};

/// Spacing of the re-traced part of a perturbed lane, meters.
pub const RESAMPLE_SPACING: f64 = 1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    #[default]
    Identity,
    Turn,
    DoubleTurn,
    Ripple,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Perturbation {
    pub kind: PerturbationKind,
    pub pivot_s: f64,
    /// Rate of heading change beyond the pivot, 1/m. Positive bends left.
    pub curvature: f64,
    /// Where a double turn reverses its bend.
    pub second_pivot_s: Option<f64>,
    pub amplitude: f64,
    pub wavelength: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Perturbation {
            kind: PerturbationKind::Identity,
            pivot_s: 0.0,
            curvature: 0.0,
            second_pivot_s: None,
            amplitude: 0.0,
            wavelength: 20.0,
        }
    }
}

impl Perturbation {
    pub fn turn(pivot_s: f64, curvature: f64) -> Self {
        Perturbation {
            kind: PerturbationKind::Turn,
            pivot_s,
            curvature,
            ..Default::default()
        }
    }

    pub fn double_turn(pivot_s: f64, second_pivot_s: f64, curvature: f64) -> Self {
        Perturbation {
            kind: PerturbationKind::DoubleTurn,
            pivot_s,
            curvature,
            second_pivot_s: Some(second_pivot_s),
            ..Default::default()
        }
    }

    pub fn ripple(pivot_s: f64, amplitude: f64, wavelength: f64) -> Self {
        Perturbation {
            kind: PerturbationKind::Ripple,
            pivot_s,
            amplitude,
            wavelength,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidPerturbation(m.to_string()));
        if !self.pivot_s.is_finite() {
            return bad("pivot_s must be finite");
        }
        match self.kind {
            PerturbationKind::Identity => Ok(()),
            PerturbationKind::Turn if !self.curvature.is_finite() => bad("curvature must be finite"),
            PerturbationKind::Turn => Ok(()),
            PerturbationKind::DoubleTurn => {
                if !self.curvature.is_finite() {
                    return bad("curvature must be finite");
                }
                match self.second_pivot_s {
                    Some(p2) if p2.is_finite() && p2 >= self.pivot_s => Ok(()),
                    _ => bad("double_turn needs second_pivot_s >= pivot_s"),
                }
            }
            PerturbationKind::Ripple => {
                if !(self.wavelength.is_finite() && self.wavelength > 0.0) {
                    return bad("wavelength must be positive");
                }
                if !self.amplitude.is_finite() {
                    return bad("amplitude must be finite");
                }
                Ok(())
            }
        }
    }

    fn is_noop(&self) -> bool {
        match self.kind {
            PerturbationKind::Identity => true,
            PerturbationKind::Turn | PerturbationKind::DoubleTurn => self.curvature == 0.0,
            PerturbationKind::Ripple => self.amplitude == 0.0,
        }
    }

    /// Heading-change rate at arc length `s` (bend kinds only).
    fn rate(&self, s: f64) -> f64 {
        match (self.kind, self.second_pivot_s) {
            (PerturbationKind::DoubleTurn, Some(p2)) if s > p2 => -self.curvature,
            _ if s > self.pivot_s => self.curvature,
            _ => 0.0,
        }
    }

    /// Accumulated heading change at arc length `s`.
    fn rotation(&self, s: f64) -> f64 {
        let k = self.curvature;
        let p1 = self.pivot_s;
        match (self.kind, self.second_pivot_s) {
            (PerturbationKind::DoubleTurn, Some(p2)) if s > p2 => k * (p2 - p1) - k * (s - p2),
            _ if s > p1 => k * (s - p1),
            _ => 0.0,
        }
    }
}

fn rotate(v: Point, a: f64) -> Point {
    let (sin, cos) = a.sin_cos();
    [cos * v[0] - sin * v[1], sin * v[0] + cos * v[1]]
}

/// Sample stations beyond the pivot, at most `RESAMPLE_SPACING` apart, with
/// breakpoints at every pivot so each interval has a constant bend rate.
fn stations(p: &Perturbation, start: f64, end: f64) -> Vec<f64> {
    let mut breaks = vec![start];
    if let Some(p2) = p.second_pivot_s.filter(|_| p.kind == PerturbationKind::DoubleTurn) {
        if p2 > start && p2 < end {
            breaks.push(p2);
        }
    }
    breaks.push(end);
    let mut out = vec![start];
    for w in breaks.windows(2) {
        let n = ((w[1] - w[0]) / RESAMPLE_SPACING).ceil().max(1.0) as usize;
        out.extend((1..=n).map(|j| w[0] + (w[1] - w[0]) * j as f64 / n as f64));
    }
    out
}

fn perturb_lane(lane: &Lane, p: &Perturbation) -> Result<Lane> {
    let total = lane.length();
    if p.is_noop() || p.pivot_s >= total {
        return Ok(lane.clone());
    }
    let pivot = p.pivot_s.max(0.0);
    let mut pts: Vec<Point> = lane
        .points
        .iter()
        .zip(&lane.cum_s)
        .take_while(|(_, &s)| s < pivot - 1e-9)
        .map(|(q, _)| *q)
        .collect();
    let st = stations(p, pivot, total);
    match p.kind {
        PerturbationKind::Ripple => {
            let k = 2.0 * std::f64::consts::PI / p.wavelength;
            for &s in &st {
                let amp = p.amplitude * (k * (s - pivot)).sin();
                pts.push(frenet_to_cart(FrenetCoord { s, d: amp }, lane));
            }
        }
        _ => {
            // Each original chord is rotated by the accumulated bend at its
            // midpoint and shortened to the chord of the matching arc.
            let mut cur = lane.point_at(pivot);
            pts.push(cur);
            for w in st.windows(2) {
                let (a, b) = (w[0], w[1]);
                let len = b - a;
                let half = 0.5 * p.rate(0.5 * (a + b)) * len;
                let sinc = if half == 0.0 { 1.0 } else { half.sin() / half };
                let (pa, pb) = (lane.point_at(a), lane.point_at(b));
                let chord = rotate([pb[0] - pa[0], pb[1] - pa[1]], p.rotation(0.5 * (a + b)));
                cur = [cur[0] + sinc * chord[0], cur[1] + sinc * chord[1]];
                pts.push(cur);
            }
        }
    }
    pts.dedup_by(|b, a| (a[0] - b[0]).hypot(a[1] - b[1]) < 1e-9);
    arclength_parameterize(&pts)
}

/// Re-traces every lane under `p`. Map bounds grow to contain the new lanes.
pub fn perturb_map(map: &VectorMap, p: &Perturbation) -> Result<VectorMap> {
    p.validate()?;
    if p.kind == PerturbationKind::Identity {
        return Ok(map.clone());
    }
    let lanes = map
        .lanes
        .iter()
        .map(|l| perturb_lane(l, p))
        .collect::<Result<Vec<_>>>()?;
    let mut b = map.bounds;
    for q in lanes.iter().flat_map(|l| l.points.iter()) {
        b = [b[0].min(q[0]), b[1].min(q[1]), b[2].max(q[0]), b[3].max(q[1])];
    }
    VectorMap::new(lanes, b)
}

/// Moves each agent onto the perturbed copy of its reference lane, keeping
/// its Frenet coordinates and its heading relative to the lane.
pub fn remap_agents(scene: &Scene, original: &VectorMap, perturbed: &VectorMap) -> Result<Scene> {
    if original.lanes.len() != perturbed.lanes.len() {
        return Err(Error::InvalidPerturbation("maps have different lane counts".into()));
    }
    let agents = scene
        .agents
        .iter()
        .map(|a| {
            let p = a.position();
            let hit = nearest_lanes(p, original, f64::INFINITY);
            let idx = hit.first().ok_or(Error::NoReferenceLane {
                x: p[0],
                y: p[1],
                radius: f64::INFINITY,
            })?;
            let (lo, lp) = (&original.lanes[idx.lane], &perturbed.lanes[idx.lane]);
            let fc = cart_to_frenet(p, lo);
            let dev = wrap_angle(a.theta - lo.heading_at(fc.s));
            let q = frenet_to_cart(fc, lp);
            Ok(AgentInit::new(q[0], q[1], lp.heading_at(fc.s) + dev, a.v, a.c))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene {
        agents,
        map_ref: scene.map_ref,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::dist;

    fn straight() -> VectorMap {
        VectorMap::from_polylines(&[vec![[0.0, 0.0], [100.0, 0.0]], vec![[0.0, 8.0], [40.0, 8.0], [100.0, 8.0]]], 10.0)
            .unwrap()
    }

    #[test]
    fn identity_is_bitwise_unchanged() {
        let m = straight();
        let out = perturb_map(&m, &Perturbation::default()).unwrap();
        assert_eq!(out.lanes[0].points, m.lanes[0].points);
        assert_eq!(out.bounds, m.bounds);
    }

    #[test]
    fn zero_curvature_turn_is_unchanged() {
        let m = straight();
        let out = perturb_map(&m, &Perturbation::turn(50.0, 0.0)).unwrap();
        for (a, b) in out.lanes.iter().zip(&m.lanes) {
            assert_eq!(a.points, b.points);
        }
    }

    #[test]
    fn turn_matches_arc_endpoint() {
        let m = straight();
        let out = perturb_map(&m, &Perturbation::turn(50.0, 0.02)).unwrap();
        let lane = &out.lanes[0];
        let end = *lane.points.last().unwrap();
        let (r, phi) = (50.0, 0.02 * 50.0);
        let expected = [50.0 + r * f64::sin(phi), r * (1.0 - f64::cos(phi))];
        assert!(dist(end, expected) < 1e-3, "{end:?} vs {expected:?}");
        // Every re-traced vertex lies on the circle around (50, 50).
        for q in lane.points.iter().filter(|q| q[0] > 50.0) {
            assert!((dist(*q, [50.0, 50.0]) - 50.0).abs() < 1e-9);
        }
        assert!((lane.length() - 100.0).abs() < 1.0);
        // Untouched before the pivot.
        assert_eq!(lane.points[0], [0.0, 0.0]);
    }

    #[test]
    fn double_turn_reverses_and_keeps_length() {
        let m = straight();
        let out = perturb_map(&m, &Perturbation::double_turn(20.0, 50.0, 0.02)).unwrap();
        for (a, b) in out.lanes.iter().zip(&m.lanes) {
            assert!((a.length() - b.length()).abs() / b.length() < 0.01);
            assert!(a.points.windows(2).all(|w| dist(w[0], w[1]) > 0.0));
        }
        let h = out.lanes[0].heading_at(99.0);
        assert!((h - (0.6 - 0.98)).abs() < 0.02, "{h}");
    }

    #[test]
    fn ripple_displaces_along_normal() {
        let m = straight();
        let out = perturb_map(&m, &Perturbation::ripple(10.0, 1.5, 20.0)).unwrap();
        let lane = &out.lanes[0];
        let peak = lane.points.iter().find(|q| (q[0] - 15.0).abs() < 1e-9).unwrap();
        assert!((peak[1] - 1.5).abs() < 1e-9);
    }

    #[test]
    fn invalid_parameters() {
        let m = straight();
        assert!(matches!(
            perturb_map(&m, &Perturbation::ripple(0.0, 1.0, 0.0)),
            Err(Error::InvalidPerturbation(_))
        ));
        assert!(perturb_map(&m, &Perturbation::turn(0.0, f64::NAN)).is_err());
        let mut dt = Perturbation::double_turn(50.0, 40.0, 0.01);
        assert!(perturb_map(&m, &dt).is_err());
        dt.second_pivot_s = None;
        assert!(perturb_map(&m, &dt).is_err());
    }

    #[test]
    fn remap_onto_bent_lane() {
        let m = straight();
        let bent = perturb_map(&m, &Perturbation::turn(50.0, 0.02)).unwrap();
        let scene = Scene {
            agents: vec![AgentInit::new(60.0, 0.0, 0.3, 5.0, 0), AgentInit::new(10.0, 7.0, -0.1, 2.0, 0)],
            map_ref: 0,
        };
        let out = remap_agents(&scene, &m, &bent).unwrap();
        let a = out.agents[0];
        // Within the sagitta of a 1 m chord on a 50 m radius.
        assert!((dist(a.position(), [50.0, 50.0]) - 50.0).abs() < 3e-3);
        let lane = &bent.lanes[0];
        let fc = cart_to_frenet(a.position(), lane);
        assert!((wrap_angle(a.theta - lane.heading_at(fc.s)) - 0.3).abs() < 1e-6);
        // Before the pivot nothing moves.
        assert!(dist(out.agents[1].position(), [10.0, 7.0]) < 1e-9);

        let same = remap_agents(&scene, &m, &m).unwrap();
        for (x, y) in same.agents.iter().zip(&scene.agents) {
            assert!(dist(x.position(), y.position()) < 1e-9 && (x.theta - y.theta).abs() < 1e-9);
        }
    }
}
