//! Vectorized lane maps, arc-length parameterization and the Cartesian/Frenet
//! transforms used by candidate generation, metrics and map perturbation.
//!
//! A lane's heading field is piecewise linear in arc length: vertex `k` carries
//! the direction of segment `k` and the heading is interpolated between
//! vertices. [`frenet_to_cart`] offsets along the left normal of that field and
//! [`cart_to_frenet`] solves for the foot point whose normal passes through the
//! query, so the two are exact inverses wherever `|d|` is below the local radius
//! of curvature. On straight segments this reduces to plain orthogonal
//! projection clamped to the segment ends.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

pub type Point = [f64; 2];

#[inline]
pub(crate) fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub(crate) fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub(crate) fn cross(a: Point, b: Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

#[inline]
pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Wraps an angle to `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// A lane centerline with its cached arc-length parameterization.
#[derive(Clone, Debug, PartialEq)]
pub struct Lane {
    pub points: Vec<Point>,
    pub cum_s: Vec<f64>,
    pub heading: Vec<f64>,
    pub curvature: Vec<f64>,
}

/// Path-relative coordinates: arc length along the lane and signed lateral
/// offset, positive to the left of the travel direction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrenetCoord {
    pub s: f64,
    pub d: f64,
}

/// Computes cumulative arc length, per-point heading and three-point
/// curvature for a polyline.
pub fn arclength_parameterize(points: &[Point]) -> Result<Lane> {
    if points.len() < 2 {
        return Err(Error::DegenerateLane(format!(
            "need at least 2 points, got {}",
            points.len()
        )));
    }
    let n = points.len();
    let mut cum_s = Vec::with_capacity(n);
    cum_s.push(0.0);
    for k in 1..n {
        if !(points[k][0].is_finite() && points[k][1].is_finite()) {
            return Err(Error::DegenerateLane(format!("non-finite point at {k}")));
        }
        let len = dist(points[k - 1], points[k]);
        if len == 0.0 {
            return Err(Error::DegenerateLane(format!(
                "duplicate consecutive points at index {k}"
            )));
        }
        cum_s.push(cum_s[k - 1] + len);
    }

    let mut heading = Vec::with_capacity(n);
    for k in 0..n - 1 {
        let e = sub(points[k + 1], points[k]);
        heading.push(e[1].atan2(e[0]));
    }
    heading.push(heading[n - 2]);

    let mut curvature = vec![0.0; n];
    if n >= 3 {
        for k in 1..n - 1 {
            curvature[k] = menger_curvature(points[k - 1], points[k], points[k + 1]);
        }
        curvature[0] = curvature[1];
        curvature[n - 1] = curvature[n - 2];
    }

    Ok(Lane {
        points: points.to_vec(),
        cum_s,
        heading,
        curvature,
    })
}

/// Signed curvature of the circle through three points (positive for left turns).
fn menger_curvature(a: Point, b: Point, c: Point) -> f64 {
    let ab = sub(b, a);
    let bc = sub(c, b);
    let ac = sub(c, a);
    let denom = dot(ab, ab).sqrt() * dot(bc, bc).sqrt() * dot(ac, ac).sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    2.0 * cross(ab, bc) / denom
}

struct Foot {
    s: f64,
    point: Point,
    heading: f64,
}

impl Lane {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn length(&self) -> f64 {
        *self.cum_s.last().unwrap()
    }

    fn segment_len(&self, k: usize) -> f64 {
        self.cum_s[k + 1] - self.cum_s[k]
    }

    /// Index of the segment containing arc length `s` (clamped to the lane).
    fn segment_at(&self, s: f64) -> usize {
        let last = self.points.len() - 2;
        match self.cum_s.binary_search_by(|v| v.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(last),
            Err(i) => i.saturating_sub(1).min(last),
        }
    }

    fn heading_delta(&self, k: usize) -> f64 {
        wrap_angle(self.heading[k + 1] - self.heading[k])
    }

    /// Interpolated heading at arc length `s`; constant beyond the ends.
    pub fn heading_at(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return self.heading[0];
        }
        if s >= self.length() {
            return *self.heading.last().unwrap();
        }
        let k = self.segment_at(s);
        let u = (s - self.cum_s[k]) / self.segment_len(k);
        wrap_angle(self.heading[k] + u * self.heading_delta(k))
    }

    /// Centerline point at arc length `s`, extrapolated along the end
    /// headings outside `[0, length]`.
    pub fn point_at(&self, s: f64) -> Point {
        let n = self.points.len();
        if s <= 0.0 {
            let h = self.heading[0];
            let p = self.points[0];
            return [p[0] + s * h.cos(), p[1] + s * h.sin()];
        }
        let total = self.length();
        if s >= total {
            let h = self.heading[n - 1];
            let p = self.points[n - 1];
            let ds = s - total;
            return [p[0] + ds * h.cos(), p[1] + ds * h.sin()];
        }
        let k = self.segment_at(s);
        let u = (s - self.cum_s[k]) / self.segment_len(k);
        let a = self.points[k];
        let b = self.points[k + 1];
        [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])]
    }

    /// Euclidean distance from `p` to the polyline.
    pub fn distance_to(&self, p: Point) -> f64 {
        let mut best = f64::INFINITY;
        for w in self.points.windows(2) {
            let e = sub(w[1], w[0]);
            let t = (dot(sub(p, w[0]), e) / dot(e, e)).clamp(0.0, 1.0);
            let q = [w[0][0] + t * e[0], w[0][1] + t * e[1]];
            best = best.min(dist(p, q));
        }
        best
    }

    /// Candidate foot points of `p`: every point where the interpolated
    /// normal passes through `p`, plus the clamped ends when `p` lies
    /// beyond them.
    fn feet(&self, p: Point) -> Vec<Foot> {
        let nseg = self.points.len() - 1;
        let mut out = Vec::new();
        // Tangential residual g(u) = (p - c(u)) . t(u) on segment k.
        let residual = |k: usize, u: f64| -> f64 {
            let a = self.points[k];
            let b = self.points[k + 1];
            let c = [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])];
            let h = self.heading[k] + u * self.heading_delta(k);
            dot(sub(p, c), [h.cos(), h.sin()])
        };
        let foot = |k: usize, u: f64| -> Foot {
            let a = self.points[k];
            let b = self.points[k + 1];
            Foot {
                s: self.cum_s[k] + u * self.segment_len(k),
                point: [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])],
                heading: self.heading[k] + u * self.heading_delta(k),
            }
        };

        if residual(0, 0.0) < 0.0 {
            out.push(foot(0, 0.0));
        }
        for k in 0..nseg {
            let g0 = residual(k, 0.0);
            let g1 = residual(k, 1.0);
            if g0 == 0.0 {
                out.push(foot(k, 0.0));
                continue;
            }
            if g0 > 0.0 && g1 < 0.0 {
                if self.heading_delta(k) == 0.0 {
                    let e = sub(self.points[k + 1], self.points[k]);
                    let u = dot(sub(p, self.points[k]), e) / dot(e, e);
                    out.push(foot(k, u.clamp(0.0, 1.0)));
                    continue;
                }
                let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
                for _ in 0..80 {
                    let mid = 0.5 * (lo + hi);
                    if residual(k, mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo < 1e-15 {
                        break;
                    }
                }
                out.push(foot(k, 0.5 * (lo + hi)));
            }
        }
        if residual(nseg - 1, 1.0) >= 0.0 {
            out.push(foot(nseg - 1, 1.0));
        }
        out
    }
}

/// Projects `p` onto the lane. Returns the foot point with the smallest
/// distance, breaking ties by smaller arc length.
pub fn cart_to_frenet(p: Point, lane: &Lane) -> FrenetCoord {
    let mut best: Option<(f64, Foot)> = None;
    for f in lane.feet(p) {
        let dd = dist(p, f.point);
        let better = match &best {
            None => true,
            Some((bd, bf)) => dd < *bd || (dd == *bd && f.s < bf.s),
        };
        if better {
            best = Some((dd, f));
        }
    }
    let (dd, f) = best.expect("a lane always has at least one foot point");
    let (sin, cos) = f.heading.sin_cos();
    let r = sub(p, f.point);
    let side = dot(r, [-sin, cos]);
    // Interior feet are exact normal projections: use the normal component
    // so rounding in the foot position does not leak into |d|.
    let d = if dot(r, [cos, sin]).abs() <= 1e-9 * (1.0 + dd) {
        side
    } else if side < 0.0 {
        -dd
    } else {
        dd
    };
    FrenetCoord { s: f.s, d }
}

/// Maps a Frenet coordinate back to the plane.
pub fn frenet_to_cart(fc: FrenetCoord, lane: &Lane) -> Point {
    let c = lane.point_at(fc.s);
    let h = lane.heading_at(fc.s);
    [c[0] - fc.d * h.sin(), c[1] + fc.d * h.cos()]
}

/// One result of [`nearest_lanes`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LaneHit {
    pub lane: usize,
    pub distance: f64,
}

/// Axis-aligned map extent `[xmin, ymin, xmax, ymax]`.
pub type Bounds = [f64; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct VectorMap {
    pub lanes: Vec<Lane>,
    pub bounds: Bounds,
}

/// Lanes within `radius` of `p`, nearest first; ties keep lane order.
pub fn nearest_lanes(p: Point, map: &VectorMap, radius: f64) -> Vec<LaneHit> {
    let mut hits: Vec<LaneHit> = map
        .lanes
        .iter()
        .enumerate()
        .map(|(i, l)| LaneHit {
            lane: i,
            distance: l.distance_to(p),
        })
        .filter(|h| h.distance <= radius)
        .collect();
    hits.sort_by(|a, b| a.distance.total_cmp(&b.distance));
    hits
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LaneFile {
    pub points: Vec<Point>,
}

/// JSON interchange form of a [`VectorMap`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MapFile {
    pub lanes: Vec<LaneFile>,
    pub bounds: Bounds,
}

impl VectorMap {
    pub fn new(lanes: Vec<Lane>, bounds: Bounds) -> Result<Self> {
        let map = VectorMap { lanes, bounds };
        map.validate()?;
        Ok(map)
    }

    /// Builds a map from raw polylines with bounds padded around the lanes.
    pub fn from_polylines(polylines: &[Vec<Point>], margin: f64) -> Result<Self> {
        let lanes = polylines
            .iter()
            .map(|p| arclength_parameterize(p))
            .collect::<Result<Vec<_>>>()?;
        let [x0, y0, x1, y1] = lane_extent(&lanes);
        VectorMap::new(lanes, [x0 - margin, y0 - margin, x1 + margin, y1 + margin])
    }

    fn validate(&self) -> Result<()> {
        let [x0, y0, x1, y1] = self.bounds;
        if !(x0 < x1 && y0 < y1) {
            return Err(Error::InvalidConfig(format!(
                "map bounds {:?} are empty",
                self.bounds
            )));
        }
        for (i, lane) in self.lanes.iter().enumerate() {
            for p in &lane.points {
                if p[0] < x0 || p[0] > x1 || p[1] < y0 || p[1] > y1 {
                    return Err(Error::InvalidConfig(format!(
                        "lane {i} point {p:?} lies outside map bounds"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Bounding box of all lane points.
    pub fn lane_extent(&self) -> Bounds {
        lane_extent(&self.lanes)
    }

    pub fn to_file(&self) -> MapFile {
        MapFile {
            lanes: self
                .lanes
                .iter()
                .map(|l| LaneFile {
                    points: l.points.clone(),
                })
                .collect(),
            bounds: self.bounds,
        }
    }

    pub fn from_file(file: &MapFile) -> Result<Self> {
        let lanes = file
            .lanes
            .iter()
            .map(|l| arclength_parameterize(&l.points))
            .collect::<Result<Vec<_>>>()?;
        VectorMap::new(lanes, file.bounds)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_file())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        VectorMap::from_file(&serde_json::from_str(s)?)
    }
}

fn lane_extent(lanes: &[Lane]) -> Bounds {
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for p in lanes.iter().flat_map(|l| l.points.iter()) {
        b[0] = b[0].min(p[0]);
        b[1] = b[1].min(p[1]);
        b[2] = b[2].max(p[0]);
        b[3] = b[3].max(p[1]);
    }
    b
}

/// Resamples a lane at (at most) `spacing` meters, always keeping both ends.
pub fn resample_lane(lane: &Lane, spacing: f64) -> Vec<Point> {
    let total = lane.length();
    let n = (total / spacing).ceil().max(1.0) as usize;
    (0..=n)
        .map(|j| lane.point_at(total * j as f64 / n as f64))
        .collect()
}
