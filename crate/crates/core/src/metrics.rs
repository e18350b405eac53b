//! Evaluation metrics: common-sense rates, histogram JSD fidelity, road
//! compliance and ground-truth displacement errors.
//!
//! Trajectory metrics look at the future steps `h = 1..=H` and skip the
//! anchor point, which always equals the initial position.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cart_to_frenet, dist, nearest_lanes, wrap_angle, Lane, Point, VectorMap};
use crate::scene::{AgentInit, Trajectory};

pub const OFFROAD_THRESHOLD: f64 = 4.0;
pub const MISS_THRESHOLD: f64 = 2.0;
pub const DEFAULT_BINS: usize = 20;
pub const LOCAL_DENSITY_K: usize = 5;
pub const VEHICLE_RADIUS: f64 = 1.0;

/// Disc radius of each agent type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentRadii {
    pub default: f64,
    pub per_type: BTreeMap<u32, f64>,
}

impl Default for AgentRadii {
    fn default() -> Self {
        AgentRadii {
            default: VEHICLE_RADIUS,
            per_type: BTreeMap::new(),
        }
    }
}

impl AgentRadii {
    pub fn radius(&self, c: u32) -> f64 {
        self.per_type.get(&c).copied().unwrap_or(self.default)
    }
}

/// Indices of agents whose discs overlap another disc. Uses a uniform grid
/// so only neighbouring cells are compared.
fn colliding(points: &[Point], radii: &[f64]) -> Vec<bool> {
    let n = points.len();
    let mut hit = vec![false; n];
    let rmax = radii.iter().fold(0.0_f64, |m, r| m.max(*r));
    if n < 2 || rmax <= 0.0 {
        return hit;
    }
    let cell = 2.0 * rmax;
    let key = |p: Point| ((p[0] / cell).floor() as i64, (p[1] / cell).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(key(*p)).or_default().push(i);
    }
    for (i, p) in points.iter().enumerate() {
        let (cx, cy) = key(*p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                let Some(bucket) = grid.get(&(cx + dx, cy + dy)) else {
                    continue;
                };
                for &j in bucket {
                    if j > i && dist(*p, points[j]) < radii[i] + radii[j] {
                        hit[i] = true;
                        hit[j] = true;
                    }
                }
            }
        }
    }
    hit
}

fn rate(flags: &[bool]) -> f64 {
    if flags.is_empty() {
        return 0.0;
    }
    flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64
}

/// Fraction of agents whose disc overlaps another at the initial instant.
pub fn collision_rate(agents: &[AgentInit], radii: &AgentRadii) -> f64 {
    let pts: Vec<Point> = agents.iter().map(|a| a.position()).collect();
    let r: Vec<f64> = agents.iter().map(|a| radii.radius(a.c)).collect();
    rate(&colliding(&pts, &r))
}

fn check_same_len(trajs: &[Trajectory]) -> Result<usize> {
    let len = trajs.first().map_or(0, |t| t.points.len());
    if let Some(t) = trajs.iter().find(|t| t.points.len() != len) {
        return Err(Error::shape(len, t.points.len()));
    }
    Ok(len)
}

/// Fraction of agents that overlap another agent at any future step
/// (actorCR). `types[i]` is the type of `trajs[i]`.
pub fn trajectory_collision_rate(trajs: &[Trajectory], types: &[u32], radii: &AgentRadii) -> Result<f64> {
    if types.len() != trajs.len() {
        return Err(Error::shape(trajs.len(), types.len()));
    }
    let len = check_same_len(trajs)?;
    let r: Vec<f64> = types.iter().map(|&c| radii.radius(c)).collect();
    let mut any = vec![false; trajs.len()];
    for h in 1..len {
        let pts: Vec<Point> = trajs.iter().map(|t| t.points[h]).collect();
        for (a, b) in any.iter_mut().zip(colliding(&pts, &r)) {
            *a |= b;
        }
    }
    Ok(rate(&any))
}

/// Distance from `p` to the closest lane centerline (infinite without lanes).
pub fn lane_distance(p: Point, map: &VectorMap) -> f64 {
    map.lanes.iter().map(|l| l.distance_to(p)).fold(f64::INFINITY, f64::min)
}

/// Fraction of agents farther than `threshold` from every centerline.
pub fn offroad_rate(agents: &[AgentInit], map: &VectorMap, threshold: f64) -> f64 {
    let flags: Vec<bool> = agents
        .iter()
        .map(|a| lane_distance(a.position(), map) > threshold)
        .collect();
    rate(&flags)
}

/// Mean distance from each agent to its nearest centerline.
pub fn near_edge(agents: &[AgentInit], map: &VectorMap) -> f64 {
    if agents.is_empty() {
        return 0.0;
    }
    agents.iter().map(|a| lane_distance(a.position(), map)).sum::<f64>() / agents.len() as f64
}

/// Fraction of trajectories with any future step beyond `threshold`.
pub fn trajectory_offroad_rate(trajs: &[Trajectory], map: &VectorMap, threshold: f64) -> f64 {
    let flags: Vec<bool> = trajs
        .iter()
        .map(|t| t.points.iter().skip(1).any(|p| lane_distance(*p, map) > threshold))
        .collect();
    rate(&flags)
}

/// Binned distribution with end bins absorbing out-of-range values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub mass: Vec<f64>,
    pub count: usize,
}

pub fn uniform_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect()
}

impl Histogram {
    /// Normalized histogram of the finite entries of `values`.
    pub fn from_values(edges: &[f64], values: &[f64]) -> Self {
        let bins = edges.len().saturating_sub(1);
        let mut counts = vec![0usize; bins];
        let mut count = 0;
        for &v in values.iter().filter(|v| v.is_finite()) {
            let k = edges[1..bins].partition_point(|&e| e <= v);
            counts[k] += 1;
            count += 1;
        }
        let mass = counts
            .iter()
            .map(|&c| if count > 0 { c as f64 / count as f64 } else { 0.0 })
            .collect();
        Histogram {
            edges: edges.to_vec(),
            mass,
            count,
        }
    }
}

fn kl_to_mid(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (2.0 * a / (a + b)).log2())
        .sum()
}

/// Base-2 Jensen-Shannon divergence of two mass vectors.
pub fn jsd_masses(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::EdgeMismatch);
    }
    let v = 0.5 * kl_to_mid(p, q) + 0.5 * kl_to_mid(q, p);
    Ok(v.clamp(0.0, 1.0))
}

pub fn jsd(p: &Histogram, q: &Histogram) -> Result<f64> {
    if p.edges != q.edges {
        return Err(Error::EdgeMismatch);
    }
    jsd_masses(&p.mass, &q.mass)
}

/// Per-agent behavioral statistics of one scene.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BehaviorStats {
    pub near_dist: Vec<f64>,
    /// `None` when the scene has too few agents.
    pub local_density: Option<Vec<f64>>,
    pub lat_dev: Vec<f64>,
    pub ang_dev: Vec<f64>,
    pub speed: Vec<f64>,
}

impl BehaviorStats {
    /// Concatenates statistics of several scenes. Local density is present
    /// if any scene provided it.
    pub fn merge<'a>(all: impl IntoIterator<Item = &'a BehaviorStats>) -> BehaviorStats {
        let mut out = BehaviorStats::default();
        for s in all {
            out.near_dist.extend(&s.near_dist);
            if let Some(ld) = &s.local_density {
                out.local_density.get_or_insert_with(Vec::new).extend(ld);
            }
            out.lat_dev.extend(&s.lat_dev);
            out.ang_dev.extend(&s.ang_dev);
            out.speed.extend(&s.speed);
        }
        out
    }
}

fn nearest_lane(p: Point, map: &VectorMap) -> Option<&Lane> {
    nearest_lanes(p, map, f64::INFINITY).first().map(|h| &map.lanes[h.lane])
}

/// Absolute heading difference to the nearest lane, in `[0, π]`.
pub fn angular_deviation(a: &AgentInit, map: &VectorMap) -> Option<f64> {
    let lane = nearest_lane(a.position(), map)?;
    let s = cart_to_frenet(a.position(), lane).s;
    Some(wrap_angle(a.theta - lane.heading_at(s)).abs().min(PI))
}

pub fn behavior_stats(agents: &[AgentInit], map: &VectorMap) -> BehaviorStats {
    let n = agents.len();
    let mut near_dist = Vec::new();
    let mut local = Vec::new();
    if n >= 2 {
        for (i, a) in agents.iter().enumerate() {
            let mut d: Vec<f64> = agents
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, b)| dist(a.position(), b.position()))
                .collect();
            d.sort_by(f64::total_cmp);
            near_dist.push(d[0]);
            if n > LOCAL_DENSITY_K {
                local.push(d[..LOCAL_DENSITY_K].iter().sum::<f64>() / LOCAL_DENSITY_K as f64);
            }
        }
    }
    BehaviorStats {
        near_dist,
        local_density: (n > LOCAL_DENSITY_K).then_some(local),
        lat_dev: agents.iter().map(|a| lane_distance(a.position(), map)).collect(),
        ang_dev: agents.iter().filter_map(|a| angular_deviation(a, map)).collect(),
        speed: agents.iter().map(|a| a.v).collect(),
    }
}

/// Value ranges of the behavioral histograms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HistogramRanges {
    pub bins: usize,
    pub near_dist: (f64, f64),
    pub local_density: (f64, f64),
    pub lat_dev: (f64, f64),
    pub ang_dev: (f64, f64),
    pub speed: (f64, f64),
}

impl Default for HistogramRanges {
    fn default() -> Self {
        HistogramRanges {
            bins: DEFAULT_BINS,
            near_dist: (0.0, 50.0),
            local_density: (0.0, 60.0),
            lat_dev: (0.0, 10.0),
            ang_dev: (0.0, PI),
            speed: (0.0, 20.0),
        }
    }
}

/// Histograms keyed by statistic name; local density is omitted when absent.
pub fn behavioral_histograms(stats: &BehaviorStats, ranges: &HistogramRanges) -> BTreeMap<String, Histogram> {
    let h = |r: (f64, f64), v: &[f64]| Histogram::from_values(&uniform_edges(r.0, r.1, ranges.bins), v);
    let mut out = BTreeMap::new();
    if !stats.near_dist.is_empty() {
        out.insert("near_dist".to_string(), h(ranges.near_dist, &stats.near_dist));
    }
    if let Some(ld) = &stats.local_density {
        out.insert("local_density".to_string(), h(ranges.local_density, ld));
    }
    out.insert("lat_dev".to_string(), h(ranges.lat_dev, &stats.lat_dev));
    out.insert("ang_dev".to_string(), h(ranges.ang_dev, &stats.ang_dev));
    out.insert("speed".to_string(), h(ranges.speed, &stats.speed));
    out
}

/// Per-agent `|d(h)|` to the reference lane, for `h = 1..=H`.
pub fn lateral_offsets(traj: &Trajectory, init: &AgentInit, map: &VectorMap) -> Result<Vec<f64>> {
    let p = init.position();
    let lane = nearest_lane(p, map).ok_or(Error::NoReferenceLane {
        x: p[0],
        y: p[1],
        radius: f64::INFINITY,
    })?;
    Ok(traj.points.iter().skip(1).map(|q| cart_to_frenet(*q, lane).d.abs()).collect())
}

/// `(avg_lat_dev, final_lat_dev)`, reference lane = nearest lane at init.
pub fn lateral_deviation(trajs: &[Trajectory], inits: &[AgentInit], map: &VectorMap) -> Result<(f64, f64)> {
    if trajs.len() != inits.len() {
        return Err(Error::shape(inits.len(), trajs.len()));
    }
    let (mut sum, mut count, mut fin) = (0.0, 0usize, 0.0);
    for (t, a) in trajs.iter().zip(inits) {
        let d = lateral_offsets(t, a, map)?;
        sum += d.iter().sum::<f64>();
        count += d.len();
        fin += d.last().copied().unwrap_or(0.0);
    }
    if trajs.is_empty() {
        return Ok((0.0, 0.0));
    }
    Ok((sum / count.max(1) as f64, fin / trajs.len() as f64))
}

/// `(ade, fde, mr)` over future steps.
pub fn ade_fde_mr(pred: &[Trajectory], gt: &[Trajectory]) -> Result<(f64, f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::shape(gt.len(), pred.len()));
    }
    if pred.is_empty() {
        return Ok((0.0, 0.0, 0.0));
    }
    let (mut ade, mut fde, mut miss) = (0.0, 0.0, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        if p.points.len() != g.points.len() || p.points.len() < 2 {
            return Err(Error::shape(g.points.len(), p.points.len()));
        }
        let errs: Vec<f64> = p.points.iter().zip(&g.points).skip(1).map(|(a, b)| dist(*a, *b)).collect();
        ade += errs.iter().sum::<f64>() / errs.len() as f64;
        let f = *errs.last().unwrap();
        fde += f;
        if f > MISS_THRESHOLD {
            miss += 1;
        }
    }
    let n = pred.len() as f64;
    Ok((ade / n, fde / n, miss as f64 / n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub offroad_threshold: f64,
    pub radii: AgentRadii,
    pub histograms: HistogramRanges,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            offroad_threshold: OFFROAD_THRESHOLD,
            radii: AgentRadii::default(),
            histograms: HistogramRanges::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramPair {
    pub generated: Histogram,
    pub reference: Histogram,
}

/// Named scalars plus histogram payloads. Metrics that cannot be computed
/// for the given inputs are absent rather than zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scalars: BTreeMap<String, f64>,
    pub histograms: BTreeMap<String, HistogramPair>,
    pub config: MetricsConfig,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.scalars.get(name).copied()
    }
}
