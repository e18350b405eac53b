//! Frenet-frame motion primitives: constant longitudinal speed with a quintic
//! lateral profile, rolled out on every reference lane near the agent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cart_to_frenet, frenet_to_cart, nearest_lanes, FrenetCoord, Point, VectorMap};
use crate::scene::AgentInit;

/// Lateral profile `d(h) = d0 + a3 h^3 + a4 h^4 + a5 h^5`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuinticProfile {
    pub d0: f64,
    pub delta_d: f64,
    pub horizon: f64,
    pub a3: f64,
    pub a4: f64,
    pub a5: f64,
}

impl QuinticProfile {
    pub fn d(&self, h: f64) -> f64 {
        let h3 = h * h * h;
        self.d0 + h3 * (self.a3 + h * (self.a4 + h * self.a5))
    }

    pub fn d_dot(&self, h: f64) -> f64 {
        let h2 = h * h;
        h2 * (3.0 * self.a3 + h * (4.0 * self.a4 + 5.0 * h * self.a5))
    }

    pub fn d_ddot(&self, h: f64) -> f64 {
        h * (6.0 * self.a3 + h * (12.0 * self.a4 + 20.0 * h * self.a5))
    }
}

/// Solves for the quintic that moves from `d0` to `d_target` over `horizon`
/// seconds with zero lateral velocity and acceleration at both ends.
pub fn quintic_coeffs(d0: f64, d_target: f64, horizon: f64) -> Result<QuinticProfile> {
    if !(horizon > 0.0) {
        return Err(Error::NonPositiveHorizon(horizon));
    }
    let delta = d_target - d0;
    let t3 = horizon.powi(3);
    let t4 = t3 * horizon;
    let t5 = t4 * horizon;
    Ok(QuinticProfile {
        d0,
        delta_d: delta,
        horizon,
        a3: 10.0 * delta / t3,
        a4: -15.0 * delta / t4,
        a5: 6.0 * delta / t5,
    })
}

/// Samples the primitive at `h = dt, 2 dt, ..., steps * dt`.
pub fn frenet_rollout(
    profile: &QuinticProfile,
    s0: f64,
    v: f64,
    dt: f64,
    steps: usize,
) -> Result<Vec<FrenetCoord>> {
    if !(dt > 0.0) || steps == 0 || steps as f64 * dt > profile.horizon + 1e-9 {
        return Err(Error::HorizonExceeded {
            steps,
            dt,
            horizon: profile.horizon,
        });
    }
    Ok((1..=steps)
        .map(|i| {
            let h = i as f64 * dt;
            FrenetCoord {
                s: s0 + v * h,
                d: profile.d(h),
            }
        })
        .collect())
}

/// One motion primitive in Cartesian space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub v: f64,
    /// Terminal lateral offset from the reference centerline.
    pub d: f64,
    /// Reference lane index; `None` for the straight-line fallback.
    pub lane: Option<usize>,
    /// `points[0]` is the agent's initial position.
    pub xy: Vec<Point>,
}

/// All candidates of one agent, ordered by lane, then speed, then offset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateConfig {
    pub v_grid: Vec<f64>,
    pub d_grid: Vec<f64>,
    pub horizon: f64,
    pub dt: f64,
    pub lane_radius: f64,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        CandidateConfig {
            v_grid: vec![0.0, 2.0, 4.0, 8.0, 12.0],
            d_grid: vec![-3.0, 0.0, 3.0],
            horizon: 6.0,
            dt: 0.1,
            lane_radius: 5.0,
        }
    }
}

impl CandidateConfig {
    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }
}

/// Builds the grid of primitives for one agent on every lane within
/// `cfg.lane_radius` of its position.
pub fn generate_candidates(
    init: &AgentInit,
    map: &VectorMap,
    cfg: &CandidateConfig,
) -> Result<CandidateSet> {
    if cfg.v_grid.is_empty() || cfg.d_grid.is_empty() {
        return Err(Error::InvalidConfig("candidate grids must be non-empty".into()));
    }
    let origin = init.position();
    let hits = nearest_lanes(origin, map, cfg.lane_radius);
    if hits.is_empty() {
        return Err(Error::NoReferenceLane {
            x: origin[0],
            y: origin[1],
            radius: cfg.lane_radius,
        });
    }
    let steps = cfg.steps();
    let max_d = cfg.d_grid.iter().fold(0.0_f64, |m, d| m.max(d.abs()));
    let limit = cfg.lane_radius + max_d;

    let mut candidates = Vec::new();
    for hit in hits {
        let lane = &map.lanes[hit.lane];
        let start = cart_to_frenet(origin, lane);
        for &v in &cfg.v_grid {
            for &d_target in &cfg.d_grid {
                let profile = quintic_coeffs(start.d, d_target, cfg.horizon)?;
                let path = frenet_rollout(&profile, start.s, v, cfg.dt, steps)?;
                if path.iter().any(|fc| fc.d.abs() > limit) {
                    continue;
                }
                let mut xy = Vec::with_capacity(steps + 1);
                xy.push(origin);
                xy.extend(path.iter().map(|&fc| frenet_to_cart(fc, lane)));
                candidates.push(Candidate {
                    v,
                    d: d_target,
                    lane: Some(hit.lane),
                    xy,
                });
            }
        }
    }
    Ok(CandidateSet { candidates })
}

/// Constant-velocity straight line along the agent's heading.
pub fn straight_line_candidate(init: &AgentInit, cfg: &CandidateConfig) -> Candidate {
    let (sin, cos) = init.theta.sin_cos();
    let xy = (0..=cfg.steps())
        .map(|i| {
            let s = init.v * i as f64 * cfg.dt;
            [init.x + s * cos, init.y + s * sin]
        })
        .collect();
    Candidate {
        v: init.v,
        d: 0.0,
        lane: None,
        xy,
    }
}

/// [`generate_candidates`], falling back to a single straight-line
/// candidate when no lane is in range.
pub fn candidates_or_fallback(
    init: &AgentInit,
    map: &VectorMap,
    cfg: &CandidateConfig,
) -> Result<CandidateSet> {
    match generate_candidates(init, map, cfg) {
        Err(Error::NoReferenceLane { .. }) => Ok(CandidateSet {
            candidates: vec![straight_line_candidate(init, cfg)],
        }),
        Ok(set) if set.is_empty() => Ok(CandidateSet {
            candidates: vec![straight_line_candidate(init, cfg)],
        }),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::arclength_parameterize;

    /// Cramer's-rule solve of the terminal conditions d(T) = delta,
    /// d'(T) = 0, d''(T) = 0 for (a3, a4, a5).
    fn oracle_coeffs(delta: f64, t: f64) -> [f64; 3] {
        let m = [
            [t.powi(3), t.powi(4), t.powi(5)],
            [3.0 * t.powi(2), 4.0 * t.powi(3), 5.0 * t.powi(4)],
            [6.0 * t, 12.0 * t.powi(2), 20.0 * t.powi(3)],
        ];
        let rhs = [delta, 0.0, 0.0];
        let det3 = |a: [[f64; 3]; 3]| {
            a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
                - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
                + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
        };
        let det = det3(m);
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let mut mc = m;
            for r in 0..3 {
                mc[r][c] = rhs[r];
            }
            *o = det3(mc) / det;
        }
        out
    }

    #[test]
    fn zero_change_has_zero_coefficients() {
        let p = quintic_coeffs(0.0, 0.0, 4.0).unwrap();
        assert_eq!((p.a3, p.a4, p.a5), (0.0, 0.0, 0.0));
        let p = quintic_coeffs(2.0, 2.0, 3.0).unwrap();
        for i in 0..=30 {
            assert_eq!(p.d(i as f64 * 0.1), 2.0);
        }
    }

    #[test]
    fn unit_change_over_unit_horizon() {
        let p = quintic_coeffs(0.0, 1.0, 1.0).unwrap();
        let o = oracle_coeffs(1.0, 1.0);
        assert!((o[0] - 10.0).abs() < 1e-12 && (o[1] + 15.0).abs() < 1e-12 && (o[2] - 6.0).abs() < 1e-12);
        assert_eq!((p.a3, p.a4, p.a5), (10.0, -15.0, 6.0));
    }

    #[test]
    fn coefficients_match_linear_solve() {
        for &(d0, dt, t) in &[(0.3, -2.0, 6.0), (-1.0, 3.0, 2.5), (0.0, 0.7, 0.4)] {
            let p = quintic_coeffs(d0, dt, t).unwrap();
            let o = oracle_coeffs(dt - d0, t);
            for (a, b) in [p.a3, p.a4, p.a5].iter().zip(o) {
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn boundary_conditions() {
        let p = quintic_coeffs(-0.4, 3.0, 6.0).unwrap();
        assert_eq!(p.d(0.0), -0.4);
        assert_eq!(p.d_dot(0.0), 0.0);
        assert_eq!(p.d_ddot(0.0), 0.0);
        assert!((p.d(6.0) - 3.0).abs() < 1e-9);
        assert!(p.d_dot(6.0).abs() < 1e-9);
        assert!(p.d_ddot(6.0).abs() < 1e-9);
    }

    #[test]
    fn non_positive_horizon() {
        assert!(matches!(quintic_coeffs(0.0, 1.0, 0.0), Err(Error::NonPositiveHorizon(_))));
        assert!(matches!(quintic_coeffs(0.0, 1.0, -1.0), Err(Error::NonPositiveHorizon(_))));
    }

    #[test]
    fn rollouts() {
        let still = quintic_coeffs(0.5, 0.5, 6.0).unwrap();
        let r = frenet_rollout(&still, 3.0, 0.0, 0.1, 60).unwrap();
        assert!(r.iter().all(|fc| *fc == FrenetCoord { s: 3.0, d: 0.5 }));

        let flat = quintic_coeffs(0.0, 0.0, 3.0).unwrap();
        let r = frenet_rollout(&flat, 5.0, 1.0, 1.0, 3).unwrap();
        assert_eq!(
            r,
            vec![
                FrenetCoord { s: 6.0, d: 0.0 },
                FrenetCoord { s: 7.0, d: 0.0 },
                FrenetCoord { s: 8.0, d: 0.0 }
            ]
        );

        let change = quintic_coeffs(0.0, 1.0, 6.0).unwrap();
        let r = frenet_rollout(&change, 1.0, 2.0, 0.1, 60).unwrap();
        let last = r.last().unwrap();
        assert!((last.s - 13.0).abs() < 1e-9);
        assert!((last.d - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rollout_beyond_horizon_fails() {
        let p = quintic_coeffs(0.0, 1.0, 1.0).unwrap();
        assert!(matches!(
            frenet_rollout(&p, 0.0, 1.0, 0.1, 11),
            Err(Error::HorizonExceeded { .. })
        ));
        assert!(frenet_rollout(&p, 0.0, 1.0, 0.1, 10).is_ok());
    }

    fn straight_map() -> VectorMap {
        let pts: Vec<Point> = (0..=100).map(|i| [i as f64, 0.0]).collect();
        VectorMap::new(vec![arclength_parameterize(&pts).unwrap()], [-50.0, -50.0, 150.0, 50.0]).unwrap()
    }

    #[test]
    fn single_lane_keeping_candidate() {
        let map = straight_map();
        let cfg = CandidateConfig {
            v_grid: vec![1.0],
            d_grid: vec![0.0],
            ..CandidateConfig::default()
        };
        let init = AgentInit::new(10.0, 0.0, 0.0, 1.0, 0);
        let set = generate_candidates(&init, &map, &cfg).unwrap();
        assert_eq!(set.len(), 1);
        let c = &set.candidates[0];
        assert_eq!(c.xy.len(), 61);
        for (i, p) in c.xy.iter().enumerate() {
            assert!((p[0] - (10.0 + 0.1 * i as f64)).abs() < 1e-9);
            assert!(p[1].abs() < 1e-12);
        }
    }

    #[test]
    fn grid_enumeration_and_endpoint_offsets() {
        let map = straight_map();
        let cfg = CandidateConfig {
            v_grid: vec![1.0, 2.0],
            d_grid: vec![-1.0, 0.0, 1.0],
            ..CandidateConfig::default()
        };
        let init = AgentInit::new(20.0, 0.4, 0.0, 1.0, 0);
        let set = generate_candidates(&init, &map, &cfg).unwrap();
        assert_eq!(set.len(), 6);
        let mut k = 0;
        for &v in &cfg.v_grid {
            for &d in &cfg.d_grid {
                let c = &set.candidates[k];
                assert_eq!((c.v, c.d, c.lane), (v, d, Some(0)));
                let end = cart_to_frenet(*c.xy.last().unwrap(), &map.lanes[0]);
                assert!((end.d - d).abs() < 1e-6);
                assert!((end.s - (20.0 + 6.0 * v)).abs() < 1e-6);
                assert_eq!(c.xy[0], init.position());
                k += 1;
            }
        }
    }

    #[test]
    fn stationary_candidate_per_lane() {
        let a: Vec<Point> = (0..=50).map(|i| [i as f64, 0.0]).collect();
        let b: Vec<Point> = (0..=50).map(|i| [i as f64, 3.0]).collect();
        let map = VectorMap::new(
            vec![arclength_parameterize(&a).unwrap(), arclength_parameterize(&b).unwrap()],
            [-10.0, -10.0, 60.0, 20.0],
        )
        .unwrap();
        let cfg = CandidateConfig {
            v_grid: vec![0.0],
            d_grid: vec![0.0],
            ..CandidateConfig::default()
        };
        let set = generate_candidates(&AgentInit::new(10.0, 1.0, 0.0, 0.0, 0), &map, &cfg).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.candidates[0].lane, Some(0));
        assert_eq!(set.candidates[1].lane, Some(1));
    }

    #[test]
    fn no_reference_lane_and_fallback() {
        let map = straight_map();
        let cfg = CandidateConfig::default();
        let init = AgentInit::new(10.0, 20.0, 0.5, 2.0, 0);
        assert!(matches!(
            generate_candidates(&init, &map, &cfg),
            Err(Error::NoReferenceLane { .. })
        ));
        let set = candidates_or_fallback(&init, &map, &cfg).unwrap();
        assert_eq!(set.len(), 1);
        let c = &set.candidates[0];
        assert_eq!(c.lane, None);
        assert_eq!(c.xy[0], init.position());
        let end = c.xy.last().unwrap();
        assert!((end[0] - (10.0 + 12.0 * 0.5_f64.cos())).abs() < 1e-9);
    }

    #[test]
    fn candidate_json_layout() {
        let set = CandidateSet {
            candidates: vec![Candidate {
                v: 1.0,
                d: 0.0,
                lane: Some(2),
                xy: vec![[0.0, 0.0]],
            }],
        };
        let json = serde_json::to_string(&set).unwrap();
        assert_eq!(json, r#"[{"v":1.0,"d":0.0,"lane":2,"xy":[[0.0,0.0]]}]"#);
    }
}
