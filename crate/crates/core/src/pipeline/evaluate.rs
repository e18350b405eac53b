use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::VectorMap;
use crate::metrics::{
    ade_fde_mr, behavior_stats, behavioral_histograms, collision_rate, jsd, lateral_deviation, near_edge,
    offroad_rate, trajectory_collision_rate, trajectory_offroad_rate, BehaviorStats, HistogramPair, MetricReport,
    MetricsConfig,
};
use crate::scene::Scenario;

/// Per-scenario metric values before averaging.
struct SceneMetrics {
    scalars: Vec<(&'static str, f64)>,
    stats: BehaviorStats,
}

fn has_trajectories(s: &Scenario) -> bool {
    !s.trajectories.is_empty() && s.trajectories.len() == s.scene.agents.len()
}

fn map_of<'a>(s: &Scenario, maps: &'a [VectorMap]) -> Result<&'a VectorMap> {
    maps.get(s.scene.map_ref)
        .ok_or_else(|| Error::InvalidConfig(format!("scenario refers to missing map {}", s.scene.map_ref)))
}

fn scene_metrics(s: &Scenario, maps: &[VectorMap], cfg: &MetricsConfig, with_traj: bool) -> Result<SceneMetrics> {
    let map = map_of(s, maps)?;
    let agents = &s.scene.agents;
    let mut scalars = vec![
        ("collision_rate", collision_rate(agents, &cfg.radii)),
        ("offroad_rate", offroad_rate(agents, map, cfg.offroad_threshold)),
        ("near_edge", near_edge(agents, map)),
    ];
    if with_traj {
        let types: Vec<u32> = agents.iter().map(|a| a.c).collect();
        let (avg, fin) = lateral_deviation(&s.trajectories, agents, map)?;
        scalars.extend([
            ("actor_collision_rate", trajectory_collision_rate(&s.trajectories, &types, &cfg.radii)?),
            ("traj_offroad_rate", trajectory_offroad_rate(&s.trajectories, map, cfg.offroad_threshold)),
            ("avg_lat_dev", avg),
            ("final_lat_dev", fin),
        ]);
    }
    Ok(SceneMetrics {
        scalars,
        stats: behavior_stats(agents, map),
    })
}

fn all_metrics(scenarios: &[Scenario], maps: &[VectorMap], cfg: &MetricsConfig, with_traj: bool) -> Result<Vec<SceneMetrics>> {
    scenarios.par_iter().map(|s| scene_metrics(s, maps, cfg, with_traj)).collect()
}

fn mean_into(out: &mut BTreeMap<String, f64>, per_scene: &[SceneMetrics]) {
    let n = per_scene.len() as f64;
    for m in per_scene {
        for (k, v) in &m.scalars {
            *out.entry((*k).to_string()).or_insert(0.0) += v / n;
        }
    }
}

/// Scene-averaged metrics of `scenarios`. Trajectory metrics appear only
/// when every scenario carries one trajectory per agent. With a reference
/// set, histogram divergences and (for matching shapes) ADE/FDE/MR are
/// added.
pub fn evaluate(
    scenarios: &[Scenario],
    maps: &[VectorMap],
    gt: Option<&[Scenario]>,
    cfg: &MetricsConfig,
) -> Result<MetricReport> {
    let mut report = MetricReport {
        config: cfg.clone(),
        ..MetricReport::default()
    };
    if scenarios.is_empty() {
        return Ok(report);
    }
    let with_traj = scenarios.iter().all(has_trajectories);
    let per_scene = all_metrics(scenarios, maps, cfg, with_traj)?;
    mean_into(&mut report.scalars, &per_scene);

    let Some(gt) = gt else {
        return Ok(report);
    };
    let gen_hist = behavioral_histograms(&BehaviorStats::merge(per_scene.iter().map(|m| &m.stats)), &cfg.histograms);
    let gt_metrics = all_metrics(gt, maps, cfg, false)?;
    let ref_hist = behavioral_histograms(&BehaviorStats::merge(gt_metrics.iter().map(|m| &m.stats)), &cfg.histograms);
    for (name, g) in gen_hist {
        if let Some(r) = ref_hist.get(&name) {
            report.scalars.insert(format!("jsd_{name}"), jsd(&g, r)?);
            report.histograms.insert(
                name,
                HistogramPair {
                    generated: g,
                    reference: r.clone(),
                },
            );
        }
    }

    let paired = with_traj
        && gt.len() == scenarios.len()
        && gt.iter().zip(scenarios).all(|(g, s)| {
            has_trajectories(g)
                && g.trajectories.len() == s.trajectories.len()
                && g.trajectories.iter().zip(&s.trajectories).all(|(a, b)| a.points.len() == b.points.len())
        });
    if paired {
        let n = scenarios.len() as f64;
        let (mut ade, mut fde, mut mr) = (0.0, 0.0, 0.0);
        for (s, g) in scenarios.iter().zip(gt) {
            let (a, f, m) = ade_fde_mr(&s.trajectories, &g.trajectories)?;
            ade += a / n;
            fde += f / n;
            mr += m / n;
        }
        report.scalars.insert("ade".into(), ade);
        report.scalars.insert("fde".into(), fde);
        report.scalars.insert("mr".into(), mr);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::config::{LaneShape, PipelineConfig};
    use crate::pipeline::synth::synth_dataset;

    fn data() -> (Vec<VectorMap>, Vec<Scenario>) {
        let cfg = PipelineConfig {
            lane_shapes: vec![LaneShape::Straight],
            ..PipelineConfig::tiny()
        };
        let ds = synth_dataset(&cfg, 3).unwrap();
        (ds.maps, ds.scenarios)
    }

    #[test]
    fn self_comparison_is_zero() {
        let (maps, sc) = data();
        let r = evaluate(&sc, &maps, Some(&sc), &MetricsConfig::default()).unwrap();
        for k in ["ade", "fde", "mr", "jsd_speed", "jsd_lat_dev", "jsd_ang_dev"] {
            assert_eq!(r.get(k), Some(0.0), "{k}");
        }
    }

    #[test]
    fn init_only_marks_trajectory_metrics_absent() {
        let (maps, mut sc) = data();
        for s in &mut sc {
            s.trajectories.clear();
        }
        let r = evaluate(&sc, &maps, None, &MetricsConfig::default()).unwrap();
        assert!(r.get("collision_rate").is_some() && r.get("offroad_rate").is_some());
        assert!(r.get("actor_collision_rate").is_none() && r.get("final_lat_dev").is_none());
    }

    #[test]
    fn single_scene_matches_direct_calls() {
        let (maps, sc) = data();
        let s = &sc[0];
        let map = &maps[s.scene.map_ref];
        let cfg = MetricsConfig::default();
        let r = evaluate(std::slice::from_ref(s), &maps, None, &cfg).unwrap();
        assert_eq!(r.get("collision_rate"), Some(collision_rate(&s.scene.agents, &cfg.radii)));
        assert_eq!(r.get("offroad_rate"), Some(offroad_rate(&s.scene.agents, map, 4.0)));
        let (avg, fin) = lateral_deviation(&s.trajectories, &s.scene.agents, map).unwrap();
        assert_eq!(r.get("avg_lat_dev"), Some(avg));
        assert_eq!(r.get("final_lat_dev"), Some(fin));
        assert_eq!(r.config, cfg);
    }

    #[test]
    fn missing_map_is_an_error() {
        let (_, sc) = data();
        assert!(evaluate(&sc, &[], None, &MetricsConfig::default()).is_err());
    }
}
