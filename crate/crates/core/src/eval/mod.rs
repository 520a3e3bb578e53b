//! Log-driven pipeline: frames to flow estimates to metrics.

pub mod logs;
pub mod metrics;
pub mod sweep;

use crate::clustering::ClusterParams;
use crate::flow::{estimate_flow, FlowError, FlowParams};
use crate::geometry::{GeometryError, Vec3};
use crate::icp::IcpParams;
use crate::sensing::{
    merge_posed_frames, self_filter_posed, PointCloud, SensingError, SensorPoses, TofIntrinsics,
    DEFAULT_SELF_FILTER_MARGIN,
};
use crate::sim::{run_scenario, Scenario, SimError};
use logs::{FlowRecord, FrameRecord, LogError, TruthRecord};
use metrics::MetricError;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::time::Instant;
use thiserror::Error;

/// Caps the worker threads used by the pipeline.
pub const THREADS_ENV: &str = "SPARSEFLOW_THREADS";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Sensing(#[from] SensingError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("sensor pose: {0}")]
    Geometry(#[from] GeometryError),
    #[error("{THREADS_ENV}: {0}")]
    Threads(String),
}

/// Applies `SPARSEFLOW_THREADS` to the global worker pool. Returns the cap,
/// if one was set.
pub fn configure_threads() -> Result<Option<usize>, EvalError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .ok_or_else(|| EvalError::Threads(format!("expected a positive integer, got {raw:?}")))?;
    // A pool that already exists (a second call in one process) keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(Some(n))
}

#[derive(Debug, Clone)]
pub struct EstimateConfig {
    pub flow: FlowParams,
    pub cluster: ClusterParams,
    pub icp: IcpParams,
    pub intrinsics: TofIntrinsics,
    /// Robot model (shape and link paths) for self-filtering, if known.
    pub robot: Option<Scenario>,
    pub self_filter_margin: f64,
    /// Record wall-clock time per pair; off keeps logs reproducible.
    pub timing: bool,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            flow: FlowParams::default(),
            cluster: ClusterParams::default(),
            icp: IcpParams::default(),
            intrinsics: TofIntrinsics::default(),
            robot: None,
            self_filter_margin: DEFAULT_SELF_FILTER_MARGIN,
            timing: false,
        }
    }
}

/// Runs a scenario and converts the output to log records.
pub fn simulate(scenario: &Scenario) -> Result<(Vec<FrameRecord>, Vec<TruthRecord>), EvalError> {
    let out = run_scenario(scenario)?;
    let frames = out.frames.iter().map(FrameRecord::from_sim).collect();
    let truth = out
        .truth
        .iter()
        .map(|t| TruthRecord::from_sim(t, &scenario.name))
        .collect();
    Ok((frames, truth))
}

/// Sampling period implied by the record timestamps.
pub fn delta_t_from(frames: &[FrameRecord]) -> Option<f64> {
    let first = frames.iter().min_by_key(|f| f.k)?;
    let last = frames.iter().max_by_key(|f| f.k)?;
    (last.k > first.k).then(|| (last.t - first.t) / (last.k - first.k) as f64)
}

/// Merged (and, with a robot model, self-filtered) cloud per step.
pub fn step_clouds(frames: &[FrameRecord], cfg: &EstimateConfig) -> Result<BTreeMap<u32, PointCloud>, EvalError> {
    let mut by_step: BTreeMap<u32, Vec<&FrameRecord>> = BTreeMap::new();
    for f in frames {
        by_step.entry(f.k).or_default().push(f);
    }
    let steps: Vec<(u32, Vec<&FrameRecord>)> = by_step.into_iter().collect();
    steps
        .into_par_iter()
        .map(|(k, recs)| {
            let mut posed = Vec::with_capacity(recs.len());
            let mut poses = SensorPoses::new();
            for r in &recs {
                let pose = r.pose()?;
                poses.insert(r.sensor.clone(), pose);
                posed.push((r.depth_frame(), pose));
            }
            let refs: Vec<_> = posed.iter().map(|(f, p)| (f, *p)).collect();
            let mut cloud = merge_posed_frames(&refs, &cfg.intrinsics)?;
            if let Some(robot) = &cfg.robot {
                let t = recs.first().map(|r| r.t).unwrap_or(0.0);
                let body = robot.robot_shape.posed(&robot.link_poses_at(t))?;
                cloud = self_filter_posed(&cloud, &body, &poses, cfg.self_filter_margin).reindexed();
            }
            Ok((k, cloud))
        })
        .collect()
}

/// Flow for each pair `(k − n, k)` with `k` in `steps`, in step order.
pub fn estimate_pairs(
    clouds: &BTreeMap<u32, PointCloud>,
    steps: &[u32],
    cfg: &EstimateConfig,
) -> Result<Vec<FlowRecord>, EvalError> {
    let n = cfg.flow.n;
    steps
        .par_iter()
        .filter(|&&k| k >= n && clouds.contains_key(&k) && clouds.contains_key(&(k - n)))
        .map(|&k| {
            let start = Instant::now();
            let field = estimate_flow(&clouds[&k], &clouds[&(k - n)], &cfg.flow, &cfg.cluster, &cfg.icp)?;
            let elapsed = if cfg.timing { start.elapsed().as_secs_f64() } else { 0.0 };
            Ok(FlowRecord::from_field(&field, n, cfg.flow.baseline, elapsed))
        })
        .collect()
}

/// Flow for every pair the frame log supports.
pub fn estimate_log(frames: &[FrameRecord], cfg: &EstimateConfig) -> Result<Vec<FlowRecord>, EvalError> {
    let clouds = step_clouds(frames, cfg)?;
    let steps: Vec<u32> = clouds.keys().copied().collect();
    estimate_pairs(&clouds, &steps, cfg)
}

/// Steps `k` whose pair `(k − n, k)` is scored: nonzero true speed at every
/// step in between.
pub fn scored_steps(truth: &[TruthRecord], n: u32) -> Vec<u32> {
    let moving: BTreeMap<u32, bool> = truth.iter().map(|t| (t.k, Vec3::from(t.v).norm() > 0.0)).collect();
    moving
        .keys()
        .copied()
        .filter(|&k| k >= n && (k - n..=k).all(|j| moving.get(&j).copied().unwrap_or(false)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::presets::preset_by_name;

    #[test]
    fn log_pipeline_is_deterministic() {
        let mut sc = preset_by_name("approach-y@0.30").unwrap();
        sc.seed = 3;
        let (frames, truth) = simulate(&sc).unwrap();
        assert_eq!(frames.len() as u32, sc.steps() * 24);
        assert_eq!(truth.len() as u32, sc.steps());
        assert!((delta_t_from(&frames).unwrap() - 1.0 / 15.0).abs() < 1e-12);
        let cfg = EstimateConfig::default();
        let a = estimate_log(&frames, &cfg).unwrap();
        let b = estimate_log(&frames, &cfg).unwrap();
        assert_eq!(a.len() as u32, sc.steps() - 8);
        let ja: Vec<String> = a.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
        let jb: Vec<String> = b.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
        assert_eq!(ja, jb);
        assert!(a.iter().all(|r| r.elapsed_s == 0.0));
    }

    #[test]
    fn scored_steps_need_motion_throughout() {
        let sc = preset_by_name("approach-y@0.30").unwrap();
        let (_, truth) = simulate(&sc).unwrap();
        // 15 moving steps leave 7 pairs at n = 8 and 5 at n = 10.
        assert_eq!(scored_steps(&truth, 8).len(), 7);
        assert_eq!(scored_steps(&truth, 10).len(), 5);
    }
}
