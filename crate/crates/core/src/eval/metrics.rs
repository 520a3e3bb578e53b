//! Direction and magnitude errors of estimated velocities, and their
//! aggregation over points, frame pairs and trials.
//!
//! A frame pair `(k−n, k)` is scored only when the true object speed is
//! nonzero at every step from `k−n` to `k`, against the truth velocity at
//! step `k`. Point errors are averaged within a pair, pair means are averaged
//! within a trial, and trial means give the per-speed mean and sample
//! standard deviation.

use super::logs::{FlowRecord, TruthRecord};
use crate::flow::Classification;
use crate::geometry::Vec3;
use crate::sim::HitLabel;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("angle of a zero vector is undefined")]
    ZeroVector,
    #[error("no Moving points in any scored frame pair")]
    NoMovingPoints,
    #[error("flow record for step {0} has no ground truth")]
    Misaligned(u32),
}

/// Angle between two velocities, degrees.
pub fn angle_deviation(v_true: &Vec3, v_est: &Vec3) -> Result<f64, MetricError> {
    let (a, b) = (v_true.norm(), v_est.norm());
    if a == 0.0 || b == 0.0 {
        return Err(MetricError::ZeroVector);
    }
    Ok((v_true.dot(v_est) / (a * b)).clamp(-1.0, 1.0).acos().to_degrees())
}

pub fn velocity_error(v_true: &Vec3, v_est: &Vec3) -> f64 {
    (v_true - v_est).norm()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub stationary: usize,
    pub moving: usize,
    pub unclassified: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recall {
    /// Object returns at the older step of scored pairs.
    pub truth_moving: usize,
    /// Of those, points not reported in a Moving cluster.
    pub missed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub name: String,
    pub experiment: String,
    pub speed: f64,
    pub n: u32,
    pub baseline: bool,
    /// `None` when no scored pair had a Moving point.
    pub angle_mean: Option<f64>,
    pub vel_mean: Option<f64>,
    pub pairs_scored: usize,
    pub pairs_with_moving: usize,
    pub counts: ClassCounts,
    pub recall: Recall,
}

impl TrialMetrics {
    pub fn is_missing(&self) -> bool {
        self.vel_mean.is_none()
    }

    /// `(angle_mean, vel_mean)`, or `NoMovingPoints`.
    pub fn means(&self) -> Result<(f64, f64), MetricError> {
        match (self.angle_mean, self.vel_mean) {
            (Some(a), Some(v)) => Ok((a, v)),
            _ => Err(MetricError::NoMovingPoints),
        }
    }
}

/// Mean over a trial of per-pair means over points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMean {
    pub k: u32,
    pub angle: f64,
    pub vel: f64,
    pub points: usize,
}

/// Commanded speed: the largest truth speed in the log.
pub fn target_speed(truth: &[TruthRecord]) -> f64 {
    truth.iter().map(|t| Vec3::from(t.v).norm()).fold(0.0, f64::max)
}

/// Experiment name from a scenario name `family@speed`.
pub fn experiment_of(truth: &[TruthRecord]) -> String {
    let name = truth.first().map(|t| t.scenario.as_str()).unwrap_or("");
    let family = name.split('@').next().unwrap_or("");
    if family.is_empty() {
        "unnamed".into()
    } else {
        family.into()
    }
}

/// Per-pair point means for the scored pairs of one trial.
pub fn pair_means(flow: &[FlowRecord], truth: &[TruthRecord]) -> Result<Vec<PairMean>, MetricError> {
    let by_k: BTreeMap<u32, &TruthRecord> = truth.iter().map(|t| (t.k, t)).collect();
    let mut out = Vec::new();
    for rec in flow {
        if !scored(rec, &by_k)? {
            continue;
        }
        let v_true = Vec3::from(by_k[&rec.k].v);
        let (mut angles, mut errs) = (Vec::new(), Vec::new());
        for c in rec.clusters.iter().filter(|c| c.class == Classification::Moving) {
            for v in &c.vel {
                let v = Vec3::from(*v);
                if let Ok(a) = angle_deviation(&v_true, &v) {
                    angles.push(a);
                }
                errs.push(velocity_error(&v_true, &v));
            }
        }
        if !errs.is_empty() {
            out.push(PairMean {
                k: rec.k,
                angle: mean(&angles),
                vel: mean(&errs),
                points: errs.len(),
            });
        }
    }
    Ok(out)
}

fn scored(rec: &FlowRecord, by_k: &BTreeMap<u32, &TruthRecord>) -> Result<bool, MetricError> {
    let first = rec.k.checked_sub(rec.n).ok_or(MetricError::Misaligned(rec.k))?;
    for k in first..=rec.k {
        let t = by_k.get(&k).ok_or(MetricError::Misaligned(k))?;
        if Vec3::from(t.v).norm() == 0.0 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Scores one trial. A trial without Moving points is reported with empty
/// means rather than as an error.
pub fn aggregate_trial(name: &str, flow: &[FlowRecord], truth: &[TruthRecord]) -> Result<TrialMetrics, MetricError> {
    let by_k: BTreeMap<u32, &TruthRecord> = truth.iter().map(|t| (t.k, t)).collect();
    let pairs = pair_means(flow, truth)?;
    let mut counts = ClassCounts::default();
    let mut recall = Recall::default();
    let mut pairs_scored = 0;
    for rec in flow {
        for c in &rec.clusters {
            let slot = match c.class {
                Classification::Stationary => &mut counts.stationary,
                Classification::Moving => &mut counts.moving,
                Classification::Unclassified => &mut counts.unclassified,
            };
            *slot += c.points.len();
        }
        if !scored(rec, &by_k)? {
            continue;
        }
        pairs_scored += 1;
        let older = by_k[&(rec.k - rec.n)];
        let truth_moving = older
            .hits
            .values()
            .flatten()
            .filter(|h| **h == HitLabel::Object)
            .count();
        let found = rec
            .clusters
            .iter()
            .filter(|c| c.class == Classification::Moving)
            .flat_map(|c| c.src.iter())
            .filter(|(s, z)| older.label(s, *z) == Some(HitLabel::Object))
            .count();
        recall.truth_moving += truth_moving;
        recall.missed += truth_moving.saturating_sub(found);
    }
    let angles: Vec<f64> = pairs.iter().map(|p| p.angle).collect();
    let vels: Vec<f64> = pairs.iter().map(|p| p.vel).collect();
    let some = |xs: &[f64]| (!xs.is_empty()).then(|| mean(xs));
    Ok(TrialMetrics {
        name: name.to_string(),
        experiment: experiment_of(truth),
        speed: target_speed(truth),
        n: flow.first().map(|r| r.n).unwrap_or(0),
        baseline: flow.first().is_some_and(|r| r.baseline),
        angle_mean: some(&angles),
        vel_mean: some(&vels),
        pairs_scored,
        pairs_with_moving: pairs.len(),
        counts,
        recall,
    })
}

/// Trials sharing experiment, mode, gap and speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedRow {
    pub experiment: String,
    pub baseline: bool,
    pub n: u32,
    pub speed: f64,
    pub trials: Vec<TrialMetrics>,
    pub angle_mean: Option<f64>,
    pub angle_std: Option<f64>,
    pub vel_mean: Option<f64>,
    pub vel_std: Option<f64>,
    /// `100 · vel_mean / speed`.
    pub normalized_error_pct: Option<f64>,
    pub missing_trials: usize,
}

impl SpeedRow {
    pub fn label(&self) -> String {
        if self.baseline {
            format!("{} (baseline)", self.experiment)
        } else {
            self.experiment.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<SpeedRow>,
    pub counts: ClassCounts,
    pub recall: Recall,
}

/// Speed keys compare at 1e-9 m/s resolution.
fn speed_key(s: f64) -> i64 {
    (s * 1e9).round() as i64
}

pub fn build_report(trials: Vec<TrialMetrics>) -> MetricsReport {
    let mut groups: BTreeMap<(String, bool, u32, i64), Vec<TrialMetrics>> = BTreeMap::new();
    let mut counts = ClassCounts::default();
    let mut recall = Recall::default();
    for t in trials {
        counts.stationary += t.counts.stationary;
        counts.moving += t.counts.moving;
        counts.unclassified += t.counts.unclassified;
        recall.truth_moving += t.recall.truth_moving;
        recall.missed += t.recall.missed;
        groups
            .entry((t.experiment.clone(), t.baseline, t.n, speed_key(t.speed)))
            .or_default()
            .push(t);
    }
    let rows = groups
        .into_iter()
        .map(|((experiment, baseline, n, _), mut trials)| {
            trials.sort_by(|a, b| a.name.cmp(&b.name));
            let speed = trials[0].speed;
            let angles: Vec<f64> = trials.iter().filter_map(|t| t.angle_mean).collect();
            let vels: Vec<f64> = trials.iter().filter_map(|t| t.vel_mean).collect();
            let have = !vels.is_empty();
            let vel_mean = have.then(|| mean(&vels));
            SpeedRow {
                experiment,
                baseline,
                n,
                speed,
                missing_trials: trials.iter().filter(|t| t.is_missing()).count(),
                angle_mean: have.then(|| mean(&angles)),
                angle_std: have.then(|| sample_std(&angles)),
                vel_mean,
                vel_std: have.then(|| sample_std(&vels)),
                normalized_error_pct: vel_mean.filter(|_| speed > 0.0).map(|v| 100.0 * v / speed),
                trials,
            }
        })
        .collect();
    MetricsReport { rows, counts, recall }
}

/// Pools the trials of several reports and regroups them.
pub fn merge_reports(reports: Vec<MetricsReport>) -> MetricsReport {
    build_report(
        reports
            .into_iter()
            .flat_map(|r| r.rows)
            .flat_map(|r| r.trials)
            .collect(),
    )
}

fn fmt_opt(x: Option<f64>, digits: usize) -> String {
    x.map(|v| format!("{v:.digits$}")).unwrap_or_else(|| "MISSING".into())
}

pub fn report_csv(report: &MetricsReport) -> String {
    let mut out = String::from("experiment,speed,angle_mean,angle_std,vel_mean,vel_std\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{:.2},{},{},{},{}\n",
            r.label(),
            r.speed,
            fmt_opt(r.angle_mean, 3),
            fmt_opt(r.angle_std, 3),
            fmt_opt(r.vel_mean, 3),
            fmt_opt(r.vel_std, 3)
        ));
    }
    out
}

/// Fixed-width table: one row per experiment and speed.
pub fn report_table(report: &MetricsReport) -> String {
    let mut out = format!(
        "{:<24} {:>6} {:>10} {:>10} {:>10} {:>10}\n",
        "experiment", "speed", "angle (°)", "std", "vel (m/s)", "std"
    );
    for r in &report.rows {
        out.push_str(&format!(
            "{:<24} {:>6.2} {:>10} {:>10} {:>10} {:>10}\n",
            r.label(),
            r.speed,
            fmt_opt(r.angle_mean, 3),
            fmt_opt(r.angle_std, 3),
            fmt_opt(r.vel_mean, 3),
            fmt_opt(r.vel_std, 3)
        ));
    }
    out
}
