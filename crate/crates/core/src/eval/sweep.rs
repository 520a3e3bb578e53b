//! Velocity error versus frame gap `n`, normalized by the commanded speed.

use super::logs::{FrameRecord, TruthRecord};
use super::metrics::{aggregate_trial, mean};
use super::{estimate_pairs, scored_steps, step_clouds, EstimateConfig, EvalError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct TrialInput {
    pub name: String,
    pub frames: Vec<FrameRecord>,
    pub truth: Vec<TruthRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub n: u32,
    pub trial: String,
    pub experiment: String,
    pub speed: f64,
    /// `None` is a MISSING entry: no scored pair produced a Moving point.
    pub vel_mean: Option<f64>,
    pub normalized_error_pct: Option<f64>,
    pub pairs_scored: usize,
    pub pairs_with_moving: usize,
}

/// One entry per `(n, trial)`, ordered by `n` then trial name.
pub fn sweep_n(trials: &[TrialInput], ns: &[u32], base: &EstimateConfig) -> Result<Vec<SweepEntry>, EvalError> {
    let mut out = Vec::new();
    let mut sorted: Vec<&TrialInput> = trials.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let clouds: Vec<_> = sorted
        .iter()
        .map(|t| step_clouds(&t.frames, base))
        .collect::<Result<_, _>>()?;
    for &n in ns {
        let mut cfg = base.clone();
        cfg.flow.n = n;
        cfg.flow.validate()?;
        for (trial, clouds) in sorted.iter().zip(&clouds) {
            let steps = scored_steps(&trial.truth, n);
            let flow = estimate_pairs(clouds, &steps, &cfg)?;
            let m = aggregate_trial(&trial.name, &flow, &trial.truth)?;
            out.push(SweepEntry {
                n,
                trial: trial.name.clone(),
                experiment: m.experiment.clone(),
                speed: m.speed,
                vel_mean: m.vel_mean,
                normalized_error_pct: m.vel_mean.filter(|_| m.speed > 0.0).map(|v| 100.0 * v / m.speed),
                pairs_scored: m.pairs_scored,
                pairs_with_moving: m.pairs_with_moving,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub n: u32,
    pub speed: f64,
    /// Mean over non-missing trials.
    pub normalized_error_pct: Option<f64>,
    pub trials: usize,
    pub missing: usize,
}

/// Per `(n, speed)` summary.
pub fn summarize(entries: &[SweepEntry]) -> Vec<SweepCell> {
    let mut groups: BTreeMap<(u32, i64), Vec<&SweepEntry>> = BTreeMap::new();
    for e in entries {
        groups.entry((e.n, (e.speed * 1e9).round() as i64)).or_default().push(e);
    }
    groups
        .into_values()
        .map(|es| {
            let pct: Vec<f64> = es.iter().filter_map(|e| e.normalized_error_pct).collect();
            SweepCell {
                n: es[0].n,
                speed: es[0].speed,
                normalized_error_pct: (!pct.is_empty()).then(|| mean(&pct)),
                trials: es.len(),
                missing: es.len() - pct.len(),
            }
        })
        .collect()
}

pub fn sweep_csv(entries: &[SweepEntry]) -> String {
    let mut out = String::from("n,trial,experiment,speed,vel_mean,normalized_error_pct\n");
    for e in entries {
        let (v, p) = match (e.vel_mean, e.normalized_error_pct) {
            (Some(v), Some(p)) => (format!("{v:.4}"), format!("{p:.2}")),
            _ => ("MISSING".into(), "MISSING".into()),
        };
        out.push_str(&format!(
            "{},{},{},{:.2},{},{}\n",
            e.n, e.trial, e.experiment, e.speed, v, p
        ));
    }
    out
}
