//! JSON-lines records for frames, ground truth and flow estimates.

use crate::flow::{Classification, ClusterReport, FlowField};
use crate::geometry::{GeometryError, RigidTransform};
use crate::sensing::{DepthFrame, SensorId};
use crate::sim::{GroundTruth, HitLabel, SimFrame};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

/// One sensor's frame at one step, with the sensor's pose in the base frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub k: u32,
    pub t: f64,
    pub sensor: SensorId,
    #[serde(rename = "R")]
    pub rotation: [f64; 9],
    pub p: [f64; 3],
    /// Whole millimeters; 0 for invalid zones.
    pub depth_mm: Vec<i64>,
    pub valid: Vec<bool>,
}

impl FrameRecord {
    pub fn from_sim(f: &SimFrame) -> Self {
        Self {
            k: f.frame.step,
            t: f.frame.timestamp,
            sensor: f.frame.sensor_id.clone(),
            rotation: f.sensor_pose.rotation_row_major(),
            p: (*f.sensor_pose.translation()).into(),
            depth_mm: f
                .frame
                .depth_mm
                .iter()
                .zip(&f.frame.valid)
                .map(|(d, v)| if *v { d.round() as i64 } else { 0 })
                .collect(),
            valid: f.frame.valid.clone(),
        }
    }

    pub fn pose(&self) -> Result<RigidTransform, GeometryError> {
        RigidTransform::from_row_major(&self.rotation, &self.p)
    }

    pub fn depth_frame(&self) -> DepthFrame {
        DepthFrame {
            sensor_id: self.sensor.clone(),
            step: self.k,
            timestamp: self.t,
            depth_mm: self.depth_mm.iter().map(|d| *d as f64).collect(),
            valid: self.valid.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub k: u32,
    pub t: f64,
    /// Object velocity, m/s.
    pub v: [f64; 3],
    pub pose: RigidTransform,
    /// Per sensor, one label per zone.
    pub hits: BTreeMap<SensorId, Vec<HitLabel>>,
    #[serde(default)]
    pub scenario: String,
}

impl TruthRecord {
    pub fn from_sim(t: &GroundTruth, scenario: &str) -> Self {
        Self {
            k: t.step,
            t: t.time,
            v: t.velocity.into(),
            pose: t.object_pose,
            hits: t.hits.clone(),
            scenario: scenario.to_string(),
        }
    }

    pub fn label(&self, sensor: &SensorId, zone: usize) -> Option<HitLabel> {
        self.hits.get(sensor).and_then(|z| z.get(zone)).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowCluster {
    pub id: usize,
    pub class: Classification,
    pub fitness: f64,
    pub mean_disp: f64,
    /// Surviving frame-(k−n) points.
    pub points: Vec<[f64; 3]>,
    /// Velocity per point for `Moving` clusters, otherwise empty.
    pub vel: Vec<[f64; 3]>,
    /// `[sensor, zone]` each point came from.
    #[serde(default)]
    pub src: Vec<(SensorId, usize)>,
}

impl FlowCluster {
    pub fn from_report(r: &ClusterReport) -> Self {
        Self {
            id: r.cluster_id,
            class: r.classification,
            fitness: r.fitness,
            mean_disp: r.mean_displacement,
            points: r.points_kn.points.iter().map(|p| p.position.into()).collect(),
            vel: r.velocities.iter().map(|v| (*v).into()).collect(),
            src: r
                .points_kn
                .points
                .iter()
                .filter_map(|p| p.zone.map(|z| (p.sensor.clone(), z)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    /// The later step of the pair `(k−n, k)`.
    pub k: u32,
    pub n: u32,
    pub clusters: Vec<FlowCluster>,
    pub elapsed_s: f64,
    pub baseline: bool,
}

impl FlowRecord {
    pub fn from_field(field: &FlowField, n: u32, baseline: bool, elapsed_s: f64) -> Self {
        Self {
            k: field.step_k,
            n,
            clusters: field.clusters.iter().map(FlowCluster::from_report).collect(),
            elapsed_s,
            baseline,
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> LogError + '_ {
    move |source| LogError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), LogError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| LogError::Invalid {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads every non-blank line as one record.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, LogError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| LogError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), LogError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| LogError::Invalid {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, LogError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| LogError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Checks frame records are grouped by contiguous steps from 0, one record
/// per (step, sensor).
pub fn check_frames(path: &Path, frames: &[FrameRecord]) -> Result<(), LogError> {
    let invalid = |message: String| LogError::Invalid {
        path: path.to_path_buf(),
        message,
    };
    let mut seen = std::collections::BTreeSet::new();
    let mut last_step = 0;
    for f in frames {
        if f.k != last_step && f.k != last_step + 1 {
            return Err(invalid(format!("step {} follows step {last_step}", f.k)));
        }
        if seen.is_empty() && f.k != 0 {
            return Err(invalid(format!("steps start at {} instead of 0", f.k)));
        }
        if !seen.insert((f.k, f.sensor.clone())) {
            return Err(invalid(format!(
                "duplicate record for step {} sensor {}",
                f.k, f.sensor
            )));
        }
        if f.depth_mm.len() != f.valid.len() {
            return Err(invalid(format!(
                "step {} sensor {}: depth/valid length mismatch",
                f.k, f.sensor
            )));
        }
        last_step = f.k;
    }
    Ok(())
}
