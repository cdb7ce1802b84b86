//! Rollout aggregation: reduce R joint rollouts to k weighted joint modes
//! via NMS-seeded k-means, with cross-replica ensembling ahead of the
//! clustering.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rollout::RolloutSet;
use crate::scene::Waypoint;

/// Distance between two joint trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JointDistanceKind {
    /// Largest final-step displacement over agents (strictest reading of a
    /// joint endpoint threshold).
    #[default]
    MaxEndpoint,
    /// Mean final-step displacement over agents.
    MeanEndpoint,
    /// Mean displacement over agents and steps.
    MeanAde,
}

/// Aggregation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateConfig {
    /// Number of output modes (clusters).
    pub num_modes: usize,
    /// NMS suppression radius in meters.
    pub nms_threshold_m: f64,
    pub distance: JointDistanceKind,
    /// Greedy NMS criterion: raw neighbor counts by default; optionally
    /// weight each rollout by its recorded sample probability mass.
    pub weighted_counts: bool,
    /// Lloyd iteration cap.
    pub max_iterations: usize,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        Self {
            num_modes: 6,
            nms_threshold_m: 2.0,
            distance: JointDistanceKind::MaxEndpoint,
            weighted_counts: false,
            max_iterations: 50,
        }
    }
}

/// One weighted joint mode: per-agent waypoint tracks plus probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointMode {
    pub waypoints: Vec<Vec<Waypoint>>,
    pub probability: f64,
}

/// The aggregated output for one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointModeSet {
    pub scenario_id: String,
    pub modes: Vec<JointMode>,
}

impl JointModeSet {
    /// Modes ordered by descending probability (ties keep cluster order).
    pub fn most_likely(&self) -> &JointMode {
        &self.modes[0]
    }
}

/// Joint trajectory distance under the configured kind.
pub fn joint_distance(
    a: &[Vec<Waypoint>],
    b: &[Vec<Waypoint>],
    kind: JointDistanceKind,
) -> f64 {
    assert_eq!(a.len(), b.len(), "joint_distance: agent count {} vs {}", a.len(), b.len());
    assert!(
        a.iter().zip(b).all(|(x, y)| x.len() == y.len()),
        "joint_distance: step count mismatch"
    );
    match kind {
        JointDistanceKind::MaxEndpoint => a
            .iter()
            .zip(b)
            .map(|(ta, tb)| ta.last().unwrap().distance(tb.last().unwrap()))
            .fold(0.0, f64::max),
        JointDistanceKind::MeanEndpoint => {
            let sum: f64 = a
                .iter()
                .zip(b)
                .map(|(ta, tb)| ta.last().unwrap().distance(tb.last().unwrap()))
                .sum();
            sum / a.len() as f64
        }
        JointDistanceKind::MeanAde => {
            let mut sum = 0.0;
            let mut count = 0usize;
            for (ta, tb) in a.iter().zip(b) {
                for (pa, pb) in ta.iter().zip(tb) {
                    sum += pa.distance(pb);
                    count += 1;
                }
            }
            sum / count as f64
        }
    }
}

/// Greedy NMS seeding: repeatedly pick the rollout covering the most
/// remaining probability mass within the threshold (raw neighbor counts by
/// default), suppress everything within the threshold, repeat up to
/// `num_modes` times. Ties go to the lowest rollout index. Returns indices
/// into `trajectories`.
pub fn nms_select(
    trajectories: &[Vec<Vec<Waypoint>>],
    weights: &[f64],
    config: &AggregateConfig,
) -> Vec<usize> {
    assert_eq!(trajectories.len(), weights.len());
    let r = trajectories.len();
    let mut alive: Vec<bool> = vec![true; r];
    let mut seeds = Vec::new();
    while seeds.len() < config.num_modes {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..r {
            if !alive[i] {
                continue;
            }
            let mut mass = 0.0;
            for j in 0..r {
                if !alive[j] {
                    continue;
                }
                let d = joint_distance(&trajectories[i], &trajectories[j], config.distance);
                if d <= config.nms_threshold_m {
                    mass += if config.weighted_counts { weights[j] } else { 1.0 };
                }
            }
            if best.map_or(true, |(bm, _)| mass > bm) {
                best = Some((mass, i));
            }
        }
        let Some((_, pick)) = best else { break };
        seeds.push(pick);
        for j in 0..r {
            if alive[j] {
                let d = joint_distance(&trajectories[pick], &trajectories[j], config.distance);
                if d <= config.nms_threshold_m {
                    alive[j] = false;
                }
            }
        }
    }
    seeds
}

/// Lloyd refinement from NMS seeds: assign to the nearest centroid under the
/// configured joint distance, recompute centroids as per-agent per-step
/// means, iterate to an assignment fixpoint or `max_iterations`. Empty
/// clusters are dropped and probabilities renormalized. Mode probability is
/// the cluster's share of rollouts; output is ordered by descending
/// probability (stable on ties).
pub fn kmeans_refine(
    scenario_id: &str,
    trajectories: &[Vec<Vec<Waypoint>>],
    seeds: &[usize],
    config: &AggregateConfig,
) -> JointModeSet {
    assert!(!trajectories.is_empty(), "kmeans_refine on an empty rollout set");
    assert!(!seeds.is_empty(), "kmeans_refine needs at least one seed");
    let r = trajectories.len();
    let mut centroids: Vec<Vec<Vec<Waypoint>>> =
        seeds.iter().map(|&s| trajectories[s].clone()).collect();
    let mut assignment = vec![usize::MAX; r];

    for _ in 0..config.max_iterations {
        let mut changed = false;
        for (i, traj) in trajectories.iter().enumerate() {
            let mut best = (f64::INFINITY, 0usize);
            for (c, centroid) in centroids.iter().enumerate() {
                let d = joint_distance(traj, centroid, config.distance);
                if d < best.0 {
                    best = (d, c);
                }
            }
            if assignment[i] != best.1 {
                assignment[i] = best.1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<usize> = (0..r).filter(|&i| assignment[i] == c).collect();
            if members.is_empty() {
                continue; // keep the old centroid; it may still attract later
            }
            for (agent, track) in centroid.iter_mut().enumerate() {
                for (t, point) in track.iter_mut().enumerate() {
                    let mut x = 0.0;
                    let mut y = 0.0;
                    for &m in &members {
                        x += trajectories[m][agent][t].x;
                        y += trajectories[m][agent][t].y;
                    }
                    *point = Waypoint::new(x / members.len() as f64, y / members.len() as f64);
                }
            }
        }
    }

    let mut modes: Vec<JointMode> = Vec::new();
    for (c, centroid) in centroids.into_iter().enumerate() {
        let count = assignment.iter().filter(|&&a| a == c).count();
        if count == 0 {
            continue; // dropped; renormalization happens below
        }
        modes.push(JointMode {
            waypoints: centroid,
            probability: count as f64 / r as f64,
        });
    }
    let total: f64 = modes.iter().map(|m| m.probability).sum();
    for m in modes.iter_mut() {
        m.probability /= total;
    }
    modes.sort_by(|a, b| b.probability.partial_cmp(&a.probability).unwrap());
    JointModeSet {
        scenario_id: scenario_id.to_string(),
        modes,
    }
}

/// Full aggregation of one rollout set.
pub fn aggregate_rollouts(set: &RolloutSet, config: &AggregateConfig) -> JointModeSet {
    let trajectories: Vec<Vec<Vec<Waypoint>>> =
        set.samples.iter().map(|s| s.waypoints.clone()).collect();
    let weights: Vec<f64> = set
        .samples
        .iter()
        .map(|s| s.log_probs.iter().flatten().sum::<f64>().exp())
        .collect();
    let seeds = nms_select(&trajectories, &weights, config);
    kmeans_refine(&set.scenario_id, &trajectories, &seeds, config)
}

/// Concatenates rollout sets from independently trained replicas for one
/// scenario, replica-major, with provenance retained in `replica`.
pub fn ensemble_merge(sets: &[RolloutSet]) -> Result<RolloutSet> {
    let first = sets.first().ok_or_else(|| {
        CoreError::Contract("ensemble_merge needs at least one rollout set".into())
    })?;
    let mut merged = first.clone();
    for set in &sets[1..] {
        if set.scenario_id != first.scenario_id {
            return Err(CoreError::Contract(format!(
                "ensemble_merge: scenario id mismatch '{}' vs '{}'",
                set.scenario_id, first.scenario_id
            )));
        }
        if set.num_agents() != first.num_agents() || set.horizon() != first.horizon() {
            return Err(CoreError::Contract(
                "ensemble_merge: geometry mismatch between replicas".into(),
            ));
        }
        merged.samples.extend(set.samples.iter().cloned());
    }
    Ok(merged)
}

pub const MODE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeFileHeader {
    pub schema_version: u32,
    pub config_digest: String,
}

/// Mode files mirror the rollout format: header line, then one line per
/// scenario's mode set.
pub fn save_modes(sets: &[JointModeSet], config_digest: &str, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let header = ModeFileHeader {
        schema_version: MODE_SCHEMA_VERSION,
        config_digest: config_digest.to_string(),
    };
    serde_json::to_writer(&mut w, &header).map_err(|e| CoreError::Contract(e.to_string()))?;
    w.write_all(b"\n")?;
    for set in sets {
        serde_json::to_writer(&mut w, set).map_err(|e| CoreError::Contract(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_modes(path: &Path) -> Result<(Vec<JointModeSet>, ModeFileHeader)> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();
    let header: ModeFileHeader = match lines.next() {
        None => {
            return Err(CoreError::Malformed {
                line: 1,
                msg: "empty mode file (missing header)".into(),
            })
        }
        Some((_, line)) => {
            let line = line?;
            serde_json::from_str(&line).map_err(|e| CoreError::Malformed {
                line: 1,
                msg: format!("header: {e}"),
            })?
        }
    };
    let mut sets = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let set: JointModeSet = serde_json::from_str(&line).map_err(|e| CoreError::Malformed {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        sets.push(set);
    }
    Ok((sets, header))
}
