//! Evaluation suite: minADE/minFDE, miss rate, mAP and soft mAP over intent
//! buckets, and the prediction-overlap rate, in marginal (per-agent) and
//! scene-level joint variants.

mod obb;

pub use obb::{boxes_collide, OrientedBox};

use serde::{Deserialize, Serialize};

use crate::aggregate::JointModeSet;
use crate::error::{CoreError, Result};
use crate::scene::{infer_headings, wrap_angle, AgentType, Extent, Scenario, Waypoint};

/// Lateral/longitudinal miss thresholds per evaluation horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonThreshold {
    pub horizon_steps: usize,
    pub lateral_m: f64,
    pub longitudinal_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissThresholds {
    pub entries: Vec<HorizonThreshold>,
    /// Optional plain multiplier on both thresholds (speed scaling is off by
    /// default and not WOMD-exact).
    pub speed_scaling: Option<f64>,
}

impl MissThresholds {
    /// Defaults at 2 Hz: 3 s / 5 s / 8 s horizons.
    pub fn default_2hz() -> Self {
        Self {
            entries: vec![
                HorizonThreshold { horizon_steps: 6, lateral_m: 1.0, longitudinal_m: 2.0 },
                HorizonThreshold { horizon_steps: 10, lateral_m: 1.8, longitudinal_m: 3.6 },
                HorizonThreshold { horizon_steps: 16, lateral_m: 3.0, longitudinal_m: 6.0 },
            ],
            speed_scaling: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev = HorizonThreshold { horizon_steps: 0, lateral_m: 0.0, longitudinal_m: 0.0 };
        for e in &self.entries {
            if e.lateral_m <= 0.0 || e.longitudinal_m <= 0.0 {
                return Err(CoreError::Contract("thresholds must be positive".into()));
            }
            if e.horizon_steps <= prev.horizon_steps && prev.horizon_steps != 0 {
                return Err(CoreError::Contract("horizons must increase".into()));
            }
            if e.lateral_m < prev.lateral_m || e.longitudinal_m < prev.longitudinal_m {
                return Err(CoreError::Contract(
                    "thresholds must be monotone non-decreasing with horizon".into(),
                ));
            }
            prev = *e;
        }
        Ok(())
    }

    pub fn for_horizon(&self, horizon_steps: usize) -> Option<HorizonThreshold> {
        let scale = self.speed_scaling.unwrap_or(1.0);
        self.entries
            .iter()
            .find(|e| e.horizon_steps == horizon_steps)
            .map(|e| HorizonThreshold {
                horizon_steps: e.horizon_steps,
                lateral_m: e.lateral_m * scale,
                longitudinal_m: e.longitudinal_m * scale,
            })
    }

    pub fn horizons(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.horizon_steps).collect()
    }
}

/// Eight discrete classes of future intent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntentBucket {
    Straight,
    StraightLeft,
    StraightRight,
    Left,
    Right,
    LeftUTurn,
    RightUTurn,
    Stationary,
}

/// Classifier thresholds for [`intent_bucket`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntentThresholds {
    pub stationary_displacement_m: f64,
    pub straight_heading_deg: f64,
    pub uturn_heading_deg: f64,
    pub lateral_split_m: f64,
}

impl Default for IntentThresholds {
    fn default() -> Self {
        Self {
            stationary_displacement_m: 2.0,
            straight_heading_deg: 15.0,
            uturn_heading_deg: 135.0,
            lateral_split_m: 1.0,
        }
    }
}

/// Ground truth for one modeled agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentGroundTruth {
    pub waypoints: Vec<Waypoint>,
    pub initial_position: Waypoint,
    pub initial_heading: f64,
    pub extent: Extent,
    pub agent_type: AgentType,
    /// Headings along the future, index t-1 for step t (inferred).
    pub headings: Vec<f64>,
}

/// Ground truth for all modeled agents of one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub scenario_id: String,
    pub agents: Vec<AgentGroundTruth>,
}

impl GroundTruth {
    pub fn from_scenario(scenario: &Scenario) -> Result<Self> {
        let future = scenario.future.as_ref().ok_or_else(|| CoreError::Schema {
            scenario_id: Some(scenario.id.clone()),
            msg: "evaluation requires ground-truth futures".into(),
        })?;
        let agents = future
            .iter()
            .enumerate()
            .map(|(slot, track)| {
                let state = scenario.modeled_history(slot).current();
                let mut full = Vec::with_capacity(track.len() + 1);
                full.push(state.position);
                full.extend_from_slice(track);
                let headings = infer_headings(&full, state.heading)[1..].to_vec();
                AgentGroundTruth {
                    waypoints: track.clone(),
                    initial_position: state.position,
                    initial_heading: state.heading,
                    extent: state.extent,
                    agent_type: scenario.modeled_history(slot).agent_type,
                    headings,
                }
            })
            .collect();
        Ok(Self {
            scenario_id: scenario.id.clone(),
            agents,
        })
    }

    /// Object type attributed to the scene: its least common type over the
    /// whole dataset would need global counts, so the convention here is the
    /// rarest type class (cyclist < pedestrian < vehicle), ties by the
    /// fixed ordering.
    pub fn scene_type(&self) -> AgentType {
        let rank = |t: AgentType| match t {
            AgentType::Cyclist => 0,
            AgentType::Pedestrian => 1,
            AgentType::Vehicle => 2,
        };
        self.agents
            .iter()
            .map(|a| a.agent_type)
            .min_by_key(|&t| rank(t))
            .expect("non-empty agents")
    }

    /// Index of the agent attributing the scene's type (lowest index of the
    /// rarest class); its intent also buckets the scene for mAP.
    pub fn attributed_agent(&self) -> usize {
        let ty = self.scene_type();
        self.agents
            .iter()
            .position(|a| a.agent_type == ty)
            .expect("attributed type present")
    }
}

fn check_horizon(len: usize, horizon: usize) -> Result<()> {
    if horizon == 0 || horizon > len {
        return Err(CoreError::Contract(format!(
            "horizon {horizon} out of range for {len}-step tracks"
        )));
    }
    Ok(())
}

/// Marginal minADE for one agent: min over modes of the mean displacement of
/// that agent over steps 1..=horizon.
pub fn min_ade_marginal(
    modes: &JointModeSet,
    gt: &GroundTruth,
    agent: usize,
    horizon: usize,
) -> Result<f64> {
    check_horizon(gt.agents[agent].waypoints.len(), horizon)?;
    Ok(modes
        .modes
        .iter()
        .map(|m| {
            let pred = &m.waypoints[agent];
            (0..horizon)
                .map(|t| pred[t].distance(&gt.agents[agent].waypoints[t]))
                .sum::<f64>()
                / horizon as f64
        })
        .fold(f64::INFINITY, f64::min))
}

pub fn min_fde_marginal(
    modes: &JointModeSet,
    gt: &GroundTruth,
    agent: usize,
    horizon: usize,
) -> Result<f64> {
    check_horizon(gt.agents[agent].waypoints.len(), horizon)?;
    Ok(modes
        .modes
        .iter()
        .map(|m| m.waypoints[agent][horizon - 1].distance(&gt.agents[agent].waypoints[horizon - 1]))
        .fold(f64::INFINITY, f64::min))
}

/// Joint minADE: per mode, the ADE averages over agents BEFORE the min over
/// modes.
pub fn min_ade_joint(modes: &JointModeSet, gt: &GroundTruth, horizon: usize) -> Result<f64> {
    check_horizon(gt.agents[0].waypoints.len(), horizon)?;
    Ok(modes
        .modes
        .iter()
        .map(|m| {
            let per_agent: f64 = gt
                .agents
                .iter()
                .enumerate()
                .map(|(a, agt)| {
                    (0..horizon)
                        .map(|t| m.waypoints[a][t].distance(&agt.waypoints[t]))
                        .sum::<f64>()
                        / horizon as f64
                })
                .sum();
            per_agent / gt.agents.len() as f64
        })
        .fold(f64::INFINITY, f64::min))
}

pub fn min_fde_joint(modes: &JointModeSet, gt: &GroundTruth, horizon: usize) -> Result<f64> {
    check_horizon(gt.agents[0].waypoints.len(), horizon)?;
    Ok(modes
        .modes
        .iter()
        .map(|m| {
            let per_agent: f64 = gt
                .agents
                .iter()
                .enumerate()
                .map(|(a, agt)| m.waypoints[a][horizon - 1].distance(&agt.waypoints[horizon - 1]))
                .sum();
            per_agent / gt.agents.len() as f64
        })
        .fold(f64::INFINITY, f64::min))
}

/// Whether one agent's prediction stays within the lateral/longitudinal
/// thresholds of its ground truth at the horizon step. The displacement is
/// projected onto the ground-truth heading at that step.
pub fn agent_within_thresholds(
    pred: &[Waypoint],
    gt: &AgentGroundTruth,
    horizon: usize,
    thr: &HorizonThreshold,
) -> bool {
    let t = horizon - 1;
    let dx = pred[t].x - gt.waypoints[t].x;
    let dy = pred[t].y - gt.waypoints[t].y;
    let psi = gt.headings[t];
    let (s, c) = psi.sin_cos();
    let lon = dx * c + dy * s;
    let lat = -dx * s + dy * c;
    lon.abs() <= thr.longitudinal_m && lat.abs() <= thr.lateral_m
}

/// Joint hit: every agent within thresholds in the SAME mode.
pub fn mode_hits_joint(
    mode: &[Vec<Waypoint>],
    gt: &GroundTruth,
    horizon: usize,
    thr: &HorizonThreshold,
) -> bool {
    gt.agents
        .iter()
        .enumerate()
        .all(|(a, agt)| agent_within_thresholds(&mode[a], agt, horizon, thr))
}

/// Scene-level joint miss: no mode covers all agents.
pub fn is_miss_joint(
    modes: &JointModeSet,
    gt: &GroundTruth,
    horizon: usize,
    thr: &HorizonThreshold,
) -> bool {
    !modes
        .modes
        .iter()
        .any(|m| mode_hits_joint(&m.waypoints, gt, horizon, thr))
}

/// Marginal miss for one agent: no mode covers that agent.
pub fn is_miss_marginal(
    modes: &JointModeSet,
    gt: &GroundTruth,
    agent: usize,
    horizon: usize,
    thr: &HorizonThreshold,
) -> bool {
    !modes
        .modes
        .iter()
        .any(|m| agent_within_thresholds(&m.waypoints[agent], &gt.agents[agent], horizon, thr))
}

/// Fraction of scenes missed (joint rule).
pub fn miss_rate_joint(
    dataset: &[(JointModeSet, GroundTruth)],
    horizon: usize,
    thr: &HorizonThreshold,
) -> f64 {
    if dataset.is_empty() {
        return 0.0;
    }
    let misses = dataset
        .iter()
        .filter(|(m, g)| is_miss_joint(m, g, horizon, thr))
        .count();
    misses as f64 / dataset.len() as f64
}

/// Classifies a ground-truth future into one of the eight intent buckets.
pub fn intent_bucket(
    traj: &[Waypoint],
    initial_position: Waypoint,
    initial_heading: f64,
    thresholds: &IntentThresholds,
) -> IntentBucket {
    let end = *traj.last().expect("non-empty trajectory");
    let disp = end.distance(&initial_position);
    if disp < thresholds.stationary_displacement_m {
        return IntentBucket::Stationary;
    }
    let mut full = Vec::with_capacity(traj.len() + 1);
    full.push(initial_position);
    full.extend_from_slice(traj);
    let final_heading = *infer_headings(&full, initial_heading).last().unwrap();
    let dpsi = wrap_angle(final_heading - initial_heading);
    let dpsi_deg = dpsi.to_degrees();

    // Signed lateral displacement of the endpoint in the initial frame.
    let (s, c) = initial_heading.sin_cos();
    let ex = end.x - initial_position.x;
    let ey = end.y - initial_position.y;
    let lateral = -ex * s + ey * c;

    if dpsi_deg.abs() < thresholds.straight_heading_deg {
        if lateral > thresholds.lateral_split_m {
            IntentBucket::StraightLeft
        } else if lateral < -thresholds.lateral_split_m {
            IntentBucket::StraightRight
        } else {
            IntentBucket::Straight
        }
    } else if dpsi_deg.abs() <= thresholds.uturn_heading_deg {
        if dpsi > 0.0 {
            IntentBucket::Left
        } else {
            IntentBucket::Right
        }
    } else if dpsi > 0.0 {
        IntentBucket::LeftUTurn
    } else {
        IntentBucket::RightUTurn
    }
}

/// Scope of a metric computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricScope {
    /// Scene-level joint: hits require all agents within thresholds; scenes
    /// are bucketed by the attributed agent's intent.
    Joint,
    /// Single-agent: hits and buckets consider only this agent.
    Agent(usize),
}

/// Mean average precision with one true positive per scene.
///
/// Per intent bucket, all (mode, scene) entries sort by mode probability
/// descending (ties: dataset order, then mode index). The highest-confidence
/// hitting mode of a scene is its unique true positive; other hitting modes
/// are ignored under `soft`, false positives otherwise; non-hitting modes
/// are always false positives. Precision is interpolated at 11 recall
/// points and averaged over buckets present.
pub fn map_score(
    dataset: &[(JointModeSet, GroundTruth)],
    horizon: usize,
    thr: &HorizonThreshold,
    intent: &IntentThresholds,
    scope: MetricScope,
    soft: bool,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(CoreError::Contract("map_score on an empty dataset".into()));
    }
    use std::collections::BTreeMap;
    struct Entry {
        prob: f64,
        scene: usize,
        hit: bool,
    }
    let mut buckets: BTreeMap<IntentBucket, (usize, Vec<Entry>)> = BTreeMap::new();

    for (scene_idx, (modes, gt)) in dataset.iter().enumerate() {
        let bucket_agent = match scope {
            MetricScope::Joint => gt.attributed_agent(),
            MetricScope::Agent(a) => a,
        };
        let ba = &gt.agents[bucket_agent];
        let bucket = intent_bucket(&ba.waypoints, ba.initial_position, ba.initial_heading, intent);
        let slot = buckets.entry(bucket).or_insert_with(|| (0, Vec::new()));
        slot.0 += 1;
        for mode in &modes.modes {
            let hit = match scope {
                MetricScope::Joint => mode_hits_joint(&mode.waypoints, gt, horizon, thr),
                MetricScope::Agent(a) => {
                    agent_within_thresholds(&mode.waypoints[a], &gt.agents[a], horizon, thr)
                }
            };
            slot.1.push(Entry {
                prob: mode.probability,
                scene: scene_idx,
                hit,
            });
        }
    }

    let mut ap_sum = 0.0;
    let mut bucket_count = 0usize;
    for (_, (num_scenes, mut entries)) in buckets {
        entries.sort_by(|a, b| {
            b.prob
                .partial_cmp(&a.prob)
                .unwrap()
                .then(a.scene.cmp(&b.scene))
        });
        let mut matched = vec![false; dataset.len()];
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut curve: Vec<(f64, f64)> = Vec::new(); // (recall, precision)
        for e in &entries {
            if e.hit && !matched[e.scene] {
                matched[e.scene] = true;
                tp += 1;
            } else if e.hit && soft {
                continue; // ignored, not penalized
            } else {
                fp += 1;
            }
            let recall = tp as f64 / num_scenes as f64;
            let precision = tp as f64 / (tp + fp) as f64;
            curve.push((recall, precision));
        }
        let mut interp_sum = 0.0;
        for i in 0..=10 {
            let r = i as f64 / 10.0;
            let p = curve
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max);
            interp_sum += p;
        }
        ap_sum += interp_sum / 11.0;
        bucket_count += 1;
    }
    Ok(ap_sum / bucket_count as f64)
}

/// Fraction of scenes whose most-likely joint mode has any inter-agent
/// bounding-box collision at any step. Headings along predicted tracks are
/// inferred the same way as ground-truth headings; extents come from t=0.
pub fn prediction_overlap(dataset: &[(JointModeSet, GroundTruth)]) -> f64 {
    if dataset.is_empty() {
        return 0.0;
    }
    let overlaps = dataset
        .iter()
        .filter(|(modes, gt)| {
            let top = modes.most_likely();
            scene_has_overlap(&top.waypoints, gt)
        })
        .count();
    overlaps as f64 / dataset.len() as f64
}

/// Any-step, any-pair collision test for one joint trajectory.
pub fn scene_has_overlap(joint: &[Vec<Waypoint>], gt: &GroundTruth) -> bool {
    let n = gt.agents.len();
    let horizon = joint.first().map_or(0, |t| t.len());
    let boxes: Vec<Vec<OrientedBox>> = (0..n)
        .map(|a| {
            let mut full = Vec::with_capacity(horizon + 1);
            full.push(gt.agents[a].initial_position);
            full.extend_from_slice(&joint[a]);
            let headings = infer_headings(&full, gt.agents[a].initial_heading);
            (0..horizon)
                .map(|t| {
                    OrientedBox::new(
                        joint[a][t],
                        headings[t + 1],
                        gt.agents[a].extent.length,
                        gt.agents[a].extent.width,
                    )
                })
                .collect()
        })
        .collect();
    for t in 0..horizon {
        for a in 0..n {
            for b in (a + 1)..n {
                if boxes_collide(&boxes[a][t], &boxes[b][t]) {
                    return true;
                }
            }
        }
    }
    false
}

/// One row of metric values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricRow {
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub map: f64,
    pub soft_map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub horizon_steps: usize,
    pub joint: MetricRow,
}

/// Full evaluation: per-horizon joint metrics averaged over object types
/// present, the across-horizon average, and the overlap rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: MissThresholds,
    pub intent_thresholds: IntentThresholds,
    /// Precision/recall interpolation convention used by mAP.
    pub precision_interpolation: String,
    pub per_horizon: Vec<HorizonReport>,
    pub averaged: MetricRow,
    pub prediction_overlap: f64,
    pub num_scenes: usize,
}

/// Computes the full report over a dataset. Metrics are computed per scene
/// type (attributed by rarest class) and averaged over the types present,
/// then averaged over horizons.
pub fn evaluate(
    dataset: &[(JointModeSet, GroundTruth)],
    thresholds: &MissThresholds,
    intent: &IntentThresholds,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(CoreError::Contract("evaluate on an empty dataset".into()));
    }
    thresholds.validate()?;
    let mut types: Vec<AgentType> = dataset.iter().map(|(_, g)| g.scene_type()).collect();
    types.sort();
    types.dedup();

    let mut per_horizon = Vec::new();
    for &h in &thresholds.horizons() {
        let thr = thresholds.for_horizon(h).unwrap();
        let mut acc = MetricRow::default();
        for &ty in &types {
            let subset: Vec<(JointModeSet, GroundTruth)> = dataset
                .iter()
                .filter(|(_, g)| g.scene_type() == ty)
                .cloned()
                .collect();
            let mut ade = 0.0;
            let mut fde = 0.0;
            for (m, g) in &subset {
                ade += min_ade_joint(m, g, h)?;
                fde += min_fde_joint(m, g, h)?;
            }
            acc.min_ade += ade / subset.len() as f64;
            acc.min_fde += fde / subset.len() as f64;
            acc.miss_rate += miss_rate_joint(&subset, h, &thr);
            acc.map += map_score(&subset, h, &thr, intent, MetricScope::Joint, false)?;
            acc.soft_map += map_score(&subset, h, &thr, intent, MetricScope::Joint, true)?;
        }
        let k = types.len() as f64;
        per_horizon.push(HorizonReport {
            horizon_steps: h,
            joint: MetricRow {
                min_ade: acc.min_ade / k,
                min_fde: acc.min_fde / k,
                miss_rate: acc.miss_rate / k,
                map: acc.map / k,
                soft_map: acc.soft_map / k,
            },
        });
    }

    let n = per_horizon.len() as f64;
    let averaged = MetricRow {
        min_ade: per_horizon.iter().map(|r| r.joint.min_ade).sum::<f64>() / n,
        min_fde: per_horizon.iter().map(|r| r.joint.min_fde).sum::<f64>() / n,
        miss_rate: per_horizon.iter().map(|r| r.joint.miss_rate).sum::<f64>() / n,
        map: per_horizon.iter().map(|r| r.joint.map).sum::<f64>() / n,
        soft_map: per_horizon.iter().map(|r| r.joint.soft_map).sum::<f64>() / n,
    };

    Ok(EvalReport {
        thresholds: thresholds.clone(),
        intent_thresholds: *intent,
        precision_interpolation: "11-point interpolated precision".to_string(),
        per_horizon,
        averaged,
        prediction_overlap: prediction_overlap(dataset),
        num_scenes: dataset.len(),
    })
}
