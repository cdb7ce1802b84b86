//! Ego-relative featurization of scene inputs for the encoder.
//!
//! Every agent history step and every roadgraph point becomes one input row
//! expressed in the ego agent's t=0 frame. There is no positional encoding
//! across rows: the encoder treats the scene as a set.

use crate::error::{CoreError, Result};
use crate::scene::{
    rotate_into_frame, to_agent_frame, AgentFrame, AgentType, PolylineKind, Scenario, Waypoint,
};

/// Width of one input feature row.
pub const FEATURE_DIM: usize = 18;

/// Positions and velocities are scaled to roughly unit range at driving
/// scales before entering the network.
pub const POS_SCALE: f64 = 0.1;

/// Featurized scene for one ego view: `rows x FEATURE_DIM`, plus per-row
/// attention validity.
#[derive(Debug, Clone)]
pub struct SceneFeatures {
    pub rows: usize,
    pub data: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Number of input rows a scenario produces (same for every ego view).
pub fn input_rows(scenario: &Scenario) -> usize {
    let agent_rows: usize = scenario.history.iter().map(|h| h.states.len()).sum();
    let road_rows: usize = scenario.roadgraph.iter().map(|p| p.points.len()).sum();
    agent_rows + road_rows
}

/// Builds the feature matrix for `ego_slot` (an index into
/// `scenario.modeled_agents`). Invalid history entries produce a zero row
/// that is also masked out of attention.
pub fn scene_features(scenario: &Scenario, ego_slot: usize) -> Result<SceneFeatures> {
    let ego_idx = *scenario
        .modeled_agents
        .get(ego_slot)
        .ok_or_else(|| CoreError::Contract(format!("ego slot {ego_slot} out of range")))?;
    let ego_state = scenario.history[ego_idx].current();
    let frame = AgentFrame::from_state(ego_state);

    let rows = input_rows(scenario);
    let mut data = Vec::with_capacity(rows * FEATURE_DIM);
    let mut valid = Vec::with_capacity(rows);
    let mut any_valid = false;

    for (a_idx, track) in scenario.history.iter().enumerate() {
        let steps = track.states.len();
        for (s_idx, state) in track.states.iter().enumerate() {
            if !state.valid {
                data.extend_from_slice(&[0.0; FEATURE_DIM]);
                valid.push(false);
                continue;
            }
            any_valid = true;
            valid.push(true);
            let pos = to_agent_frame(std::slice::from_ref(&state.position), &frame)[0];
            let vel = rotate_into_frame(state.velocity, frame.rotation);
            let rel_heading = state.heading - frame.rotation;
            let t_off = s_idx as f64 - (steps as f64 - 1.0);
            let is_ego = if a_idx == ego_idx { 1.0 } else { 0.0 };
            let ty = type_one_hot(track.agent_type);
            data.extend_from_slice(&[
                pos.x * POS_SCALE,
                pos.y * POS_SCALE,
                rel_heading.cos(),
                rel_heading.sin(),
                vel[0] * POS_SCALE,
                vel[1] * POS_SCALE,
                state.extent.length * POS_SCALE,
                state.extent.width * POS_SCALE,
                t_off,
                1.0, // valid flag as a feature
                1.0, // is_agent
                0.0, // is_road
                ty[0],
                ty[1],
                ty[2],
                0.0, // lane center
                0.0, // road edge
                is_ego,
            ]);
        }
    }

    for polyline in &scenario.roadgraph {
        let pts = to_agent_frame(&polyline.points, &frame);
        for (i, p) in pts.iter().enumerate() {
            // Segment direction towards the next point (previous at the end).
            let dir = segment_dir(&pts, i);
            let (lane, edge) = match polyline.kind {
                PolylineKind::LaneCenter => (1.0, 0.0),
                PolylineKind::RoadEdge => (0.0, 1.0),
            };
            any_valid = true;
            valid.push(true);
            data.extend_from_slice(&[
                p.x * POS_SCALE,
                p.y * POS_SCALE,
                dir[0],
                dir[1],
                0.0,
                0.0,
                0.0,
                0.0,
                0.0,
                1.0,
                0.0, // is_agent
                1.0, // is_road
                0.0,
                0.0,
                0.0,
                lane,
                edge,
                0.0,
            ]);
        }
    }

    if !any_valid {
        return Err(CoreError::EmptyScene(scenario.id.clone()));
    }
    Ok(SceneFeatures { rows, data, valid })
}

fn type_one_hot(t: AgentType) -> [f64; 3] {
    match t {
        AgentType::Vehicle => [1.0, 0.0, 0.0],
        AgentType::Pedestrian => [0.0, 1.0, 0.0],
        AgentType::Cyclist => [0.0, 0.0, 1.0],
    }
}

fn segment_dir(pts: &[Waypoint], i: usize) -> [f64; 2] {
    let (a, b) = if i + 1 < pts.len() {
        (pts[i], pts[i + 1])
    } else if i > 0 {
        (pts[i - 1], pts[i])
    } else {
        return [0.0, 0.0];
    };
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len = (dx * dx + dy * dy).sqrt();
    if len < 1e-9 {
        [0.0, 0.0]
    } else {
        [dx / len, dy / len]
    }
}
