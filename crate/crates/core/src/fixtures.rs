//! Deterministic miniature scenarios for tests and benches. The real
//! synthetic families live in the harness; these are just enough scene to
//! drive the model end to end.

use crate::scene::{
    AgentHistory, AgentState, AgentType, Extent, Polyline, PolylineKind, Scenario, ScenarioSet,
    Waypoint,
};

/// A straight-lane scenario with two constant-velocity vehicles.
///
/// Agent 0 drives +x at `speed0` m per step from the origin area; agent 1
/// drives parallel in an adjacent lane at `speed1`. History holds 3 states
/// at the same per-step speeds.
pub fn two_lane_scene(id: &str, horizon: usize, speed0: f64, speed1: f64) -> Scenario {
    let mk_track = |y: f64, speed: f64| {
        let states = (0..3)
            .map(|i| {
                let t = i as f64 - 2.0;
                AgentState {
                    position: Waypoint::new(t * speed, y),
                    heading: 0.0,
                    velocity: [speed * 2.0, 0.0],
                    extent: Extent {
                        length: 4.5,
                        width: 2.0,
                    },
                    valid: true,
                }
            })
            .collect();
        AgentHistory {
            agent_type: AgentType::Vehicle,
            states,
        }
    };
    let future = |y: f64, speed: f64| -> Vec<Waypoint> {
        (1..=horizon)
            .map(|t| Waypoint::new(t as f64 * speed, y))
            .collect()
    };
    Scenario {
        id: id.to_string(),
        history: vec![mk_track(0.0, speed0), mk_track(4.0, speed1)],
        roadgraph: vec![
            Polyline {
                kind: PolylineKind::LaneCenter,
                points: (0..8).map(|i| Waypoint::new(i as f64 * 10.0 - 10.0, 0.0)).collect(),
            },
            Polyline {
                kind: PolylineKind::LaneCenter,
                points: (0..8).map(|i| Waypoint::new(i as f64 * 10.0 - 10.0, 4.0)).collect(),
            },
            Polyline {
                kind: PolylineKind::RoadEdge,
                points: (0..8).map(|i| Waypoint::new(i as f64 * 10.0 - 10.0, -3.0)).collect(),
            },
        ],
        modeled_agents: vec![0, 1],
        future: Some(vec![future(0.0, speed0), future(4.0, speed1)]),
        meta: Default::default(),
    }
}

/// A small constant-velocity training set with varied speeds.
pub fn constant_velocity_set(count: usize, horizon: usize) -> ScenarioSet {
    let scenarios = (0..count)
        .map(|i| {
            let speed0 = 1.0 + (i % 5) as f64;
            let speed1 = 1.5 + (i % 7) as f64 * 0.8;
            two_lane_scene(&format!("cv_{i}"), horizon, speed0, speed1)
        })
        .collect();
    ScenarioSet::new(horizon, scenarios).expect("fixture set is valid")
}
