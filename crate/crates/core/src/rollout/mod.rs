//! Autoregressive joint sampling and the three prediction settings:
//! marginal, temporally causal conditional, and acausal conditional.
//!
//! All rollouts of a scenario run batched: the scene is encoded once, the
//! embeddings are reused across rollouts, and each rollout draws from its
//! own deterministically derived RNG stream, so a set is reproducible and
//! order-independent of any scheduling.

mod incremental;
mod io;
mod sampler;

pub use incremental::{log_softmax_at, project_logits, softmax_vec, IncrementalDecoder};
pub use io::{load_rollouts, save_rollouts, RolloutFileHeader, ROLLOUT_SCHEMA_VERSION};
pub use sampler::{nucleus_distribution, sample_nucleus};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{
    agent_frame_seed, build_acausal_mask, build_decoder_mask, decoder_forward, encode_scene,
    position_of, FlatSequence, Model,
};
use crate::scene::{from_agent_frame, AgentFrame, Scenario, Waypoint};
use crate::tokenizer::{detokenize, tokenize_trajectory, MotionToken, TokenRow};

/// Prediction setting for a rollout set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RolloutMode {
    /// No cross-agent token visibility (interval forced to the horizon).
    Marginal,
    /// Joint decoding under the model's staircase mask.
    Joint,
    /// Query agent forced, targets see only its past tokens.
    ConditionalCausal { query_agent: usize },
    /// Query agent forced with its full trajectory leaked to targets.
    ConditionalAcausal { query_agent: usize },
}

impl RolloutMode {
    pub fn query_agent(&self) -> Option<usize> {
        match self {
            RolloutMode::ConditionalCausal { query_agent }
            | RolloutMode::ConditionalAcausal { query_agent } => Some(*query_agent),
            _ => None,
        }
    }

    pub fn is_acausal(&self) -> bool {
        matches!(self, RolloutMode::ConditionalAcausal { .. })
    }
}

/// Sampling configuration for one rollout set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub num_rollouts: usize,
    pub top_p: f64,
    /// Interactive attention interval during decoding; `Marginal` mode
    /// overrides it with the horizon.
    pub attention_interval: usize,
    pub rng_seed: u64,
    pub mode: RolloutMode,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            num_rollouts: 64,
            top_p: 0.95,
            attention_interval: 1,
            rng_seed: 0,
            mode: RolloutMode::Joint,
        }
    }
}

/// One sampled joint future.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointRollout {
    /// Token rows per modeled agent.
    pub tokens: Vec<TokenRow>,
    /// Decoded world-frame waypoints per agent, `horizon` steps.
    pub waypoints: Vec<Vec<Waypoint>>,
    /// Per agent, per step: log of the model conditional of the chosen
    /// token. Zero for the query agent under acausal conditioning, where its
    /// rows are not model conditionals.
    pub log_probs: Vec<Vec<f64>>,
}

/// A batch of sampled joint futures for one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSet {
    pub scenario_id: String,
    pub mode: RolloutMode,
    pub seed: u64,
    pub attention_interval: usize,
    pub top_p: f64,
    /// Which trained replica produced this set (for ensembling).
    pub replica: usize,
    /// Largest per-coordinate reconstruction error of the re-tokenized query
    /// trajectory, for conditional modes.
    pub query_recon_error: Option<f64>,
    pub samples: Vec<JointRollout>,
}

impl RolloutSet {
    pub fn num_agents(&self) -> usize {
        self.samples.first().map_or(0, |s| s.tokens.len())
    }

    pub fn horizon(&self) -> usize {
        self.samples
            .first()
            .map_or(0, |s| s.tokens[0].tokens.len())
    }
}

/// Effective mask interval for a mode.
fn effective_interval(config: &RolloutConfig, horizon: usize) -> usize {
    match config.mode {
        RolloutMode::Marginal => horizon.max(config.attention_interval),
        _ => config.attention_interval,
    }
}

/// Joint or marginal sampling (no forced agents).
pub fn rollout_joint(model: &Model, scenario: &Scenario, config: &RolloutConfig) -> Result<RolloutSet> {
    match config.mode {
        RolloutMode::Marginal | RolloutMode::Joint => sample_rollouts(model, scenario, config, None),
        _ => Err(CoreError::Contract(
            "rollout_joint requires Marginal or Joint mode".into(),
        )),
    }
}

/// Conditional sampling with the query agent forced to `query_row`.
pub fn rollout_conditional(
    model: &Model,
    scenario: &Scenario,
    config: &RolloutConfig,
    query_row: &TokenRow,
) -> Result<RolloutSet> {
    if config.mode.query_agent().is_none() {
        return Err(CoreError::Contract(
            "rollout_conditional requires a conditional mode".into(),
        ));
    }
    if query_row.tokens.len() != model.config.horizon {
        return Err(CoreError::Contract(format!(
            "query token row has {} steps, model horizon is {}",
            query_row.tokens.len(),
            model.config.horizon
        )));
    }
    sample_rollouts(model, scenario, config, Some(query_row.clone()))
}

/// Mode dispatcher. Conditional modes tokenize the query agent's
/// ground-truth future as the forced trajectory (waypoints in, tokens out;
/// the reconstruction error is recorded on the set).
pub fn run_rollout(model: &Model, scenario: &Scenario, config: &RolloutConfig) -> Result<RolloutSet> {
    match config.mode.query_agent() {
        None => rollout_joint(model, scenario, config),
        Some(agent) => {
            let (row, err) = tokenize_query_future(model, scenario, agent)?;
            let mut set = rollout_conditional(model, scenario, config, &row)?;
            set.query_recon_error = Some(err);
            Ok(set)
        }
    }
}

/// Tokenizes the query agent's ground-truth future in its own frame,
/// returning the row and its max per-coordinate reconstruction error.
pub fn tokenize_query_future(
    model: &Model,
    scenario: &Scenario,
    query_agent: usize,
) -> Result<(TokenRow, f64)> {
    let future = scenario.future.as_ref().ok_or_else(|| CoreError::Schema {
        scenario_id: Some(scenario.id.clone()),
        msg: "conditional rollout requires a ground-truth future for the query agent".into(),
    })?;
    if query_agent >= scenario.num_modeled() {
        return Err(CoreError::Contract(format!(
            "query agent {query_agent} out of range 0..{}",
            scenario.num_modeled()
        )));
    }
    let track = scenario.modeled_history(query_agent);
    let frame = AgentFrame::from_state(track.current());
    let mut world = vec![track.current().position];
    world.extend_from_slice(&future[query_agent]);
    let local = crate::scene::to_agent_frame(&world, &frame);
    let seed = agent_frame_seed(&model.config.vocab, track, &frame);
    let tk = tokenize_trajectory(&model.config.vocab, &local, seed);
    let err = tk.max_coord_error(&local[1..]);
    Ok((tk.row, err))
}

fn sample_rollouts(
    model: &Model,
    scenario: &Scenario,
    config: &RolloutConfig,
    query: Option<TokenRow>,
) -> Result<RolloutSet> {
    let cfg = &model.config;
    let n = cfg.num_agents;
    let horizon = cfg.horizon;
    let interval = effective_interval(config, horizon);
    let query_agent = config.mode.query_agent();
    let acausal = config.mode.is_acausal();
    scenario.validate(horizon)?;
    if scenario.num_modeled() != n {
        return Err(CoreError::Schema {
            scenario_id: Some(scenario.id.clone()),
            msg: format!("model expects {n} agents, scenario has {}", scenario.num_modeled()),
        });
    }

    let mask = if acausal {
        build_acausal_mask(n, horizon, interval, query_agent.unwrap())
    } else {
        build_decoder_mask(n, horizon, interval)
    };

    let scene = encode_scene(model, scenario)?;
    let r = config.num_rollouts;
    let mut dec = IncrementalDecoder::new(model, &scene, mask, r);

    // Verlet seeds per agent, in each agent's own frame.
    let frames: Vec<AgentFrame> = (0..n)
        .map(|slot| AgentFrame::from_state(scenario.modeled_history(slot).current()))
        .collect();
    let seeds: Vec<_> = (0..n)
        .map(|slot| agent_frame_seed(&cfg.vocab, scenario.modeled_history(slot), &frames[slot]))
        .collect();

    let start_id = cfg.vocab.vocab_size();
    // One stream per (rollout, agent): rollouts stay independent of each
    // other and of how many agents are forced.
    let mut rngs: Vec<Vec<ChaCha8Rng>> = (0..r)
        .map(|i| {
            (0..n)
                .map(|agent| {
                    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
                    rng.set_stream((i * n + agent) as u64);
                    rng
                })
                .collect()
        })
        .collect();

    // tokens[rollout][agent][step]
    let mut tokens = vec![vec![Vec::with_capacity(horizon); n]; r];
    let mut log_probs = vec![vec![Vec::with_capacity(horizon); n]; r];

    // Acausal prefill: run the query track through all layers up front so
    // targets can attend to its full future.
    if acausal {
        let q = query_agent.unwrap();
        let qrow = query.as_ref().unwrap();
        for t in 1..=horizon {
            let pos = position_of(q, t, n);
            // Unshifted inputs: position (q, t) embeds the forced token of
            // step t, which exposes the whole trajectory to targets.
            let id = qrow.tokens[t - 1].id();
            let ids = vec![id; r * n];
            dec.advance(&[pos], &ids);
        }
        for rollout in 0..r {
            for t in 0..horizon {
                tokens[rollout][q].push(qrow.tokens[t]);
                log_probs[rollout][q].push(0.0);
            }
        }
    }

    let groups = r * n;
    for t in 1..=horizon {
        let step_agents: Vec<usize> = (0..n)
            .filter(|&a| !(acausal && Some(a) == query_agent))
            .collect();
        let positions: Vec<usize> = step_agents.iter().map(|&a| position_of(a, t, n)).collect();
        // Input ids per group: token of step t-1 (start token at t=1).
        let mut ids = Vec::with_capacity(groups * positions.len());
        for g in 0..groups {
            let rollout = g / n;
            for &agent in &step_agents {
                let id = if t == 1 {
                    start_id
                } else {
                    tokens[rollout][agent][t - 2].id()
                };
                ids.push(id);
            }
        }
        let hidden = dec.advance(&positions, &ids);
        let h = cfg.decoder.hidden;
        let np = positions.len();

        // Sample (or force) each agent's token from its own ego view.
        for rollout in 0..r {
            for (j, &agent) in step_agents.iter().enumerate() {
                let g = rollout * n + agent; // view == agent
                let row = &hidden[(g * np + j) * h..(g * np + j + 1) * h];
                let logits = project_logits(model, row);
                let chosen = match (&query, query_agent) {
                    (Some(qrow), Some(q)) if q == agent => qrow.tokens[t - 1].id(),
                    _ => {
                        let probs = softmax_vec(&logits);
                        sample_nucleus(&probs, config.top_p, &mut rngs[rollout][agent])
                    }
                };
                tokens[rollout][agent].push(MotionToken(chosen as u32));
                log_probs[rollout][agent].push(log_softmax_at(&logits, chosen));
            }
        }
    }

    // Decode waypoints through each agent's frame.
    let samples = (0..r)
        .map(|rollout| {
            let rows: Vec<TokenRow> = (0..n)
                .map(|agent| TokenRow {
                    tokens: tokens[rollout][agent].clone(),
                    seed: seeds[agent],
                })
                .collect();
            let waypoints = rows
                .iter()
                .enumerate()
                .map(|(agent, row)| {
                    let local = detokenize(&cfg.vocab, row, Waypoint::new(0.0, 0.0));
                    from_agent_frame(&local, &frames[agent])
                })
                .collect();
            JointRollout {
                tokens: rows,
                waypoints,
                log_probs: log_probs[rollout].clone(),
            }
        })
        .collect();

    Ok(RolloutSet {
        scenario_id: scenario.id.clone(),
        mode: config.mode,
        seed: config.rng_seed,
        attention_interval: interval,
        top_p: config.top_p,
        replica: 0,
        query_recon_error: None,
        samples,
    })
}

/// Recomputes per-step log-probabilities of a sample by teacher-forcing its
/// tokens through the full-sequence decoder under the same mode. Query-agent
/// rows under acausal conditioning are reported as zero, mirroring sampling.
pub fn recompute_log_probs(
    model: &Model,
    scenario: &Scenario,
    set: &RolloutSet,
    sample_idx: usize,
) -> Result<Vec<Vec<f64>>> {
    let cfg = &model.config;
    let n = cfg.num_agents;
    let horizon = cfg.horizon;
    let sample = &set.samples[sample_idx];
    let interval = set.attention_interval;
    let acausal = set.mode.is_acausal();
    let query_agent = set.mode.query_agent();

    let mask = if acausal {
        build_acausal_mask(n, horizon, interval, query_agent.unwrap())
    } else {
        build_decoder_mask(n, horizon, interval)
    };
    let sequence = if acausal {
        FlatSequence::acausal(cfg, &sample.tokens, query_agent.unwrap(), horizon)
    } else {
        FlatSequence::teacher_forced(cfg, &sample.tokens, horizon)
    };
    let scene = encode_scene(model, scenario)?;
    let logits = decoder_forward(model, &scene, &sequence, &mask);
    let vocab = cfg.vocab.vocab_size();

    let mut out = vec![Vec::with_capacity(horizon); n];
    for agent in 0..n {
        for t in 1..=horizon {
            if acausal && Some(agent) == query_agent {
                out[agent].push(0.0);
                continue;
            }
            let p = position_of(agent, t, n);
            let row = &logits.data()[p * vocab..(p + 1) * vocab];
            out[agent].push(log_softmax_at(row, sample.tokens[agent].tokens[t - 1].id()));
        }
    }
    Ok(out)
}
