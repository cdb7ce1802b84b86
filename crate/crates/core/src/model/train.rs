//! Teacher-forced training step: tokenize ground-truth futures, run one
//! batched decoder pass per ego view, average cross-entropy over all agent
//! positions, and apply one AdamW update.

use std::sync::Arc;

use crate::error::{CoreError, Result};
use crate::numeric::{adamw_step, AdamHyper, AdamState, Tape};
use crate::scene::{to_agent_frame, AgentFrame, AgentHistory, Scenario};
use crate::tokenizer::{
    quantize_delta, seed_from_history, tokenize_trajectory, MotionVocabulary, RawIndexPair,
    TokenRow,
};

use super::decoder::{decoder_forward_batch, FlatSequence};
use super::encoder::encode_scene_batch;
use super::mask::{build_decoder_mask, position_of};
use super::{Model, ModelConfig, ParamVars};

/// Verlet seed for an agent, in its own t=0 frame: the last observed
/// per-step delta rotated into the frame and quantized.
pub fn agent_frame_seed(
    vocab: &MotionVocabulary,
    track: &AgentHistory,
    frame: &AgentFrame,
) -> RawIndexPair {
    let mut recent = track.states.iter().rev().filter(|s| s.valid);
    let (Some(last), Some(before)) = (recent.next(), recent.next()) else {
        return seed_from_history(vocab, &track.states);
    };
    let pts = to_agent_frame(&[before.position, last.position], frame);
    RawIndexPair::new(
        quantize_delta(vocab, pts[1].x - pts[0].x),
        quantize_delta(vocab, pts[1].y - pts[0].y),
    )
}

/// Tokenizes the ground-truth future of every modeled agent in its own
/// frame. Errors if the scenario has no future.
pub fn tokenize_future(config: &ModelConfig, scenario: &Scenario) -> Result<Vec<TokenRow>> {
    let future = scenario.future.as_ref().ok_or_else(|| CoreError::Schema {
        scenario_id: Some(scenario.id.clone()),
        msg: "training requires ground-truth futures".into(),
    })?;
    let mut rows = Vec::with_capacity(config.num_agents);
    for (slot, track_future) in future.iter().enumerate() {
        let track = scenario.modeled_history(slot);
        let frame = AgentFrame::from_state(track.current());
        let mut world = Vec::with_capacity(track_future.len() + 1);
        world.push(track.current().position);
        world.extend_from_slice(track_future);
        let local = to_agent_frame(&world, &frame);
        let seed = agent_frame_seed(&config.vocab, track, &frame);
        rows.push(tokenize_trajectory(&config.vocab, &local, seed).row);
    }
    Ok(rows)
}

/// Flattened target token ids, time-major, for one scenario.
pub fn target_rows(config: &ModelConfig, rows: &[TokenRow]) -> Vec<usize> {
    let n = config.num_agents;
    let mut out = Vec::with_capacity(config.seq_len());
    for t in 1..=config.horizon {
        for row in rows.iter() {
            out.push(row.tokens[t - 1].id());
        }
    }
    debug_assert_eq!(out.len(), n * config.horizon);
    out
}

/// Teacher-forced inputs for one scenario (start token + shifted targets).
pub fn teacher_inputs(config: &ModelConfig, rows: &[TokenRow]) -> FlatSequence {
    FlatSequence::teacher_forced(config, rows, config.horizon)
}

/// Result of one training step.
#[derive(Debug, Clone, Copy)]
pub struct TrainStepOutput {
    pub loss: f64,
}

/// One teacher-forced step over a batch of scenarios at learning rate `lr`.
/// The loss averages cross-entropy over every (agent, step) position of every
/// scenario, reading agent `n`'s logits from ego view `n`.
pub fn train_step(
    model: &mut Model,
    scenarios: &[&Scenario],
    state: &mut AdamState,
    hyper: &AdamHyper,
    lr: f64,
) -> Result<TrainStepOutput> {
    assert!(!scenarios.is_empty(), "empty training batch");
    let config = model.config.clone();
    let n = config.num_agents;
    let seq = config.seq_len();
    let mask = build_decoder_mask(n, config.horizon, config.attention_interval);

    let mut sequences = Vec::with_capacity(scenarios.len());
    let mut targets = Vec::with_capacity(scenarios.len());
    for s in scenarios {
        let rows = tokenize_future(&config, s)?;
        sequences.push(teacher_inputs(&config, &rows));
        targets.push(target_rows(&config, &rows));
    }

    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, &model.params, true);
    let scene = encode_scene_batch(&mut tape, &vars, &config, scenarios)?;
    // Group order is (scenario, ego view); every view of a scenario shares
    // the same flattened token inputs.
    let seq_refs: Vec<&FlatSequence> = scenarios
        .iter()
        .enumerate()
        .flat_map(|(b, _)| std::iter::repeat(&sequences[b]).take(n))
        .collect();
    let logits = decoder_forward_batch(&mut tape, &vars, &config, scene, &seq_refs, &mask);

    // Loss rows: agent n of scenario b reads from group b*n + n.
    let mut rows = Vec::with_capacity(scenarios.len() * seq);
    let mut flat_targets = Vec::with_capacity(scenarios.len() * seq);
    for b in 0..scenarios.len() {
        for agent in 0..n {
            let group = b * n + agent;
            for t in 1..=config.horizon {
                let p = position_of(agent, t, n);
                rows.push(group * seq + p);
                flat_targets.push(targets[b][p]);
            }
        }
    }
    let picked = tape.gather_rows(logits, Arc::new(rows));
    let loss_var = tape.cross_entropy_mean(picked, Arc::new(flat_targets));
    let loss = tape.item(loss_var);

    if !loss.is_finite() {
        return Err(CoreError::Diverged {
            step: state.step as usize,
            loss,
        });
    }

    let grads = tape.backward(loss_var);
    let grad_slices = vars.gradients(&grads);
    adamw_step(model.params.tensors_mut(), &grad_slices, state, lr, hyper);
    Ok(TrainStepOutput { loss })
}
