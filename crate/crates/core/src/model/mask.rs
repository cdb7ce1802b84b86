//! Decoder attention masks over flattened agent-time sequences.
//!
//! Positions are time-major: `p = (t - 1) * N + n` for step `t` in `1..=T`
//! and agent `n`. The input at step `t` is the token of step `t-1` (a
//! learned start token at `t = 1`), so position visibility is one step
//! behind token visibility.

use std::sync::Arc;

use crate::numeric::AdditiveMask;

/// The blocked causal mask for joint decoding, plus its defining geometry.
#[derive(Debug, Clone)]
pub struct DecoderMask {
    pub num_agents: usize,
    pub horizon: usize,
    /// Interactive attention interval in steps: cross-agent positions are
    /// visible only up to the last multiple of `interval` before the
    /// querying step.
    pub interval: usize,
    mask: Arc<AdditiveMask>,
}

impl DecoderMask {
    pub fn additive(&self) -> &Arc<AdditiveMask> {
        &self.mask
    }

    pub fn seq_len(&self) -> usize {
        self.num_agents * self.horizon
    }

    /// Whether query position `p` may attend to key position `q`.
    pub fn is_visible(&self, p: usize, q: usize) -> bool {
        self.mask.is_visible(p, q)
    }
}

/// Agent index of a flattened position.
pub fn agent_of(pos: usize, num_agents: usize) -> usize {
    pos % num_agents
}

/// 1-indexed step of a flattened position.
pub fn step_of(pos: usize, num_agents: usize) -> usize {
    pos / num_agents + 1
}

/// Flattened position of `(agent, step)` with `step` 1-indexed.
pub fn position_of(agent: usize, step: usize, num_agents: usize) -> usize {
    (step - 1) * num_agents + agent
}

fn staircase_visible(p: usize, q: usize, num_agents: usize, interval: usize) -> bool {
    let (ap, tp) = (agent_of(p, num_agents), step_of(p, num_agents));
    let (aq, tq) = (agent_of(q, num_agents), step_of(q, num_agents));
    if ap == aq {
        tq <= tp
    } else {
        tq <= (tp - 1) / interval * interval
    }
}

/// Builds the staircase mask: each agent sees its own positions causally and
/// other agents' positions only up to the most recent multiple of
/// `interval` strictly before its own step. `interval >= horizon` removes
/// cross-agent visibility entirely (marginal decoding).
pub fn build_decoder_mask(num_agents: usize, horizon: usize, interval: usize) -> DecoderMask {
    assert!(num_agents >= 1 && horizon >= 1 && interval >= 1, "mask dims must be >= 1");
    let s = num_agents * horizon;
    let mask = AdditiveMask::from_visibility(s, s, |p, q| {
        staircase_visible(p, q, num_agents, interval)
    });
    DecoderMask {
        num_agents,
        horizon,
        interval,
        mask: Arc::new(mask),
    }
}

/// Mask for acausal conditioning on `query_agent`: target positions
/// additionally see every one of the query agent's positions, while the
/// query's own rows keep to their own track (their incoming cross-agent
/// edges are cut, matching the intervention semantics; their outputs are
/// unused since the query's tokens are forced).
pub fn build_acausal_mask(
    num_agents: usize,
    horizon: usize,
    interval: usize,
    query_agent: usize,
) -> DecoderMask {
    assert!(query_agent < num_agents, "query agent {query_agent} out of range");
    let s = num_agents * horizon;
    let mask = AdditiveMask::from_visibility(s, s, |p, q| {
        let (ap, aq) = (agent_of(p, num_agents), agent_of(q, num_agents));
        if ap == query_agent {
            aq == query_agent && step_of(q, num_agents) <= step_of(p, num_agents)
        } else if aq == query_agent {
            true
        } else {
            staircase_visible(p, q, num_agents, interval)
        }
    });
    DecoderMask {
        num_agents,
        horizon,
        interval,
        mask: Arc::new(mask),
    }
}

/// `interval` for a requested interactive attention frequency, given the
/// token step rate: `round(step_hz / attention_hz)`, at least 1.
pub fn interval_for_frequency(step_hz: f64, attention_hz: f64) -> usize {
    assert!(attention_hz > 0.0 && step_hz > 0.0);
    (step_hz / attention_hz).round().max(1.0) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn visible_set(mask: &DecoderMask, p: usize) -> Vec<usize> {
        (0..mask.seq_len()).filter(|&q| mask.is_visible(p, q)).collect()
    }

    #[test]
    fn two_agents_two_steps_interval_one() {
        // Flattened order [a1@1, a2@1, a1@2, a2@2].
        let m = build_decoder_mask(2, 2, 1);
        assert_eq!(visible_set(&m, 0), vec![0]);
        assert_eq!(visible_set(&m, 1), vec![1]);
        assert_eq!(visible_set(&m, 2), vec![0, 1, 2]);
        assert_eq!(visible_set(&m, 3), vec![0, 1, 3]);
    }

    #[test]
    fn interval_horizon_blocks_all_cross_agent() {
        let m = build_decoder_mask(2, 16, 16);
        for p in 0..m.seq_len() {
            for q in 0..m.seq_len() {
                if agent_of(p, 2) != agent_of(q, 2) {
                    assert!(!m.is_visible(p, q), "cross visibility at {p}->{q}");
                }
            }
        }
    }

    #[test]
    fn single_agent_is_lower_triangular() {
        let m = build_decoder_mask(1, 5, 1);
        for p in 0..5 {
            for q in 0..5 {
                assert_eq!(m.is_visible(p, q), q <= p);
            }
        }
    }

    #[test]
    fn interval_two_exposes_blocks() {
        let m = build_decoder_mask(2, 6, 2);
        // Step 3 (p for agent 0: position 4): cross visible through step 2.
        let p = position_of(0, 3, 2);
        assert!(m.is_visible(p, position_of(1, 2, 2)));
        assert!(!m.is_visible(p, position_of(1, 3, 2)));
        // Step 4: floor(3/2)*2 = 2, still only through step 2.
        let p = position_of(0, 4, 2);
        assert!(m.is_visible(p, position_of(1, 2, 2)));
        assert!(!m.is_visible(p, position_of(1, 3, 2)));
        // Step 5: floor(4/2)*2 = 4.
        let p = position_of(0, 5, 2);
        assert!(m.is_visible(p, position_of(1, 4, 2)));
    }

    #[test]
    fn acausal_exposes_all_query_positions_to_targets() {
        let m = build_acausal_mask(2, 4, 1, 1);
        for t in 1..=4 {
            let p = position_of(0, t, 2);
            for tq in 1..=4 {
                assert!(m.is_visible(p, position_of(1, tq, 2)), "t={t} tq={tq}");
            }
        }
        // Query rows see only their own past.
        let p = position_of(1, 2, 2);
        assert!(m.is_visible(p, position_of(1, 1, 2)));
        assert!(m.is_visible(p, position_of(1, 2, 2)));
        assert!(!m.is_visible(p, position_of(0, 1, 2)));
        assert!(!m.is_visible(p, position_of(1, 3, 2)));
    }

    #[test]
    fn frequency_mapping() {
        assert_eq!(interval_for_frequency(2.0, 2.0), 1);
        assert_eq!(interval_for_frequency(2.0, 0.125), 16);
        assert_eq!(interval_for_frequency(2.0, 1.0), 2);
    }
}
