//! Teacher-forced joint trajectory decoder over flattened agent-time token
//! sequences. Each ego view self-attends over the same token sequence under
//! the staircase mask, cross-attends to its own scene embedding, and the
//! logits for agent `n` are read from ego view `n`.

use std::sync::Arc;

use crate::numeric::{AttnMask, Tape, Tensor, Var};
use crate::tokenizer::TokenRow;

use super::mask::{position_of, DecoderMask};
use super::{Model, ModelConfig, ParamVars};

/// The start token is the last row of the extended token table.
pub const START_TOKEN_OFFSET: usize = 0; // token ids map to table rows directly

/// Flattened decoder inputs for one scenario: table ids plus step/agent
/// position ids, time-major (`p = (t-1) * N + n`).
#[derive(Debug, Clone, PartialEq)]
pub struct FlatSequence {
    pub input_ids: Vec<usize>,
    pub step_ids: Vec<usize>,
    pub agent_ids: Vec<usize>,
}

impl FlatSequence {
    /// Standard shifted inputs: position (n, 1) carries the start token and
    /// position (n, t) carries token `a^n_{t-1}`. Rows shorter than the
    /// horizon produce a shorter flattened prefix (incremental decoding).
    pub fn teacher_forced(config: &ModelConfig, rows: &[TokenRow], steps: usize) -> Self {
        let n = config.num_agents;
        assert_eq!(rows.len(), n, "expected {n} token rows, got {}", rows.len());
        let start = config.vocab.vocab_size();
        let len = n * steps;
        let mut input_ids = Vec::with_capacity(len);
        let mut step_ids = Vec::with_capacity(len);
        let mut agent_ids = Vec::with_capacity(len);
        for t in 1..=steps {
            for (agent, row) in rows.iter().enumerate() {
                input_ids.push(if t == 1 {
                    start
                } else {
                    row.tokens[t - 2].id()
                });
                step_ids.push(t - 1);
                agent_ids.push(agent);
            }
        }
        Self {
            input_ids,
            step_ids,
            agent_ids,
        }
    }

    /// Teacher-forced inputs with the query agent's positions carrying its
    /// UNSHIFTED tokens (position (q, t) embeds token `a^q_t`), as used for
    /// acausal conditioning: the full forced trajectory, including the final
    /// token, is readable by target agents.
    pub fn acausal(config: &ModelConfig, rows: &[TokenRow], query_agent: usize, steps: usize) -> Self {
        let mut seq = Self::teacher_forced(config, rows, steps);
        let n = config.num_agents;
        for t in 1..=steps {
            let p = position_of(query_agent, t, n);
            seq.input_ids[p] = rows[query_agent].tokens[t - 1].id();
        }
        seq
    }

    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }
}

/// Batched teacher-forced decoder pass.
///
/// `scene`: `[groups, latent_queries, enc_hidden]` with one group per
/// (scenario, ego view); `sequences`: one [`FlatSequence`] per group, all of
/// equal length; `mask` applies to every group. Returns logits
/// `[groups * seq, vocab]`.
pub fn decoder_forward_batch(
    tape: &mut Tape,
    dv: &ParamVars,
    config: &ModelConfig,
    scene: Var,
    sequences: &[&FlatSequence],
    mask: &DecoderMask,
) -> Var {
    let h = config.decoder.hidden;
    let groups = tape.shape(scene)[0];
    let latents = tape.shape(scene)[1];
    assert_eq!(
        groups,
        sequences.len(),
        "scene groups {} != sequence count {}",
        groups,
        sequences.len()
    );
    let seq = sequences[0].len();
    assert!(sequences.iter().all(|s| s.len() == seq), "ragged sequence batch");
    assert!(
        seq <= mask.seq_len(),
        "sequence length {seq} exceeds mask {}",
        mask.seq_len()
    );

    // Mask for a prefix: visibility between positions < seq is unchanged, so
    // a prefix forward just uses the leading block of the same mask.
    let mask_block = if seq == mask.seq_len() {
        Arc::clone(mask.additive())
    } else {
        let full = mask.additive();
        Arc::new(crate::numeric::AdditiveMask::from_visibility(seq, seq, |p, q| {
            full.is_visible(p, q)
        }))
    };

    let mut input_ids = Vec::with_capacity(groups * seq);
    let mut step_ids = Vec::with_capacity(groups * seq);
    let mut agent_ids = Vec::with_capacity(groups * seq);
    for s in sequences {
        input_ids.extend_from_slice(&s.input_ids);
        step_ids.extend_from_slice(&s.step_ids);
        agent_ids.extend_from_slice(&s.agent_ids);
    }

    let tok = tape.embedding_lookup(dv.get("dec.token_table"), Arc::new(input_ids));
    let stp = tape.embedding_lookup(dv.get("dec.step_table"), Arc::new(step_ids));
    let agt = tape.embedding_lookup(dv.get("dec.agent_table"), Arc::new(agent_ids));
    let sum = tape.add(tok, stp);
    let mut state = tape.add(sum, agt); // [groups * seq, h]

    let enc_hidden = tape.shape(scene)[2];
    let scene_flat = tape.reshape(scene, vec![groups * latents, enc_hidden]);

    for layer in 0..config.decoder.layers {
        let base = format!("dec.layer{layer}");

        // Masked self-attention over the flattened sequence.
        let g1 = dv.get(&format!("{base}.ln1.g"));
        let b1 = dv.get(&format!("{base}.ln1.b"));
        let normed = tape.layer_norm(state, g1, b1);
        let q = tape.matmul(normed, dv.get(&format!("{base}.self_attn.wq")));
        let k = tape.matmul(normed, dv.get(&format!("{base}.self_attn.wk")));
        let v = tape.matmul(normed, dv.get(&format!("{base}.self_attn.wv")));
        let q3 = tape.reshape(q, vec![groups, seq, h]);
        let k3 = tape.reshape(k, vec![groups, seq, h]);
        let v3 = tape.reshape(v, vec![groups, seq, h]);
        let att = tape.masked_attention(
            q3,
            k3,
            v3,
            config.decoder.heads,
            AttnMask::Shared(Arc::clone(&mask_block)),
        );
        let att = tape.reshape(att, vec![groups * seq, h]);
        let proj = tape.matmul(att, dv.get(&format!("{base}.self_attn.wo")));
        state = tape.add(state, proj);

        // Cross-attention to the ego view's scene embedding.
        let g2 = dv.get(&format!("{base}.ln2.g"));
        let b2 = dv.get(&format!("{base}.ln2.b"));
        let normed = tape.layer_norm(state, g2, b2);
        let q = tape.matmul(normed, dv.get(&format!("{base}.cross_attn.wq")));
        let k = tape.matmul(scene_flat, dv.get(&format!("{base}.cross_attn.wk")));
        let v = tape.matmul(scene_flat, dv.get(&format!("{base}.cross_attn.wv")));
        let q3 = tape.reshape(q, vec![groups, seq, h]);
        let k3 = tape.reshape(k, vec![groups, latents, h]);
        let v3 = tape.reshape(v, vec![groups, latents, h]);
        let att = tape.masked_attention(q3, k3, v3, config.decoder.heads, AttnMask::None);
        let att = tape.reshape(att, vec![groups * seq, h]);
        let proj = tape.matmul(att, dv.get(&format!("{base}.cross_attn.wo")));
        state = tape.add(state, proj);

        // Feed-forward.
        let g3 = dv.get(&format!("{base}.ln3.g"));
        let b3 = dv.get(&format!("{base}.ln3.b"));
        let normed = tape.layer_norm(state, g3, b3);
        let f = tape.matmul(normed, dv.get(&format!("{base}.ffn.w1")));
        let f = tape.add_bias(f, dv.get(&format!("{base}.ffn.b1")));
        let f = tape.relu(f);
        let f = tape.matmul(f, dv.get(&format!("{base}.ffn.w2")));
        let f = tape.add_bias(f, dv.get(&format!("{base}.ffn.b2")));
        state = tape.add(state, f);
    }

    let g = dv.get("dec.out_ln.g");
    let b = dv.get("dec.out_ln.b");
    let normed = tape.layer_norm(state, g, b);
    let logits = tape.matmul(normed, dv.get("dec.out_proj.w"));
    tape.add_bias(logits, dv.get("dec.out_proj.b"))
}

/// Single-scenario teacher-forced logits, one row per flattened position.
/// Row `p = (t-1) * N + n` parameterizes the step-`t` token distribution of
/// agent `n`, taken from ego view `n`.
pub fn decoder_forward(
    model: &Model,
    scene: &super::SceneEmbedding,
    sequence: &FlatSequence,
    mask: &DecoderMask,
) -> Tensor {
    let config = &model.config;
    let n = config.num_agents;
    let seq = sequence.len();
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, &model.params, false);
    let scene_var = tape.constant(&scene.data);
    let seqs: Vec<&FlatSequence> = std::iter::repeat(sequence).take(n).collect();
    let logits = decoder_forward_batch(&mut tape, &vars, config, scene_var, &seqs, mask);
    // Pick each agent's rows from its own ego view.
    let rows: Vec<usize> = (0..seq)
        .map(|p| {
            let agent = sequence.agent_ids[p];
            agent * seq + p
        })
        .collect();
    let picked = tape.gather_rows(logits, Arc::new(rows));
    tape.tensor(picked)
}
