//! Early-fusion scene encoder: latent queries cross-attend to the raw scene
//! rows once, then self-attention layers mix the latents. One embedding set
//! per modeled agent (the "ego" views), produced in a single batched pass.

use std::sync::Arc;

use crate::error::Result;
use crate::numeric::{AttnMask, Tape, Tensor, Var};
use crate::scene::Scenario;

use super::features::{scene_features, FEATURE_DIM};
use super::{Model, ModelConfig, ParamVars};

/// Per-ego-agent scene embeddings: `[num_agents, latent_queries, hidden]`.
#[derive(Debug, Clone)]
pub struct SceneEmbedding {
    pub num_agents: usize,
    pub latent_queries: usize,
    pub hidden: usize,
    pub data: Tensor,
}

/// Encodes one scenario into its N ego views. Convenience wrapper over
/// [`encode_scene_batch`] that materializes the result.
pub fn encode_scene(model: &Model, scenario: &Scenario) -> Result<SceneEmbedding> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, &model.params, false);
    let var = encode_scene_batch(&mut tape, &vars, &model.config, &[scenario])?;
    let cfg = &model.config;
    Ok(SceneEmbedding {
        num_agents: cfg.num_agents,
        latent_queries: cfg.encoder.latent_queries,
        hidden: cfg.encoder.hidden,
        data: tape.tensor(var),
    })
}

/// Encodes a batch of scenarios on the given tape. Output shape is
/// `[batch * num_agents, latent_queries, hidden]`, ego views varying fastest.
pub fn encode_scene_batch(
    tape: &mut Tape,
    ev: &ParamVars,
    config: &ModelConfig,
    scenarios: &[&Scenario],
) -> Result<Var> {
    let h = config.encoder.hidden;
    let q = config.encoder.latent_queries;
    let n = config.num_agents;

    let mut per_scene = Vec::with_capacity(scenarios.len());
    for scenario in scenarios {
        if scenario.num_modeled() != n {
            return Err(crate::error::CoreError::Schema {
                scenario_id: Some(scenario.id.clone()),
                msg: format!(
                    "scenario has {} modeled agents, model expects {n}",
                    scenario.num_modeled()
                ),
            });
        }
        // Feature rows per ego view, stacked: [n * rows, F].
        let mut feats = Vec::new();
        let mut key_valid = Vec::new();
        let mut rows = 0;
        for slot in 0..n {
            let sf = scene_features(scenario, slot)?;
            rows = sf.rows;
            feats.extend_from_slice(&sf.data);
            key_valid.extend(sf.valid);
        }
        let x = Tensor::from_vec(vec![n * rows, FEATURE_DIM], feats);
        let xv = tape.constant(&x);
        per_scene.push((xv, rows, Arc::new(key_valid)));
    }

    // Latents tiled across all groups of the batch.
    let groups = scenarios.len() * n;
    let latents = ev.get("enc.latents");
    let latent_ids: Vec<usize> = (0..groups).flat_map(|_| 0..q).collect();
    let tiled = tape.embedding_lookup(latents, Arc::new(latent_ids));

    // First layer: latents cross-attend to the projected scene rows of each
    // scenario. Row counts differ per scenario, so this layer loops scene by
    // scene; everything after runs on one [groups, q, h] tensor.
    let in_w = ev.get("enc.in_proj.w");
    let in_b = ev.get("enc.in_proj.b");
    let mut first = Vec::with_capacity(scenarios.len());
    for (xv, rows, key_valid) in &per_scene {
        let proj = tape.matmul(*xv, in_w);
        let proj = tape.add_bias(proj, in_b);
        let kvn = {
            let g = ev.get("enc.layer0.ln_kv.g");
            let b = ev.get("enc.layer0.ln_kv.b");
            tape.layer_norm(proj, g, b)
        };
        let k3 = tape.reshape(kvn, vec![n, *rows, h]);
        first.push((k3, Arc::clone(key_valid)));
    }

    let lat0 = tape.reshape(tiled, vec![groups * q, h]);
    let mut state = lat0;

    for layer in 0..config.encoder.layers {
        let base = format!("enc.layer{layer}");
        let lnq_g = ev.get(&format!("{base}.ln_q.g"));
        let lnq_b = ev.get(&format!("{base}.ln_q.b"));
        let wq = ev.get(&format!("{base}.attn.wq"));
        let wk = ev.get(&format!("{base}.attn.wk"));
        let wv = ev.get(&format!("{base}.attn.wv"));
        let wo = ev.get(&format!("{base}.attn.wo"));

        let normed = tape.layer_norm(state, lnq_g, lnq_b);
        let qm = tape.matmul(normed, wq);

        let att = if layer == 0 {
            // Cross-attention to scene rows, scenario by scenario.
            let mut outs = Vec::with_capacity(per_scene.len());
            for (scene_i, (k3, key_valid)) in first.iter().enumerate() {
                let rows = per_scene[scene_i].1;
                let kf = tape.reshape(*k3, vec![n * rows, h]);
                let km = tape.matmul(kf, wk);
                let vm = tape.matmul(kf, wv);
                let k3m = tape.reshape(km, vec![n, rows, h]);
                let v3m = tape.reshape(vm, vec![n, rows, h]);
                let q_slice = tape.gather_rows(
                    qm,
                    Arc::new(
                        (scene_i * n * q..(scene_i + 1) * n * q).collect::<Vec<_>>(),
                    ),
                );
                let q3 = tape.reshape(q_slice, vec![n, q, h]);
                let att = tape.masked_attention(
                    q3,
                    k3m,
                    v3m,
                    config.encoder.heads,
                    AttnMask::KeyValid(Arc::clone(key_valid)),
                );
                outs.push(tape.reshape(att, vec![n * q, h]));
            }
            tape.concat_rows(&outs)
        } else {
            let km = tape.matmul(normed, wk);
            let vm = tape.matmul(normed, wv);
            let q3 = tape.reshape(qm, vec![groups, q, h]);
            let k3 = tape.reshape(km, vec![groups, q, h]);
            let v3 = tape.reshape(vm, vec![groups, q, h]);
            let att = tape.masked_attention(q3, k3, v3, config.encoder.heads, AttnMask::None);
            tape.reshape(att, vec![groups * q, h])
        };
        let proj = tape.matmul(att, wo);
        state = tape.add(state, proj);

        let lnf_g = ev.get(&format!("{base}.ln_f.g"));
        let lnf_b = ev.get(&format!("{base}.ln_f.b"));
        let w1 = ev.get(&format!("{base}.ffn.w1"));
        let b1 = ev.get(&format!("{base}.ffn.b1"));
        let w2 = ev.get(&format!("{base}.ffn.w2"));
        let b2 = ev.get(&format!("{base}.ffn.b2"));
        let normed = tape.layer_norm(state, lnf_g, lnf_b);
        let f = tape.matmul(normed, w1);
        let f = tape.add_bias(f, b1);
        let f = tape.relu(f);
        let f = tape.matmul(f, w2);
        let f = tape.add_bias(f, b2);
        state = tape.add(state, f);
    }

    let g = ev.get("enc.out_ln.g");
    let b = ev.get("enc.out_ln.b");
    let out = tape.layer_norm(state, g, b);
    Ok(tape.reshape(out, vec![groups, q, h]))
}
