//! KV-cached incremental decoding. Mirrors the teacher-forced decoder op for
//! op (same reduction orders), so per-step logits match the full-sequence
//! forward to float-roundoff identity.

use crate::model::{DecoderMask, Model, SceneEmbedding};
use crate::numeric::softmax_into;

/// Per-layer weight slices resolved once up front.
struct LayerWeights<'m> {
    ln1: (&'m [f64], &'m [f64]),
    wq: &'m [f64],
    wk: &'m [f64],
    wv: &'m [f64],
    wo: &'m [f64],
    ln2: (&'m [f64], &'m [f64]),
    cwq: &'m [f64],
    cwo: &'m [f64],
    ln3: (&'m [f64], &'m [f64]),
    w1: &'m [f64],
    b1: &'m [f64],
    w2: &'m [f64],
    b2: &'m [f64],
}

/// Incremental decoder state for a batch of rollouts over one scenario.
///
/// Groups are (rollout, ego view) pairs, view varying fastest. Every group
/// keeps its own self-attention KV cache; cross-attention keys/values are
/// precomputed per view from the scene embedding and shared by all rollouts.
pub struct IncrementalDecoder<'m> {
    model: &'m Model,
    mask: DecoderMask,
    pub num_rollouts: usize,
    pub views: usize,
    hidden: usize,
    heads: usize,
    seq_len: usize,
    latents: usize,
    // [group][layer] -> [seq_len * hidden], position-indexed.
    k_self: Vec<Vec<Vec<f64>>>,
    v_self: Vec<Vec<Vec<f64>>>,
    filled: Vec<bool>,
    // [view][layer] -> [latents * hidden].
    k_cross: Vec<Vec<Vec<f64>>>,
    v_cross: Vec<Vec<Vec<f64>>>,
}

impl<'m> IncrementalDecoder<'m> {
    pub fn new(
        model: &'m Model,
        scene: &SceneEmbedding,
        mask: DecoderMask,
        num_rollouts: usize,
    ) -> Self {
        let cfg = &model.config;
        let views = cfg.num_agents;
        let hidden = cfg.decoder.hidden;
        let latents = scene.latent_queries;
        let layers = cfg.decoder.layers;
        let seq_len = cfg.seq_len();
        assert_eq!(scene.num_agents, views, "scene embedding agent count");

        // Cross K/V per (view, layer).
        let enc_h = scene.hidden;
        let mut k_cross = Vec::with_capacity(views);
        let mut v_cross = Vec::with_capacity(views);
        for view in 0..views {
            let scene_rows = &scene.data.data()[view * latents * enc_h..(view + 1) * latents * enc_h];
            let mut ks = Vec::with_capacity(layers);
            let mut vs = Vec::with_capacity(layers);
            for layer in 0..layers {
                let wk = model.params.get(&format!("dec.layer{layer}.cross_attn.wk"));
                let wv = model.params.get(&format!("dec.layer{layer}.cross_attn.wv"));
                let mut k = vec![0.0; latents * hidden];
                let mut v = vec![0.0; latents * hidden];
                for r in 0..latents {
                    row_matmul(
                        &scene_rows[r * enc_h..(r + 1) * enc_h],
                        wk.data(),
                        hidden,
                        &mut k[r * hidden..(r + 1) * hidden],
                    );
                    row_matmul(
                        &scene_rows[r * enc_h..(r + 1) * enc_h],
                        wv.data(),
                        hidden,
                        &mut v[r * hidden..(r + 1) * hidden],
                    );
                }
                ks.push(k);
                vs.push(v);
            }
            k_cross.push(ks);
            v_cross.push(vs);
        }

        let groups = num_rollouts * views;
        Self {
            model,
            mask,
            num_rollouts,
            views,
            hidden,
            heads: cfg.decoder.heads,
            seq_len,
            latents,
            k_self: vec![vec![vec![0.0; seq_len * hidden]; layers]; groups],
            v_self: vec![vec![vec![0.0; seq_len * hidden]; layers]; groups],
            filled: vec![false; seq_len],
            k_cross,
            v_cross,
        }
    }

    fn layer_weights(&self, layer: usize) -> LayerWeights<'m> {
        let p = &self.model.params;
        let base = format!("dec.layer{layer}");
        LayerWeights {
            ln1: (
                p.get(&format!("{base}.ln1.g")).data(),
                p.get(&format!("{base}.ln1.b")).data(),
            ),
            wq: p.get(&format!("{base}.self_attn.wq")).data(),
            wk: p.get(&format!("{base}.self_attn.wk")).data(),
            wv: p.get(&format!("{base}.self_attn.wv")).data(),
            wo: p.get(&format!("{base}.self_attn.wo")).data(),
            ln2: (
                p.get(&format!("{base}.ln2.g")).data(),
                p.get(&format!("{base}.ln2.b")).data(),
            ),
            cwq: p.get(&format!("{base}.cross_attn.wq")).data(),
            cwo: p.get(&format!("{base}.cross_attn.wo")).data(),
            ln3: (
                p.get(&format!("{base}.ln3.g")).data(),
                p.get(&format!("{base}.ln3.b")).data(),
            ),
            w1: p.get(&format!("{base}.ffn.w1")).data(),
            b1: p.get(&format!("{base}.ffn.b1")).data(),
            w2: p.get(&format!("{base}.ffn.w2")).data(),
            b2: p.get(&format!("{base}.ffn.b2")).data(),
        }
    }

    /// Advances all groups by the given flattened positions (all at one
    /// step, or a single position during prefill). `ids[g * positions.len()
    /// + j]` is the input-table id for `positions[j]` in group `g`. Returns
    /// the final-layer hidden rows, `[groups * positions.len() * hidden]`,
    /// group-major.
    pub fn advance(&mut self, positions: &[usize], ids: &[usize]) -> Vec<f64> {
        let cfg = &self.model.config;
        let groups = self.num_rollouts * self.views;
        let np = positions.len();
        assert_eq!(ids.len(), groups * np, "ids length mismatch");
        let h = self.hidden;
        let p = &self.model.params;
        let token_table = p.get("dec.token_table").data();
        let step_table = p.get("dec.step_table").data();
        let agent_table = p.get("dec.agent_table").data();

        // Input embeddings: value + step + agent (same add order as the
        // teacher-forced path).
        let mut x = vec![0.0; groups * np * h];
        for g in 0..groups {
            for (j, &pos) in positions.iter().enumerate() {
                let id = ids[g * np + j];
                let step = pos / self.views;
                let agent = pos % self.views;
                let row = &mut x[(g * np + j) * h..(g * np + j + 1) * h];
                for c in 0..h {
                    row[c] = (token_table[id * h + c] + step_table[step * h + c])
                        + agent_table[agent * h + c];
                }
            }
        }

        let ffn_dim = cfg.decoder.ffn;
        let mut normed = vec![0.0; h];
        let mut qbuf = vec![0.0; h];
        let mut att = vec![0.0; h];
        let mut proj = vec![0.0; h];
        let mut fbuf = vec![0.0; ffn_dim];

        for layer in 0..cfg.decoder.layers {
            let w = self.layer_weights(layer);
            // Append K/V for the new positions first so same-step self
            // visibility works, then compute attention per row.
            for g in 0..groups {
                for (j, &pos) in positions.iter().enumerate() {
                    let row = &x[(g * np + j) * h..(g * np + j + 1) * h];
                    layer_norm_row(row, w.ln1.0, w.ln1.1, &mut normed);
                    let kc = &mut self.k_self[g][layer][pos * h..(pos + 1) * h];
                    row_matmul(&normed, w.wk, h, kc);
                    let vc = &mut self.v_self[g][layer][pos * h..(pos + 1) * h];
                    row_matmul(&normed, w.wv, h, vc);
                }
            }
            for g in 0..groups {
                let view = g % self.views;
                for (j, &pos) in positions.iter().enumerate() {
                    let base = (g * np + j) * h;
                    // Self-attention over visible cached positions.
                    layer_norm_row(&x[base..base + h], w.ln1.0, w.ln1.1, &mut normed);
                    row_matmul(&normed, w.wq, h, &mut qbuf);
                    self.attend_self(g, layer, pos, &qbuf, positions, &mut att);
                    row_matmul(&att, w.wo, h, &mut proj);
                    for c in 0..h {
                        x[base + c] += proj[c];
                    }
                    // Cross-attention to the view's scene features.
                    layer_norm_row(&x[base..base + h], w.ln2.0, w.ln2.1, &mut normed);
                    row_matmul(&normed, w.cwq, h, &mut qbuf);
                    attend_full(
                        &qbuf,
                        &self.k_cross[view][layer],
                        &self.v_cross[view][layer],
                        self.latents,
                        self.heads,
                        h,
                        &mut att,
                    );
                    row_matmul(&att, w.cwo, h, &mut proj);
                    for c in 0..h {
                        x[base + c] += proj[c];
                    }
                    // Feed-forward.
                    layer_norm_row(&x[base..base + h], w.ln3.0, w.ln3.1, &mut normed);
                    row_matmul(&normed, w.w1, ffn_dim, &mut fbuf);
                    for (f, b) in fbuf.iter_mut().zip(w.b1) {
                        *f = (*f + b).max(0.0);
                    }
                    row_matmul(&fbuf, w.w2, h, &mut proj);
                    for c in 0..h {
                        x[base + c] += proj[c] + w.b2[c];
                    }
                }
            }
        }
        for &pos in positions {
            self.filled[pos] = true;
        }
        x
    }

    fn attend_self(
        &self,
        group: usize,
        layer: usize,
        pos: usize,
        q: &[f64],
        pending: &[usize],
        out: &mut [f64],
    ) {
        let h = self.hidden;
        let d = h / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let kc = &self.k_self[group][layer];
        let vc = &self.v_self[group][layer];
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut scores = vec![f64::NEG_INFINITY; self.seq_len];
        for hh in 0..self.heads {
            let off = hh * d;
            let qv = &q[off..off + d];
            let mut maxs = f64::NEG_INFINITY;
            let mut any = false;
            for key in 0..self.seq_len {
                let available = self.filled[key] || pending.contains(&key);
                if !available || !self.mask.is_visible(pos, key) {
                    scores[key] = f64::NEG_INFINITY;
                    continue;
                }
                let kv = &kc[key * h + off..key * h + off + d];
                let dot: f64 = qv.iter().zip(kv).map(|(a, b)| a * b).sum();
                let s = dot * scale;
                scores[key] = s;
                if s > maxs {
                    maxs = s;
                }
                any = true;
            }
            if !any {
                continue;
            }
            let mut z = 0.0;
            let mut weights = vec![0.0; self.seq_len];
            for key in 0..self.seq_len {
                if scores[key] != f64::NEG_INFINITY {
                    let e = (scores[key] - maxs).exp();
                    weights[key] = e;
                    z += e;
                }
            }
            for key in 0..self.seq_len {
                if weights[key] == 0.0 {
                    continue;
                }
                let wgt = weights[key] / z;
                let vv = &vc[key * h + off..key * h + off + d];
                for c in 0..d {
                    out[off + c] += wgt * vv[c];
                }
            }
        }
    }
}

/// Unmasked single-row attention over a fixed K/V block.
fn attend_full(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    keys: usize,
    heads: usize,
    h: usize,
    out: &mut [f64],
) {
    let d = h / heads;
    let scale = 1.0 / (d as f64).sqrt();
    out.iter_mut().for_each(|o| *o = 0.0);
    let mut scores = vec![0.0; keys];
    for hh in 0..heads {
        let off = hh * d;
        let qv = &q[off..off + d];
        let mut maxs = f64::NEG_INFINITY;
        for key in 0..keys {
            let kv = &k[key * h + off..key * h + off + d];
            let dot: f64 = qv.iter().zip(kv).map(|(a, b)| a * b).sum();
            let s = dot * scale;
            scores[key] = s;
            if s > maxs {
                maxs = s;
            }
        }
        let mut z = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - maxs).exp();
            z += *s;
        }
        for key in 0..keys {
            let wgt = scores[key] / z;
            let vv = &v[key * h + off..key * h + off + d];
            for c in 0..d {
                out[off + c] += wgt * vv[c];
            }
        }
    }
}

/// Output head: layer norm then vocab projection for one hidden row.
pub fn project_logits(model: &Model, hidden_row: &[f64]) -> Vec<f64> {
    let p = &model.params;
    let g = p.get("dec.out_ln.g").data();
    let b = p.get("dec.out_ln.b").data();
    let w = p.get("dec.out_proj.w").data();
    let bias = p.get("dec.out_proj.b").data();
    let vocab = model.config.vocab.vocab_size();
    let h = hidden_row.len();
    let mut normed = vec![0.0; h];
    layer_norm_row(hidden_row, g, b, &mut normed);
    let mut logits = vec![0.0; vocab];
    row_matmul(&normed, w, vocab, &mut logits);
    for (l, bb) in logits.iter_mut().zip(bias) {
        *l += bb;
    }
    logits
}

/// Log-softmax value of one class.
pub fn log_softmax_at(logits: &[f64], id: usize) -> f64 {
    let maxv = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = maxv + logits.iter().map(|v| (v - maxv).exp()).sum::<f64>().ln();
    logits[id] - lse
}

/// Softmax of a logits row.
pub fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

/// `out[j] = sum_k x[k] * w[k * out_dim + j]`, accumulated in `k` order to
/// match the tape matmul exactly.
fn row_matmul(x: &[f64], w: &[f64], out_dim: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (k, &xk) in x.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        let wrow = &w[k * out_dim..(k + 1) * out_dim];
        for j in 0..out_dim {
            out[j] += xk * wrow[j];
        }
    }
}

fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], out: &mut [f64]) {
    let d = x.len();
    let eps = 1e-5;
    let mean = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let rstd = 1.0 / (var + eps).sqrt();
    for i in 0..d {
        out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
    }
}
