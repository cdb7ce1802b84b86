//! Reverse-mode autodiff over a Wengert tape.
//!
//! Ops append nodes to a [`Tape`]; parents always precede children, so the
//! node index order is already topological and [`Tape::backward`] is a single
//! reverse sweep visiting each node once. All reductions run in fixed index
//! order, so equal inputs give bit-equal outputs.
//!
//! Shape mismatches are caller bugs and panic with both shapes named.

use std::sync::Arc;

use super::tensor::{AdditiveMask, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Masking modes for [`Tape::masked_attention`].
#[derive(Debug, Clone)]
pub enum AttnMask {
    /// Every query sees every key.
    None,
    /// One additive `[s_q, s_kv]` mask shared across groups.
    Shared(Arc<AdditiveMask>),
    /// Per-group key validity, length `groups * s_kv`; invalid keys are
    /// hidden from every query in that group.
    KeyValid(Arc<Vec<bool>>),
}

impl AttnMask {
    fn hides(&self, group: usize, row: usize, col: usize, s_kv: usize) -> bool {
        match self {
            AttnMask::None => false,
            AttnMask::Shared(m) => !m.is_visible(row, col),
            AttnMask::KeyValid(v) => !v[group * s_kv + col],
        }
    }

    fn bias(&self, row: usize, col: usize) -> f64 {
        match self {
            AttnMask::Shared(m) => m.get(row, col),
            _ => 0.0,
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias {
        x: Var,
        bias: Var,
    },
    Relu(Var),
    Matmul {
        a: Var,
        b: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        // Per-row (mean, reciprocal std).
        cache: Vec<(f64, f64)>,
    },
    SoftmaxRows(Var),
    EmbeddingLookup {
        table: Var,
        ids: Arc<Vec<usize>>,
    },
    GatherRows {
        x: Var,
        rows: Arc<Vec<usize>>,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    MaskedAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        // Attention weights, [groups, heads, s_q, s_kv]; hidden keys hold
        // exactly 0.0, which is all backward needs from the mask.
        weights: Vec<f64>,
    },
    CrossEntropyMean {
        logits: Var,
        targets: Arc<Vec<usize>>,
        // Row softmax, same shape as logits.
        probs: Vec<f64>,
    },
    MeanAll(Var),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
}

/// Gradients keyed by [`Var`], produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// A recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a leaf. Cheap: the data buffer is shared.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data_arc(), requires_grad)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::from_arc(self.nodes[v.0].shape.clone(), Arc::clone(&self.nodes[v.0].data))
    }

    pub fn item(&self, v: Var) -> f64 {
        assert_eq!(self.data(v).len(), 1, "item() on non-scalar");
        self.data(v)[0]
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Arc<Vec<f64>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            shape,
            data,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ───────────────────────── elementwise ─────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_same_shape("add", a, b);
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let rg = self.needs(&[a, b]);
        self.push(Op::Add(a, b), self.nodes[a.0].shape.clone(), Arc::new(data), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check_same_shape("mul", a, b);
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let rg = self.needs(&[a, b]);
        self.push(Op::Mul(a, b), self.nodes[a.0].shape.clone(), Arc::new(data), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let rg = self.needs(&[x]);
        self.push(Op::Scale(x, c), self.nodes[x.0].shape.clone(), Arc::new(data), rg)
    }

    /// Adds a `[d]` bias to every row of a `[.., d]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let d = *self.shape(x).last().expect("add_bias on empty shape");
        assert_eq!(
            self.shape(bias),
            &[d],
            "add_bias: bias shape {:?} does not match row width {:?}",
            self.shape(bias),
            self.shape(x)
        );
        let bdata = Arc::clone(&self.nodes[bias.0].data);
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bdata[i % d])
            .collect();
        let rg = self.needs(&[x, bias]);
        self.push(Op::AddBias { x, bias }, self.nodes[x.0].shape.clone(), Arc::new(data), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let rg = self.needs(&[x]);
        self.push(Op::Relu(x), self.nodes[x.0].shape.clone(), Arc::new(data), rg)
    }

    // ───────────────────────── linear algebra ─────────────────────────

    /// 2-D matrix product `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: incompatible shapes {sa:?} x {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        let rg = self.needs(&[a, b]);
        self.push(Op::Matmul { a, b }, vec![m, n], Arc::new(data), rg)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let d = *self.shape(x).last().expect("layer_norm on empty shape");
        assert_eq!(self.shape(gain), &[d], "layer_norm gain shape");
        assert_eq!(self.shape(bias), &[d], "layer_norm bias shape");
        let eps = 1e-5;
        let xs = Arc::clone(&self.nodes[x.0].data);
        let gs = Arc::clone(&self.nodes[gain.0].data);
        let bs = Arc::clone(&self.nodes[bias.0].data);
        let rows = xs.len() / d;
        let mut out = vec![0.0; xs.len()];
        let mut cache = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            cache.push((mean, rstd));
            for i in 0..d {
                out[r * d + i] = (row[i] - mean) * rstd * gs[i] + bs[i];
            }
        }
        let rg = self.needs(&[x, gain, bias]);
        self.push(
            Op::LayerNorm { x, gain, bias, cache },
            self.nodes[x.0].shape.clone(),
            Arc::new(out),
            rg,
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let d = *self.shape(x).last().expect("softmax on empty shape");
        let xs = Arc::clone(&self.nodes[x.0].data);
        let mut out = vec![0.0; xs.len()];
        for r in 0..xs.len() / d {
            softmax_into(&xs[r * d..(r + 1) * d], &mut out[r * d..(r + 1) * d]);
        }
        let rg = self.needs(&[x]);
        self.push(Op::SoftmaxRows(x), self.nodes[x.0].shape.clone(), Arc::new(out), rg)
    }

    /// Row lookup: `table[ids[i], :]` stacked into `[ids.len(), d]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: Arc<Vec<usize>>) -> Var {
        let st = self.shape(table);
        assert_eq!(st.len(), 2, "embedding table must be 2-D, got {st:?}");
        let (rows, d) = (st[0], st[1]);
        let tdata = Arc::clone(&self.nodes[table.0].data);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids.iter() {
            assert!(id < rows, "embedding id {id} out of range 0..{rows}");
            out.extend_from_slice(&tdata[id * d..(id + 1) * d]);
        }
        let rg = self.needs(&[table]);
        let n = ids.len();
        self.push(Op::EmbeddingLookup { table, ids }, vec![n, d], Arc::new(out), rg)
    }

    /// Selects rows of a 2-D tensor.
    pub fn gather_rows(&mut self, x: Var, rows: Arc<Vec<usize>>) -> Var {
        let sx = self.shape(x);
        assert_eq!(sx.len(), 2, "gather_rows needs 2-D, got {sx:?}");
        let (n, d) = (sx[0], sx[1]);
        let xd = Arc::clone(&self.nodes[x.0].data);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows.iter() {
            assert!(r < n, "gather row {r} out of range 0..{n}");
            out.extend_from_slice(&xd[r * d..(r + 1) * d]);
        }
        let rg = self.needs(&[x]);
        let m = rows.len();
        self.push(Op::GatherRows { x, rows }, vec![m, d], Arc::new(out), rg)
    }

    /// Stacks 2-D tensors with equal row width along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let d = self.shape(parts[0])[1];
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let sp = self.shape(p);
            assert!(
                sp.len() == 2 && sp[1] == d,
                "concat_rows: shape {sp:?} does not match width {d}"
            );
            rows += sp[0];
            out.extend_from_slice(self.data(p));
        }
        let rg = self.needs(parts);
        self.push(Op::ConcatRows(parts.to_vec()), vec![rows, d], Arc::new(out), rg)
    }

    /// Shape-only view; the buffer is shared.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data(x).len(),
            "reshape {:?} -> {shape:?} changes element count",
            self.shape(x)
        );
        let rg = self.needs(&[x]);
        let data = Arc::clone(&self.nodes[x.0].data);
        self.push(Op::Reshape(x), shape, data, rg)
    }

    /// Multi-head scaled dot-product attention with masking.
    ///
    /// `q: [g, s_q, h]`, `k, v: [g, s_kv, h]`, `heads` dividing `h`.
    /// Scores are `q·k^T / sqrt(h/heads)` plus any additive mask bias; hidden
    /// keys get exactly zero weight, and a fully hidden row outputs zeros.
    pub fn masked_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: AttnMask) -> Var {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        assert!(
            sq.len() == 3 && sk.len() == 3 && sv.len() == 3,
            "masked_attention needs 3-D q/k/v, got {sq:?} {sk:?} {sv:?}"
        );
        assert!(
            sq[0] == sk[0] && sk[0] == sv[0] && sq[2] == sk[2] && sk[2] == sv[2] && sk[1] == sv[1],
            "masked_attention: incompatible shapes q{sq:?} k{sk:?} v{sv:?}"
        );
        let (groups, s_q, h) = (sq[0], sq[1], sq[2]);
        let s_kv = sk[1];
        assert!(h % heads == 0, "hidden {h} not divisible by heads {heads}");
        if let AttnMask::Shared(m) = &mask {
            assert!(
                m.rows == s_q && m.cols == s_kv,
                "mask {}x{} does not match attention {s_q}x{s_kv}",
                m.rows,
                m.cols
            );
        }
        let d = h / heads;
        let scale = 1.0 / (d as f64).sqrt();

        let qd = Arc::clone(&self.nodes[q.0].data);
        let kd = Arc::clone(&self.nodes[k.0].data);
        let vd = Arc::clone(&self.nodes[v.0].data);
        let mut out = vec![0.0; groups * s_q * h];
        let mut weights = vec![0.0; groups * heads * s_q * s_kv];
        let mut scores = vec![0.0; s_kv];

        for g in 0..groups {
            for hh in 0..heads {
                let off = hh * d;
                for i in 0..s_q {
                    let qrow = &qd[(g * s_q + i) * h + off..(g * s_q + i) * h + off + d];
                    let mut any = false;
                    let mut maxs = f64::NEG_INFINITY;
                    for j in 0..s_kv {
                        if mask.hides(g, i, j, s_kv) {
                            scores[j] = f64::NEG_INFINITY;
                            continue;
                        }
                        let krow = &kd[(g * s_kv + j) * h + off..(g * s_kv + j) * h + off + d];
                        let dot: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                        let s = dot * scale + mask.bias(i, j);
                        scores[j] = s;
                        if s > maxs {
                            maxs = s;
                        }
                        any = true;
                    }
                    if !any {
                        continue; // fully masked row: zero output by contract
                    }
                    let wrow =
                        &mut weights[((g * heads + hh) * s_q + i) * s_kv..((g * heads + hh) * s_q + i + 1) * s_kv];
                    let mut z = 0.0;
                    for j in 0..s_kv {
                        if scores[j] == f64::NEG_INFINITY {
                            wrow[j] = 0.0;
                        } else {
                            let e = (scores[j] - maxs).exp();
                            wrow[j] = e;
                            z += e;
                        }
                    }
                    let orow = &mut out[(g * s_q + i) * h + off..(g * s_q + i) * h + off + d];
                    for j in 0..s_kv {
                        if wrow[j] == 0.0 {
                            continue;
                        }
                        wrow[j] /= z;
                        let vrow = &vd[(g * s_kv + j) * h + off..(g * s_kv + j) * h + off + d];
                        let w = wrow[j];
                        for c in 0..d {
                            orow[c] += w * vrow[c];
                        }
                    }
                }
            }
        }
        let rg = self.needs(&[q, k, v]);
        self.push(
            Op::MaskedAttention { q, k, v, heads, weights },
            vec![groups, s_q, h],
            Arc::new(out),
            rg,
        )
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: Arc<Vec<usize>>) -> Var {
        let sl = self.shape(logits);
        assert_eq!(sl.len(), 2, "cross_entropy_mean needs 2-D logits, got {sl:?}");
        let (rows, classes) = (sl[0], sl[1]);
        assert_eq!(targets.len(), rows, "target count {} != logit rows {rows}", targets.len());
        let ld = Arc::clone(&self.nodes[logits.0].data);
        let mut probs = vec![0.0; ld.len()];
        let mut total = 0.0;
        for r in 0..rows {
            let t = targets[r];
            assert!(t < classes, "target {t} out of range 0..{classes}");
            let row = &ld[r * classes..(r + 1) * classes];
            softmax_into(row, &mut probs[r * classes..(r + 1) * classes]);
            let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = maxv + row.iter().map(|v| (v - maxv).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let loss = total / rows as f64;
        let rg = self.needs(&[logits]);
        self.push(
            Op::CrossEntropyMean { logits, targets, probs },
            vec![1],
            Arc::new(vec![loss]),
            rg,
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.data(x).len() as f64;
        let m = self.data(x).iter().sum::<f64>() / n;
        let rg = self.needs(&[x]);
        self.push(Op::MeanAll(x), vec![1], Arc::new(vec![m]), rg)
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    // ───────────────────────── backward ─────────────────────────

    /// Reverse sweep from a scalar loss; returns gradients for every node
    /// with `requires_grad` on its path.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.data(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                grads[idx] = Some(gout);
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accum(&mut grads, *a, &gout);
                    self.accum(&mut grads, *b, &gout);
                }
                Op::Mul(a, b) => {
                    let (ad, bd) = (self.data(*a), self.data(*b));
                    if self.nodes[a.0].requires_grad {
                        let g: Vec<f64> = gout.iter().zip(bd).map(|(g, b)| g * b).collect();
                        self.accum(&mut grads, *a, &g);
                    }
                    if self.nodes[b.0].requires_grad {
                        let g: Vec<f64> = gout.iter().zip(ad).map(|(g, a)| g * a).collect();
                        self.accum(&mut grads, *b, &g);
                    }
                }
                Op::Scale(x, c) => {
                    let g: Vec<f64> = gout.iter().map(|g| g * c).collect();
                    self.accum(&mut grads, *x, &g);
                }
                Op::AddBias { x, bias } => {
                    self.accum(&mut grads, *x, &gout);
                    if self.nodes[bias.0].requires_grad {
                        let d = self.data(*bias).len();
                        let mut g = vec![0.0; d];
                        for (i, v) in gout.iter().enumerate() {
                            g[i % d] += v;
                        }
                        self.accum(&mut grads, *bias, &g);
                    }
                }
                Op::Relu(x) => {
                    let xd = self.data(*x);
                    let g: Vec<f64> = gout
                        .iter()
                        .zip(xd)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accum(&mut grads, *x, &g);
                }
                Op::Matmul { a, b } => {
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let n = self.shape(*b)[1];
                    if self.nodes[a.0].requires_grad {
                        let ga = matmul_bt_raw(&gout, self.data(*b), m, n, k);
                        self.accum(&mut grads, *a, &ga);
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb = matmul_at_raw(self.data(*a), &gout, m, k, n);
                        self.accum(&mut grads, *b, &gb);
                    }
                }
                Op::LayerNorm { x, gain, bias, cache } => {
                    let d = *self.shape(*x).last().unwrap();
                    let xd = self.data(*x);
                    let gd = self.data(*gain);
                    let rows = xd.len() / d;
                    let mut gx = vec![0.0; xd.len()];
                    let mut ggain = vec![0.0; d];
                    let mut gbias = vec![0.0; d];
                    for r in 0..rows {
                        let (mean, rstd) = cache[r];
                        let xrow = &xd[r * d..(r + 1) * d];
                        let grow = &gout[r * d..(r + 1) * d];
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for i in 0..d {
                            let xhat = (xrow[i] - mean) * rstd;
                            let dxhat = grow[i] * gd[i];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                            ggain[i] += grow[i] * xhat;
                            gbias[i] += grow[i];
                        }
                        mean_dxhat /= d as f64;
                        mean_dxhat_xhat /= d as f64;
                        for i in 0..d {
                            let xhat = (xrow[i] - mean) * rstd;
                            let dxhat = grow[i] * gd[i];
                            gx[r * d + i] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                    self.accum(&mut grads, *x, &gx);
                    if self.nodes[gain.0].requires_grad {
                        self.accum(&mut grads, *gain, &ggain);
                    }
                    if self.nodes[bias.0].requires_grad {
                        self.accum(&mut grads, *bias, &gbias);
                    }
                }
                Op::SoftmaxRows(x) => {
                    let d = *self.shape(*x).last().unwrap();
                    let y = &self.nodes[idx].data;
                    let mut gx = vec![0.0; y.len()];
                    for r in 0..y.len() / d {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &gout[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for i in 0..d {
                            gx[r * d + i] = yr[i] * (gr[i] - dot);
                        }
                    }
                    self.accum(&mut grads, *x, &gx);
                }
                Op::EmbeddingLookup { table, ids } => {
                    let d = self.shape(*table)[1];
                    let mut gt = vec![0.0; self.data(*table).len()];
                    for (row, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[id * d + c] += gout[row * d + c];
                        }
                    }
                    self.accum(&mut grads, *table, &gt);
                }
                Op::GatherRows { x, rows } => {
                    let d = self.shape(*x)[1];
                    let mut gx = vec![0.0; self.data(*x).len()];
                    for (out_row, &r) in rows.iter().enumerate() {
                        for c in 0..d {
                            gx[r * d + c] += gout[out_row * d + c];
                        }
                    }
                    self.accum(&mut grads, *x, &gx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.data(p).len();
                        if self.nodes[p.0].requires_grad {
                            self.accum(&mut grads, p, &gout[offset..offset + len]);
                        }
                        offset += len;
                    }
                }
                Op::Reshape(x) => {
                    self.accum(&mut grads, *x, &gout);
                }
                Op::MaskedAttention { q, k, v, heads, weights, .. } => {
                    let (groups, s_q, h) = (
                        self.shape(*q)[0],
                        self.shape(*q)[1],
                        self.shape(*q)[2],
                    );
                    let s_kv = self.shape(*k)[1];
                    let d = h / heads;
                    let scale = 1.0 / (d as f64).sqrt();
                    let (qd, kd, vd) = (self.data(*q), self.data(*k), self.data(*v));
                    let mut gq = vec![0.0; qd.len()];
                    let mut gk = vec![0.0; kd.len()];
                    let mut gv = vec![0.0; vd.len()];
                    let mut dw = vec![0.0; s_kv];
                    for g in 0..groups {
                        for hh in 0..*heads {
                            let off = hh * d;
                            for i in 0..s_q {
                                let wrow = &weights
                                    [((g * *heads + hh) * s_q + i) * s_kv..((g * *heads + hh) * s_q + i + 1) * s_kv];
                                let gorow = &gout[(g * s_q + i) * h + off..(g * s_q + i) * h + off + d];
                                let mut wdot = 0.0;
                                for j in 0..s_kv {
                                    if wrow[j] == 0.0 {
                                        dw[j] = 0.0;
                                        continue;
                                    }
                                    let vrow = &vd[(g * s_kv + j) * h + off..(g * s_kv + j) * h + off + d];
                                    let dot: f64 = gorow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                                    dw[j] = dot;
                                    wdot += wrow[j] * dot;
                                    for c in 0..d {
                                        gv[(g * s_kv + j) * h + off + c] += wrow[j] * gorow[c];
                                    }
                                }
                                let qrow = &qd[(g * s_q + i) * h + off..(g * s_q + i) * h + off + d];
                                for j in 0..s_kv {
                                    if wrow[j] == 0.0 {
                                        continue;
                                    }
                                    let ds = wrow[j] * (dw[j] - wdot) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    let krow = &kd[(g * s_kv + j) * h + off..(g * s_kv + j) * h + off + d];
                                    for c in 0..d {
                                        gq[(g * s_q + i) * h + off + c] += ds * krow[c];
                                        gk[(g * s_kv + j) * h + off + c] += ds * qrow[c];
                                    }
                                }
                            }
                        }
                    }
                    self.accum(&mut grads, *q, &gq);
                    self.accum(&mut grads, *k, &gk);
                    self.accum(&mut grads, *v, &gv);
                }
                Op::CrossEntropyMean { logits, targets, probs } => {
                    let classes = self.shape(*logits)[1];
                    let rows = targets.len();
                    let g = gout[0] / rows as f64;
                    let mut gl = probs.iter().map(|p| p * g).collect::<Vec<f64>>();
                    for (r, &t) in targets.iter().enumerate() {
                        gl[r * classes + t] -= g;
                    }
                    self.accum(&mut grads, *logits, &gl);
                }
                Op::MeanAll(x) => {
                    let n = self.data(*x).len();
                    let g = gout[0] / n as f64;
                    let gx = vec![g; n];
                    self.accum(&mut grads, *x, &gx);
                }
            }
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => grads[v.0] = Some(delta.to_vec()),
        }
    }
}

/// Single-head scaled dot-product attention over 2-D `q/k/v`, per the usual
/// `softmax(q k^T / sqrt(d) + mask) v`; fully masked rows output zeros.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var, mask: &AdditiveMask) -> Var {
    let sq = tape.shape(q).to_vec();
    let sk = tape.shape(k).to_vec();
    assert!(
        sq.len() == 2 && sk.len() == 2 && sq[1] == sk[1],
        "scaled_dot_attention: incompatible shapes {sq:?} x {sk:?}"
    );
    let q3 = tape.reshape(q, vec![1, sq[0], sq[1]]);
    let k3 = tape.reshape(k, vec![1, sk[0], sk[1]]);
    let v3 = tape.reshape(v, vec![1, sk[0], sk[1]]);
    let out = tape.masked_attention(q3, k3, v3, 1, AttnMask::Shared(Arc::new(mask.clone())));
    tape.reshape(out, vec![sq[0], sq[1]])
}

/// `-log softmax(logits)[target]` for one row, without a tape.
pub fn cross_entropy_row(logits: &[f64], target: usize) -> f64 {
    assert!(target < logits.len(), "target {target} out of range 0..{}", logits.len());
    let maxv = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = maxv + logits.iter().map(|v| (v - maxv).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Numerically stable softmax into an output slice.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        let e = (v - maxv).exp();
        *o = e;
        z += e;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// `[m, k] x [k, n]` row-major product.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
    c
}

/// `a^T x c` where `a: [m, k]`, `c: [m, n]` -> `[k, n]`.
fn matmul_at_raw(a: &[f64], c: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * crow[j];
            }
        }
    }
    out
}

/// `c x b^T` where `c: [m, n]`, `b: [k, n]` -> `[m, k]`.
fn matmul_bt_raw(c: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += crow[j] * brow[j];
            }
            out[i * k + kk] = acc;
        }
    }
    out
}
