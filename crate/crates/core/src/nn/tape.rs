//! Reverse-mode differentiation tape.
//!
//! Node values and gradients live in two flat arenas with identical layout,
//! so a reset keeps every allocation. Parameters are referenced by id and
//! read from a [`ParameterStore`] passed to each call, which keeps the tape
//! free of long-lived borrows.

use smallvec::SmallVec;

use super::params::{Gradients, ParamId, ParameterStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

type Parents = SmallVec<[NodeId; 6]>;

#[derive(Debug, Clone)]
enum Op {
    Input,
    /// Leaf mirroring a whole parameter array (used for biases and direct reads).
    Param(ParamId),
    MatVec {
        w: ParamId,
        x: NodeId,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Square(NodeId),
    Concat(Parents),
    Slice {
        x: NodeId,
        from: usize,
    },
    Pick {
        x: NodeId,
        idx: usize,
    },
    Dot(NodeId, NodeId),
    Softmax(NodeId),
    WeightedSum {
        weights: NodeId,
        values: Parents,
    },
    MeanStack(Parents),
    SumStack(Parents),
    L1(NodeId, NodeId),
    LogProb {
        logits: NodeId,
        idx: usize,
    },
    /// One gated recurrent step. Value layout: [h', c', i, f, g, o, tanh(c')],
    /// seven hidden-sized blocks. Downstream code reads h'/c' via `Slice`.
    LstmStep {
        wx: ParamId,
        wh: ParamId,
        b: ParamId,
        x: NodeId,
        h_prev: NodeId,
        c_prev: NodeId,
    },
}

#[derive(Debug, Clone)]
struct Node {
    off: usize,
    len: usize,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<f64>,
    grads: Vec<f64>,
    scratch: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// y += W x  with W row-major (rows x cols), x of length cols.
fn matvec_acc(w: &[f64], rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(y.len(), rows);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for c in 0..cols {
            acc += row[c] * x[c];
        }
        y[r] += acc;
    }
}

/// x_grad += W^T g; w_grad[r][c] += g[r] * x[c].
fn matvec_backward(
    w: &[f64],
    rows: usize,
    cols: usize,
    x: &[f64],
    g: &[f64],
    w_grad: &mut [f64],
    x_grad: &mut [f64],
) {
    for r in 0..rows {
        let gr = g[r];
        if gr == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        let wg = &mut w_grad[r * cols..(r + 1) * cols];
        for c in 0..cols {
            wg[c] += gr * x[c];
            x_grad[c] += row[c] * gr;
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drop all nodes but keep the arena capacity.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.vals.clear();
        self.grads.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn val(&self, id: NodeId) -> &[f64] {
        let n = &self.nodes[id.0];
        &self.vals[n.off..n.off + n.len]
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.val(id);
        debug_assert_eq!(v.len(), 1);
        v[0]
    }

    fn push(&mut self, len: usize, op: Op) -> NodeId {
        let off = self.vals.len();
        self.vals.resize(off + len, 0.0);
        self.grads.resize(off + len, 0.0);
        self.nodes.push(Node { off, len, op });
        NodeId(self.nodes.len() - 1)
    }

    fn val_mut(&mut self, id: NodeId) -> &mut [f64] {
        let n = &self.nodes[id.0];
        &mut self.vals[n.off..n.off + n.len]
    }

    pub fn input(&mut self, data: &[f64]) -> NodeId {
        let id = self.push(data.len(), Op::Input);
        self.val_mut(id).copy_from_slice(data);
        id
    }

    pub fn zeros(&mut self, len: usize) -> NodeId {
        self.push(len, Op::Input)
    }

    pub fn param(&mut self, store: &ParameterStore, p: ParamId) -> NodeId {
        let v = store.value(p);
        let id = self.push(v.len(), Op::Param(p));
        self.val_mut(id).copy_from_slice(store.value(p));
        id
    }

    pub fn matvec(&mut self, store: &ParameterStore, w: ParamId, x: NodeId) -> NodeId {
        let (rows, cols) = store.shape(w);
        assert_eq!(self.nodes[x.0].len, cols, "matvec input dim mismatch");
        let id = self.push(rows, Op::MatVec { w, x });
        let (xo, xl) = (self.nodes[x.0].off, self.nodes[x.0].len);
        let o = self.nodes[id.0].off;
        let (left, right) = self.vals.split_at_mut(o);
        matvec_acc(store.value(w), rows, cols, &left[xo..xo + xl], &mut right[..rows]);
        id
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> NodeId {
        assert_eq!(self.nodes[a.0].len, self.nodes[b.0].len, "shape mismatch");
        let len = self.nodes[a.0].len;
        let id = self.push(len, op);
        let (ao, bo, o) = (self.nodes[a.0].off, self.nodes[b.0].off, self.nodes[id.0].off);
        for i in 0..len {
            self.vals[o + i] = f(self.vals[ao + i], self.vals[bo + i]);
        }
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn unary(&mut self, x: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let len = self.nodes[x.0].len;
        let id = self.push(len, op);
        let (xo, o) = (self.nodes[x.0].off, self.nodes[id.0].off);
        for i in 0..len {
            self.vals[o + i] = f(self.vals[xo + i]);
        }
        id
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, Op::Scale(x, c), |v| c * v)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let len = parts.iter().map(|p| self.nodes[p.0].len).sum();
        let id = self.push(len, Op::Concat(parts.iter().copied().collect()));
        let mut cursor = self.nodes[id.0].off;
        for p in parts {
            let (po, pl) = (self.nodes[p.0].off, self.nodes[p.0].len);
            let (left, right) = self.vals.split_at_mut(cursor);
            right[..pl].copy_from_slice(&left[po..po + pl]);
            cursor += pl;
        }
        id
    }

    pub fn slice(&mut self, x: NodeId, from: usize, len: usize) -> NodeId {
        assert!(from + len <= self.nodes[x.0].len, "slice out of bounds");
        let id = self.push(len, Op::Slice { x, from });
        let xo = self.nodes[x.0].off;
        let o = self.nodes[id.0].off;
        let (left, right) = self.vals.split_at_mut(o);
        right[..len].copy_from_slice(&left[xo + from..xo + from + len]);
        id
    }

    pub fn pick(&mut self, x: NodeId, idx: usize) -> NodeId {
        assert!(idx < self.nodes[x.0].len);
        let id = self.push(1, Op::Pick { x, idx });
        let v = self.vals[self.nodes[x.0].off + idx];
        self.val_mut(id)[0] = v;
        id
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a.0].len, self.nodes[b.0].len);
        let id = self.push(1, Op::Dot(a, b));
        let (ao, bo) = (self.nodes[a.0].off, self.nodes[b.0].off);
        let len = self.nodes[a.0].len;
        let mut acc = 0.0;
        for i in 0..len {
            acc += self.vals[ao + i] * self.vals[bo + i];
        }
        self.val_mut(id)[0] = acc;
        id
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let len = self.nodes[x.0].len;
        let id = self.push(len, Op::Softmax(x));
        let (xo, o) = (self.nodes[x.0].off, self.nodes[id.0].off);
        let max = self.vals[xo..xo + len]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for i in 0..len {
            let e = (self.vals[xo + i] - max).exp();
            self.vals[o + i] = e;
            sum += e;
        }
        for i in 0..len {
            self.vals[o + i] /= sum;
        }
        id
    }

    /// y = sum_i weights[i] * values[i], with `weights` a vector node of the
    /// same length as `values`.
    pub fn weighted_sum(&mut self, weights: NodeId, values: &[NodeId]) -> NodeId {
        assert_eq!(self.nodes[weights.0].len, values.len());
        assert!(!values.is_empty());
        let len = self.nodes[values[0].0].len;
        let id = self.push(
            len,
            Op::WeightedSum {
                weights,
                values: values.iter().copied().collect(),
            },
        );
        let wo = self.nodes[weights.0].off;
        let o = self.nodes[id.0].off;
        for (k, v) in values.iter().enumerate() {
            assert_eq!(self.nodes[v.0].len, len);
            let w = self.vals[wo + k];
            let vo = self.nodes[v.0].off;
            for i in 0..len {
                self.vals[o + i] += w * self.vals[vo + i];
            }
        }
        id
    }

    pub fn mean_stack(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let len = self.nodes[parts[0].0].len;
        let id = self.push(len, Op::MeanStack(parts.iter().copied().collect()));
        let o = self.nodes[id.0].off;
        let inv = 1.0 / parts.len() as f64;
        for p in parts {
            assert_eq!(self.nodes[p.0].len, len);
            let po = self.nodes[p.0].off;
            for i in 0..len {
                self.vals[o + i] += inv * self.vals[po + i];
            }
        }
        id
    }

    pub fn sum_stack(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let len = self.nodes[parts[0].0].len;
        let id = self.push(len, Op::SumStack(parts.iter().copied().collect()));
        let o = self.nodes[id.0].off;
        for p in parts {
            assert_eq!(self.nodes[p.0].len, len);
            let po = self.nodes[p.0].off;
            for i in 0..len {
                self.vals[o + i] += self.vals[po + i];
            }
        }
        id
    }

    /// Sum of absolute component differences; subgradient 0 at ties.
    pub fn l1_loss(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a.0].len, self.nodes[b.0].len, "l1 shape mismatch");
        let id = self.push(1, Op::L1(a, b));
        let (ao, bo) = (self.nodes[a.0].off, self.nodes[b.0].off);
        let len = self.nodes[a.0].len;
        let mut acc = 0.0;
        for i in 0..len {
            acc += (self.vals[ao + i] - self.vals[bo + i]).abs();
        }
        self.val_mut(id)[0] = acc;
        id
    }

    /// log softmax(logits)[idx], computed stably from the raw logits.
    pub fn log_prob(&mut self, logits: NodeId, idx: usize) -> NodeId {
        let len = self.nodes[logits.0].len;
        assert!(idx < len);
        let id = self.push(1, Op::LogProb { logits, idx });
        let lo = self.nodes[logits.0].off;
        let max = self.vals[lo..lo + len]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + self.vals[lo..lo + len]
                .iter()
                .map(|v| (v - max).exp())
                .sum::<f64>()
                .ln();
        self.val_mut(id)[0] = self.vals[lo + idx] - lse;
        id
    }

    /// One LSTM step; returns the (h, c) views on the fused node.
    pub fn lstm_step(
        &mut self,
        store: &ParameterStore,
        wx: ParamId,
        wh: ParamId,
        b: ParamId,
        x: NodeId,
        state: (NodeId, NodeId),
    ) -> (NodeId, NodeId) {
        let (h_prev, c_prev) = state;
        let (rows, in_dim) = store.shape(wx);
        let hidden = rows / 4;
        assert_eq!(self.nodes[x.0].len, in_dim, "lstm input dim mismatch");
        assert_eq!(self.nodes[h_prev.0].len, hidden);
        assert_eq!(self.nodes[c_prev.0].len, hidden);

        let id = self.push(
            7 * hidden,
            Op::LstmStep {
                wx,
                wh,
                b,
                x,
                h_prev,
                c_prev,
            },
        );

        // pre-activations in the reused scratch buffer: [i, f, g, o]
        let mut pre = std::mem::take(&mut self.scratch);
        pre.clear();
        pre.extend_from_slice(store.value(b));
        {
            let xo = self.nodes[x.0].off;
            let xv = &self.vals[xo..xo + in_dim];
            matvec_acc(store.value(wx), 4 * hidden, in_dim, xv, &mut pre);
            let ho = self.nodes[h_prev.0].off;
            let hv = &self.vals[ho..ho + hidden];
            matvec_acc(store.value(wh), 4 * hidden, hidden, hv, &mut pre);
        }
        let co = self.nodes[c_prev.0].off;
        let o = self.nodes[id.0].off;
        for j in 0..hidden {
            let i_g = sigmoid(pre[j]);
            let f_g = sigmoid(pre[hidden + j]);
            let g_g = pre[2 * hidden + j].tanh();
            let o_g = sigmoid(pre[3 * hidden + j]);
            let c_new = f_g * self.vals[co + j] + i_g * g_g;
            let tc = c_new.tanh();
            self.vals[o + j] = o_g * tc; // h'
            self.vals[o + hidden + j] = c_new; // c'
            self.vals[o + 2 * hidden + j] = i_g;
            self.vals[o + 3 * hidden + j] = f_g;
            self.vals[o + 4 * hidden + j] = g_g;
            self.vals[o + 5 * hidden + j] = o_g;
            self.vals[o + 6 * hidden + j] = tc;
        }
        self.scratch = pre;
        let h = self.slice(id, 0, hidden);
        let c = self.slice(id, hidden, hidden);
        (h, c)
    }

    /// Reverse sweep from a scalar loss node. Returns parameter gradients;
    /// intermediate node gradients stay on the tape (readable via
    /// [`node_grad`](Self::node_grad) until the next reset).
    pub fn backward(&mut self, store: &ParameterStore, loss: NodeId) -> Gradients {
        assert_eq!(self.nodes[loss.0].len, 1, "loss must be scalar");
        self.grads.iter_mut().for_each(|g| *g = 0.0);
        self.grads[self.nodes[loss.0].off] = 1.0;
        let mut out = Gradients::new(store.len());

        for ni in (0..=loss.0).rev() {
            let node = self.nodes[ni].clone();
            let (go, glen) = (node.off, node.len);
            match node.op {
                Op::Input => {}
                Op::Param(p) => {
                    let slot = out.slot(p, glen);
                    for i in 0..glen {
                        slot[i] += self.grads[go + i];
                    }
                }
                Op::MatVec { w, x } => {
                    let (rows, cols) = store.shape(w);
                    let xn = &self.nodes[x.0];
                    let (xo, xl) = (xn.off, xn.len);
                    let xv = &self.vals[xo..xo + xl];
                    // gradient slices: parent strictly before child in arena
                    let (gleft, gright) = self.grads.split_at_mut(go);
                    let g = &gright[..rows];
                    let wslot = out.slot(w, rows * cols);
                    matvec_backward(store.value(w), rows, cols, xv, g, wslot, &mut gleft[xo..xo + xl]);
                }
                Op::Add(a, b) => {
                    for (p, sign) in [(a, 1.0), (b, 1.0_f64)] {
                        let po = self.nodes[p.0].off;
                        for i in 0..glen {
                            self.grads[po + i] += sign * self.grads[go + i];
                        }
                    }
                }
                Op::Sub(a, b) => {
                    let ao = self.nodes[a.0].off;
                    let bo = self.nodes[b.0].off;
                    for i in 0..glen {
                        let g = self.grads[go + i];
                        self.grads[ao + i] += g;
                        self.grads[bo + i] -= g;
                    }
                }
                Op::Mul(a, b) => {
                    let ao = self.nodes[a.0].off;
                    let bo = self.nodes[b.0].off;
                    for i in 0..glen {
                        let g = self.grads[go + i];
                        let (av, bv) = (self.vals[ao + i], self.vals[bo + i]);
                        self.grads[ao + i] += g * bv;
                        self.grads[bo + i] += g * av;
                    }
                }
                Op::Scale(x, c) => {
                    let xo = self.nodes[x.0].off;
                    for i in 0..glen {
                        self.grads[xo + i] += c * self.grads[go + i];
                    }
                }
                Op::Tanh(x) => {
                    let xo = self.nodes[x.0].off;
                    for i in 0..glen {
                        let y = self.vals[go + i];
                        self.grads[xo + i] += self.grads[go + i] * (1.0 - y * y);
                    }
                }
                Op::Sigmoid(x) => {
                    let xo = self.nodes[x.0].off;
                    for i in 0..glen {
                        let y = self.vals[go + i];
                        self.grads[xo + i] += self.grads[go + i] * y * (1.0 - y);
                    }
                }
                Op::Relu(x) => {
                    let xo = self.nodes[x.0].off;
                    for i in 0..glen {
                        if self.vals[go + i] > 0.0 {
                            self.grads[xo + i] += self.grads[go + i];
                        }
                    }
                }
                Op::Square(x) => {
                    let xo = self.nodes[x.0].off;
                    for i in 0..glen {
                        self.grads[xo + i] += self.grads[go + i] * 2.0 * self.vals[xo + i];
                    }
                }
                Op::Concat(ref parts) => {
                    let mut cursor = 0;
                    for p in parts {
                        let (po, pl) = (self.nodes[p.0].off, self.nodes[p.0].len);
                        for i in 0..pl {
                            self.grads[po + i] += self.grads[go + cursor + i];
                        }
                        cursor += pl;
                    }
                }
                Op::Slice { x, from } => {
                    let xo = self.nodes[x.0].off;
                    for i in 0..glen {
                        self.grads[xo + from + i] += self.grads[go + i];
                    }
                }
                Op::Pick { x, idx } => {
                    let xo = self.nodes[x.0].off;
                    self.grads[xo + idx] += self.grads[go];
                }
                Op::Dot(a, b) => {
                    let g = self.grads[go];
                    let (ao, al) = (self.nodes[a.0].off, self.nodes[a.0].len);
                    let bo = self.nodes[b.0].off;
                    for i in 0..al {
                        self.grads[ao + i] += g * self.vals[bo + i];
                        self.grads[bo + i] += g * self.vals[ao + i];
                    }
                }
                Op::Softmax(x) => {
                    let xo = self.nodes[x.0].off;
                    let mut dot = 0.0;
                    for i in 0..glen {
                        dot += self.grads[go + i] * self.vals[go + i];
                    }
                    for i in 0..glen {
                        self.grads[xo + i] += self.vals[go + i] * (self.grads[go + i] - dot);
                    }
                }
                Op::WeightedSum {
                    weights,
                    ref values,
                } => {
                    let wo = self.nodes[weights.0].off;
                    for (k, v) in values.iter().enumerate() {
                        let vo = self.nodes[v.0].off;
                        let wk = self.vals[wo + k];
                        let mut acc = 0.0;
                        for i in 0..glen {
                            let g = self.grads[go + i];
                            acc += g * self.vals[vo + i];
                            self.grads[vo + i] += wk * g;
                        }
                        self.grads[wo + k] += acc;
                    }
                }
                Op::MeanStack(ref parts) => {
                    let inv = 1.0 / parts.len() as f64;
                    for p in parts {
                        let po = self.nodes[p.0].off;
                        for i in 0..glen {
                            self.grads[po + i] += inv * self.grads[go + i];
                        }
                    }
                }
                Op::SumStack(ref parts) => {
                    for p in parts {
                        let po = self.nodes[p.0].off;
                        for i in 0..glen {
                            self.grads[po + i] += self.grads[go + i];
                        }
                    }
                }
                Op::L1(a, b) => {
                    let g = self.grads[go];
                    let (ao, al) = (self.nodes[a.0].off, self.nodes[a.0].len);
                    let bo = self.nodes[b.0].off;
                    for i in 0..al {
                        let d = self.vals[ao + i] - self.vals[bo + i];
                        let s = if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        self.grads[ao + i] += g * s;
                        self.grads[bo + i] -= g * s;
                    }
                }
                Op::LogProb { logits, idx } => {
                    let g = self.grads[go];
                    let (lo, ll) = (self.nodes[logits.0].off, self.nodes[logits.0].len);
                    let max = self.vals[lo..lo + ll]
                        .iter()
                        .cloned()
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    let mut probs = SmallVec::<[f64; 8]>::new();
                    for i in 0..ll {
                        let e = (self.vals[lo + i] - max).exp();
                        probs.push(e);
                        sum += e;
                    }
                    for i in 0..ll {
                        let p = probs[i] / sum;
                        let delta = if i == idx { 1.0 } else { 0.0 };
                        self.grads[lo + i] += g * (delta - p);
                    }
                }
                Op::LstmStep {
                    wx,
                    wh,
                    b,
                    x,
                    h_prev,
                    c_prev,
                } => {
                    let hidden = glen / 7;
                    let (rows, in_dim) = store.shape(wx);
                    debug_assert_eq!(rows, 4 * hidden);
                    let mut dpre = std::mem::take(&mut self.scratch);
                    dpre.clear();
                    dpre.resize(4 * hidden, 0.0);
                    let co = self.nodes[c_prev.0].off;
                    {
                        // value blocks: h' c' i f g o tc
                        let v = &self.vals[go..go + glen];
                        for j in 0..hidden {
                            let dh = self.grads[go + j];
                            let dc_direct = self.grads[go + hidden + j];
                            let i_g = v[2 * hidden + j];
                            let f_g = v[3 * hidden + j];
                            let g_g = v[4 * hidden + j];
                            let o_g = v[5 * hidden + j];
                            let tc = v[6 * hidden + j];
                            let dc = dh * o_g * (1.0 - tc * tc) + dc_direct;
                            dpre[j] = dc * g_g * i_g * (1.0 - i_g); // input gate
                            dpre[hidden + j] = dc * self.vals[co + j] * f_g * (1.0 - f_g); // forget
                            dpre[2 * hidden + j] = dc * i_g * (1.0 - g_g * g_g); // cell cand
                            dpre[3 * hidden + j] = dh * tc * o_g * (1.0 - o_g); // output gate
                            // pass cell gradient to the previous cell state
                            self.grads[co + j] += dc * f_g;
                        }
                    }
                    // bias
                    {
                        let slot = out.slot(b, 4 * hidden);
                        for i in 0..4 * hidden {
                            slot[i] += dpre[i];
                        }
                    }
                    // weights and inputs
                    let (xo, xl) = (self.nodes[x.0].off, self.nodes[x.0].len);
                    let ho = self.nodes[h_prev.0].off;
                    {
                        let wslot = out.slot(wx, 4 * hidden * in_dim);
                        let (gleft, _) = self.grads.split_at_mut(go);
                        matvec_backward(
                            store.value(wx),
                            4 * hidden,
                            in_dim,
                            &self.vals[xo..xo + xl],
                            &dpre,
                            wslot,
                            &mut gleft[xo..xo + xl],
                        );
                    }
                    {
                        let wslot = out.slot(wh, 4 * hidden * hidden);
                        let (gleft, _) = self.grads.split_at_mut(go);
                        matvec_backward(
                            store.value(wh),
                            4 * hidden,
                            hidden,
                            &self.vals[ho..ho + hidden],
                            &dpre,
                            wslot,
                            &mut gleft[ho..ho + hidden],
                        );
                    }
                    self.scratch = dpre;
                }
            }
        }
        out
    }

    /// Gradient of the last backward pass w.r.t. a node (for tests).
    pub fn node_grad(&self, id: NodeId) -> &[f64] {
        let n = &self.nodes[id.0];
        &self.grads[n.off..n.off + n.len]
    }
}

/// Softmax attention over query-key inner products; returns the weight vector
/// node (nonnegative, summing to one).
pub fn attention_weights(tape: &mut Tape, query: NodeId, keys: &[NodeId]) -> NodeId {
    assert!(!keys.is_empty(), "attention needs at least one key");
    let scores: Vec<NodeId> = keys.iter().map(|&k| tape.dot(query, k)).collect();
    let stacked = tape.concat(&scores);
    tape.softmax(stacked)
}
