use std::borrow::Cow;
use std::rc::Rc;

use super::{matmul_into, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// A contiguous block of rows belonging to one sequence of a packed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

/// Column window into a node's value, used by the fused attention op.
#[derive(Debug, Clone, Copy)]
struct Cols {
    var: Var,
    offset: usize,
}

enum Op<T> {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Dropout(Var, Vec<T>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        rstd: Vec<T>,
    },
    Embed {
        table: Var,
        ids: Vec<u32>,
    },
    SegmentMean {
        x: Var,
        segs: Rc<Vec<Segment>>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Attention {
        q: Cols,
        k: Cols,
        v: Cols,
        width: usize,
        heads: usize,
        q_segs: Rc<Vec<Segment>>,
        k_segs: Rc<Vec<Segment>>,
        causal: bool,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        probs: Tensor<T>,
    },
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
}

/// A tape of operations recorded during a forward pass.
///
/// Values of parameter leaves are borrowed, so building a graph over a large
/// parameter set costs nothing until gradients are requested.
pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
}

impl<'a, T: Real> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A trainable leaf; its gradient is reported under `index`.
    pub fn param(&mut self, index: usize, value: &'a Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Param(index),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = (self.value(a).rows(), self.value(b).cols());
        let mut out = Tensor::zeros(m, n);
        matmul_into(self.value(a), false, self.value(b), false, &mut out, false);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!((1, self.value(a).cols()), r.shape(), "add_row shape mismatch");
        let r = r.data().to_vec();
        let mut out = self.value(a).clone();
        let cols = out.cols();
        for chunk in out.data_mut().chunks_mut(cols) {
            for (x, b) in chunk.iter_mut().zip(&r) {
                *x += *b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x *= s);
        self.push(out, Op::Scale(a, s))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::from_f64(GELU_C);
        let k = T::from_f64(GELU_A);
        let half = T::from_f64(0.5);
        let mut out = self.value(a).clone();
        for x in out.data_mut() {
            let v = *x;
            *x = half * v * (T::ONE + (c * (v + k * v * v * v)).tanh());
        }
        self.push(out, Op::Gelu(a))
    }

    /// Inverted dropout with a precomputed keep mask (`0` or `1/(1-p)` per entry).
    pub fn dropout(&mut self, a: Var, mask: Vec<T>) -> Var {
        assert_eq!(mask.len(), self.value(a).len());
        let mut out = self.value(a).clone();
        for (x, m) in out.data_mut().iter_mut().zip(&mask) {
            *x *= *m;
        }
        self.push(out, Op::Dropout(a, mask))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        assert_eq!(g.len(), cols);
        let mut out = Tensor::zeros(xv.rows(), cols);
        let mut rstd = Vec::with_capacity(xv.rows());
        let inv_n = T::from_f64(1.0 / cols as f64);
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rs = T::ONE / (var + T::from_f64(LN_EPS)).sqrt();
            rstd.push(rs);
            for ((o, &v), (&gi, &bi)) in out.row_mut(r).iter_mut().zip(row).zip(g.iter().zip(b)) {
                *o = (v - mean) * rs * gi + bi;
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, rstd })
    }

    /// Gathers rows of `table` by id.
    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Var {
        let t = self.value(table);
        let cols = t.cols();
        let mut out = Tensor::zeros(ids.len(), cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id as usize));
        }
        self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Mean of the rows of each segment: one output row per segment.
    pub fn segment_mean(&mut self, x: Var, segs: Rc<Vec<Segment>>) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = Tensor::zeros(segs.len(), cols);
        for (s, seg) in segs.iter().enumerate() {
            assert!(seg.len > 0, "segment_mean over an empty segment");
            let inv = T::from_f64(1.0 / seg.len as f64);
            let o = out.row_mut(s);
            for r in seg.start..seg.start + seg.len {
                for (acc, &v) in o.iter_mut().zip(xv.row(r)) {
                    *acc += v;
                }
            }
            o.iter_mut().for_each(|v| *v *= inv);
        }
        self.push(out, Op::SegmentMean { x, segs })
    }

    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(rows.len(), xv.cols());
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(xv.row(r));
        }
        self.push(out, Op::SelectRows { x, rows })
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// Queries come from columns `[q_off, q_off + width)` of `q`, likewise for
    /// keys and values. Query segment `i` attends to key segment `i`; with
    /// `causal`, query row `t` only sees key rows `0..=t` of its segment.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        (q, q_off): (Var, usize),
        (k, k_off): (Var, usize),
        (v, v_off): (Var, usize),
        width: usize,
        heads: usize,
        q_segs: Rc<Vec<Segment>>,
        k_segs: Rc<Vec<Segment>>,
        causal: bool,
    ) -> Var {
        assert_eq!(width % heads, 0);
        assert_eq!(q_segs.len(), k_segs.len());
        let dh = width / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (qc, kc, vc) = (qv.cols(), kv.cols(), vv.cols());
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut out = Tensor::zeros(qv.rows(), width);
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for (qs, ks) in q_segs.iter().zip(k_segs.iter()) {
            if causal {
                assert_eq!(qs.len, ks.len, "causal attention needs equal segment lengths");
            }
            for h in 0..heads {
                let ho = h * dh;
                for i in 0..qs.len {
                    let qrow = &qd[(qs.start + i) * qc + q_off + ho..][..dh];
                    let visible = if causal { i + 1 } else { ks.len };
                    scores.clear();
                    let mut max = T::from_f64(f64::NEG_INFINITY);
                    for j in 0..visible {
                        let krow = &kd[(ks.start + j) * kc + k_off + ho..][..dh];
                        let s = qrow.iter().zip(krow).map(|(&a, &b)| a * b).sum::<T>() * scale;
                        max = max.max(s);
                        scores.push(s);
                    }
                    let mut total = T::ZERO;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    let orow = &mut out.data_mut()[(qs.start + i) * width + ho..][..dh];
                    for (j, s) in scores.iter().enumerate() {
                        let p = *s / total;
                        probs.push(p);
                        let vrow = &vd[(ks.start + j) * vc + v_off + ho..][..dh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q: Cols { var: q, offset: q_off },
                k: Cols { var: k, offset: k_off },
                v: Cols { var: v, offset: v_off },
                width,
                heads,
                q_segs,
                k_segs,
                causal,
                probs,
            },
        )
    }

    /// Mean token cross-entropy of `logits` rows against `targets`, as a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len());
        let mut probs = Tensor::zeros(lv.rows(), lv.cols());
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::from_f64(f64::NEG_INFINITY), T::max);
            let mut z = T::ZERO;
            let prow = probs.row_mut(r);
            for (p, &x) in prow.iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            prow.iter_mut().for_each(|p| *p /= z);
            total += (max + z.ln() - row[t as usize]).to_f64();
        }
        let n = targets.len().max(1) as f64;
        self.push(
            Tensor::from_vec(1, 1, vec![T::from_f64(total / n)]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Back-propagates from the scalar node `loss` and returns gradients for
    /// parameter leaves, indexed as in [`Graph::param`]. Parameters that did
    /// not take part in the loss get `None`.
    pub fn backward(&self, loss: Var, n_params: usize) -> Vec<Option<Tensor<T>>> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(1, 1, T::ONE));
        let mut param_grads: Vec<Option<Tensor<T>>> = (0..n_params).map(|_| None).collect();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => accumulate(&mut param_grads[*p], g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    matmul_into(&g, false, bv, true, &mut ga, false);
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    matmul_into(av, true, &g, false, &mut gb, false);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[b.0], g.clone());
                    accumulate(&mut grads[a.0], g);
                }
                Op::AddRow(a, row) => {
                    let cols = g.cols();
                    let mut gr = Tensor::zeros(1, cols);
                    for chunk in g.data().chunks(cols) {
                        for (acc, &x) in gr.data_mut().iter_mut().zip(chunk) {
                            *acc += x;
                        }
                    }
                    accumulate(&mut grads[row.0], gr);
                    accumulate(&mut grads[a.0], g);
                }
                Op::Scale(a, s) => {
                    let mut g = g;
                    g.data_mut().iter_mut().for_each(|x| *x *= *s);
                    accumulate(&mut grads[a.0], g);
                }
                Op::Gelu(a) => {
                    let c = T::from_f64(GELU_C);
                    let k = T::from_f64(GELU_A);
                    let half = T::from_f64(0.5);
                    let three_k = T::from_f64(3.0 * GELU_A);
                    let mut g = g;
                    for (gx, &x) in g.data_mut().iter_mut().zip(self.value(*a).data()) {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let d = half * (T::ONE + t) + half * x * (T::ONE - t * t) * c * (T::ONE + three_k * x * x);
                        *gx *= d;
                    }
                    accumulate(&mut grads[a.0], g);
                }
                Op::Dropout(a, mask) => {
                    let mut g = g;
                    for (x, m) in g.data_mut().iter_mut().zip(mask) {
                        *x *= *m;
                    }
                    accumulate(&mut grads[a.0], g);
                }
                Op::LayerNorm { x, gain, bias, rstd } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain).data();
                    let cols = xv.cols();
                    let inv_n = T::from_f64(1.0 / cols as f64);
                    let mut gx = Tensor::zeros(xv.rows(), cols);
                    let mut gg = Tensor::zeros(1, cols);
                    let mut gb = Tensor::zeros(1, cols);
                    let mut xhat = vec![T::ZERO; cols];
                    let mut dxhat = vec![T::ZERO; cols];
                    for r in 0..xv.rows() {
                        let row = xv.row(r);
                        let mean = row.iter().copied().sum::<T>() * inv_n;
                        let rs = rstd[r];
                        let grow = g.row(r);
                        let mut m1 = T::ZERO;
                        let mut m2 = T::ZERO;
                        for c in 0..cols {
                            xhat[c] = (row[c] - mean) * rs;
                            dxhat[c] = grow[c] * gv[c];
                            m1 += dxhat[c];
                            m2 += dxhat[c] * xhat[c];
                            gg.data_mut()[c] += grow[c] * xhat[c];
                            gb.data_mut()[c] += grow[c];
                        }
                        m1 *= inv_n;
                        m2 *= inv_n;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = rs * (dxhat[c] - m1 - xhat[c] * m2);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[gain.0], gg);
                    accumulate(&mut grads[bias.0], gb);
                }
                Op::Embed { table, ids } => {
                    let tv = self.value(*table);
                    let mut gt = Tensor::zeros(tv.rows(), tv.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (acc, &x) in gt.row_mut(id as usize).iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                    accumulate(&mut grads[table.0], gt);
                }
                Op::SegmentMean { x, segs } => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    for (s, seg) in segs.iter().enumerate() {
                        let inv = T::from_f64(1.0 / seg.len as f64);
                        for r in seg.start..seg.start + seg.len {
                            for (o, &gv) in gx.row_mut(r).iter_mut().zip(g.row(s)) {
                                *o = gv * inv;
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::SelectRows { x, rows } => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, &gv) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += gv;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    width,
                    heads,
                    q_segs,
                    k_segs,
                    causal,
                    probs,
                } => {
                    let (gq, gk, gv) =
                        self.attention_backward(&g, (*q, *k, *v), *width, *heads, (q_segs, k_segs), *causal, probs);
                    accumulate(&mut grads[q.var.0], gq);
                    accumulate(&mut grads[k.var.0], gk);
                    accumulate(&mut grads[v.var.0], gv);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let scale = g.data()[0] / T::from_f64(targets.len().max(1) as f64);
                    let mut gl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        gl.row_mut(r)[t as usize] -= T::ONE;
                    }
                    gl.data_mut().iter_mut().for_each(|x| *x *= scale);
                    accumulate(&mut grads[logits.0], gl);
                }
            }
        }
        param_grads
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor<T>,
        (q, k, v): (Cols, Cols, Cols),
        width: usize,
        heads: usize,
        (q_segs, k_segs): (&[Segment], &[Segment]),
        causal: bool,
        probs: &[T],
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let dh = width / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q.var), self.value(k.var), self.value(v.var));
        let mut gq = Tensor::zeros(qv.rows(), qv.cols());
        let mut gk = Tensor::zeros(kv.rows(), kv.cols());
        let mut gv = Tensor::zeros(vv.rows(), vv.cols());
        let (qc, kc, vc) = (qv.cols(), kv.cols(), vv.cols());
        let mut pi = 0;
        let mut dp = Vec::new();
        for (qs, ks) in q_segs.iter().zip(k_segs) {
            for h in 0..heads {
                let ho = h * dh;
                for i in 0..qs.len {
                    let visible = if causal { i + 1 } else { ks.len };
                    let p = &probs[pi..pi + visible];
                    pi += visible;
                    let grow = &g.data()[(qs.start + i) * width + ho..][..dh];
                    dp.clear();
                    let mut dot = T::ZERO;
                    for (j, &pj) in p.iter().enumerate() {
                        let vrow = &vv.data()[(ks.start + j) * vc + v.offset + ho..][..dh];
                        let d = grow.iter().zip(vrow).map(|(&a, &b)| a * b).sum::<T>();
                        dp.push(d);
                        dot += pj * d;
                        let gvrow = &mut gv.data_mut()[(ks.start + j) * vc + v.offset + ho..][..dh];
                        for (o, &x) in gvrow.iter_mut().zip(grow) {
                            *o += pj * x;
                        }
                    }
                    let qrow_start = (qs.start + i) * qc + q.offset + ho;
                    for (j, &pj) in p.iter().enumerate() {
                        let ds = pj * (dp[j] - dot) * scale;
                        if ds == T::ZERO {
                            continue;
                        }
                        let krow_start = (ks.start + j) * kc + k.offset + ho;
                        for c in 0..dh {
                            let kval = kv.data()[krow_start + c];
                            let qval = qv.data()[qrow_start + c];
                            gq.data_mut()[qrow_start + c] += ds * kval;
                            gk.data_mut()[krow_start + c] += ds * qval;
                        }
                    }
                }
            }
        }
        (gq, gk, gv)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: &dyn Fn(&[Tensor<f64>]) -> f64, params: &[Tensor<f64>], p: usize, i: usize) -> f64 {
        let h = 1e-6;
        let mut plus = params.to_vec();
        plus[p].data_mut()[i] += h;
        let mut minus = params.to_vec();
        minus[p].data_mut()[i] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    }

    fn check(f: &dyn Fn(&[Tensor<f64>]) -> f64, grads: &dyn Fn(&[Tensor<f64>]) -> Vec<Option<Tensor<f64>>>, params: &[Tensor<f64>]) {
        let g = grads(params);
        for (p, t) in params.iter().enumerate() {
            for i in 0..t.len() {
                let n = numeric_grad(f, params, p, i);
                let a = g[p].as_ref().map_or(0.0, |g| g.data()[i]);
                assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "param {p}[{i}]: analytic {a} numeric {n}");
            }
        }
    }

    fn tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut s = seed;
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
            })
            .collect();
        Tensor::from_vec(rows, cols, data)
    }

    #[test]
    fn mlp_ops_gradients() {
        let params = vec![tensor(5, 4, 1), tensor(4, 3, 2), tensor(1, 3, 3), tensor(1, 3, 4), tensor(1, 3, 5)];
        let targets = [0u32, 2, 1];
        let build = |ps: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ps.iter().enumerate().map(|(i, t)| g.param(i, t)).collect();
            let x = g.embed(vars[0], &[1, 4, 1]);
            let h = g.matmul(x, vars[1]);
            let h = g.add_row(h, vars[2]);
            let h = g.gelu(h);
            let h = g.layer_norm(h, vars[3], vars[4]);
            let h2 = g.scale(h, 0.5);
            let h = g.add(h, h2);
            let loss = g.cross_entropy(h, &targets);
            let v = g.value(loss).data()[0];
            (v, g.backward(loss, ps.len()))
        };
        check(&|ps| build(ps).0, &|ps| build(ps).1, &params);
    }

    #[test]
    fn attention_and_pooling_gradients() {
        let params = vec![tensor(5, 8, 11), tensor(2, 8, 12), tensor(8, 4, 13)];
        for causal in [false, true] {
            let build = |ps: &[Tensor<f64>]| {
                let mut g = Graph::new();
                let x = g.param(0, &ps[0]);
                let mem = g.param(1, &ps[1]);
                let w = g.param(2, &ps[2]);
                let qs = Rc::new(vec![Segment { start: 0, len: 2 }, Segment { start: 2, len: 3 }]);
                let ks = if causal {
                    qs.clone()
                } else {
                    Rc::new(vec![Segment { start: 0, len: 1 }, Segment { start: 1, len: 1 }])
                };
                let src = if causal { x } else { mem };
                let a = g.attention((x, 0), (src, 2), (src, 4), 4, 2, qs.clone(), ks, causal);
                let pooled = g.segment_mean(a, qs);
                let sel = g.select_rows(x, vec![4, 0]);
                let sel = g.matmul(sel, w);
                let both = g.add(pooled, sel);
                let loss = g.cross_entropy(both, &[3, 1]);
                let v = g.value(loss).data()[0];
                (v, g.backward(loss, ps.len()))
            };
            check(&|ps| build(ps).0, &|ps| build(ps).1, &params);
        }
    }

    #[test]
    fn causal_attention_ignores_future_rows() {
        let x = tensor(3, 6, 21);
        let mut y = x.clone();
        y.row_mut(2).iter_mut().for_each(|v| *v += 1.0);
        let run = |t: &Tensor<f64>| {
            let mut g = Graph::new();
            let v = g.input(t.clone());
            let segs = Rc::new(vec![Segment { start: 0, len: 3 }]);
            let a = g.attention((v, 0), (v, 2), (v, 4), 2, 1, segs.clone(), segs, true);
            g.value(a).clone()
        };
        let (a, b) = (run(&x), run(&y));
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_ne!(a.row(2), b.row(2));
    }
}
