//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Each operation records its inputs and whatever it needs for the backward
//! pass. Nodes are appended in evaluation order, so walking the tape backwards
//! visits every node after all of its consumers.

use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeom, Segment};
use super::tensor::{gemm, Mat, Real, View, ViewMut};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Relu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat<T>, rstd: Vec<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Mat<T>, rstd: Vec<T>, batch_stats: bool },
    Im2Col { x: Var, geom: ConvGeom },
    GcPool { x: Var, logits: Var, seg: usize, attn: Vec<T> },
    SegmentAdd { x: Var, t: Var, seg: usize },
    Attention { q: Var, k: Var, v: Var, segments: Vec<Segment>, heads: usize, probs: Vec<T> },
    Embedding { table: Var, ids: Vec<usize>, scale: T },
    ConcatCols(Var, Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Mat<T>, count: usize },
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics observed by a batch-normalization node.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance.
    pub var: Vec<T>,
    pub count: usize,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    record: bool,
    stats: Vec<(Var, BatchStats<T>)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new(true)
    }
}

impl<T: Real> Graph<T> {
    /// With `record == false` no backward state is kept (inference).
    pub fn new(record: bool) -> Self {
        Self { nodes: Vec::new(), record, stats: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.record && inputs.iter().any(|&v| self.needs(v));
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Mat<T>) -> Var {
        let needs_grad = self.record;
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf.
    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let wm = self.value(w);
        let out = kernels::linear(self.value(x).view(), &wm.data, wm.rows, b.map(|b| self.value(b).data.as_slice()));
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Linear { x, w, b }, &inputs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert!(am.rows == bm.rows && am.cols == bm.cols, "add shape mismatch");
        let data = am.data.iter().zip(&bm.data).map(|(&x, &y)| x + y).collect();
        let out = Mat::from_vec(am.rows, am.cols, data);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let out = Mat::from_vec(m.rows, m.cols, m.data.iter().map(|&v| v.max(T::zero())).collect());
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (y, xhat, rstd) = kernels::layer_norm(self.value(x), &self.value(gamma).data, &self.value(beta).data);
        self.push(y, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Batch normalization over rows. With `running == None` the statistics of
    /// this batch are used (and reported through [`Graph::batch_stats`]);
    /// otherwise the given `(mean, var)` are treated as constants.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, running: Option<(&[T], &[T])>) -> Var {
        let xm = self.value(x);
        let count = xm.rows;
        let (mean, var) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => kernels::column_stats(xm),
        };
        let (y, xhat, rstd) =
            kernels::batch_norm_apply(xm, &mean, &var, &self.value(gamma).data, &self.value(beta).data);
        let batch_stats = running.is_none();
        let v = self.push(y, Op::BatchNorm { x, gamma, beta, xhat, rstd, batch_stats }, &[x, gamma, beta]);
        if batch_stats {
            self.stats.push((v, BatchStats { mean, var, count }));
        }
        v
    }

    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Var {
        let out = kernels::im2col(self.value(x), &geom);
        self.push(out, Op::Im2Col { x, geom }, &[x])
    }

    /// Attention pooling: softmax of `logits` within each group of `seg` rows,
    /// then the weighted sum of the group's rows of `x`. Output `[groups, c]`.
    pub fn gc_pool(&mut self, x: Var, logits: Var, seg: usize) -> Var {
        let xm = self.value(x);
        let lm = self.value(logits);
        assert_eq!(lm.cols, 1);
        assert_eq!(xm.rows % seg, 0);
        let groups = xm.rows / seg;
        let mut attn = lm.data.clone();
        let mut out = Mat::zeros(groups, xm.cols);
        for g in 0..groups {
            let a = &mut attn[g * seg..(g + 1) * seg];
            kernels::softmax_in_place(a);
            let orow = &mut out.data[g * xm.cols..(g + 1) * xm.cols];
            for (s, &w) in a.iter().enumerate() {
                for (o, &v) in orow.iter_mut().zip(xm.row(g * seg + s)) {
                    *o += w * v;
                }
            }
        }
        self.push(out, Op::GcPool { x, logits, seg, attn }, &[x, logits])
    }

    /// Adds row `g` of `t` to every row of group `g` (groups of `seg` rows) in `x`.
    pub fn segment_add(&mut self, x: Var, t: Var, seg: usize) -> Var {
        let xm = self.value(x);
        let tm = self.value(t);
        assert_eq!(xm.rows, tm.rows * seg);
        assert_eq!(xm.cols, tm.cols);
        let mut out = xm.clone();
        for r in 0..out.rows {
            for (o, &v) in out.row_mut(r).iter_mut().zip(tm.row(r / seg)) {
                *o += v;
            }
        }
        self.push(out, Op::SegmentAdd { x, t, seg }, &[x, t])
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, segments: Vec<Segment>, heads: usize, causal: bool) -> Var {
        let (out, probs) = kernels::attention(self.value(q), self.value(k), self.value(v), &segments, heads, causal);
        self.push(out, Op::Attention { q, k, v, segments, heads, probs }, &[q, k, v])
    }

    /// Statistics of every batch-statistics normalization node, in creation order.
    pub fn batch_stats(&self) -> &[(Var, BatchStats<T>)] {
        &self.stats
    }

    /// Attention probabilities recorded by an attention node (empty when not recorded).
    pub fn attention_probs(&self, v: Var) -> &[T] {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => probs,
            _ => &[],
        }
    }

    pub fn embedding(&mut self, table: Var, ids: Vec<usize>, scale: T) -> Var {
        let tm = self.value(table);
        let mut out = Mat::zeros(ids.len(), tm.cols);
        for (r, &id) in ids.iter().enumerate() {
            for (o, &v) in out.row_mut(r).iter_mut().zip(tm.row(id)) {
                *o = v * scale;
            }
        }
        self.push(out, Op::Embedding { table, ids, scale }, &[table])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.rows, bm.rows);
        let cols = am.cols + bm.cols;
        let mut out = Mat::zeros(am.rows, cols);
        for r in 0..am.rows {
            out.data[r * cols..r * cols + am.cols].copy_from_slice(am.row(r));
            out.data[r * cols + am.cols..(r + 1) * cols].copy_from_slice(bm.row(r));
        }
        self.push(out, Op::ConcatCols(a, b), &[a, b])
    }

    /// Mean next-token cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Var {
        let lm = self.value(logits);
        assert_eq!(lm.rows, targets.len());
        let mut probs = lm.clone();
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            let row = probs.row_mut(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            if let Some(t) = *t {
                total += lse - row[t];
                count += 1;
            }
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = if count == 0 { T::zero() } else { total / T::from_f64(count as f64) };
        self.push(Mat::from_vec(1, 1, vec![loss]), Op::CrossEntropy { logits, targets, probs, count }, &[logits])
    }

    /// Runs the backward pass from a `1x1` output and returns one optional
    /// gradient per node.
    pub fn backward(&mut self, output: Var) -> Gradients<T> {
        let out = self.value(output);
        assert!(out.rows == 1 && out.cols == 1, "backward needs a scalar");
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Mat::from_vec(1, 1, vec![T::one()]));
        for idx in (0..=output.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backward_node(idx, &dy, &mut grads);
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(dy);
            }
        }
        Gradients { grads }
    }

    fn backward_node(&self, idx: usize, dy: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xm = self.value(*x);
                let wm = self.value(*w);
                if self.needs(*x) {
                    let g = slot(grads, *x, xm.rows, xm.cols);
                    gemm(T::one(), dy.view(), wm.view(), T::one(), g.view_mut());
                }
                if self.needs(*w) {
                    let g = slot(grads, *w, wm.rows, wm.cols);
                    gemm(T::one(), dy.view().t(), xm.view(), T::one(), g.view_mut());
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let bm = self.value(*b);
                        let g = slot(grads, *b, bm.rows, bm.cols);
                        for r in 0..dy.rows {
                            for (o, &v) in g.data.iter_mut().zip(dy.row(r)) {
                                *o += v;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        let g = slot(grads, v, dy.rows, dy.cols);
                        add_into(&mut g.data, &dy.data);
                    }
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let g = slot(grads, *x, dy.rows, dy.cols);
                    for ((o, &d), &y) in g.data.iter_mut().zip(&dy.data).zip(&node.value.data) {
                        if y > T::zero() {
                            *o += d;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gm = &self.value(*gamma).data;
                let cols = dy.cols;
                let n = T::from_f64(cols as f64);
                if self.needs(*gamma) || self.needs(*beta) {
                    let (dg, db) = affine_param_grads(dy, xhat);
                    acc_vec(grads, *gamma, &dg, self.needs(*gamma));
                    acc_vec(grads, *beta, &db, self.needs(*beta));
                }
                if self.needs(*x) {
                    let g = slot(grads, *x, dy.rows, cols);
                    let mut dxhat = vec![T::zero(); cols];
                    for r in 0..dy.rows {
                        let dyr = dy.row(r);
                        let xr = xhat.row(r);
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..cols {
                            dxhat[c] = dyr[c] * gm[c];
                            s1 += dxhat[c];
                            s2 += dxhat[c] * xr[c];
                        }
                        let (m1, m2) = (s1 / n, s2 / n);
                        for c in 0..cols {
                            g.data[r * cols + c] += rstd[r] * (dxhat[c] - m1 - xr[c] * m2);
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, rstd, batch_stats } => {
                let gm = &self.value(*gamma).data;
                let cols = dy.cols;
                let rows = dy.rows;
                if self.needs(*gamma) || self.needs(*beta) {
                    let (dg, db) = affine_param_grads(dy, xhat);
                    acc_vec(grads, *gamma, &dg, self.needs(*gamma));
                    acc_vec(grads, *beta, &db, self.needs(*beta));
                }
                if self.needs(*x) {
                    let g = slot(grads, *x, rows, cols);
                    if *batch_stats {
                        let n = T::from_f64(rows as f64);
                        let mut s1 = vec![T::zero(); cols];
                        let mut s2 = vec![T::zero(); cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                let d = dy.data[r * cols + c] * gm[c];
                                s1[c] += d;
                                s2[c] += d * xhat.data[r * cols + c];
                            }
                        }
                        for r in 0..rows {
                            for c in 0..cols {
                                let i = r * cols + c;
                                let d = dy.data[i] * gm[c];
                                g.data[i] += rstd[c] * (d - s1[c] / n - xhat.data[i] * s2[c] / n);
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for c in 0..cols {
                                let i = r * cols + c;
                                g.data[i] += dy.data[i] * gm[c] * rstd[c];
                            }
                        }
                    }
                }
            }
            Op::Im2Col { x, geom } => {
                if self.needs(*x) {
                    let kk = geom.kernel * geom.kernel;
                    let plen = geom.patch_len();
                    let c = geom.channels;
                    let xm = self.value(*x);
                    let g = slot(grads, *x, xm.rows, xm.cols);
                    geom.for_each_tap(|orow, tap, irow| {
                        for ci in 0..c {
                            g.data[irow * c + ci] += dy.data[orow * plen + ci * kk + tap];
                        }
                    });
                }
            }
            Op::GcPool { x, logits, seg, attn } => {
                let xm = self.value(*x);
                let cols = xm.cols;
                let groups = xm.rows / seg;
                if self.needs(*logits) {
                    let g = slot(grads, *logits, xm.rows, 1);
                    for grp in 0..groups {
                        let dout = dy.row(grp);
                        let a = &attn[grp * seg..(grp + 1) * seg];
                        let da: Vec<T> = (0..*seg)
                            .map(|s| xm.row(grp * seg + s).iter().zip(dout).map(|(&x, &d)| x * d).sum())
                            .collect();
                        let dot: T = a.iter().zip(&da).map(|(&p, &d)| p * d).sum();
                        for s in 0..*seg {
                            g.data[grp * seg + s] += a[s] * (da[s] - dot);
                        }
                    }
                }
                if self.needs(*x) {
                    let g = slot(grads, *x, xm.rows, cols);
                    for grp in 0..groups {
                        let dout = dy.row(grp);
                        for s in 0..*seg {
                            let w = attn[grp * seg + s];
                            let r = grp * seg + s;
                            for (o, &d) in g.data[r * cols..(r + 1) * cols].iter_mut().zip(dout) {
                                *o += w * d;
                            }
                        }
                    }
                }
            }
            Op::SegmentAdd { x, t, seg } => {
                if self.needs(*x) {
                    let g = slot(grads, *x, dy.rows, dy.cols);
                    add_into(&mut g.data, &dy.data);
                }
                if self.needs(*t) {
                    let g = slot(grads, *t, dy.rows / seg, dy.cols);
                    for r in 0..dy.rows {
                        let grp = r / seg;
                        for (o, &d) in g.data[grp * dy.cols..(grp + 1) * dy.cols].iter_mut().zip(dy.row(r)) {
                            *o += d;
                        }
                    }
                }
            }
            Op::Attention { q, k, v, segments, heads, probs } => {
                self.attention_backward(dy, *q, *k, *v, segments, *heads, probs, grads);
            }
            Op::Embedding { table, ids, scale } => {
                if self.needs(*table) {
                    let tm = self.value(*table);
                    let g = slot(grads, *table, tm.rows, tm.cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &d) in g.data[id * tm.cols..(id + 1) * tm.cols].iter_mut().zip(dy.row(r)) {
                            *o += d * *scale;
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let ac = self.value(*a).cols;
                let bc = self.value(*b).cols;
                if self.needs(*a) {
                    let g = slot(grads, *a, dy.rows, ac);
                    for r in 0..dy.rows {
                        add_into(&mut g.data[r * ac..(r + 1) * ac], &dy.row(r)[..ac]);
                    }
                }
                if self.needs(*b) {
                    let g = slot(grads, *b, dy.rows, bc);
                    for r in 0..dy.rows {
                        add_into(&mut g.data[r * bc..(r + 1) * bc], &dy.row(r)[ac..]);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                if self.needs(*logits) && *count > 0 {
                    let scale = dy.data[0] / T::from_f64(*count as f64);
                    let g = slot(grads, *logits, probs.rows, probs.cols);
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let grow = &mut g.data[r * probs.cols..(r + 1) * probs.cols];
                        for (c, (o, &p)) in grow.iter_mut().zip(probs.row(r)).enumerate() {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            *o += (p - onehot) * scale;
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        dy: &Mat<T>,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
        probs: &[T],
        grads: &mut [Option<Mat<T>>],
    ) {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let d = qm.cols;
        let dh = d / heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let mut dq = self.needs(q).then(|| Mat::zeros(qm.rows, d));
        let mut dk = self.needs(k).then(|| Mat::zeros(km.rows, d));
        let mut dv = self.needs(v).then(|| Mat::zeros(vm.rows, d));
        let mut off = 0;
        for s in segments {
            for h in 0..heads {
                let p = &probs[off..off + s.q_len * s.k_len];
                off += s.q_len * s.k_len;
                let pv = View::new(p, s.q_len, s.k_len);
                let doh = View::cols_block(&dy.data, dy.rows, d, h * dh, dh).rows_block(s.q_start, s.q_len);
                let qh = View::cols_block(&qm.data, qm.rows, d, h * dh, dh).rows_block(s.q_start, s.q_len);
                let kh = View::cols_block(&km.data, km.rows, d, h * dh, dh).rows_block(s.k_start, s.k_len);
                let vh = View::cols_block(&vm.data, vm.rows, d, h * dh, dh).rows_block(s.k_start, s.k_len);
                if let Some(dv) = dv.as_mut() {
                    let out = ViewMut::cols_block(&mut dv.data, vm.rows, d, h * dh, dh).rows_block(s.k_start, s.k_len);
                    gemm(T::one(), pv.t(), doh, T::one(), out);
                }
                if dq.is_none() && dk.is_none() {
                    continue;
                }
                let mut ds = vec![T::zero(); s.q_len * s.k_len];
                gemm(T::one(), doh, vh.t(), T::zero(), ViewMut::new(&mut ds, s.q_len, s.k_len));
                for i in 0..s.q_len {
                    let prow = &p[i * s.k_len..(i + 1) * s.k_len];
                    let drow = &mut ds[i * s.k_len..(i + 1) * s.k_len];
                    let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                    for (dv, &pv) in drow.iter_mut().zip(prow) {
                        *dv = pv * (*dv - dot);
                    }
                }
                let dsv = View::new(&ds, s.q_len, s.k_len);
                if let Some(dq) = dq.as_mut() {
                    let out = ViewMut::cols_block(&mut dq.data, qm.rows, d, h * dh, dh).rows_block(s.q_start, s.q_len);
                    gemm(scale, dsv, kh, T::one(), out);
                }
                if let Some(dk) = dk.as_mut() {
                    let out = ViewMut::cols_block(&mut dk.data, km.rows, d, h * dh, dh).rows_block(s.k_start, s.k_len);
                    gemm(scale, dsv.t(), qh, T::one(), out);
                }
            }
        }
        for (var, g) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(g) = g {
                let s = slot(grads, var, g.rows, g.cols);
                add_into(&mut s.data, &g.data);
            }
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Mat<T>>], v: Var, rows: usize, cols: usize) -> &mut Mat<T> {
    grads[v.0].get_or_insert_with(|| Mat::zeros(rows, cols))
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

fn acc_vec<T: Real>(grads: &mut [Option<Mat<T>>], v: Var, src: &[T], needed: bool) {
    if needed {
        let g = slot(grads, v, 1, src.len());
        add_into(&mut g.data, src);
    }
}

/// Column sums of `dy * xhat` and `dy`.
fn affine_param_grads<T: Real>(dy: &Mat<T>, xhat: &Mat<T>) -> (Vec<T>, Vec<T>) {
    let mut dg = vec![T::zero(); dy.cols];
    let mut db = vec![T::zero(); dy.cols];
    for r in 0..dy.rows {
        for c in 0..dy.cols {
            let d = dy.data[r * dy.cols + c];
            dg[c] += d * xhat.data[r * dy.cols + c];
            db[c] += d;
        }
    }
    (dg, db)
}

pub struct Gradients<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Mat<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
