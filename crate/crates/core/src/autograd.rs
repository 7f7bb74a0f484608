//! Reverse-mode differentiation over a tape of coarse, fused operations.
//!
//! Sequences inside a batch are packed row-wise (no padding rows); attention
//! and mixing ops carry a [`SeqLayout`] describing where each sequence lives.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use crate::tensor::{gemm, softmax_in_place, Mat, Scalar, View};

pub type NodeId = usize;
pub type ParamId = usize;

const LN_EPS: f64 = 1e-5;

/// Named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Mat<F>>,
    index: HashMap<String, ParamId>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Mat<F>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: ParamId) -> &Mat<F> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat<F> {
        &mut self.tensors[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Mat::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Where each packed sequence lives: sequence `i` occupies rows `offsets[i]..offsets[i]+lens[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub offsets: Vec<usize>,
    pub lens: Vec<usize>,
}

impl SeqLayout {
    pub fn from_lens(lens: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(lens.len());
        let mut acc = 0;
        for &l in lens {
            offsets.push(acc);
            acc += l;
        }
        SeqLayout {
            offsets,
            lens: lens.to_vec(),
        }
    }

    pub fn total(&self) -> usize {
        self.offsets.last().map_or(0, |o| o + self.lens[self.lens.len() - 1])
    }

    pub fn num_seqs(&self) -> usize {
        self.lens.len()
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i] + self.lens[i]
    }
}

/// Pairs query sequence `i` with key sequence `i`.
#[derive(Clone, Debug)]
pub struct AttnLayout {
    pub queries: SeqLayout,
    pub keys: SeqLayout,
    pub causal: bool,
}

/// One block of a [`Graph::mix`]: `out[out rows] = weights · x[in rows]`.
#[derive(Clone, Debug)]
pub struct MixBlock<F> {
    pub out_offset: usize,
    pub out_len: usize,
    pub in_offset: usize,
    pub in_len: usize,
    /// `out_len × in_len`, row-major.
    pub weights: Vec<F>,
}

enum Op<F> {
    Input,
    Param(ParamId),
    Gather {
        table: NodeId,
        ids: Vec<usize>,
        scale: F,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Lerp {
        gate: NodeId,
        a: NodeId,
        b: NodeId,
    },
    ConcatCols(NodeId, NodeId),
    SelectRows {
        sources: Vec<NodeId>,
        pick: Vec<u8>,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<F>,
    },
    Mix {
        x: NodeId,
        blocks: Rc<Vec<MixBlock<F>>>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        layout: Rc<AttnLayout>,
        probs: Vec<F>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<F>,
        denom: F,
        probs: Vec<F>,
    },
    WeightedSum(Vec<(NodeId, F)>),
}

struct Node<F> {
    op: Op<F>,
    value: Mat<F>,
}

/// Gradients of a scalar with respect to every parameter that took part in it.
#[derive(Clone, Debug)]
pub struct Grads<F> {
    pub params: Vec<Option<Mat<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, id: ParamId) -> Option<&Mat<F>> {
        self.params[id].as_ref()
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .map(Mat::sq_norm)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: F) {
        for g in self.params.iter_mut().flatten() {
            for v in &mut g.data {
                *v *= s;
            }
        }
    }
}

pub struct Graph<'p, F: Scalar> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'p, F: Scalar> Graph<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    fn push(&mut self, op: Op<F>, value: Mat<F>) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Mat<F> {
        match self.nodes[id].op {
            Op::Param(p) => self.params.get(p),
            _ => &self.nodes[id].value,
        }
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.value(id).shape()
    }

    pub fn input(&mut self, value: Mat<F>) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id] {
            return n;
        }
        let n = self.push(Op::Param(id), Mat::default());
        self.param_nodes[id] = Some(n);
        n
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        self.gather_scaled(table, ids, F::one())
    }

    /// Rows of `table` multiplied by `scale`.
    pub fn gather_scaled(&mut self, table: NodeId, ids: &[usize], scale: F) -> NodeId {
        let t = self.value(table);
        let mut out = Mat::zeros(ids.len(), t.cols);
        for (r, &i) in ids.iter().enumerate() {
            for (o, &v) in out.row_mut(r).iter_mut().zip(t.row(i)) {
                *o = v * scale;
            }
        }
        self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
                scale,
            },
            out,
        )
    }

    /// `x · w + b` with `w` of shape `in × out`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.cols, wv.rows, "linear: input width mismatch");
        let mut out = Mat::zeros(xv.rows, wv.cols);
        if let Some(b) = b {
            let bv = self.value(b);
            for r in 0..out.rows {
                out.row_mut(r).copy_from_slice(&bv.data);
            }
        }
        let beta = if b.is_some() { F::one() } else { F::zero() };
        gemm(F::one(), View::full(xv), View::full(wv), beta, &mut out.data, out.cols, 0, 0);
        self.push(Op::Linear { x, w, b }, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| x + y).collect();
        let out = Mat::from_vec(av.rows, av.cols, data);
        self.push(Op::Add(a, b), out)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let data = xv.data.iter().map(|&v| v.max(F::zero())).collect();
        let out = Mat::from_vec(xv.rows, xv.cols, data);
        self.push(Op::Relu(x), out)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let data = xv.data.iter().map(|&v| sigmoid(v)).collect();
        let out = Mat::from_vec(xv.rows, xv.cols, data);
        self.push(Op::Sigmoid(x), out)
    }

    /// `gate ⊙ a + (1 − gate) ⊙ b`.
    pub fn lerp(&mut self, gate: NodeId, a: NodeId, b: NodeId) -> NodeId {
        let (gv, av, bv) = (self.value(gate), self.value(a), self.value(b));
        assert!(gv.shape() == av.shape() && av.shape() == bv.shape(), "lerp: shape mismatch");
        let data = gv
            .data
            .iter()
            .zip(&av.data)
            .zip(&bv.data)
            .map(|((&g, &x), &y)| g * x + (F::one() - g) * y)
            .collect();
        let out = Mat::from_vec(av.rows, av.cols, data);
        self.push(Op::Lerp { gate, a, b }, out)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows, bv.rows, "concat_cols: row mismatch");
        let mut out = Mat::zeros(av.rows, av.cols + bv.cols);
        for r in 0..av.rows {
            let row = out.row_mut(r);
            row[..av.cols].copy_from_slice(av.row(r));
            row[av.cols..].copy_from_slice(bv.row(r));
        }
        self.push(Op::ConcatCols(a, b), out)
    }

    /// Row `r` of the output is row `r` of `sources[pick[r]]`.
    pub fn select_rows(&mut self, sources: &[NodeId], pick: &[u8]) -> NodeId {
        let shape = self.shape(sources[0]);
        assert!(sources.iter().all(|&s| self.shape(s) == shape), "select_rows: shape mismatch");
        assert_eq!(pick.len(), shape.0, "select_rows: pick length");
        let mut out = Mat::zeros(shape.0, shape.1);
        for (r, &p) in pick.iter().enumerate() {
            let src = self.value(sources[p as usize]);
            out.row_mut(r).copy_from_slice(src.row(r));
        }
        self.push(
            Op::SelectRows {
                sources: sources.to_vec(),
                pick: pick.to_vec(),
            },
            out,
        )
    }

    /// Row-wise layer normalization with learned gain and bias (both `1 × d`).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let (rows, d) = xv.shape();
        let mut xhat = vec![F::zero(); rows * d];
        let mut rstd = vec![F::zero(); rows];
        let mut out = Mat::zeros(rows, d);
        let inv_d = F::one() / F::of(d as f64);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rs = F::one() / (var + F::of(LN_EPS)).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out.data[r * d + c] = h * gv.data[c] + bv.data[c];
            }
        }
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            out,
        )
    }

    /// Inverted dropout. Pass-through when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, p: f64, rng: &mut R) -> NodeId {
        if p <= 0.0 {
            return x;
        }
        let xv = self.value(x);
        let keep = F::of(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..xv.data.len())
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
            .collect();
        let data = xv.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Mat::from_vec(xv.rows, xv.cols, data);
        self.push(Op::Dropout { x, mask }, out)
    }

    /// Block-wise fixed linear mixing of rows (softcopy, mean pooling).
    pub fn mix(&mut self, x: NodeId, blocks: Rc<Vec<MixBlock<F>>>, out_rows: usize) -> NodeId {
        let xv = self.value(x);
        let mut out = Mat::zeros(out_rows, xv.cols);
        for b in blocks.iter() {
            let w = View::block(&b.weights, b.in_len, 0, b.out_len, 0, b.in_len);
            let src = View::block(&xv.data, xv.cols, b.in_offset, b.in_len, 0, xv.cols);
            gemm(F::one(), w, src, F::zero(), &mut out.data, xv.cols, b.out_offset, 0);
        }
        self.push(Op::Mix { x, blocks }, out)
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        layout: Rc<AttnLayout>,
    ) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols;
        assert!(d % heads == 0 && kv.cols == d && vv.cols == d);
        assert_eq!(layout.queries.num_seqs(), layout.keys.num_seqs());
        let dh = d / heads;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let mut out = Mat::zeros(qv.rows, d);
        let total: usize = (0..layout.queries.num_seqs())
            .map(|i| layout.queries.lens[i] * layout.keys.lens[i] * heads)
            .sum();
        let mut probs = vec![F::zero(); total];
        let mut cursor = 0;
        for s in 0..layout.queries.num_seqs() {
            let (qo, lq) = (layout.queries.offsets[s], layout.queries.lens[s]);
            let (ko, lk) = (layout.keys.offsets[s], layout.keys.lens[s]);
            for h in 0..heads {
                let p = &mut probs[cursor..cursor + lq * lk];
                let qh = View::block(&qv.data, d, qo, lq, h * dh, dh);
                let kh = View::block(&kv.data, d, ko, lk, h * dh, dh);
                gemm(scale, qh, kh.t(), F::zero(), p, lk, 0, 0);
                for i in 0..lq {
                    let row = &mut p[i * lk..(i + 1) * lk];
                    if layout.causal {
                        for x in row.iter_mut().skip(i + 1) {
                            *x = F::neg_infinity();
                        }
                    }
                    softmax_in_place(row);
                }
                let vh = View::block(&vv.data, d, ko, lk, h * dh, dh);
                gemm(
                    F::one(),
                    View::block(p, lk, 0, lq, 0, lk),
                    vh,
                    F::zero(),
                    &mut out.data,
                    d,
                    qo,
                    h * dh,
                );
                cursor += lq * lk;
            }
        }
        self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            },
            out,
        )
    }

    /// Weighted mean negative log-likelihood: `Σ w_r·nll_r / Σ w_r` (0 when no weight).
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], weights: &[F]) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(targets.len(), lv.rows);
        assert_eq!(weights.len(), lv.rows);
        let denom: F = weights.iter().copied().sum();
        let mut probs = lv.data.clone();
        let mut loss = F::zero();
        for r in 0..lv.rows {
            let row = &mut probs[r * lv.cols..(r + 1) * lv.cols];
            softmax_in_place(row);
            if weights[r] != F::zero() {
                let lse = crate::tensor::log_sum_exp(lv.row(r));
                loss += weights[r] * (lse - lv.get(r, targets[r]));
            }
        }
        let value = if denom > F::zero() { loss / denom } else { F::zero() };
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                denom,
                probs,
            },
            Mat::from_vec(1, 1, vec![value]),
        )
    }

    /// `Σ c_i · x_i` over scalar (`1 × 1`) nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, F)]) -> NodeId {
        let mut s = F::zero();
        for &(n, c) in terms {
            assert_eq!(self.shape(n), (1, 1), "weighted_sum expects scalars");
            s += c * self.value(n).data[0];
        }
        self.push(Op::WeightedSum(terms.to_vec()), Mat::from_vec(1, 1, vec![s]))
    }

    pub fn scalar(&self, id: NodeId) -> F {
        self.value(id).data[0]
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Grads<F> {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar");
        let mut grads: Vec<Option<Mat<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Mat::from_vec(1, 1, vec![F::one()]));
        let mut out = Grads {
            params: vec![None; self.params.len()],
        };
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads);
            if let Op::Param(p) = self.nodes[id].op {
                match &mut out.params[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        out
    }

    fn backward_node(&self, id: NodeId, g: &Mat<F>, grads: &mut [Option<Mat<F>>]) {
        match &self.nodes[id].op {
            Op::Input | Op::Param(_) => {}
            Op::Gather { table, ids, scale } => {
                let acc = slot(grads, *table, self.shape(*table));
                for (r, &i) in ids.iter().enumerate() {
                    for (a, &b) in acc.row_mut(i).iter_mut().zip(g.row(r)) {
                        *a += b * *scale;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                {
                    let gx = slot(grads, *x, xv.shape());
                    gemm(F::one(), View::full(g), View::full(wv).t(), F::one(), &mut gx.data, xv.cols, 0, 0);
                }
                {
                    let gw = slot(grads, *w, wv.shape());
                    gemm(F::one(), View::full(xv).t(), View::full(g), F::one(), &mut gw.data, wv.cols, 0, 0);
                }
                if let Some(b) = b {
                    let gb = slot(grads, *b, (1, g.cols));
                    for r in 0..g.rows {
                        for (a, &v) in gb.data.iter_mut().zip(g.row(r)) {
                            *a += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for n in [*a, *b] {
                    slot(grads, n, g.shape()).add_assign(g);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let gx = slot(grads, *x, g.shape());
                for ((a, &v), &d) in gx.data.iter_mut().zip(&xv.data).zip(&g.data) {
                    if v > F::zero() {
                        *a += d;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let yv = &self.nodes[id].value;
                let gx = slot(grads, *x, g.shape());
                for ((a, &y), &d) in gx.data.iter_mut().zip(&yv.data).zip(&g.data) {
                    *a += d * y * (F::one() - y);
                }
            }
            Op::Lerp { gate, a, b } => {
                let (gv, av, bv) = (self.value(*gate), self.value(*a), self.value(*b));
                {
                    let gg = slot(grads, *gate, g.shape());
                    for i in 0..g.data.len() {
                        gg.data[i] += g.data[i] * (av.data[i] - bv.data[i]);
                    }
                }
                {
                    let ga = slot(grads, *a, g.shape());
                    for i in 0..g.data.len() {
                        ga.data[i] += g.data[i] * gv.data[i];
                    }
                }
                let gb = slot(grads, *b, g.shape());
                for i in 0..g.data.len() {
                    gb.data[i] += g.data[i] * (F::one() - gv.data[i]);
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a).1;
                {
                    let ga = slot(grads, *a, (g.rows, ca));
                    for r in 0..g.rows {
                        for (x, &v) in ga.row_mut(r).iter_mut().zip(&g.row(r)[..ca]) {
                            *x += v;
                        }
                    }
                }
                let gb = slot(grads, *b, (g.rows, g.cols - ca));
                for r in 0..g.rows {
                    for (x, &v) in gb.row_mut(r).iter_mut().zip(&g.row(r)[ca..]) {
                        *x += v;
                    }
                }
            }
            Op::SelectRows { sources, pick } => {
                for (si, &src) in sources.iter().enumerate() {
                    if !pick.iter().any(|&p| p as usize == si) {
                        continue;
                    }
                    let gs = slot(grads, src, g.shape());
                    for (r, &p) in pick.iter().enumerate() {
                        if p as usize == si {
                            for (x, &v) in gs.row_mut(r).iter_mut().zip(g.row(r)) {
                                *x += v;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain);
                let (rows, d) = g.shape();
                let inv_d = F::one() / F::of(d as f64);
                {
                    let gg = slot(grads, *gain, (1, d));
                    for r in 0..rows {
                        for c in 0..d {
                            gg.data[c] += g.data[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                {
                    let gb = slot(grads, *bias, (1, d));
                    for r in 0..rows {
                        for c in 0..d {
                            gb.data[c] += g.data[r * d + c];
                        }
                    }
                }
                let gx = slot(grads, *x, (rows, d));
                let mut dxhat = vec![F::zero(); d];
                for r in 0..rows {
                    let mut mean_d = F::zero();
                    let mut mean_dx = F::zero();
                    for c in 0..d {
                        dxhat[c] = g.data[r * d + c] * gv.data[c];
                        mean_d += dxhat[c];
                        mean_dx += dxhat[c] * xhat[r * d + c];
                    }
                    mean_d *= inv_d;
                    mean_dx *= inv_d;
                    for c in 0..d {
                        gx.data[r * d + c] +=
                            rstd[r] * (dxhat[c] - mean_d - xhat[r * d + c] * mean_dx);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let gx = slot(grads, *x, g.shape());
                for ((a, &d), &m) in gx.data.iter_mut().zip(&g.data).zip(mask) {
                    *a += d * m;
                }
            }
            Op::Mix { x, blocks } => {
                let shape = self.shape(*x);
                let gx = slot(grads, *x, shape);
                for b in blocks.iter() {
                    let w = View::block(&b.weights, b.in_len, 0, b.out_len, 0, b.in_len);
                    let go = View::block(&g.data, g.cols, b.out_offset, b.out_len, 0, g.cols);
                    gemm(F::one(), w.t(), go, F::one(), &mut gx.data, shape.1, b.in_offset, 0);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, layout, probs, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                denom,
                probs,
            } => {
                if *denom <= F::zero() {
                    return;
                }
                let shape = self.shape(*logits);
                let gl = slot(grads, *logits, shape);
                let upstream = g.data[0] / *denom;
                for r in 0..shape.0 {
                    if weights[r] == F::zero() {
                        continue;
                    }
                    let c = upstream * weights[r];
                    let row = &mut gl.data[r * shape.1..(r + 1) * shape.1];
                    for (j, a) in row.iter_mut().enumerate() {
                        *a += c * probs[r * shape.1 + j];
                    }
                    row[targets[r]] -= c;
                }
            }
            Op::WeightedSum(terms) => {
                for &(n, c) in terms {
                    slot(grads, n, (1, 1)).data[0] += c * g.data[0];
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        layout: &AttnLayout,
        probs: &[F],
        g: &Mat<F>,
        grads: &mut [Option<Mat<F>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols;
        let dh = d / heads;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let mut gq = grads[q].take().unwrap_or_else(|| Mat::zeros(qv.rows, d));
        let mut gk = grads[k].take().unwrap_or_else(|| Mat::zeros(kv.rows, d));
        let mut gv = grads[v].take().unwrap_or_else(|| Mat::zeros(vv.rows, d));
        let mut cursor = 0;
        let mut dp = Vec::new();
        for s in 0..layout.queries.num_seqs() {
            let (qo, lq) = (layout.queries.offsets[s], layout.queries.lens[s]);
            let (ko, lk) = (layout.keys.offsets[s], layout.keys.lens[s]);
            for h in 0..heads {
                let p = &probs[cursor..cursor + lq * lk];
                let pv = View::block(p, lk, 0, lq, 0, lk);
                let go = View::block(&g.data, d, qo, lq, h * dh, dh);
                // dV += Pᵀ dO
                gemm(F::one(), pv.t(), go, F::one(), &mut gv.data, d, ko, h * dh);
                // dP = dO Vᵀ
                dp.clear();
                dp.resize(lq * lk, F::zero());
                let vh = View::block(&vv.data, d, ko, lk, h * dh, dh);
                gemm(F::one(), go, vh.t(), F::zero(), &mut dp, lk, 0, 0);
                for i in 0..lq {
                    let prow = &p[i * lk..(i + 1) * lk];
                    let drow = &mut dp[i * lk..(i + 1) * lk];
                    let dot: F = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                    for (dv, &pv) in drow.iter_mut().zip(prow) {
                        *dv = pv * (*dv - dot);
                    }
                }
                let ds = View::block(&dp, lk, 0, lq, 0, lk);
                let kh = View::block(&kv.data, d, ko, lk, h * dh, dh);
                let qh = View::block(&qv.data, d, qo, lq, h * dh, dh);
                gemm(scale, ds, kh, F::one(), &mut gq.data, d, qo, h * dh);
                gemm(scale, ds.t(), qh, F::one(), &mut gk.data, d, ko, h * dh);
                cursor += lq * lk;
            }
        }
        // q, k, v may alias (self-attention over the same node in tests).
        merge(grads, q, gq);
        merge(grads, k, gk);
        merge(grads, v, gv);
    }
}

fn merge<F: Scalar>(grads: &mut [Option<Mat<F>>], id: NodeId, g: Mat<F>) {
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        s => *s = Some(g),
    }
}

fn slot<F: Scalar>(grads: &mut [Option<Mat<F>>], id: NodeId, shape: (usize, usize)) -> &mut Mat<F> {
    grads[id].get_or_insert_with(|| Mat::zeros(shape.0, shape.1))
}

pub fn sigmoid<F: Scalar>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}
