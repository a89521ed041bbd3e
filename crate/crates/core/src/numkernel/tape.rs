//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Var::backward`] on a scalar walks the records in reverse, accumulates
//! adjoints, returns the gradient of every named trainable leaf, and clears
//! the tape. A tape is single-threaded; build one per forward pass.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use super::linalg::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf { param: Option<String> },
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Affine(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Concat { inputs: Vec<usize>, widths: Vec<usize> },
    Join(Vec<usize>),
    Reshape(usize),
    SumAll(usize),
    SumAxis { input: usize, axis: usize },
    Gather { input: usize, rows: Vec<usize> },
    SliceCols { input: usize, start: usize },
    Transpose(usize),
    Softmax(usize),
    SqEuclidean(usize, usize),
    Cosine(usize, usize),
    LayerNorm { input: usize, inv_std: Vec<f64> },
    SoftmaxNll { input: usize, target: usize, probs: Vec<f64> },
    ConvMaxPool(Box<ConvRecord>),
}

#[derive(Debug)]
struct ConvRecord {
    input: usize,
    filters: usize,
    bias: usize,
    window: usize,
    offsets: Vec<usize>,
    /// im2col rows, one per input position, width window·d_in.
    cols: Vec<f64>,
    /// Winning position within each segment, per (segment, filter).
    argmax: Vec<usize>,
}

struct Node {
    value: Arc<Vec<f64>>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of a scalar with respect to named trainable leaves.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Tensor>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor> {
        self.0
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn dim_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Dimension {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

/// Rows and last-axis width of a rank-1 or rank-2 shape.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (numel(&shape[..shape.len() - 1]), shape[shape.len() - 1]),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var<'_> {
        self.push_arc(Arc::new(value), shape, op, needs_grad)
    }

    fn push_arc(&self, value: Arc<Vec<f64>>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var<'_> {
        debug_assert_eq!(value.len(), numel(&shape));
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf. Its gradient is reported under `name` when the
    /// tensor has `requires_grad` set; otherwise it behaves as a constant.
    pub fn param(&self, name: &str, tensor: &Tensor) -> Var<'_> {
        let needs_grad = tensor.requires_grad();
        self.push_arc(
            tensor.arc(),
            tensor.shape().to_vec(),
            Op::Leaf {
                param: needs_grad.then(|| name.to_string()),
            },
            needs_grad,
        )
    }

    pub fn constant(&self, tensor: &Tensor) -> Var<'_> {
        self.push_arc(
            tensor.arc(),
            tensor.shape().to_vec(),
            Op::Leaf { param: None },
            false,
        )
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.push(vec![value], Vec::new(), Op::Leaf { param: None }, false)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    fn value_of(&self, id: usize) -> Arc<Vec<f64>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Concatenation along the last axis. Inputs must agree on every
    /// leading dimension.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(Error::EmptySequence { op: "concat" })?;
        let lead_shape = first.shape();
        if lead_shape.is_empty() {
            return Err(Error::Rank {
                op: "concat",
                shape: lead_shape,
            });
        }
        let lead = &lead_shape[..lead_shape.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.is_empty() || &s[..s.len() - 1] != lead {
                return Err(dim_err("concat", &lead_shape, &s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows = numel(lead);
        let values: Vec<Arc<Vec<f64>>> = parts.iter().map(|p| self.value_of(p.id)).collect();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = self.needs(&ids);
        Ok(self.push(out, shape, Op::Concat { inputs: ids, widths }, needs))
    }

    /// Stacks equally shaped values along a new leading axis.
    pub fn stack<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(Error::EmptySequence { op: "stack" })?;
        let inner = first.shape();
        let mut out = Vec::with_capacity(parts.len() * numel(&inner));
        for p in parts {
            let s = p.shape();
            if s != inner {
                return Err(dim_err("stack", &inner, &s));
            }
            out.extend_from_slice(&self.value_of(p.id));
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = self.needs(&ids);
        Ok(self.push(out, shape, Op::Join(ids), needs))
    }

    /// Concatenates `[l_i × n]` matrices along rows.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(Error::EmptySequence { op: "concat_rows" })?;
        let s0 = first.shape();
        if s0.len() != 2 {
            return Err(Error::Rank {
                op: "concat_rows",
                shape: s0,
            });
        }
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let s = p.shape();
            if s.len() != 2 || s[1] != s0[1] {
                return Err(dim_err("concat_rows", &s0, &s));
            }
            rows += s[0];
            out.extend_from_slice(&self.value_of(p.id));
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = self.needs(&ids);
        Ok(self.push(out, vec![rows, s0[1]], Op::Join(ids), needs))
    }

    /// Convolution over several sequences stored back to back in `seq`
    /// (`lengths` rows each), then max-pooling over positions within each
    /// sequence. Windows are zero padded so every position produces an
    /// output; the activation is tanh. Returns `[segments × d_f]`.
    pub fn conv1d_maxpool_segments<'t>(
        &'t self,
        seq: Var<'t>,
        lengths: &[usize],
        filters: Var<'t>,
        bias: Var<'t>,
        window: usize,
    ) -> Result<Var<'t>> {
        let s_shape = seq.shape();
        let f_shape = filters.shape();
        let b_shape = bias.shape();
        if s_shape.len() != 2 {
            return Err(Error::Rank {
                op: "conv1d_maxpool",
                shape: s_shape,
            });
        }
        if lengths.is_empty() || lengths.iter().any(|&l| l == 0) {
            return Err(Error::EmptySequence {
                op: "conv1d_maxpool",
            });
        }
        if window == 0 {
            return Err(Error::Config("convolution window must be at least 1".into()));
        }
        let (total, d_in) = (s_shape[0], s_shape[1]);
        if lengths.iter().sum::<usize>() != total {
            return Err(dim_err("conv1d_maxpool", &s_shape, lengths));
        }
        let width = window * d_in;
        if f_shape.len() != 2 || f_shape[0] != width {
            return Err(dim_err("conv1d_maxpool", &s_shape, &f_shape));
        }
        let d_f = f_shape[1];
        if b_shape != [d_f] {
            return Err(dim_err("conv1d_maxpool", &f_shape, &b_shape));
        }
        let x = self.value_of(seq.id);
        let w = self.value_of(filters.id);
        let b = self.value_of(bias.id);
        let half = (window - 1) / 2;

        let mut offsets = Vec::with_capacity(lengths.len());
        let mut cols = vec![0.0; total * width];
        let mut offset = 0;
        for &len in lengths {
            offsets.push(offset);
            for p in 0..len {
                let row = &mut cols[(offset + p) * width..(offset + p + 1) * width];
                for k in 0..window {
                    let src = p as isize + k as isize - half as isize;
                    if src >= 0 && (src as usize) < len {
                        let src = offset + src as usize;
                        row[k * d_in..(k + 1) * d_in].copy_from_slice(&x[src * d_in..(src + 1) * d_in]);
                    }
                }
            }
            offset += len;
        }

        let mut pre = vec![0.0; total * d_f];
        for r in 0..total {
            pre[r * d_f..(r + 1) * d_f].copy_from_slice(&b);
        }
        gemm(total, width, d_f, &cols, false, &w, false, &mut pre, 1.0);

        let mut out = vec![f64::NEG_INFINITY; lengths.len() * d_f];
        let mut argmax = vec![0usize; lengths.len() * d_f];
        for (seg, (&off, &len)) in offsets.iter().zip(lengths).enumerate() {
            let best = &mut out[seg * d_f..(seg + 1) * d_f];
            let arg = &mut argmax[seg * d_f..(seg + 1) * d_f];
            for p in 0..len {
                let row = &pre[(off + p) * d_f..(off + p + 1) * d_f];
                for f in 0..d_f {
                    let a = row[f].tanh();
                    // strict comparison keeps the lowest index on ties
                    if a > best[f] {
                        best[f] = a;
                        arg[f] = p;
                    }
                }
            }
        }
        let needs = self.needs(&[seq.id, filters.id, bias.id]);
        let record = ConvRecord {
            input: seq.id,
            filters: filters.id,
            bias: bias.id,
            window,
            offsets,
            cols: if needs { cols } else { Vec::new() },
            argmax,
        };
        Ok(self.push(
            out,
            vec![lengths.len(), d_f],
            Op::ConvMaxPool(Box::new(record)),
            needs,
        ))
    }

    /// Single-sequence convolution + max-pool: `[l × d_in] -> [d_f]`.
    pub fn conv1d_maxpool<'t>(
        &'t self,
        seq: Var<'t>,
        filters: Var<'t>,
        bias: Var<'t>,
        window: usize,
    ) -> Result<Var<'t>> {
        let s = seq.shape();
        if s.len() != 2 {
            return Err(Error::Rank {
                op: "conv1d_maxpool",
                shape: s,
            });
        }
        let pooled = self.conv1d_maxpool_segments(seq, &[s[0]], filters, bias, window)?;
        let d_f = pooled.shape()[1];
        pooled.reshape(&[d_f])
    }

    fn backward_from(&self, root: usize) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root];
        if root_node.value.len() != 1 {
            return Err(Error::Rank {
                op: "backward",
                shape: root_node.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root).map(|_| None).collect();
        let mut out = BTreeMap::<String, Tensor>::new();
        if root_node.needs_grad {
            grads[root] = Some(vec![1.0]);
        }

        // Lazily allocated adjoint for node `id`, or None when it needs no gradient.
        fn slot<'g>(
            grads: &'g mut [Option<Vec<f64>>],
            nodes: &[Node],
            id: usize,
        ) -> Option<&'g mut Vec<f64>> {
            if !nodes[id].needs_grad {
                return None;
            }
            Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]))
        }

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(name) = param {
                        match out.get_mut(name) {
                            Some(existing) => {
                                for (e, v) in existing.data_mut().iter_mut().zip(&g) {
                                    *e += v;
                                }
                            }
                            None => {
                                out.insert(name.clone(), Tensor::from_arc(node.shape.clone(), Arc::new(g)));
                            }
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    let n = nodes[*b].shape[1];
                    let av = Arc::clone(&nodes[*a].value);
                    let bv = Arc::clone(&nodes[*b].value);
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        gemm(m, n, k, &g, false, &bv, true, ga, 1.0);
                    }
                    if let Some(gb) = slot(&mut grads, &nodes, *b) {
                        gemm(k, m, n, &av, true, &g, false, gb, 1.0);
                    }
                }
                Op::Add(a, b) => {
                    for (input, sign) in [(*a, 1.0), (*b, 1.0)] {
                        if let Some(ga) = slot(&mut grads, &nodes, input) {
                            ga.iter_mut().zip(&g).for_each(|(x, v)| *x += sign * v);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    for (input, sign) in [(*a, 1.0), (*b, -1.0)] {
                        if let Some(ga) = slot(&mut grads, &nodes, input) {
                            ga.iter_mut().zip(&g).for_each(|(x, v)| *x += sign * v);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let av = Arc::clone(&nodes[*a].value);
                    let bv = Arc::clone(&nodes[*b].value);
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for i in 0..g.len() {
                            ga[i] += g[i] * bv[i];
                        }
                    }
                    if let Some(gb) = slot(&mut grads, &nodes, *b) {
                        for i in 0..g.len() {
                            gb[i] += g[i] * av[i];
                        }
                    }
                }
                Op::AddRow(a, r) => {
                    let cols = nodes[*r].value.len();
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(x, v)| *x += v);
                    }
                    if let Some(gr) = slot(&mut grads, &nodes, *r) {
                        for row in g.chunks(cols) {
                            gr.iter_mut().zip(row).for_each(|(x, v)| *x += v);
                        }
                    }
                }
                Op::MulRow(a, r) => {
                    let cols = nodes[*r].value.len();
                    let av = Arc::clone(&nodes[*a].value);
                    let rv = Arc::clone(&nodes[*r].value);
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for i in 0..g.len() {
                            ga[i] += g[i] * rv[i % cols];
                        }
                    }
                    if let Some(gr) = slot(&mut grads, &nodes, *r) {
                        for i in 0..g.len() {
                            gr[i % cols] += g[i] * av[i];
                        }
                    }
                }
                Op::Affine(a, scale) => {
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(x, v)| *x += scale * v);
                    }
                }
                Op::Tanh(a) => {
                    let y = Arc::clone(&node.value);
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for i in 0..g.len() {
                            ga[i] += g[i] * (1.0 - y[i] * y[i]);
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let y = Arc::clone(&node.value);
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for i in 0..g.len() {
                            ga[i] += g[i] * y[i] * (1.0 - y[i]);
                        }
                    }
                }
                Op::Relu(a) => {
                    let xv = Arc::clone(&nodes[*a].value);
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for i in 0..g.len() {
                            if xv[i] > 0.0 {
                                ga[i] += g[i];
                            }
                        }
                    }
                }
                Op::Concat { inputs, widths } => {
                    let total: usize = widths.iter().sum();
                    let rows = g.len() / total;
                    let mut start = 0;
                    for (&input, &w) in inputs.iter().zip(widths) {
                        if let Some(gi) = slot(&mut grads, &nodes, input) {
                            for r in 0..rows {
                                let src = &g[r * total + start..r * total + start + w];
                                gi[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(x, v)| *x += v);
                            }
                        }
                        start += w;
                    }
                }
                Op::Join(inputs) => {
                    let mut start = 0;
                    for &input in inputs {
                        let len = nodes[input].value.len();
                        if let Some(gi) = slot(&mut grads, &nodes, input) {
                            gi.iter_mut().zip(&g[start..start + len]).for_each(|(x, v)| *x += v);
                        }
                        start += len;
                    }
                }
                Op::Reshape(a) => {
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(x, v)| *x += v);
                    }
                }
                Op::SumAll(a) => {
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        ga.iter_mut().for_each(|x| *x += g[0]);
                    }
                }
                Op::SumAxis { input, axis } => {
                    let (m, n) = (nodes[*input].shape[0], nodes[*input].shape[1]);
                    if let Some(gi) = slot(&mut grads, &nodes, *input) {
                        for i in 0..m {
                            for j in 0..n {
                                gi[i * n + j] += if *axis == 0 { g[j] } else { g[i] };
                            }
                        }
                    }
                }
                Op::Gather { input, rows } => {
                    let cols = nodes[*input].shape[1];
                    if let Some(gi) = slot(&mut grads, &nodes, *input) {
                        for (k, &r) in rows.iter().enumerate() {
                            let src = &g[k * cols..(k + 1) * cols];
                            gi[r * cols..(r + 1) * cols].iter_mut().zip(src).for_each(|(x, v)| *x += v);
                        }
                    }
                }
                Op::SliceCols { input, start } => {
                    let cols = nodes[*input].shape[1];
                    let w = node.shape[1];
                    if let Some(gi) = slot(&mut grads, &nodes, *input) {
                        for (r, src) in g.chunks(w).enumerate() {
                            gi[r * cols + start..r * cols + start + w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, v)| *x += v);
                        }
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for i in 0..m {
                            for j in 0..n {
                                ga[i * n + j] += g[j * m + i];
                            }
                        }
                    }
                }
                Op::Softmax(a) => {
                    let (_, cols) = rows_cols(&node.shape);
                    let y = Arc::clone(&node.value);
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for ((gr, yr), out) in g.chunks(cols).zip(y.chunks(cols)).zip(ga.chunks_mut(cols)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(u, v)| u * v).sum();
                            for j in 0..cols {
                                out[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
                Op::SqEuclidean(a, b) => {
                    let av = Arc::clone(&nodes[*a].value);
                    let bv = Arc::clone(&nodes[*b].value);
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for i in 0..av.len() {
                            ga[i] += 2.0 * g[0] * (av[i] - bv[i]);
                        }
                    }
                    if let Some(gb) = slot(&mut grads, &nodes, *b) {
                        for i in 0..av.len() {
                            gb[i] -= 2.0 * g[0] * (av[i] - bv[i]);
                        }
                    }
                }
                Op::Cosine(a, b) => {
                    let av = Arc::clone(&nodes[*a].value);
                    let bv = Arc::clone(&nodes[*b].value);
                    let na = av.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb = bv.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if na > 0.0 && nb > 0.0 {
                        let cos = node.value[0];
                        if let Some(ga) = slot(&mut grads, &nodes, *a) {
                            for i in 0..av.len() {
                                ga[i] += g[0] * (bv[i] / (na * nb) - cos * av[i] / (na * na));
                            }
                        }
                        if let Some(gb) = slot(&mut grads, &nodes, *b) {
                            for i in 0..bv.len() {
                                gb[i] += g[0] * (av[i] / (na * nb) - cos * bv[i] / (nb * nb));
                            }
                        }
                    }
                }
                Op::LayerNorm { input, inv_std } => {
                    let (_, cols) = rows_cols(&node.shape);
                    let y = Arc::clone(&node.value);
                    if let Some(gi) = slot(&mut grads, &nodes, *input) {
                        for (r, s) in inv_std.iter().enumerate() {
                            let gr = &g[r * cols..(r + 1) * cols];
                            let yr = &y[r * cols..(r + 1) * cols];
                            let mean_g = gr.iter().sum::<f64>() / cols as f64;
                            let mean_gy = gr.iter().zip(yr).map(|(u, v)| u * v).sum::<f64>() / cols as f64;
                            for j in 0..cols {
                                gi[r * cols + j] += s * (gr[j] - mean_g - yr[j] * mean_gy);
                            }
                        }
                    }
                }
                Op::SoftmaxNll { input, target, probs } => {
                    if let Some(gi) = slot(&mut grads, &nodes, *input) {
                        for (j, p) in probs.iter().enumerate() {
                            let onehot = if j == *target { 1.0 } else { 0.0 };
                            gi[j] += g[0] * (p - onehot);
                        }
                    }
                }
                Op::ConvMaxPool(rec) => conv_backward(rec, node, &g, &nodes, &mut grads),
            }
        }
        // parameters the loss does not reach still get an (all-zero) entry
        for node in &nodes[..=root] {
            if let Op::Leaf { param: Some(name) } = &node.op {
                if node.needs_grad && !out.contains_key(name) {
                    out.insert(name.clone(), Tensor::zeros(&node.shape));
                }
            }
        }
        Ok(Gradients(out))
    }
}

fn conv_backward(rec: &ConvRecord, node: &Node, g: &[f64], nodes: &[Node], grads: &mut [Option<Vec<f64>>]) {
    let d_f = node.shape[1];
    let d_in = nodes[rec.input].shape[1];
    let width = rec.window * d_in;
    let half = (rec.window - 1) / 2;
    let w = Arc::clone(&nodes[rec.filters].value);
    let segments = node.shape[0];
    let lengths: Vec<usize> = (0..segments)
        .map(|s| {
            let end = rec.offsets.get(s + 1).copied().unwrap_or(nodes[rec.input].shape[0]);
            end - rec.offsets[s]
        })
        .collect();

    // adjoint of the pre-activation at each winning position
    let dpre: Vec<f64> = (0..segments * d_f)
        .map(|i| {
            let y = node.value[i];
            g[i] * (1.0 - y * y)
        })
        .collect();

    if nodes[rec.bias].needs_grad {
        let gb = grads[rec.bias].get_or_insert_with(|| vec![0.0; d_f]);
        for chunk in dpre.chunks(d_f) {
            gb.iter_mut().zip(chunk).for_each(|(x, v)| *x += v);
        }
    }
    if nodes[rec.filters].needs_grad {
        // accumulate into a transposed buffer so each (segment, filter) adds a contiguous row
        let mut gwt = vec![0.0; d_f * width];
        for s in 0..segments {
            for f in 0..d_f {
                let d = dpre[s * d_f + f];
                if d == 0.0 {
                    continue;
                }
                let r = rec.offsets[s] + rec.argmax[s * d_f + f];
                let col = &rec.cols[r * width..(r + 1) * width];
                gwt[f * width..(f + 1) * width].iter_mut().zip(col).for_each(|(x, v)| *x += d * v);
            }
        }
        let gw = grads[rec.filters].get_or_insert_with(|| vec![0.0; width * d_f]);
        for f in 0..d_f {
            for c in 0..width {
                gw[c * d_f + f] += gwt[f * width + c];
            }
        }
    }
    if nodes[rec.input].needs_grad {
        let mut wt = vec![0.0; d_f * width];
        for c in 0..width {
            for f in 0..d_f {
                wt[f * width + c] = w[c * d_f + f];
            }
        }
        let total = nodes[rec.input].shape[0];
        let gi = grads[rec.input].get_or_insert_with(|| vec![0.0; total * d_in]);
        for s in 0..segments {
            let off = rec.offsets[s];
            let len = lengths[s];
            for f in 0..d_f {
                let d = dpre[s * d_f + f];
                if d == 0.0 {
                    continue;
                }
                let p = rec.argmax[s * d_f + f];
                for k in 0..rec.window {
                    let src = p as isize + k as isize - half as isize;
                    if src < 0 || src as usize >= len {
                        continue;
                    }
                    let row = off + src as usize;
                    let wrow = &wt[f * width + k * d_in..f * width + (k + 1) * d_in];
                    gi[row * d_in..(row + 1) * d_in]
                        .iter_mut()
                        .zip(wrow)
                        .for_each(|(x, v)| *x += d * v);
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn value(&self) -> Tensor {
        Tensor::from_arc(self.shape(), self.tape.value_of(self.id))
    }

    pub fn data(&self) -> Arc<Vec<f64>> {
        self.tape.value_of(self.id)
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.tape.value_of(self.id)[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    /// Reverse pass from this scalar. Consumes the recorded operations:
    /// the tape is empty afterwards and every outstanding `Var` is stale.
    pub fn backward(self) -> Result<Gradients> {
        let grads = self.tape.backward_from(self.id);
        if grads.is_ok() {
            self.tape.nodes.borrow_mut().clear();
        }
        grads
    }

    fn unary(self, value: Vec<f64>, shape: Vec<usize>, op: Op) -> Var<'t> {
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(value, shape, op, needs)
    }

    fn map(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let x = self.data();
        let value = x.iter().map(|&v| f(v)).collect();
        self.unary(value, self.shape(), op)
    }

    fn same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<Vec<usize>> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(dim_err(op, &a, &b));
        }
        Ok(a)
    }

    fn zip(self, other: Var<'t>, op_name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        let shape = self.same_shape(&other, op_name)?;
        let (a, b) = (self.data(), other.data());
        let value = a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(value, shape, op, needs))
    }

    /// Matrix product `[m×k]·[k×n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(dim_err("matmul", &a, &b));
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data(), false, &other.data(), false, &mut out, 0.0);
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(out, vec![m, n], Op::MatMul(self.id, other.id), needs))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    fn row_broadcast(self, row: Var<'t>, op_name: &'static str) -> Result<(Vec<usize>, usize)> {
        let (a, r) = (self.shape(), row.shape());
        let (_, cols) = rows_cols(&a);
        if a.is_empty() || r.len() != 1 || r[0] != cols {
            return Err(dim_err(op_name, &a, &r));
        }
        Ok((a, cols))
    }

    /// Adds a `[n]` row to every row of `[m×n]`.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let (shape, cols) = self.row_broadcast(row, "add_row")?;
        let (a, r) = (self.data(), row.data());
        let value = a.iter().enumerate().map(|(i, &x)| x + r[i % cols]).collect();
        let needs = self.tape.needs(&[self.id, row.id]);
        Ok(self.tape.push(value, shape, Op::AddRow(self.id, row.id), needs))
    }

    /// Multiplies every row of `[m×n]` elementwise by a `[n]` row.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let (shape, cols) = self.row_broadcast(row, "mul_row")?;
        let (a, r) = (self.data(), row.data());
        let value = a.iter().enumerate().map(|(i, &x)| x * r[i % cols]).collect();
        let needs = self.tape.needs(&[self.id, row.id]);
        Ok(self.tape.push(value, shape, Op::MulRow(self.id, row.id), needs))
    }

    /// `scale·x + shift`, elementwise.
    pub fn affine(self, scale: f64, shift: f64) -> Var<'t> {
        self.map(move |x| scale * x + shift, Op::Affine(self.id, scale))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.affine(c, 0.0)
    }

    pub fn tanh(self) -> Var<'t> {
        self.map(f64::tanh, Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.map(sigmoid, Op::Sigmoid(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        self.map(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let old = self.shape();
        if numel(&old) != numel(shape) {
            return Err(dim_err("reshape", &old, shape));
        }
        let needs = self.tape.needs(&[self.id]);
        Ok(self.tape.push_arc(self.data(), shape.to_vec(), Op::Reshape(self.id), needs))
    }

    pub fn sum(self) -> Var<'t> {
        let total = self.data().iter().sum();
        self.unary(vec![total], Vec::new(), Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.data().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum of a `[m×n]` matrix over `axis` (0 → `[n]`, 1 → `[m]`).
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 || axis > 1 {
            return Err(Error::Rank {
                op: "sum_axis",
                shape: s,
            });
        }
        let (m, n) = (s[0], s[1]);
        let x = self.data();
        let value = if axis == 0 {
            (0..n).map(|j| (0..m).map(|i| x[i * n + j]).sum()).collect()
        } else {
            (0..m).map(|i| x[i * n..(i + 1) * n].iter().sum()).collect()
        };
        let shape = vec![if axis == 0 { n } else { m }];
        Ok(self.unary(value, shape, Op::SumAxis { input: self.id, axis }))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let s = self.shape();
        let summed = self.sum_axis(axis)?;
        Ok(summed.scale(1.0 / s[axis] as f64))
    }

    /// Rows of a `[m×n]` matrix, in the given order and with repetition
    /// allowed. Serves as embedding lookup; the backward pass scatter-adds.
    pub fn gather_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Rank {
                op: "gather_rows",
                shape: s,
            });
        }
        if rows.is_empty() {
            return Err(Error::EmptySequence { op: "gather_rows" });
        }
        let (m, n) = (s[0], s[1]);
        let x = self.data();
        let mut value = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: r,
                    len: m,
                });
            }
            value.extend_from_slice(&x[r * n..(r + 1) * n]);
        }
        Ok(self.unary(
            value,
            vec![rows.len(), n],
            Op::Gather {
                input: self.id,
                rows: rows.to_vec(),
            },
        ))
    }

    /// One row of a matrix as a vector.
    pub fn row(self, i: usize) -> Result<Var<'t>> {
        let n = *self.shape().last().unwrap_or(&1);
        self.gather_rows(&[i])?.reshape(&[n])
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 || start >= end || end > s[1] {
            return Err(dim_err("slice_cols", &s, &[start, end]));
        }
        let (m, n) = (s[0], s[1]);
        let x = self.data();
        let mut value = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            value.extend_from_slice(&x[r * n + start..r * n + end]);
        }
        Ok(self.unary(value, vec![m, end - start], Op::SliceCols { input: self.id, start }))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Rank {
                op: "transpose",
                shape: s,
            });
        }
        let (m, n) = (s[0], s[1]);
        let x = self.data();
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                value[j * m + i] = x[i * n + j];
            }
        }
        Ok(self.unary(value, vec![n, m], Op::Transpose(self.id)))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.is_empty() {
            return Err(Error::Rank { op: "softmax", shape: s });
        }
        let (_, cols) = rows_cols(&s);
        let mut value = self.data().to_vec();
        value.chunks_mut(cols).for_each(softmax_in_place);
        Ok(self.unary(value, s, Op::Softmax(self.id)))
    }

    /// Normalizes each row (last axis) to zero mean and unit variance.
    pub fn layer_norm(self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.is_empty() {
            return Err(Error::Rank {
                op: "layer_norm",
                shape: s,
            });
        }
        let (_, cols) = rows_cols(&s);
        let x = self.data();
        let mut value = Vec::with_capacity(x.len());
        let mut inv_std = Vec::new();
        for row in x.chunks(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            value.extend(row.iter().map(|v| (v - mean) * is));
            inv_std.push(is);
        }
        Ok(self.unary(value, s, Op::LayerNorm { input: self.id, inv_std }))
    }

    /// Squared Euclidean distance between two equally shaped values.
    pub fn sq_euclidean(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(&other, "sq_euclidean")?;
        let (a, b) = (self.data(), other.data());
        let d = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(vec![d], Vec::new(), Op::SqEuclidean(self.id, other.id), needs))
    }

    /// Cosine similarity; 0 (with zero gradient) when either side is the
    /// zero vector.
    pub fn cosine(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(&other, "cosine")?;
        let (a, b) = (self.data(), other.data());
        let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let c = if na > 0.0 && nb > 0.0 { dot / (na * nb) } else { 0.0 };
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(vec![c], Vec::new(), Op::Cosine(self.id, other.id), needs))
    }

    /// `-log softmax(scores)[target]` for a score vector.
    pub fn softmax_neglogprob(self, target: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 1 {
            return Err(Error::Rank {
                op: "softmax_neglogprob",
                shape: s,
            });
        }
        if target >= s[0] {
            return Err(Error::Index {
                op: "softmax_neglogprob",
                index: target,
                len: s[0],
            });
        }
        let x = self.data();
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = x.iter().map(|v| (v - max).exp()).sum();
        let loss = sum.ln() - (x[target] - max);
        let probs = x.iter().map(|v| (v - max).exp() / sum).collect();
        Ok(self.unary(
            vec![loss],
            Vec::new(),
            Op::SoftmaxNll {
                input: self.id,
                target,
                probs,
            },
        ))
    }
}
