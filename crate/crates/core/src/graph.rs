//! Reverse-mode gradient tape.
//!
//! A [`Graph`] records every primitive op in execution order, so node inputs
//! always precede the node (the tape is topologically sorted by
//! construction). [`Graph::backward`] walks it once in reverse; a second
//! call on the same recording is rejected.
//!
//! Every op output is checked for NaN/Inf and fails with
//! [`Error::NonFinite`] instead of propagating.
//!
//! The tape also tallies the floating-point work of each op as it executes
//! (one multiply-add = 2 FLOPs). This is the runtime counter that the
//! analytical model in [`crate::flops`] is checked against.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::flops::{SIGMOID_FLOPS, SOFTMAX_FLOPS};
use crate::kernels::{self, ConvGeom};
use crate::math;
use crate::tensor::{dims4, expect_rank, Tensor};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    Upsample {
        input: usize,
        factor: usize,
    },
    AvgPool {
        input: usize,
        factor: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Matmul(usize, usize),
    Softmax(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Narrow {
        input: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    PlaneMax {
        input: usize,
        argmax: Vec<usize>,
    },
    GatherGated {
        features: usize,
        scores: usize,
        locations: Vec<usize>,
    },
    ContextLogits {
        query: usize,
        local: usize,
        global: usize,
        scale: f64,
    },
    ContextAttend {
        query: usize,
        weights: usize,
        local: usize,
        global: usize,
    },
    Sum(usize),
    Mean(usize),
    BceWithLogits {
        logits: usize,
        targets: Tensor,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward pass.
#[derive(Debug)]
pub struct Graph {
    id: u32,
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    flops: u64,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            flops: 0,
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// FLOPs executed by every recorded op so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn reset_flops(&mut self) {
        self.flops = 0;
    }

    /// Records an input. Leaves with `requires_grad` receive a gradient from
    /// [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        let value = value.ensure_finite("leaf")?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Gradient accumulated by the last backward pass, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].needs_grad
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Detached);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn record(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[usize], flops: u64) -> Result<Var> {
        let value = value.ensure_finite(name)?;
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.flops += flops;
        Ok(self.push(value, op, needs_grad))
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (i, w) = (self.idx(input)?, self.idx(weight)?);
        let b = bias.map(|b| self.idx(b)).transpose()?;
        let out = kernels::conv2d(self.val(i), self.val(w), b.map(|b| self.val(b)), geom)?;
        let [n, cout, oh, ow] = dims4(out.shape());
        let [_, cin, kh, kw] = dims4(self.val(w).shape());
        let outputs = (n * cout * oh * ow) as u64;
        let mut flops = 2 * (kh * kw * cin) as u64 * outputs;
        if b.is_some() {
            flops += outputs;
        }
        let mut inputs = vec![i, w];
        inputs.extend(b);
        self.record(
            "conv2d",
            out,
            Op::Conv2d {
                input: i,
                weight: w,
                bias: b,
                geom,
            },
            &inputs,
            flops,
        )
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        let i = self.idx(input)?;
        let out = kernels::upsample_nearest(self.val(i), factor)?;
        self.record("upsample_nearest", out, Op::Upsample { input: i, factor }, &[i], 0)
    }

    pub fn avgpool_down(&mut self, input: Var, factor: usize) -> Result<Var> {
        let i = self.idx(input)?;
        let out = kernels::avgpool_down(self.val(i), factor)?;
        let flops = self.val(i).numel() as u64;
        self.record("avgpool_down", out, Op::AvgPool { input: i, factor }, &[i], flops)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: fn(usize, usize) -> Op) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        kernels::same_shape(name, self.val(ia), self.val(ib))?;
        let (x, y) = (self.val(ia), self.val(ib));
        let out = Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect())?;
        let flops = out.numel() as u64;
        self.record(name, out, op(ia, ib), &[ia, ib], flops)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |p, q| p * q, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let i = self.idx(a)?;
        let x = self.val(i);
        let out = Tensor::from_fn(x.shape(), |k| x.data()[k] * factor);
        let flops = out.numel() as u64;
        self.record("scale", out, Op::Scale(i, factor), &[i], flops)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let i = self.idx(a)?;
        let x = self.val(i);
        let out = Tensor::from_fn(x.shape(), |k| x.data()[k].max(0.0));
        let flops = out.numel() as u64;
        self.record("relu", out, Op::Relu(i), &[i], flops)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let i = self.idx(a)?;
        let out = kernels::sigmoid(self.val(i));
        let flops = SIGMOID_FLOPS * out.numel() as u64;
        self.record("sigmoid", out, Op::Sigmoid(i), &[i], flops)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = kernels::matmul(self.val(ia), self.val(ib))?;
        let k = self.val(ia).shape()[1];
        let flops = 2 * (k * out.numel()) as u64;
        self.record("matmul", out, Op::Matmul(ia, ib), &[ia, ib], flops)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let i = self.idx(a)?;
        let out = kernels::softmax_last(self.val(i))?;
        let flops = SOFTMAX_FLOPS * out.numel() as u64;
        self.record("softmax", out, Op::Softmax(i), &[i], flops)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = idx.iter().map(|&i| self.val(i)).collect();
        let out = kernels::concat(&refs, axis)?;
        self.record("concat", out, Op::Concat { inputs: idx.clone(), axis }, &idx, 0)
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let i = self.idx(a)?;
        let out = kernels::narrow(self.val(i), axis, start, len)?;
        self.record("narrow", out, Op::Narrow { input: i, axis, start }, &[i], 0)
    }

    /// Splits axis 1 into `n` equal parts.
    pub fn split_channels(&mut self, a: Var, n: usize) -> Result<Vec<Var>> {
        let c = self.shape(a).get(1).copied().ok_or_else(|| Error::shape("split_channels", "rank must be >= 2"))?;
        if n == 0 || c % n != 0 {
            return Err(Error::invalid(
                "split_channels",
                format!("{c} channels not divisible into {n} parts"),
            ));
        }
        let part = c / n;
        (0..n).map(|k| self.narrow(a, 1, k * part, part)).collect()
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let i = self.idx(a)?;
        let out = self.val(i).reshape(shape)?;
        self.record("reshape", out, Op::Reshape(i), &[i], 0)
    }

    /// Global max over the last two axes of `[N, K, H, W]`.
    ///
    /// Returns the `[N, K]` maxima; the flat in-plane locations are available
    /// through [`Graph::argmax_locations`]. Only the selected cell receives
    /// gradient.
    pub fn plane_max(&mut self, a: Var) -> Result<Var> {
        let i = self.idx(a)?;
        let (out, argmax) = kernels::plane_max_argmax(self.val(i))?;
        self.record("plane_max", out, Op::PlaneMax { input: i, argmax }, &[i], 0)
    }

    /// Flat in-plane argmax indices recorded by a [`Graph::plane_max`] node.
    pub fn argmax_locations(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.index].op {
            Op::PlaneMax { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    /// Gathers `features[n, :, loc]` for every key and scales it by
    /// `sigmoid(scores[n, k])`.
    ///
    /// `features` is `[N, C, H, W]`, `scores` is `[N, K]`, and `locations`
    /// holds `N * K` flat `y * W + x` indices. Output is `[N, K, C]`.
    pub fn gather_gated(&mut self, features: Var, scores: Var, locations: &[usize]) -> Result<Var> {
        let (fi, si) = (self.idx(features)?, self.idx(scores)?);
        let f = self.val(fi);
        let s = self.val(si);
        expect_rank("gather_gated", f, 4)?;
        expect_rank("gather_gated", s, 2)?;
        let [n, c, h, w] = dims4(f.shape());
        let k = s.shape()[1];
        if s.shape()[0] != n || locations.len() != n * k {
            return Err(Error::shape(
                "gather_gated",
                format!("features {:?}, scores {:?}, {} locations", f.shape(), s.shape(), locations.len()),
            ));
        }
        if let Some(bad) = locations.iter().find(|&&l| l >= h * w) {
            return Err(Error::invalid("gather_gated", format!("location {bad} outside {h}x{w} map")));
        }
        let mut out = vec![0.0; n * k * c];
        for b in 0..n {
            for key in 0..k {
                let gate = math::sigmoid(s.data()[b * k + key]);
                let loc = locations[b * k + key];
                for ch in 0..c {
                    out[(b * k + key) * c + ch] = f.data()[(b * c + ch) * h * w + loc] * gate;
                }
            }
        }
        let out = Tensor::new(&[n, k, c], out)?;
        let flops = (2 * n * k * c) as u64 + SIGMOID_FLOPS * (n * k) as u64;
        self.record(
            "gather_gated",
            out,
            Op::GatherGated {
                features: fi,
                scores: si,
                locations: locations.to_vec(),
            },
            &[fi, si],
            flops,
        )
    }

    /// Scaled dot products between every query position and its context.
    ///
    /// `query` and `local` are `[N, C, H, W]`, `global` is `[N, K, C]`.
    /// Output is `[N, H*W, 1 + K]`: entry 0 pairs the query with the local
    /// token at the same position, entries `1..=K` with the global tokens.
    pub fn context_logits(&mut self, query: Var, local: Var, global: Var, scale: f64) -> Result<Var> {
        let (qi, li, gi) = (self.idx(query)?, self.idx(local)?, self.idx(global)?);
        let (n, c, hw, k) = self.context_dims("context_logits", qi, li, gi)?;
        let (q, l, g) = (self.val(qi).data(), self.val(li).data(), self.val(gi).data());
        let m = k + 1;
        let mut out = vec![0.0; n * hw * m];
        for b in 0..n {
            let qb = &q[b * c * hw..][..c * hw];
            let lb = &l[b * c * hw..][..c * hw];
            let gb = &g[b * k * c..][..k * c];
            let ob = &mut out[b * hw * m..][..hw * m];
            for ch in 0..c {
                let qrow = &qb[ch * hw..][..hw];
                let lrow = &lb[ch * hw..][..hw];
                for p in 0..hw {
                    let qv = qrow[p];
                    let row = &mut ob[p * m..][..m];
                    row[0] += qv * lrow[p];
                    for key in 0..k {
                        row[1 + key] += qv * gb[key * c + ch];
                    }
                }
            }
            ob.iter_mut().for_each(|v| *v *= scale);
        }
        let out = Tensor::new(&[n, hw, m], out)?;
        let flops = 2 * (n * hw * m * c) as u64;
        self.record(
            "context_logits",
            out,
            Op::ContextLogits {
                query: qi,
                local: li,
                global: gi,
                scale,
            },
            &[qi, li, gi],
            flops,
        )
    }

    /// `query + sum_j weights_j * context_j` at every position, with the
    /// context laid out as in [`Graph::context_logits`].
    pub fn context_attend(&mut self, query: Var, weights: Var, local: Var, global: Var) -> Result<Var> {
        let (qi, ai, li, gi) = (self.idx(query)?, self.idx(weights)?, self.idx(local)?, self.idx(global)?);
        let (n, c, hw, k) = self.context_dims("context_attend", qi, li, gi)?;
        let m = k + 1;
        if self.val(ai).shape() != [n, hw, m] {
            return Err(Error::shape(
                "context_attend",
                format!("weights {:?}, expected [{n}, {hw}, {m}]", self.val(ai).shape()),
            ));
        }
        let (q, a, l, g) = (
            self.val(qi).data(),
            self.val(ai).data(),
            self.val(li).data(),
            self.val(gi).data(),
        );
        let mut out = q.to_vec();
        for b in 0..n {
            let ab = &a[b * hw * m..][..hw * m];
            let gb = &g[b * k * c..][..k * c];
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let orow = &mut out[base..base + hw];
                let lrow = &l[base..base + hw];
                for p in 0..hw {
                    let wrow = &ab[p * m..][..m];
                    let mut acc = orow[p] + wrow[0] * lrow[p];
                    for key in 0..k {
                        acc += wrow[1 + key] * gb[key * c + ch];
                    }
                    orow[p] = acc;
                }
            }
        }
        let shape = self.val(qi).shape().to_vec();
        let out = Tensor::new(&shape, out)?;
        let flops = 2 * (n * hw * m * c) as u64;
        self.record(
            "context_attend",
            out,
            Op::ContextAttend {
                query: qi,
                weights: ai,
                local: li,
                global: gi,
            },
            &[qi, ai, li, gi],
            flops,
        )
    }

    fn context_dims(&self, op: &'static str, qi: usize, li: usize, gi: usize) -> Result<(usize, usize, usize, usize)> {
        let (q, l, g) = (self.val(qi), self.val(li), self.val(gi));
        expect_rank(op, q, 4)?;
        expect_rank(op, g, 3)?;
        let [n, c, h, w] = dims4(q.shape());
        if l.shape() != q.shape() || g.shape()[0] != n || g.shape()[2] != c {
            return Err(Error::shape(
                op,
                format!("query {:?}, local {:?}, global {:?}", q.shape(), l.shape(), g.shape()),
            ));
        }
        Ok((n, c, h * w, g.shape()[1]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let i = self.idx(a)?;
        let x = self.val(i);
        let out = Tensor::scalar(x.data().iter().sum());
        let flops = x.numel() as u64;
        self.record("sum", out, Op::Sum(i), &[i], flops)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let i = self.idx(a)?;
        let x = self.val(i);
        if x.numel() == 0 {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let out = Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64);
        let flops = x.numel() as u64;
        self.record("mean", out, Op::Mean(i), &[i], flops)
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets`,
    /// computed from the logits for stability.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let i = self.idx(logits)?;
        let z = self.val(i);
        kernels::same_shape("bce_with_logits", z, targets)?;
        if z.numel() == 0 {
            return Err(Error::invalid("bce_with_logits", "empty tensor"));
        }
        let total: f64 = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&zv, &t)| math::softplus(zv) - t * zv)
            .sum();
        let out = Tensor::scalar(total / z.numel() as f64);
        self.record(
            "bce_with_logits",
            out,
            Op::BceWithLogits {
                logits: i,
                targets: targets.clone(),
            },
            &[i],
            0,
        )
    }

    /// Propagates d(loss)/d(node) to every node that depends on a leaf
    /// created with `requires_grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.idx(loss)?;
        if self.backward_done {
            return Err(Error::BackwardAlreadyRun);
        }
        let shape = self.val(li).shape();
        if shape.iter().product::<usize>() != 1 || !shape.iter().all(|&d| d == 1) {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[li] = Some(Tensor::full(self.val(li).shape(), 1.0));

        for i in (0..=li).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.needs_grad) {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].needs_grad;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (gx, gw, gb) =
                    kernels::conv2d_backward(self.val(*input), self.val(*weight), bias.is_some(), *geom, g)?;
                accumulate(grads, wants(*input), *input, gx);
                accumulate(grads, wants(*weight), *weight, gw);
                if let (Some(b), Some(gb)) = (bias, gb) {
                    accumulate(grads, wants(*b), *b, gb);
                }
            }
            Op::Upsample { input, factor } => {
                let gx = kernels::upsample_nearest_backward(g, *factor)?;
                accumulate(grads, wants(*input), *input, gx);
            }
            Op::AvgPool { input, factor } => {
                let gx = kernels::avgpool_down_backward(g, *factor)?;
                accumulate(grads, wants(*input), *input, gx);
            }
            Op::Add(a, b) => {
                accumulate(grads, wants(*a), *a, g.clone());
                accumulate(grads, wants(*b), *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, wants(*a), *a, g.clone());
                accumulate(grads, wants(*b), *b, Tensor::from_fn(g.shape(), |k| -g.data()[k]));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                accumulate(grads, wants(*a), *a, Tensor::from_fn(g.shape(), |k| g.data()[k] * y.data()[k]));
                accumulate(grads, wants(*b), *b, Tensor::from_fn(g.shape(), |k| g.data()[k] * x.data()[k]));
            }
            Op::Scale(a, f) => {
                accumulate(grads, wants(*a), *a, Tensor::from_fn(g.shape(), |k| g.data()[k] * f));
            }
            Op::Relu(a) => {
                let x = self.val(*a);
                let gx = Tensor::from_fn(g.shape(), |k| if x.data()[k] > 0.0 { g.data()[k] } else { 0.0 });
                accumulate(grads, wants(*a), *a, gx);
            }
            Op::Sigmoid(a) => {
                let gx = Tensor::from_fn(g.shape(), |k| {
                    let y = out.data()[k];
                    g.data()[k] * y * (1.0 - y)
                });
                accumulate(grads, wants(*a), *a, gx);
            }
            Op::Matmul(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                if wants(*a) {
                    let gx = kernels::matmul(g, &kernels::transpose(y)?)?;
                    accumulate(grads, true, *a, gx);
                }
                if wants(*b) {
                    let gy = kernels::matmul(&kernels::transpose(x)?, g)?;
                    accumulate(grads, true, *b, gy);
                }
            }
            Op::Softmax(a) => {
                let gx = kernels::softmax_last_backward(out, g)?;
                accumulate(grads, wants(*a), *a, gx);
            }
            Op::Concat { inputs, axis } => {
                let mut start = 0;
                for &j in inputs {
                    let len = self.val(j).shape()[*axis];
                    if wants(j) {
                        accumulate(grads, true, j, kernels::narrow(g, *axis, start, len)?);
                    }
                    start += len;
                }
            }
            Op::Narrow { input, axis, start } => {
                if wants(*input) {
                    let full = self.val(*input).shape();
                    let outer: usize = full[..*axis].iter().product();
                    let inner: usize = full[*axis + 1..].iter().product();
                    let len = g.shape()[*axis];
                    let mut gx = vec![0.0; self.val(*input).numel()];
                    for o in 0..outer {
                        let dst = o * full[*axis] * inner + start * inner;
                        gx[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..][..len * inner]);
                    }
                    accumulate(grads, true, *input, Tensor::new(full, gx)?);
                }
            }
            Op::Reshape(a) => {
                accumulate(grads, wants(*a), *a, g.reshape(self.val(*a).shape())?);
            }
            Op::PlaneMax { input, argmax } => {
                if wants(*input) {
                    let x = self.val(*input);
                    let [_, _, h, w] = dims4(x.shape());
                    let mut gx = vec![0.0; x.numel()];
                    for (plane, &loc) in argmax.iter().enumerate() {
                        gx[plane * h * w + loc] = g.data()[plane];
                    }
                    accumulate(grads, true, *input, Tensor::new(x.shape(), gx)?);
                }
            }
            Op::GatherGated {
                features,
                scores,
                locations,
            } => {
                let f = self.val(*features);
                let s = self.val(*scores);
                let [n, c, h, w] = dims4(f.shape());
                let k = s.shape()[1];
                let mut gf = vec![0.0; f.numel()];
                let mut gs = vec![0.0; s.numel()];
                for b in 0..n {
                    for key in 0..k {
                        let sv = s.data()[b * k + key];
                        let gate = math::sigmoid(sv);
                        let dgate = gate * (1.0 - gate);
                        let loc = locations[b * k + key];
                        let mut acc = 0.0;
                        for ch in 0..c {
                            let go = g.data()[(b * k + key) * c + ch];
                            let fi = (b * c + ch) * h * w + loc;
                            gf[fi] += go * gate;
                            acc += go * f.data()[fi];
                        }
                        gs[b * k + key] = acc * dgate;
                    }
                }
                accumulate(grads, wants(*features), *features, Tensor::new(f.shape(), gf)?);
                accumulate(grads, wants(*scores), *scores, Tensor::new(s.shape(), gs)?);
            }
            Op::ContextLogits {
                query,
                local,
                global,
                scale,
            } => {
                let (q, l, gl) = (self.val(*query), self.val(*local), self.val(*global));
                let [n, c, h, w] = dims4(q.shape());
                let hw = h * w;
                let k = gl.shape()[1];
                let m = k + 1;
                let mut gq = vec![0.0; q.numel()];
                let mut glo = vec![0.0; l.numel()];
                let mut ggl = vec![0.0; gl.numel()];
                for b in 0..n {
                    let gb = &g.data()[b * hw * m..][..hw * m];
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for p in 0..hw {
                            let row = &gb[p * m..][..m];
                            let qv = q.data()[base + p];
                            let mut dq = row[0] * l.data()[base + p];
                            glo[base + p] += scale * row[0] * qv;
                            for key in 0..k {
                                let gi = (b * k + key) * c + ch;
                                dq += row[1 + key] * gl.data()[gi];
                                ggl[gi] += scale * row[1 + key] * qv;
                            }
                            gq[base + p] += scale * dq;
                        }
                    }
                }
                accumulate(grads, wants(*query), *query, Tensor::new(q.shape(), gq)?);
                accumulate(grads, wants(*local), *local, Tensor::new(l.shape(), glo)?);
                accumulate(grads, wants(*global), *global, Tensor::new(gl.shape(), ggl)?);
            }
            Op::ContextAttend {
                query,
                weights,
                local,
                global,
            } => {
                let (a, l, gl) = (self.val(*weights), self.val(*local), self.val(*global));
                let [n, c, h, w] = dims4(l.shape());
                let hw = h * w;
                let k = gl.shape()[1];
                let m = k + 1;
                let mut ga = vec![0.0; a.numel()];
                let mut glo = vec![0.0; l.numel()];
                let mut ggl = vec![0.0; gl.numel()];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for p in 0..hw {
                            let go = g.data()[base + p];
                            let wrow = &a.data()[(b * hw + p) * m..][..m];
                            let arow = &mut ga[(b * hw + p) * m..][..m];
                            arow[0] += go * l.data()[base + p];
                            glo[base + p] += go * wrow[0];
                            for key in 0..k {
                                let gi = (b * k + key) * c + ch;
                                arow[1 + key] += go * gl.data()[gi];
                                ggl[gi] += go * wrow[1 + key];
                            }
                        }
                    }
                }
                accumulate(grads, wants(*query), *query, g.clone());
                accumulate(grads, wants(*weights), *weights, Tensor::new(a.shape(), ga)?);
                accumulate(grads, wants(*local), *local, Tensor::new(l.shape(), glo)?);
                accumulate(grads, wants(*global), *global, Tensor::new(gl.shape(), ggl)?);
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                accumulate(grads, wants(*a), *a, Tensor::full(self.val(*a).shape(), gv));
            }
            Op::Mean(a) => {
                let x = self.val(*a);
                let gv = g.data()[0] / x.numel() as f64;
                accumulate(grads, wants(*a), *a, Tensor::full(x.shape(), gv));
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.val(*logits);
                let inv = g.data()[0] / z.numel() as f64;
                let gz = Tensor::from_fn(z.shape(), |k| (math::sigmoid(z.data()[k]) - targets.data()[k]) * inv);
                accumulate(grads, wants(*logits), *logits, gz);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], wanted: bool, index: usize, g: Tensor) {
    if !wanted {
        return;
    }
    match &mut grads[index] {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(e, v)| *e += v),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0)).unwrap();
        let y = g.sigmoid(x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), Some(0.25));
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.0)).unwrap();
        let y = g.scale(x, 3.0).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.backward(y), Err(Error::BackwardAlreadyRun));
    }

    #[test]
    fn non_scalar_and_detached_losses() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));

        let mut other = Graph::new();
        let y = other.param(Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.backward(y), Err(Error::Detached));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0)).unwrap();
        let c = g.constant(Tensor::scalar(3.0)).unwrap();
        let y = g.mul(x, c).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), Some(3.0));
        assert!(g.grad(c).is_none());
        // intermediate grads are not retained either
        assert!(g.grad(y).is_none());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(1e300)).unwrap();
        assert!(matches!(g.scale(x, 1e300), Err(Error::NonFinite { op: "scale", .. })));
        assert!(g.leaf(Tensor::scalar(f64::INFINITY), true).is_err());
    }

    #[test]
    fn plane_max_routes_to_selected_cell() {
        let mut g = Graph::new();
        let x = g
            .param(Tensor::new(&[1, 1, 2, 2], vec![1.0, 4.0, 4.0, 2.0]).unwrap())
            .unwrap();
        let m = g.plane_max(x).unwrap();
        assert_eq!(g.value(m).data(), &[4.0]);
        assert_eq!(g.argmax_locations(m), Some(&[1usize][..]));
        let s = g.sum(m).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
