//! A small reverse-mode tape covering exactly the operators the point light
//! field needs: dense layers, the convolutional point encoder, bilinear
//! feature lookup, masked multi-head attention and the image loss.
//!
//! Every node stores its forward value; `backward` walks the tape once in
//! reverse. All arithmetic is `f64` and single-threaded, so results are
//! bitwise reproducible.

use crate::tensor::{gemm, MatRef, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Row index understood by [`Tape::gather_rows`] as "all zeros".
pub const ZERO_ROW: usize = usize::MAX;

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sample location on one view of a `[views, channels, h, w]` feature stack,
/// in feature-grid units (node `j` sits at coordinate `j`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSample {
    pub view: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv2dShape {
    pub stride: usize,
    pub pad: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    GateRows(Var, Vec<bool>),
    Conv2d {
        input: Var,
        weight: Var,
        conv: Conv2dShape,
    },
    ChannelBias(Var, Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Bilinear {
        maps: Var,
        taps: Vec<[(usize, f64); 4]>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        slots: usize,
        weights: Vec<f64>,
    },
    WeightedRowSum {
        input: Var,
        weights: Vec<f64>,
        slots: usize,
    },
    SumSquaredError {
        pred: Var,
        target: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output w.r.t. every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Softmax weights of an attention node laid out `[batch, heads, slots]`.
    pub fn attention_weights(&self, v: Var) -> Option<(&[f64], usize, usize)> {
        match &self.nodes[v.0].op {
            Op::Attention {
                weights,
                heads,
                slots,
                ..
            } => Some((weights, *heads, *slots)),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        assert_eq!(k, bv.rows(), "matmul shape mismatch");
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            MatRef::new(av.data(), m, k),
            MatRef::new(bv.data(), k, n),
            0.0,
            out.data_mut(),
        );
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let mut out = self.value(x).clone();
        let b = self.value(bias);
        let n = out.cols();
        assert_eq!(b.len(), n);
        for row in out.data_mut().chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(b.data()) {
                *o += bb;
            }
        }
        self.push(out, Op::AddBias(x, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = 1.0 / (1.0 + (-*v).exp());
        }
        self.push(out, Op::Sigmoid(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let t = self.value(*p);
                assert_eq!(t.rows(), rows, "concat_cols row mismatch");
                t.cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        self.push(
            Tensor::from_vec(&[rows, total], out),
            Op::ConcatCols(parts.to_vec()),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            out.extend_from_slice(t.data());
            rows += t.rows();
        }
        self.push(
            Tensor::from_vec(&[rows, cols], out),
            Op::ConcatRows(parts.to_vec()),
        )
    }

    /// Rows of `x` picked by `index`; [`ZERO_ROW`] yields a row of zeros.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Var {
        let src = self.value(x);
        let cols = src.cols();
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in &index {
            if i == ZERO_ROW {
                out.extend(std::iter::repeat(0.0).take(cols));
            } else {
                out.extend_from_slice(src.row(i));
            }
        }
        self.push(
            Tensor::from_vec(&[index.len(), cols], out),
            Op::GatherRows(x, index),
        )
    }

    /// Rows equal to `code` where `gate` is set and zero elsewhere.
    pub fn gate_rows(&mut self, code: Var, gate: Vec<bool>) -> Var {
        let c = self.value(code);
        let n = c.len();
        let mut out = vec![0.0; gate.len() * n];
        for (r, &g) in gate.iter().enumerate() {
            if g {
                out[r * n..(r + 1) * n].copy_from_slice(c.data());
            }
        }
        self.push(
            Tensor::from_vec(&[gate.len(), n], out),
            Op::GateRows(code, gate),
        )
    }

    /// `input` is `[n, c, h, w]`, `weight` is `[o, c, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, conv: Conv2dShape) -> Var {
        let x = self.value(input);
        let w = self.value(weight);
        let (n, c, h, wd) = dims4(x);
        let (o, wc, kh, kw) = dims4(w);
        assert_eq!(c, wc, "conv2d channel mismatch");
        let (ho, wo) = conv_out(h, wd, kh, kw, conv);
        let patch = c * kh * kw;
        let mut out = Tensor::zeros(&[n, o, ho, wo]);
        let mut cols = vec![0.0; patch * ho * wo];
        let plane = c * h * wd;
        let oplane = o * ho * wo;
        for b in 0..n {
            im2col(
                &x.data()[b * plane..(b + 1) * plane],
                (c, h, wd),
                (kh, kw),
                conv,
                (ho, wo),
                &mut cols,
            );
            gemm(
                MatRef::new(w.data(), o, patch),
                MatRef::new(&cols, patch, ho * wo),
                0.0,
                &mut out.data_mut()[b * oplane..(b + 1) * oplane],
            );
        }
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                conv,
            },
        )
    }

    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let mut out = self.value(x).clone();
        let (n, c, h, w) = dims4(&out);
        let b = self.value(bias).data().to_vec();
        assert_eq!(b.len(), c);
        let hw = h * w;
        for bi in 0..n {
            for ci in 0..c {
                let s = (bi * c + ci) * hw;
                for v in &mut out.data_mut()[s..s + hw] {
                    *v += b[ci];
                }
            }
        }
        self.push(out, Op::ChannelBias(x, bias))
    }

    /// Normalization with statistics over batch and spatial axes per channel.
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let x = self.value(input);
        let (n, c, h, w) = dims4(x);
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let hw = h * w;
        let count = (n * hw) as f64;
        let mut normalized = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; c];
        let mut out = Tensor::zeros(x.shape());
        for ci in 0..c {
            let mut mean = 0.0;
            for bi in 0..n {
                let s = (bi * c + ci) * hw;
                mean += x.data()[s..s + hw].iter().sum::<f64>();
            }
            mean /= count;
            let mut var = 0.0;
            for bi in 0..n {
                let s = (bi * c + ci) * hw;
                var += x.data()[s..s + hw]
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>();
            }
            var /= count;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[ci] = istd;
            for bi in 0..n {
                let s = (bi * c + ci) * hw;
                for i in s..s + hw {
                    let xh = (x.data()[i] - mean) * istd;
                    normalized[i] = xh;
                    out.data_mut()[i] = g[ci] * xh + bt[ci];
                }
            }
        }
        self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            },
        )
    }

    pub fn max_pool(&mut self, input: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let x = self.value(input);
        let (n, c, h, w) = dims4(x);
        let (ho, wo) = conv_out(h, w, kernel, kernel, Conv2dShape { stride, pad });
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let mut argmax = vec![0; n * c * ho * wo];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = base + iy as usize * w + ix as usize;
                            if x.data()[i] > best {
                                best = x.data()[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (plane * ho + oy) * wo + ox;
                    out.data_mut()[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
        self.push(out, Op::MaxPool { input, argmax })
    }

    /// Bilinear lookup of `[views, c, h, w]` maps. Every output row
    /// concatenates the samples of `samples_per_row` consecutive entries.
    pub fn bilinear_gather(
        &mut self,
        maps: Var,
        samples: &[GridSample],
        samples_per_row: usize,
    ) -> Var {
        let m = self.value(maps);
        let (views, c, h, w) = dims4(m);
        assert!(samples_per_row > 0 && samples.len() % samples_per_row == 0);
        let rows = samples.len() / samples_per_row;
        let taps: Vec<[(usize, f64); 4]> = samples
            .iter()
            .map(|s| {
                assert!(s.view < views, "sample view out of range");
                bilinear_taps(s.x, s.y, h, w)
            })
            .collect();
        let hw = h * w;
        let mut out = vec![0.0; rows * samples_per_row * c];
        for (si, (s, tap)) in samples.iter().zip(&taps).enumerate() {
            let dst = &mut out[si * c..(si + 1) * c];
            for &(pix, wt) in tap {
                if wt == 0.0 {
                    continue;
                }
                for (ch, d) in dst.iter_mut().enumerate() {
                    *d += wt * m.data()[(s.view * c + ch) * hw + pix];
                }
            }
        }
        let views_tag = samples.iter().map(|s| s.view).collect::<Vec<_>>();
        // Backward only needs the flat tap index, so fold the view in.
        let taps = taps
            .into_iter()
            .zip(views_tag)
            .map(|(t, v)| t.map(|(p, wt)| (v * c * hw + p, wt)))
            .collect();
        self.push(
            Tensor::from_vec(&[rows, samples_per_row * c], out),
            Op::Bilinear { maps, taps },
        )
    }

    /// Masked scaled dot-product attention with `heads` heads.
    ///
    /// `q` is `[batch, dim]`, `k` and `v` are `[batch * slots, dim]`, `mask`
    /// marks live slots. Every batch row needs at least one live slot.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &[bool]) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (batch, dim) = (qv.rows(), qv.cols());
        assert!(heads > 0 && dim % heads == 0, "dim must split into heads");
        assert_eq!(kv.rows() % batch.max(1), 0);
        let slots = if batch == 0 { 0 } else { kv.rows() / batch };
        assert_eq!(mask.len(), batch * slots);
        let hd = dim / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut weights = vec![0.0; batch * heads * slots];
        let mut out = vec![0.0; batch * dim];
        let mut scores = vec![0.0; slots];
        for b in 0..batch {
            let live = &mask[b * slots..(b + 1) * slots];
            assert!(live.iter().any(|m| *m), "attention row {b} has no live slot");
            for hh in 0..heads {
                let qh = &qv.row(b)[hh * hd..(hh + 1) * hd];
                let mut max = f64::NEG_INFINITY;
                for s in 0..slots {
                    if !live[s] {
                        continue;
                    }
                    let kh = &kv.row(b * slots + s)[hh * hd..(hh + 1) * hd];
                    let sc = dot(qh, kh) * scale;
                    scores[s] = sc;
                    max = max.max(sc);
                }
                let wrow = &mut weights[(b * heads + hh) * slots..(b * heads + hh + 1) * slots];
                let mut total = 0.0;
                for s in 0..slots {
                    if live[s] {
                        wrow[s] = (scores[s] - max).exp();
                        total += wrow[s];
                    }
                }
                let orow = &mut out[b * dim + hh * hd..b * dim + (hh + 1) * hd];
                for s in 0..slots {
                    if !live[s] {
                        continue;
                    }
                    wrow[s] /= total;
                    let vh = &vv.row(b * slots + s)[hh * hd..(hh + 1) * hd];
                    for (o, x) in orow.iter_mut().zip(vh) {
                        *o += wrow[s] * x;
                    }
                }
            }
        }
        self.push(
            Tensor::from_vec(&[batch, dim], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                slots,
                weights,
            },
        )
    }

    /// `out[b] = sum_s weights[b * slots + s] * input[b * slots + s]`.
    pub fn weighted_row_sum(&mut self, input: Var, weights: Vec<f64>, slots: usize) -> Var {
        let x = self.value(input);
        let dim = x.cols();
        assert!(slots > 0 && x.rows() % slots == 0);
        assert_eq!(weights.len(), x.rows());
        let batch = x.rows() / slots;
        let mut out = vec![0.0; batch * dim];
        for (r, &wt) in weights.iter().enumerate() {
            if wt == 0.0 {
                continue;
            }
            let dst = &mut out[(r / slots) * dim..(r / slots + 1) * dim];
            for (o, v) in dst.iter_mut().zip(x.row(r)) {
                *o += wt * v;
            }
        }
        self.push(
            Tensor::from_vec(&[batch, dim], out),
            Op::WeightedRowSum {
                input,
                weights,
                slots,
            },
        )
    }

    /// Sum of squared differences against a constant target.
    pub fn sum_squared_error(&mut self, pred: Var, target: Tensor) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "loss shape mismatch");
        let total: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        self.push(Tensor::scalar(total), Op::SumSquaredError { pred, target })
    }

    /// Reverse pass seeded with ones at `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let ga = accum_slot(grads, *a, av.shape());
                gemm(
                    MatRef::new(g.data(), m, n),
                    MatRef::new(bv.data(), k, n).t(),
                    1.0,
                    ga.data_mut(),
                );
                let gb = accum_slot(grads, *b, bv.shape());
                gemm(
                    MatRef::new(av.data(), m, k).t(),
                    MatRef::new(g.data(), m, n),
                    1.0,
                    gb.data_mut(),
                );
            }
            Op::AddBias(x, bias) => {
                accumulate(grads, *x, g);
                let n = g.cols();
                let gb = accum_slot(grads, *bias, self.value(*bias).shape());
                for row in g.data().chunks(n) {
                    for (d, v) in gb.data_mut().iter_mut().zip(row) {
                        *d += v;
                    }
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, g);
            }
            Op::Relu(x) => {
                let mut d = g.clone();
                for (dv, y) in d.data_mut().iter_mut().zip(node.value.data()) {
                    if *y <= 0.0 {
                        *dv = 0.0;
                    }
                }
                accumulate(grads, *x, &d);
            }
            Op::Sigmoid(x) => {
                let mut d = g.clone();
                for (dv, y) in d.data_mut().iter_mut().zip(node.value.data()) {
                    *dv *= y * (1.0 - y);
                }
                accumulate(grads, *x, &d);
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let shape = self.value(*p).shape().to_vec();
                    let w = shape[1];
                    let slot = accum_slot(grads, *p, &shape);
                    for r in 0..rows {
                        let src = &g.data()[r * total + offset..r * total + offset + w];
                        for (d, s) in slot.data_mut()[r * w..(r + 1) * w].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    let part = Tensor::from_vec(
                        self.value(*p).shape(),
                        g.data()[offset..offset + n].to_vec(),
                    );
                    accumulate(grads, *p, &part);
                    offset += n;
                }
            }
            Op::GatherRows(x, index) => {
                let shape = self.value(*x).shape().to_vec();
                let cols = shape[1];
                let slot = accum_slot(grads, *x, &shape);
                for (r, &i) in index.iter().enumerate() {
                    if i == ZERO_ROW {
                        continue;
                    }
                    let src = &g.data()[r * cols..(r + 1) * cols];
                    for (d, s) in slot.data_mut()[i * cols..(i + 1) * cols].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            Op::GateRows(code, gate) => {
                let shape = self.value(*code).shape().to_vec();
                let n = g.cols();
                let slot = accum_slot(grads, *code, &shape);
                for (r, &on) in gate.iter().enumerate() {
                    if on {
                        for (d, s) in slot.data_mut().iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                conv,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, c, h, wd) = dims4(x);
                let (o, _, kh, kw) = dims4(w);
                let (ho, wo) = conv_out(h, wd, kh, kw, *conv);
                let patch = c * kh * kw;
                let plane = c * h * wd;
                let oplane = o * ho * wo;
                let mut cols = vec![0.0; patch * ho * wo];
                let mut dcols = vec![0.0; patch * ho * wo];
                let mut gw = Tensor::zeros(w.shape());
                let mut gx = Tensor::zeros(x.shape());
                for b in 0..n {
                    let gb = &g.data()[b * oplane..(b + 1) * oplane];
                    im2col(
                        &x.data()[b * plane..(b + 1) * plane],
                        (c, h, wd),
                        (kh, kw),
                        *conv,
                        (ho, wo),
                        &mut cols,
                    );
                    gemm(
                        MatRef::new(gb, o, ho * wo),
                        MatRef::new(&cols, patch, ho * wo).t(),
                        1.0,
                        gw.data_mut(),
                    );
                    gemm(
                        MatRef::new(w.data(), o, patch).t(),
                        MatRef::new(gb, o, ho * wo),
                        0.0,
                        &mut dcols,
                    );
                    col2im(
                        &dcols,
                        (c, h, wd),
                        (kh, kw),
                        *conv,
                        (ho, wo),
                        &mut gx.data_mut()[b * plane..(b + 1) * plane],
                    );
                }
                accumulate(grads, *weight, &gw);
                accumulate(grads, *input, &gx);
            }
            Op::ChannelBias(x, bias) => {
                accumulate(grads, *x, g);
                let (n, c, h, w) = dims4(g);
                let hw = h * w;
                let mut gb = Tensor::zeros(&[c]);
                for bi in 0..n {
                    for ci in 0..c {
                        let s = (bi * c + ci) * hw;
                        gb.data_mut()[ci] += g.data()[s..s + hw].iter().sum::<f64>();
                    }
                }
                accumulate(grads, *bias, &gb);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (n, c, h, w) = dims4(g);
                let hw = h * w;
                let count = (n * hw) as f64;
                let gam = self.value(*gamma).data();
                let mut ggam = Tensor::zeros(&[c]);
                let mut gbeta = Tensor::zeros(&[c]);
                let mut gx = Tensor::zeros(g.shape());
                for ci in 0..c {
                    let (mut sum_g, mut sum_gx) = (0.0, 0.0);
                    for bi in 0..n {
                        let s = (bi * c + ci) * hw;
                        for i in s..s + hw {
                            sum_g += g.data()[i];
                            sum_gx += g.data()[i] * normalized[i];
                        }
                    }
                    ggam.data_mut()[ci] = sum_gx;
                    gbeta.data_mut()[ci] = sum_g;
                    let k = gam[ci] * inv_std[ci] / count;
                    for bi in 0..n {
                        let s = (bi * c + ci) * hw;
                        for i in s..s + hw {
                            gx.data_mut()[i] =
                                k * (count * g.data()[i] - sum_g - normalized[i] * sum_gx);
                        }
                    }
                }
                accumulate(grads, *gamma, &ggam);
                accumulate(grads, *beta, &gbeta);
                accumulate(grads, *input, &gx);
            }
            Op::MaxPool { input, argmax } => {
                let shape = self.value(*input).shape().to_vec();
                let slot = accum_slot(grads, *input, &shape);
                for (o, &i) in argmax.iter().enumerate() {
                    if i != usize::MAX {
                        slot.data_mut()[i] += g.data()[o];
                    }
                }
            }
            Op::Bilinear { maps, taps, .. } => {
                let shape = self.value(*maps).shape().to_vec();
                let (_, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let hw = h * w;
                let slot = accum_slot(grads, *maps, &shape);
                for (si, tap) in taps.iter().enumerate() {
                    let src = &g.data()[si * c..(si + 1) * c];
                    for &(flat, wt) in tap {
                        if wt == 0.0 {
                            continue;
                        }
                        // `flat` addresses channel 0 of the tapped pixel.
                        for (ch, s) in src.iter().enumerate() {
                            slot.data_mut()[flat + ch * hw] += wt * s;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                slots,
                weights,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (batch, dim) = (qv.rows(), qv.cols());
                let (heads, slots) = (*heads, *slots);
                let hd = dim / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let mut gq = Tensor::zeros(qv.shape());
                let mut gk = Tensor::zeros(kv.shape());
                let mut gv = Tensor::zeros(vv.shape());
                let mut dw = vec![0.0; slots];
                for b in 0..batch {
                    for hh in 0..heads {
                        let wrow = &weights[(b * heads + hh) * slots..(b * heads + hh + 1) * slots];
                        let go = &g.data()[b * dim + hh * hd..b * dim + (hh + 1) * hd];
                        let mut wsum = 0.0;
                        for s in 0..slots {
                            if wrow[s] == 0.0 {
                                dw[s] = 0.0;
                                continue;
                            }
                            let r = b * slots + s;
                            let vh = &vv.row(r)[hh * hd..(hh + 1) * hd];
                            dw[s] = dot(go, vh);
                            wsum += wrow[s] * dw[s];
                            let gvh = &mut gv.data_mut()[r * dim + hh * hd..r * dim + (hh + 1) * hd];
                            for (d, x) in gvh.iter_mut().zip(go) {
                                *d += wrow[s] * x;
                            }
                        }
                        let qh = qv.row(b)[hh * hd..(hh + 1) * hd].to_vec();
                        for s in 0..slots {
                            if wrow[s] == 0.0 {
                                continue;
                            }
                            let ds = wrow[s] * (dw[s] - wsum) * scale;
                            let r = b * slots + s;
                            let kh = &kv.row(r)[hh * hd..(hh + 1) * hd];
                            let gqh = &mut gq.data_mut()[b * dim + hh * hd..b * dim + (hh + 1) * hd];
                            for (d, x) in gqh.iter_mut().zip(kh) {
                                *d += ds * x;
                            }
                            let gkh = &mut gk.data_mut()[r * dim + hh * hd..r * dim + (hh + 1) * hd];
                            for (d, x) in gkh.iter_mut().zip(&qh) {
                                *d += ds * x;
                            }
                        }
                    }
                }
                accumulate(grads, *q, &gq);
                accumulate(grads, *k, &gk);
                accumulate(grads, *v, &gv);
            }
            Op::WeightedRowSum {
                input,
                weights,
                slots,
            } => {
                let shape = self.value(*input).shape().to_vec();
                let dim = shape[1];
                let slot = accum_slot(grads, *input, &shape);
                for (r, &wt) in weights.iter().enumerate() {
                    let b = r / *slots;
                    let src = &g.data()[b * dim..(b + 1) * dim];
                    for (d, s) in slot.data_mut()[r * dim..(r + 1) * dim].iter_mut().zip(src) {
                        *d += wt * s;
                    }
                }
            }
            Op::SumSquaredError { pred, target } => {
                let p = self.value(*pred);
                let seed = g.data()[0];
                let d: Vec<f64> = p
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| 2.0 * (a - b) * seed)
                    .collect();
                accumulate(grads, *pred, &Tensor::from_vec(p.shape(), d));
            }
        }
    }
}

fn accum_slot<'g>(grads: &'g mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'g mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: &Tensor) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected a 4-d tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

pub fn conv_out(h: usize, w: usize, kh: usize, kw: usize, conv: Conv2dShape) -> (usize, usize) {
    assert!(h + 2 * conv.pad >= kh && w + 2 * conv.pad >= kw, "kernel larger than input");
    (
        (h + 2 * conv.pad - kh) / conv.stride + 1,
        (w + 2 * conv.pad - kw) / conv.stride + 1,
    )
}

/// Flat pixel index plus weight of the four bilinear taps, clamped to the
/// grid border.
pub fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let cx = x.clamp(0.0, (w - 1) as f64);
    let cy = y.clamp(0.0, (h - 1) as f64);
    let x0 = (cx.floor() as usize).min(w.saturating_sub(2));
    let y0 = (cy.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = if x1 == x0 { 0.0 } else { cx - x0 as f64 };
    let fy = if y1 == y0 { 0.0 } else { cy - y0 as f64 };
    [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ]
}

fn im2col(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    conv: Conv2dShape,
    (ho, wo): (usize, usize),
    cols: &mut [f64],
) {
    let ospatial = ho * wo;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * ospatial..(row + 1) * ospatial];
                for oy in 0..ho {
                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                        dst[oy * wo + ox] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize
                        {
                            x[(ci * h + iy as usize) * w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(
    cols: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    conv: Conv2dShape,
    (ho, wo): (usize, usize),
    x: &mut [f64],
) {
    let ospatial = ho * wo;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &cols[row * ospatial..(row + 1) * ospatial];
                for oy in 0..ho {
                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[(ci * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Checks every input entry of `build` by central differences.
    fn check<F>(inputs: Vec<Tensor>, build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let eval = |vals: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = build(&mut tape, &vars);
            // Weighted sum so every output entry matters.
            let o = tape.value(out);
            let s: f64 = o
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v * (1.0 + 0.1 * (i % 7) as f64))
                .sum();
            (s, tape, vars, out)
        };
        let (_, tape, vars, out) = eval(&inputs);
        // Re-seed backward with the same weights as the scalarization.
        let weights: Vec<f64> = (0..tape.value(out).len())
            .map(|i| 1.0 + 0.1 * (i % 7) as f64)
            .collect();
        let mut tape2 = tape;
        let target: Vec<f64> = tape2
            .value(out)
            .data()
            .iter()
            .zip(&weights)
            .map(|(v, wt)| v - wt / 2.0)
            .collect();
        // d/dv sum (v - t)^2 = 2 (v - t) = weights.
        let loss = tape2.sum_squared_error(out, Tensor::from_vec(tape2.value(out).shape(), target));
        let grads = tape2.backward(loss);
        let h = 1e-6;
        for (ii, input) in inputs.iter().enumerate() {
            let g = grads.get(vars[ii]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
            for e in 0..input.len() {
                let mut plus = inputs.clone();
                plus[ii].data_mut()[e] += h;
                let mut minus = inputs.clone();
                minus[ii].data_mut()[e] -= h;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let an = g.data()[e];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {ii} entry {e}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn dense_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[3, 4], &mut rng);
        let w = random(&[4, 5], &mut rng);
        let b = random(&[5], &mut rng);
        check(vec![x, w, b], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let m = t.add_bias(m, v[2]);
            let r = t.relu(m);
            let s = t.sigmoid(m);
            let sum = t.add(r, s);
            let cat = t.concat_cols(&[sum, v[0]]);
            let stacked = t.concat_rows(&[cat, cat]);
            t.gather_rows(stacked, vec![2, 0, ZERO_ROW, 5, 1])
        });
    }

    #[test]
    fn gate_and_weighted_sum_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let code = random(&[4], &mut rng);
        let x = random(&[6, 4], &mut rng);
        check(vec![code, x], |t, v| {
            let g = t.gate_rows(v[0], vec![true, false, true, true, false, false]);
            let s = t.add(g, v[1]);
            t.weighted_row_sum(s, vec![0.2, 0.8, 1.0, 0.0, 0.5, 0.5], 3)
        });
    }

    #[test]
    fn conv_norm_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 2, 7, 6], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let gamma = random(&[3], &mut rng);
        let beta = random(&[3], &mut rng);
        let bias = random(&[3], &mut rng);
        check(vec![x, w, gamma, beta, bias], |t, v| {
            let c = t.conv2d(v[0], v[1], Conv2dShape { stride: 2, pad: 1 });
            let c = t.channel_bias(c, v[4]);
            let n = t.batch_norm(c, v[2], v[3], 1e-5);
            t.max_pool(n, 3, 2, 1)
        });
    }

    #[test]
    fn bilinear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let maps = random(&[2, 3, 4, 5], &mut rng);
        let samples = vec![
            GridSample { view: 0, x: 1.3, y: 2.6 },
            GridSample { view: 1, x: 0.0, y: 0.0 },
            GridSample { view: 1, x: 3.9, y: 2.2 },
            GridSample { view: 0, x: 4.0, y: 3.0 },
        ];
        check(vec![maps], move |t, v| t.bilinear_gather(v[0], &samples, 2));
    }

    #[test]
    fn attention_gradients_with_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random(&[2, 4], &mut rng);
        let k = random(&[6, 4], &mut rng);
        let v = random(&[6, 4], &mut rng);
        let mask = vec![true, true, false, true, false, true];
        check(vec![q, k, v], move |t, vars| t.attention(vars[0], vars[1], vars[2], 2, &mask));
    }

    #[test]
    fn bilinear_at_node_returns_node_value() {
        let taps = bilinear_taps(2.0, 1.0, 4, 4);
        let total: f64 = taps.iter().map(|t| t.1).sum();
        assert!((total - 1.0).abs() < 1e-15);
        let node = taps.iter().find(|t| t.0 == 4 + 2).unwrap();
        assert_eq!(node.1, 1.0);
        // Right and bottom border clamps onto the last node.
        let edge = bilinear_taps(3.0, 3.0, 4, 4);
        let last = edge.iter().filter(|t| t.0 == 15).map(|t| t.1).sum::<f64>();
        assert_eq!(last, 1.0);
    }
}
