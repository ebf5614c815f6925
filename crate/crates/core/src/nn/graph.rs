//! Reverse-mode differentiation over a per-sample tape.
//!
//! Every forward pass records its operations on a fresh [`Graph`]; calling
//! [`Graph::backward`] with seed gradients for one or more outputs walks the
//! tape in reverse and accumulates gradients into every node that depends on
//! a trainable input. Nodes created with [`Graph::constant`] never receive
//! gradients, which skips the input-gradient work for raw images and masks.

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    /// 3x3 maximum, stride 1, edges ignored (soft dilation).
    MaxSquare,
    /// Minimum over the vertical and horizontal 3-pixel crosses (soft erosion).
    MinCross,
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: Vec<(f64, f64)> },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    MaxPool2 { x: Var, src: Vec<u32> },
    Pool3 { x: Var, src: Vec<u32> },
    Upsample2(Var),
    Concat(Var, Var),
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Var },
    ScaleChannels { x: Var, s: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub const NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` where no gradient flowed.
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0[v.0].take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Same-padded stride-1 convolution; `w` is `[out, in, k, k]` with odd `k`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xt = &self.nodes[x.0].value;
        let wt = &self.nodes[w.0].value;
        let bt = &self.nodes[b.0].value;
        let (cin, h, wd) = xt.chw();
        let (cout, k) = (wt.shape()[0], wt.shape()[2]);
        assert_eq!(wt.shape()[1], cin, "conv input channels");
        let hw = h * wd;
        let kk = cin * k * k;
        let mut out = vec![0.0; cout * hw];
        for (co, row) in out.chunks_mut(hw).enumerate() {
            row.fill(bt.data()[co]);
        }
        let cols_owned;
        let cols: &[f64] = if k == 1 {
            xt.data()
        } else {
            cols_owned = im2col(xt.data(), cin, h, wd, k);
            &cols_owned
        };
        gemm(
            cout, kk, hw,
            wt.data(), kk, 1,
            cols, hw, 1,
            1.0, &mut out, hw,
        );
        self.push(
            Tensor::new(vec![cout, h, wd], out),
            Op::Conv2d { x, w, b },
            &[x, w, b],
        )
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xt = &self.nodes[x.0].value;
        let (c, h, w) = xt.chw();
        assert!(groups > 0 && c % groups == 0, "{c} channels into {groups} groups");
        let g_t = self.nodes[gamma.0].value.data();
        let b_t = self.nodes[beta.0].value.data();
        let per = c / groups * h * w;
        let hw = h * w;
        let mut stats = Vec::with_capacity(groups);
        let mut out = vec![0.0; c * hw];
        for g in 0..groups {
            let seg = &xt.data()[g * per..(g + 1) * per];
            let mean = seg.iter().sum::<f64>() / per as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let rstd = 1.0 / (var + NORM_EPS).sqrt();
            stats.push((mean, rstd));
            for (i, &v) in seg.iter().enumerate() {
                let ch = (g * per + i) / hw;
                out[g * per + i] = (v - mean) * rstd * g_t[ch] + b_t[ch];
            }
        }
        self.push(
            Tensor::new(vec![c, h, w], out),
            Op::GroupNorm { x, gamma, beta, groups, stats },
            &[x, gamma, beta],
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.nodes[x.0].value.map(|v| v.max(0.0));
        self.push(y, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.nodes[x.0].value.map(sigmoid);
        self.push(y, Op::Sigmoid(x), &[x])
    }

    /// Softmax across channels at every pixel of a `[C, H, W]` tensor.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let xt = &self.nodes[x.0].value;
        let (c, h, w) = xt.chw();
        let hw = h * w;
        let d = xt.data();
        let mut out = vec![0.0; c * hw];
        for i in 0..hw {
            let m = (0..c).map(|k| d[k * hw + i]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for k in 0..c {
                let e = (d[k * hw + i] - m).exp();
                out[k * hw + i] = e;
                s += e;
            }
            for k in 0..c {
                out[k * hw + i] /= s;
            }
        }
        self.push(Tensor::new(vec![c, h, w], out), Op::Softmax(x), &[x])
    }

    /// 2x2 max pooling, stride 2. Odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xt = &self.nodes[x.0].value;
        let (c, h, w) = xt.chw();
        let (oh, ow) = (h / 2, w / 2);
        let d = xt.data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut src = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for r in 0..oh {
                for col in 0..ow {
                    let mut best = ch * h * w + 2 * r * w + 2 * col;
                    for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ch * h * w + (2 * r + dr) * w + 2 * col + dc;
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                    out.push(d[best]);
                    src.push(best as u32);
                }
            }
        }
        self.push(Tensor::new(vec![c, oh, ow], out), Op::MaxPool2 { x, src }, &[x])
    }

    /// Stride-1 3-pixel pooling used by soft morphology.
    pub fn pool3(&mut self, x: Var, kind: PoolKind) -> Var {
        let xt = &self.nodes[x.0].value;
        let (c, h, w) = xt.chw();
        let d = xt.data();
        let mut out = Vec::with_capacity(c * h * w);
        let mut src = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            let base = ch * h * w;
            for r in 0..h {
                for col in 0..w {
                    let at = |rr: usize, cc: usize| base + rr * w + cc;
                    let best = match kind {
                        PoolKind::MaxSquare => {
                            let mut best = at(r, col);
                            for rr in r.saturating_sub(1)..(r + 2).min(h) {
                                for cc in col.saturating_sub(1)..(col + 2).min(w) {
                                    if d[at(rr, cc)] > d[best] {
                                        best = at(rr, cc);
                                    }
                                }
                            }
                            best
                        }
                        PoolKind::MinCross => {
                            let mut best = at(r, col);
                            let mut consider = |idx: usize| {
                                if d[idx] < d[best] {
                                    best = idx;
                                }
                            };
                            if r > 0 {
                                consider(at(r - 1, col));
                            }
                            if r + 1 < h {
                                consider(at(r + 1, col));
                            }
                            if col > 0 {
                                consider(at(r, col - 1));
                            }
                            if col + 1 < w {
                                consider(at(r, col + 1));
                            }
                            best
                        }
                    };
                    out.push(d[best]);
                    src.push(best as u32);
                }
            }
        }
        self.push(Tensor::new(vec![c, h, w], out), Op::Pool3 { x, src }, &[x])
    }

    /// Bilinear 2x upsampling with half-pixel centers and edge clamping.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xt = &self.nodes[x.0].value;
        let (c, h, w) = xt.chw();
        let (oh, ow) = (2 * h, 2 * w);
        let d = xt.data();
        let rows: Vec<_> = (0..oh).map(|o| bilinear_taps(o, h)).collect();
        let cols: Vec<_> = (0..ow).map(|o| bilinear_taps(o, w)).collect();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let plane = &d[ch * h * w..(ch + 1) * h * w];
            for (r, &(r0, r1, lr)) in rows.iter().enumerate() {
                for (q, &(c0, c1, lc)) in cols.iter().enumerate() {
                    let top = plane[r0 * w + c0] * (1.0 - lc) + plane[r0 * w + c1] * lc;
                    let bot = plane[r1 * w + c0] * (1.0 - lc) + plane[r1 * w + c1] * lc;
                    out[ch * oh * ow + r * ow + q] = top * (1.0 - lr) + bot * lr;
                }
            }
        }
        self.push(Tensor::new(vec![c, oh, ow], out), Op::Upsample2(x), &[x])
    }

    /// Channel concatenation of two maps with equal spatial shape.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ca, h, w) = self.nodes[a.0].value.chw();
        let (cb, hb, wb) = self.nodes[b.0].value.chw();
        assert_eq!((h, w), (hb, wb), "concat spatial mismatch");
        let mut data = Vec::with_capacity((ca + cb) * h * w);
        data.extend_from_slice(self.nodes[a.0].value.data());
        data.extend_from_slice(self.nodes[b.0].value.data());
        self.push(Tensor::new(vec![ca + cb, h, w], data), Op::Concat(a, b), &[a, b])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (c, h, w) = self.nodes[x.0].value.chw();
        let hw = h * w;
        let d = self.nodes[x.0].value.data();
        let out = (0..c)
            .map(|k| d[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        self.push(Tensor::new(vec![c], out), Op::GlobalAvgPool(x), &[x])
    }

    /// `w x + b` for a vector `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xt = self.nodes[x.0].value.data();
        let wt = &self.nodes[w.0].value;
        let (out_n, in_n) = (wt.shape()[0], wt.shape()[1]);
        assert_eq!(xt.len(), in_n, "linear input size");
        let bt = self.nodes[b.0].value.data();
        let out = (0..out_n)
            .map(|o| {
                bt[o]
                    + wt.data()[o * in_n..(o + 1) * in_n]
                        .iter()
                        .zip(xt)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect();
        self.push(Tensor::new(vec![out_n], out), Op::Linear { x, w, b }, &[x, w, b])
    }

    /// Multiplies channel `k` of `x` by `s[k]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Var {
        let (c, h, w) = self.nodes[x.0].value.chw();
        let hw = h * w;
        let st = self.nodes[s.0].value.data();
        assert_eq!(st.len(), c, "scale vector length");
        let mut out = self.nodes[x.0].value.data().to_vec();
        for k in 0..c {
            for v in &mut out[k * hw..(k + 1) * hw] {
                *v *= st[k];
            }
        }
        self.push(Tensor::new(vec![c, h, w], out), Op::ScaleChannels { x, s }, &[x, s])
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let at = &self.nodes[a.0].value;
        let bt = &self.nodes[b.0].value;
        assert_eq!(at.shape(), bt.shape(), "elementwise shape mismatch");
        let data = at.data().iter().zip(bt.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(at.shape().to_vec(), data);
        self.push(t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Propagates the seed gradients back through the tape.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(self.nodes[v.0].value.shape(), g.shape(), "seed gradient shape");
            accumulate(&mut grads, v, g);
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(node, &gy, &mut grads);
        }
        Gradients(grads)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b } => {
                let (cin, h, wd) = val(*x).chw();
                let wt = val(*w);
                let (cout, k) = (wt.shape()[0], wt.shape()[2]);
                let hw = h * wd;
                let kk = cin * k * k;
                let gyd = gy.data();
                if self.needs(*b) {
                    let db = (0..cout).map(|co| gyd[co * hw..(co + 1) * hw].iter().sum()).collect();
                    accumulate(grads, *b, Tensor::new(vec![cout], db));
                }
                let need_w = self.needs(*w);
                let need_x = self.needs(*x);
                if !need_w && !need_x {
                    return;
                }
                if need_w {
                    let cols_owned;
                    let cols: &[f64] = if k == 1 {
                        val(*x).data()
                    } else {
                        cols_owned = im2col(val(*x).data(), cin, h, wd, k);
                        &cols_owned
                    };
                    let mut dw = vec![0.0; cout * kk];
                    // dW = dY * cols^T
                    gemm(cout, hw, kk, gyd, hw, 1, cols, 1, hw, 0.0, &mut dw, kk);
                    accumulate(grads, *w, Tensor::new(wt.shape().to_vec(), dw));
                }
                if need_x {
                    let mut dcols = vec![0.0; kk * hw];
                    // dcols = W^T * dY
                    gemm(kk, cout, hw, wt.data(), 1, kk, gyd, hw, 1, 0.0, &mut dcols, hw);
                    let dx = if k == 1 { dcols } else { col2im(&dcols, cin, h, wd, k) };
                    accumulate(grads, *x, Tensor::new(vec![cin, h, wd], dx));
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let xt = val(*x);
                let (c, h, w) = xt.chw();
                let hw = h * w;
                let per = c / groups * hw;
                let g_t = val(*gamma).data();
                let gyd = gy.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; c * hw];
                for (g, &(mean, rstd)) in stats.iter().enumerate() {
                    let lo = g * per;
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for i in lo..lo + per {
                        let ch = i / hw;
                        let xhat = (xt.data()[i] - mean) * rstd;
                        dgamma[ch] += gyd[i] * xhat;
                        dbeta[ch] += gyd[i];
                        let d = gyd[i] * g_t[ch];
                        sum_d += d;
                        sum_dx += d * xhat;
                    }
                    let n = per as f64;
                    for i in lo..lo + per {
                        let ch = i / hw;
                        let xhat = (xt.data()[i] - mean) * rstd;
                        let d = gyd[i] * g_t[ch];
                        dx[i] = rstd * (d - sum_d / n - xhat * sum_dx / n);
                    }
                }
                if self.needs(*x) {
                    accumulate(grads, *x, Tensor::new(vec![c, h, w], dx));
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(vec![c], dgamma));
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, Tensor::new(vec![c], dbeta));
                }
            }
            Op::Relu(x) => {
                let d = val(*x)
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, Tensor::new(gy.shape().to_vec(), d));
            }
            Op::Sigmoid(x) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&y, &g)| g * y * (1.0 - y))
                    .collect();
                accumulate(grads, *x, Tensor::new(gy.shape().to_vec(), d));
            }
            Op::Softmax(x) => {
                let (c, h, w) = node.value.chw();
                let hw = h * w;
                let y = node.value.data();
                let g = gy.data();
                let mut d = vec![0.0; c * hw];
                for i in 0..hw {
                    let dot: f64 = (0..c).map(|k| g[k * hw + i] * y[k * hw + i]).sum();
                    for k in 0..c {
                        d[k * hw + i] = y[k * hw + i] * (g[k * hw + i] - dot);
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![c, h, w], d));
            }
            Op::MaxPool2 { x, src } | Op::Pool3 { x, src } => {
                let mut d = vec![0.0; val(*x).len()];
                for (&s, &g) in src.iter().zip(gy.data()) {
                    d[s as usize] += g;
                }
                accumulate(grads, *x, Tensor::new(val(*x).shape().to_vec(), d));
            }
            Op::Upsample2(x) => {
                let (c, h, w) = val(*x).chw();
                let (oh, ow) = (2 * h, 2 * w);
                let rows: Vec<_> = (0..oh).map(|o| bilinear_taps(o, h)).collect();
                let cols: Vec<_> = (0..ow).map(|o| bilinear_taps(o, w)).collect();
                let g = gy.data();
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    let plane = &mut d[ch * h * w..(ch + 1) * h * w];
                    for (r, &(r0, r1, lr)) in rows.iter().enumerate() {
                        for (q, &(c0, c1, lc)) in cols.iter().enumerate() {
                            let gv = g[ch * oh * ow + r * ow + q];
                            plane[r0 * w + c0] += gv * (1.0 - lr) * (1.0 - lc);
                            plane[r0 * w + c1] += gv * (1.0 - lr) * lc;
                            plane[r1 * w + c0] += gv * lr * (1.0 - lc);
                            plane[r1 * w + c1] += gv * lr * lc;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![c, h, w], d));
            }
            Op::Concat(a, b) => {
                let na = val(*a).len();
                if self.needs(*a) {
                    let t = Tensor::new(val(*a).shape().to_vec(), gy.data()[..na].to_vec());
                    accumulate(grads, *a, t);
                }
                if self.needs(*b) {
                    let t = Tensor::new(val(*b).shape().to_vec(), gy.data()[na..].to_vec());
                    accumulate(grads, *b, t);
                }
            }
            Op::GlobalAvgPool(x) => {
                let (c, h, w) = val(*x).chw();
                let hw = h * w;
                let mut d = vec![0.0; c * hw];
                for k in 0..c {
                    let gv = gy.data()[k] / hw as f64;
                    d[k * hw..(k + 1) * hw].fill(gv);
                }
                accumulate(grads, *x, Tensor::new(vec![c, h, w], d));
            }
            Op::Linear { x, w, b } => {
                let xt = val(*x).data();
                let wt = val(*w);
                let (out_n, in_n) = (wt.shape()[0], wt.shape()[1]);
                let g = gy.data();
                if self.needs(*x) {
                    let dx = (0..in_n)
                        .map(|i| (0..out_n).map(|o| wt.data()[o * in_n + i] * g[o]).sum())
                        .collect();
                    accumulate(grads, *x, Tensor::new(vec![in_n], dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; out_n * in_n];
                    for o in 0..out_n {
                        for i in 0..in_n {
                            dw[o * in_n + i] = g[o] * xt[i];
                        }
                    }
                    accumulate(grads, *w, Tensor::new(vec![out_n, in_n], dw));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, gy.clone());
                }
            }
            Op::ScaleChannels { x, s } => {
                let (c, h, w) = val(*x).chw();
                let hw = h * w;
                let st = val(*s).data();
                let xd = val(*x).data();
                let g = gy.data();
                if self.needs(*x) {
                    let mut d = g.to_vec();
                    for k in 0..c {
                        for v in &mut d[k * hw..(k + 1) * hw] {
                            *v *= st[k];
                        }
                    }
                    accumulate(grads, *x, Tensor::new(vec![c, h, w], d));
                }
                if self.needs(*s) {
                    let ds = (0..c)
                        .map(|k| (k * hw..(k + 1) * hw).map(|i| g[i] * xd[i]).sum())
                        .collect();
                    accumulate(grads, *s, Tensor::new(vec![c], ds));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, gy.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, gy.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, gy.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, gy.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let prod = |t: &Tensor| {
                    let d = t.data().iter().zip(gy.data()).map(|(x, g)| x * g).collect();
                    Tensor::new(gy.shape().to_vec(), d)
                };
                if self.needs(*a) {
                    accumulate(grads, *a, prod(val(*b)));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, prod(val(*a)));
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Source rows `(lo, hi, frac)` for output index `o` of a 2x bilinear resize.
fn bilinear_taps(o: usize, n: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let lo = (src.floor() as usize).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    (lo, hi, src - lo as f64)
}

fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; cin * k * k * hw];
    for c in 0..cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize) as usize;
                    if x0 < x1 {
                        let s0 = (x0 as isize + dx) as usize;
                        dst[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut x = vec![0.0; cin * hw];
    for c in 0..cin {
        let plane = &mut x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize) as usize;
                    let base = sy as usize * w;
                    for xx in x0..x1 {
                        plane[base + (xx as isize + dx) as usize] += row[y * w + xx];
                    }
                }
            }
        }
    }
    x
}

/// `c = a * b + beta * c` with explicit strides; `c` is row-major `m x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every index touched is within the slices, given the shapes and
    // strides passed by the callers above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}
