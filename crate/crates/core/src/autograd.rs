//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every op records its inputs on the tape; [`Tape::backward`] walks the tape
//! in reverse creation order, which is always a valid topological order.
//! Nodes whose inputs do not require gradients are never visited.

use std::cell::{Ref, RefCell};

use crate::error::{RegoError, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeom {
    pub fn square(k: usize, stride: usize, pad: usize) -> Self {
        ConvGeom {
            kh: k,
            kw: k,
            stride,
            ph: pad,
            pw: pad,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let hp = h + 2 * self.ph;
        let wp = w + 2 * self.pw;
        if hp < self.kh || wp < self.kw || self.stride == 0 {
            return None;
        }
        Some(((hp - self.kh) / self.stride + 1, (wp - self.kw) / self.stride + 1))
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.ph == 0 && self.pw == 0
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Abs(usize),
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    DynamicConv {
        x: usize,
        k: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    ConcatChannels(Vec<usize>),
    SliceChannels {
        x: usize,
        start: usize,
    },
    ConcatWidth(usize, usize),
    SliceWidth {
        x: usize,
        start: usize,
    },
    FlipWidth(usize),
    SumChannels(usize),
    SoftmaxChannels(usize),
    AdaptiveAvgPool(usize),
    Upsample2x(usize),
    Mean(usize),
    MeanPerSample(usize),
    Gram(usize),
    Cosine(usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable leaf.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Gradients of the scalar `loss` with respect to every node that requires them.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(RegoError::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

fn accum(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn needs(nodes: &[Node], id: usize) -> bool {
    nodes[id].requires_grad
}

fn backprop_node(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accum(grads, nodes, *a, g.clone());
            accum(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accum(grads, nodes, *a, g.clone());
            if needs(nodes, *b) {
                accum(grads, nodes, *b, g.scale(-1.0));
            }
        }
        Op::Mul(a, b) => {
            if needs(nodes, *a) {
                accum(grads, nodes, *a, g.zip_map(&nodes[*b].value, |d, v| d * v));
            }
            if needs(nodes, *b) {
                accum(grads, nodes, *b, g.zip_map(&nodes[*a].value, |d, v| d * v));
            }
        }
        Op::Scale(a, s) => accum(grads, nodes, *a, g.scale(*s)),
        Op::AddScalar(a) => accum(grads, nodes, *a, g.clone()),
        Op::Relu(a) => {
            let gx = g.zip_map(&nodes[*a].value, |d, x| if x > 0.0 { d } else { 0.0 });
            accum(grads, nodes, *a, gx);
        }
        Op::LeakyRelu(a, slope) => {
            let s = *slope;
            let gx = g.zip_map(&nodes[*a].value, |d, x| if x > 0.0 { d } else { d * s });
            accum(grads, nodes, *a, gx);
        }
        Op::Sigmoid(a) => accum(grads, nodes, *a, g.zip_map(out, |d, y| d * y * (1.0 - y))),
        Op::Tanh(a) => accum(grads, nodes, *a, g.zip_map(out, |d, y| d * (1.0 - y * y))),
        Op::Abs(a) => {
            let gx = g.zip_map(&nodes[*a].value, |d, x| {
                if x > 0.0 {
                    d
                } else if x < 0.0 {
                    -d
                } else {
                    0.0
                }
            });
            accum(grads, nodes, *a, gx);
        }
        Op::Conv { x, w, b, geom } => {
            let xv = &nodes[*x].value;
            let wv = &nodes[*w].value;
            let (gx, gw) = conv_backward(xv, wv, g, *geom, needs(nodes, *x), needs(nodes, *w));
            if let Some(gx) = gx {
                accum(grads, nodes, *x, gx);
            }
            if let Some(gw) = gw {
                accum(grads, nodes, *w, gw);
            }
            if let Some(b) = b {
                if needs(nodes, *b) {
                    let [n, c, h, w] = g.shape();
                    let mut gb = Tensor::zeros([1, c, 1, 1]);
                    for s in 0..n {
                        for ch in 0..c {
                            let start = (s * c + ch) * h * w;
                            gb.data_mut()[ch] += g.data()[start..start + h * w].iter().sum::<f64>();
                        }
                    }
                    accum(grads, nodes, *b, gb);
                }
            }
        }
        Op::DynamicConv { x, k } => {
            let (gx, gk) =
                dynamic_conv_backward(&nodes[*x].value, &nodes[*k].value, g, needs(nodes, *x), needs(nodes, *k));
            if let Some(gx) = gx {
                accum(grads, nodes, *x, gx);
            }
            if let Some(gk) = gk {
                accum(grads, nodes, *k, gk);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let [n, c, h, w] = g.shape();
            let hw = h * w;
            let m = (n * hw) as f64;
            let gam = &nodes[*gamma].value;
            let mut dgamma = Tensor::zeros([1, c, 1, 1]);
            let mut dbeta = Tensor::zeros([1, c, 1, 1]);
            for ch in 0..c {
                let (mut sg, mut sgx) = (0.0, 0.0);
                for s in 0..n {
                    let start = (s * c + ch) * hw;
                    for i in start..start + hw {
                        sg += g.data()[i];
                        sgx += g.data()[i] * xhat.data()[i];
                    }
                }
                dgamma.data_mut()[ch] = sgx;
                dbeta.data_mut()[ch] = sg;
            }
            if needs(nodes, *x) {
                let mut gx = Tensor::zeros(g.shape());
                for ch in 0..c {
                    let scale = gam.data()[ch] * inv_std[ch];
                    let (sg, sgx) = (dbeta.data()[ch], dgamma.data()[ch]);
                    for s in 0..n {
                        let start = (s * c + ch) * hw;
                        for i in start..start + hw {
                            gx.data_mut()[i] = if *batch_stats {
                                scale / m * (m * g.data()[i] - sg - xhat.data()[i] * sgx)
                            } else {
                                scale * g.data()[i]
                            };
                        }
                    }
                }
                accum(grads, nodes, *x, gx);
            }
            accum(grads, nodes, *gamma, dgamma);
            accum(grads, nodes, *beta, dbeta);
        }
        Op::ConcatChannels(parts) => {
            let [n, _, h, w] = g.shape();
            let hw = h * w;
            let mut offset = 0;
            for &p in parts {
                let pc = nodes[p].value.c();
                if needs(nodes, p) {
                    let mut gp = Tensor::zeros([n, pc, h, w]);
                    for s in 0..n {
                        let src = g.sample(s);
                        gp.sample_mut(s)
                            .copy_from_slice(&src[offset * hw..(offset + pc) * hw]);
                    }
                    accum(grads, nodes, p, gp);
                }
                offset += pc;
            }
        }
        Op::SliceChannels { x, start } => {
            let xs = nodes[*x].value.shape();
            let hw = xs[2] * xs[3];
            let mut gx = Tensor::zeros(xs);
            let len = g.c();
            for s in 0..xs[0] {
                gx.sample_mut(s)[start * hw..(start + len) * hw].copy_from_slice(g.sample(s));
            }
            accum(grads, nodes, *x, gx);
        }
        Op::ConcatWidth(a, b) => {
            let wa = nodes[*a].value.w();
            let wb = nodes[*b].value.w();
            accum(grads, nodes, *a, g.slice_width(0, wa));
            if needs(nodes, *b) {
                accum(grads, nodes, *b, g.slice_width(wa, wb));
            }
        }
        Op::SliceWidth { x, start } => {
            let xs = nodes[*x].value.shape();
            let len = g.w();
            let mut gx = Tensor::zeros(xs);
            for (row_out, row_g) in gx.data_mut().chunks_exact_mut(xs[3]).zip(g.data().chunks_exact(len)) {
                row_out[*start..start + len].copy_from_slice(row_g);
            }
            accum(grads, nodes, *x, gx);
        }
        Op::FlipWidth(a) => accum(grads, nodes, *a, flip_width(g)),
        Op::SumChannels(a) => {
            let xs = nodes[*a].value.shape();
            let hw = xs[2] * xs[3];
            let mut gx = Tensor::zeros(xs);
            for s in 0..xs[0] {
                let src = g.sample(s).to_vec();
                for chunk in gx.sample_mut(s).chunks_exact_mut(hw) {
                    chunk.copy_from_slice(&src);
                }
            }
            accum(grads, nodes, *a, gx);
        }
        Op::SoftmaxChannels(a) => {
            let [n, c, h, w] = out.shape();
            let hw = h * w;
            let mut gx = Tensor::zeros(out.shape());
            for s in 0..n {
                for p in 0..hw {
                    let idx = |ch: usize| (s * c + ch) * hw + p;
                    let dot: f64 = (0..c).map(|ch| g.data()[idx(ch)] * out.data()[idx(ch)]).sum();
                    for ch in 0..c {
                        gx.data_mut()[idx(ch)] = out.data()[idx(ch)] * (g.data()[idx(ch)] - dot);
                    }
                }
            }
            accum(grads, nodes, *a, gx);
        }
        Op::AdaptiveAvgPool(a) => {
            let xs = nodes[*a].value.shape();
            let mut gx = Tensor::zeros(xs);
            let [n, c, oh, ow] = g.shape();
            for s in 0..n {
                for ch in 0..c {
                    for oy in 0..oh {
                        let (y0, y1) = pool_bin(oy, oh, xs[2]);
                        for ox in 0..ow {
                            let (x0, x1) = pool_bin(ox, ow, xs[3]);
                            let share = g.at(s, ch, oy, ox) / ((y1 - y0) * (x1 - x0)) as f64;
                            for y in y0..y1 {
                                for x in x0..x1 {
                                    let o = gx.offset(s, ch, y, x);
                                    gx.data_mut()[o] += share;
                                }
                            }
                        }
                    }
                }
            }
            accum(grads, nodes, *a, gx);
        }
        Op::Upsample2x(a) => {
            let xs = nodes[*a].value.shape();
            let gx = Tensor::from_fn(xs, |s, ch, y, x| {
                g.at(s, ch, 2 * y, 2 * x)
                    + g.at(s, ch, 2 * y, 2 * x + 1)
                    + g.at(s, ch, 2 * y + 1, 2 * x)
                    + g.at(s, ch, 2 * y + 1, 2 * x + 1)
            });
            accum(grads, nodes, *a, gx);
        }
        Op::Mean(a) => {
            let xs = nodes[*a].value.shape();
            let len: usize = xs.iter().product();
            accum(grads, nodes, *a, Tensor::full(xs, g.data()[0] / len as f64));
        }
        Op::MeanPerSample(a) => {
            let xs = nodes[*a].value.shape();
            let per = xs[1] * xs[2] * xs[3];
            let mut gx = Tensor::zeros(xs);
            for s in 0..xs[0] {
                let v = g.data()[s] / per as f64;
                gx.sample_mut(s).iter_mut().for_each(|e| *e = v);
            }
            accum(grads, nodes, *a, gx);
        }
        Op::Gram(a) => {
            let xv = &nodes[*a].value;
            let [n, c, h, w] = xv.shape();
            let hw = h * w;
            let mut gx = Tensor::zeros(xv.shape());
            for s in 0..n {
                // dM = (G' + G'^T) M / hw
                let gs = g.sample(s);
                let mut sym = vec![0.0; c * c];
                for i in 0..c {
                    for j in 0..c {
                        sym[i * c + j] = (gs[i * c + j] + gs[j * c + i]) / hw as f64;
                    }
                }
                gemm(c, c, hw, &sym, c, 1, xv.sample(s), hw, 1, 0.0, gx.sample_mut(s));
            }
            accum(grads, nodes, *a, gx);
        }
        Op::Cosine(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let mut ga = Tensor::zeros(av.shape());
            let mut gb = Tensor::zeros(bv.shape());
            for s in 0..av.n() {
                let (x, y) = (av.sample(s), bv.sample(s));
                let (dot, nx, ny) = cosine_parts(x, y);
                if nx == 0.0 || ny == 0.0 {
                    continue;
                }
                let cos = dot / (nx * ny);
                let d = g.data()[s];
                for (i, (gxa, gxb)) in ga.sample_mut(s).iter_mut().zip(gb.sample_mut(s).iter_mut()).enumerate() {
                    *gxa = d * (y[i] / (nx * ny) - cos * x[i] / (nx * nx));
                    *gxb = d * (x[i] / (nx * ny) - cos * y[i] / (ny * ny));
                }
            }
            accum(grads, nodes, *a, ga);
            accum(grads, nodes, *b, gb);
        }
    }
}

pub(crate) fn cosine_parts(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut xx = 0.0;
    let mut yy = 0.0;
    for (a, b) in x.iter().zip(y) {
        dot += a * b;
        xx += a * a;
        yy += b * b;
    }
    (dot, xx.sqrt(), yy.sqrt())
}

pub(crate) fn pool_bin(i: usize, out: usize, input: usize) -> (usize, usize) {
    let start = (i * input) / out;
    let end = ((i + 1) * input).div_ceil(out);
    (start, end)
}

pub(crate) fn flip_width(t: &Tensor) -> Tensor {
    let w = t.w();
    let mut out = t.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], cin: usize, h: usize, w: usize, geom: ConvGeom, oh: usize, ow: usize, cols: &mut [f64]) {
    let p = oh * ow;
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..geom.kh {
            for kx in 0..geom.kw {
                let row = ((ci * geom.kh + ky) * geom.kw + kx) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.ph as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * geom.stride + kx) as isize - geom.pw as isize;
                        *v = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, geom: ConvGeom, oh: usize, ow: usize, x: &mut [f64]) {
    let p = oh * ow;
    for ci in 0..cin {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..geom.kh {
            for kx in 0..geom.kw {
                let row = ((ci * geom.kh + ky) * geom.kw + kx) * p;
                let src = &cols[row..row + p];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &src[oy * ow..(oy + 1) * ow];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter().enumerate() {
                        let ix = (ox * geom.stride + kx) as isize - geom.pw as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, geom: ConvGeom) -> Result<Tensor> {
    let [n, cin, h, w] = x.shape();
    let [cout, wcin, kh, kw] = weight.shape();
    if wcin != cin || kh != geom.kh || kw != geom.kw {
        return Err(RegoError::Shape(format!(
            "conv weight {:?} does not fit input {:?}",
            weight.shape(),
            x.shape()
        )));
    }
    let (oh, ow) = geom
        .output_size(h, w)
        .ok_or_else(|| RegoError::Shape(format!("input {h}x{w} smaller than kernel {kh}x{kw}")))?;
    let p = oh * ow;
    let k = cin * kh * kw;
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    for s in 0..n {
        let xs = x.sample(s);
        let colref: &[f64] = if geom.is_pointwise() {
            xs
        } else {
            im2col(xs, cin, h, w, geom, oh, ow, &mut cols);
            &cols
        };
        let dst = out.sample_mut(s);
        if let Some(b) = bias {
            for (co, chunk) in dst.chunks_exact_mut(p).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b.data()[co]);
            }
        }
        gemm(cout, k, p, weight.data(), k, 1, colref, p, 1, 1.0, dst);
    }
    Ok(out)
}

fn conv_backward(
    x: &Tensor,
    weight: &Tensor,
    g: &Tensor,
    geom: ConvGeom,
    want_x: bool,
    want_w: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let [n, cin, h, w] = x.shape();
    let [cout, _, kh, kw] = weight.shape();
    let (oh, ow) = (g.h(), g.w());
    let p = oh * ow;
    let k = cin * kh * kw;
    let mut gx = want_x.then(|| Tensor::zeros(x.shape()));
    let mut gw = want_w.then(|| Tensor::zeros(weight.shape()));
    let pointwise = geom.is_pointwise();
    let mut cols = vec![0.0; k * p];
    for s in 0..n {
        let gs = g.sample(s);
        if let Some(gw) = gw.as_mut() {
            let colref: &[f64] = if pointwise {
                x.sample(s)
            } else {
                im2col(x.sample(s), cin, h, w, geom, oh, ow, &mut cols);
                &cols
            };
            // gW[cout, k] += g[cout, p] * cols[k, p]^T
            gemm(cout, p, k, gs, p, 1, colref, 1, p, 1.0, gw.data_mut());
        }
        if let Some(gx) = gx.as_mut() {
            if pointwise {
                gemm(k, cout, p, weight.data(), 1, k, gs, p, 1, 1.0, gx.sample_mut(s));
            } else {
                gemm(k, cout, p, weight.data(), 1, k, gs, p, 1, 0.0, &mut cols);
                col2im(&cols, cin, h, w, geom, oh, ow, gx.sample_mut(s));
            }
        }
    }
    (gx, gw)
}

const DYN_GEOM: ConvGeom = ConvGeom {
    kh: 3,
    kw: 3,
    stride: 1,
    ph: 1,
    pw: 1,
};

fn dynamic_conv_forward(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let [n, cx, h, w] = x.shape();
    let [nk, c, kh, kw] = kernel.shape();
    if cx != 1 || nk != n || kh != 3 || kw != 3 {
        return Err(RegoError::Shape(format!(
            "dynamic conv expects [n,1,h,w] input and [n,c,3,3] kernel, got {:?} and {:?}",
            x.shape(),
            kernel.shape()
        )));
    }
    let p = h * w;
    let mut out = Tensor::zeros([n, c, h, w]);
    let mut cols = vec![0.0; 9 * p];
    for s in 0..n {
        im2col(x.sample(s), 1, h, w, DYN_GEOM, h, w, &mut cols);
        gemm(c, 9, p, kernel.sample(s), 9, 1, &cols, p, 1, 0.0, out.sample_mut(s));
    }
    Ok(out)
}

fn dynamic_conv_backward(
    x: &Tensor,
    kernel: &Tensor,
    g: &Tensor,
    want_x: bool,
    want_k: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let [n, _, h, w] = x.shape();
    let c = kernel.c();
    let p = h * w;
    let mut gx = want_x.then(|| Tensor::zeros(x.shape()));
    let mut gk = want_k.then(|| Tensor::zeros(kernel.shape()));
    let mut cols = vec![0.0; 9 * p];
    for s in 0..n {
        if let Some(gk) = gk.as_mut() {
            im2col(x.sample(s), 1, h, w, DYN_GEOM, h, w, &mut cols);
            gemm(c, p, 9, g.sample(s), p, 1, &cols, 1, p, 0.0, gk.sample_mut(s));
        }
        if let Some(gx) = gx.as_mut() {
            gemm(9, c, p, kernel.sample(s), 1, 9, g.sample(s), p, 1, 0.0, &mut cols);
            col2im(&cols, 1, h, w, DYN_GEOM, h, w, gx.sample_mut(s));
        }
    }
    (gx, gk)
}

/// Batch-statistics output of a training-mode batch norm, for running-average updates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub enum NormStats<'a> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with fixed running statistics.
    Frozen { mean: &'a [f64], var: &'a [f64] },
}

pub const BN_EPS: f64 = 1e-5;

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> [usize; 4] {
        self.value().shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// The same value, cut off from the graph.
    pub fn detach(&self) -> Var<'t> {
        let v = self.value().clone();
        self.tape.constant(v)
    }

    fn unary(&self, f: impl Fn(&Tensor) -> Tensor, op: Op) -> Var<'t> {
        let out = f(&self.value());
        let rg = self.requires_grad();
        self.tape.push(out, op, rg)
    }

    fn same_shape(&self, other: &Var<'t>, what: &str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(RegoError::Shape(format!("{what}: {a:?} vs {b:?}")));
        }
        Ok(())
    }

    fn binary(&self, other: &Var<'t>, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        self.same_shape(other, what)?;
        let out = self.value().zip_map(&other.value(), f);
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(out, op, rg))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(|t| t.scale(s), Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        self.unary(|t| t.map(|v| v + s), Op::AddScalar(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|t| t.map(|v| v.max(0.0)), Op::Relu(self.id))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        self.unary(
            |t| t.map(|v| if v > 0.0 { v } else { v * slope }),
            Op::LeakyRelu(self.id, slope),
        )
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(|t| t.map(sigmoid), Op::Sigmoid(self.id))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(|t| t.map(f64::tanh), Op::Tanh(self.id))
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(|t| t.map(f64::abs), Op::Abs(self.id))
    }

    pub fn flip_width(&self) -> Var<'t> {
        self.unary(flip_width, Op::FlipWidth(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        self.unary(|t| Tensor::scalar(t.mean()), Op::Mean(self.id))
    }

    /// Mean over everything but the batch axis, shape `[n,1,1,1]`.
    pub fn mean_per_sample(&self) -> Var<'t> {
        self.unary(
            |t| {
                let per = t.c() * t.h() * t.w();
                let data = (0..t.n()).map(|s| t.sample(s).iter().sum::<f64>() / per as f64).collect();
                Tensor::from_vec([t.n(), 1, 1, 1], data).expect("shape")
            },
            Op::MeanPerSample(self.id),
        )
    }

    pub fn sum_channels(&self) -> Var<'t> {
        self.unary(
            |t| {
                let [n, c, h, w] = t.shape();
                let hw = h * w;
                let mut out = Tensor::zeros([n, 1, h, w]);
                for s in 0..n {
                    let src = t.sample(s);
                    let dst = out.sample_mut(s);
                    for ch in 0..c {
                        for (d, v) in dst.iter_mut().zip(&src[ch * hw..(ch + 1) * hw]) {
                            *d += v;
                        }
                    }
                }
                out
            },
            Op::SumChannels(self.id),
        )
    }

    /// Softmax across the channel axis, independently at every spatial position.
    pub fn softmax_channels(&self) -> Result<Var<'t>> {
        if !self.value().is_finite() {
            return Err(RegoError::InvalidValue("softmax input contains NaN or Inf".into()));
        }
        Ok(self.unary(softmax_channels, Op::SoftmaxChannels(self.id)))
    }

    pub fn upsample2x(&self) -> Var<'t> {
        self.unary(
            |t| {
                let [n, c, h, w] = t.shape();
                Tensor::from_fn([n, c, 2 * h, 2 * w], |s, ch, y, x| t.at(s, ch, y / 2, x / 2))
            },
            Op::Upsample2x(self.id),
        )
    }

    pub fn adaptive_avg_pool(&self, oh: usize, ow: usize) -> Result<Var<'t>> {
        let [_, _, h, w] = self.shape();
        if h < oh || w < ow {
            return Err(RegoError::Config(format!(
                "cannot pool {h}x{w} down to {oh}x{ow}"
            )));
        }
        Ok(self.unary(
            |t| {
                let [n, c, h, w] = t.shape();
                Tensor::from_fn([n, c, oh, ow], |s, ch, oy, ox| {
                    let (y0, y1) = pool_bin(oy, oh, h);
                    let (x0, x1) = pool_bin(ox, ow, w);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            acc += t.at(s, ch, y, x);
                        }
                    }
                    acc / ((y1 - y0) * (x1 - x0)) as f64
                })
            },
            Op::AdaptiveAvgPool(self.id),
        ))
    }

    pub fn slice_width(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let w = self.shape()[3];
        if start + len > w {
            return Err(RegoError::Shape(format!("width slice {start}+{len} exceeds {w}")));
        }
        Ok(self.unary(|t| t.slice_width(start, len), Op::SliceWidth { x: self.id, start }))
    }

    pub fn concat_width(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = Tensor::concat_width(&self.value(), &other.value())?;
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(out, Op::ConcatWidth(self.id, other.id), rg))
    }

    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let [n, c, h, w] = self.shape();
        if start + len > c {
            return Err(RegoError::Shape(format!("channel slice {start}+{len} exceeds {c}")));
        }
        let hw = h * w;
        Ok(self.unary(
            |t| {
                let mut out = Tensor::zeros([n, len, h, w]);
                for s in 0..n {
                    out.sample_mut(s)
                        .copy_from_slice(&t.sample(s)[start * hw..(start + len) * hw]);
                }
                out
            },
            Op::SliceChannels { x: self.id, start },
        ))
    }

    pub fn concat_channels(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| RegoError::Shape("empty channel concat".into()))?;
        let tape = first.tape;
        let [n, _, h, w] = first.shape();
        let mut total = 0;
        for p in parts {
            let s = p.shape();
            if s[0] != n || s[2] != h || s[3] != w {
                return Err(RegoError::Shape(format!(
                    "channel concat of {:?} and {s:?}",
                    first.shape()
                )));
            }
            total += s[1];
        }
        let mut out = Tensor::zeros([n, total, h, w]);
        {
            let nodes = tape.nodes.borrow();
            for s in 0..n {
                let dst = out.sample_mut(s);
                let mut off = 0;
                for p in parts {
                    let src = nodes[p.id].value.sample(s);
                    dst[off..off + src.len()].copy_from_slice(src);
                    off += src.len();
                }
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.requires(&ids);
        Ok(tape.push(out, Op::ConcatChannels(ids), rg))
    }

    /// 2-D cross-correlation with weight `[cout, cin, kh, kw]` and optional bias `[1, cout, 1, 1]`.
    pub fn conv2d(&self, weight: &Var<'t>, bias: Option<&Var<'t>>, geom: ConvGeom) -> Result<Var<'t>> {
        let out = {
            let b = bias.map(|b| b.value());
            conv_forward(&self.value(), &weight.value(), b.as_deref(), geom)?
        };
        let mut ids = vec![self.id, weight.id];
        ids.extend(bias.map(|b| b.id));
        let rg = self.tape.requires(&ids);
        Ok(self.tape.push(
            out,
            Op::Conv {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                geom,
            },
            rg,
        ))
    }

    /// Per-sample 3×3 convolution (zero padding 1) of a single-channel input with a
    /// `[n, c, 3, 3]` kernel bank, giving `c` output channels.
    pub fn dynamic_conv(&self, kernel: &Var<'t>) -> Result<Var<'t>> {
        let out = dynamic_conv_forward(&self.value(), &kernel.value())?;
        let rg = self.tape.requires(&[self.id, kernel.id]);
        Ok(self.tape.push(
            out,
            Op::DynamicConv {
                x: self.id,
                k: kernel.id,
            },
            rg,
        ))
    }

    /// Per-channel normalization with affine `gamma`, `beta` of shape `[1,c,1,1]`.
    pub fn batch_norm(
        &self,
        gamma: &Var<'t>,
        beta: &Var<'t>,
        stats: NormStats<'_>,
    ) -> Result<(Var<'t>, Option<BatchStats>)> {
        let x = self.value().clone();
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let m = (n * hw) as f64;
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let vals = (0..n).flat_map(|s| x.sample(s)[ch * hw..(ch + 1) * hw].iter());
                    let mu = vals.clone().sum::<f64>() / m;
                    mean[ch] = mu;
                    var[ch] = vals.map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
                }
                (mean, var, true)
            }
            NormStats::Frozen { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(RegoError::Shape("running statistics length mismatch".into()));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        {
            let g = gamma.value();
            let b = beta.value();
            if g.len() != c || b.len() != c {
                return Err(RegoError::Shape("batch norm affine length mismatch".into()));
            }
            for s in 0..n {
                for ch in 0..c {
                    let start = (s * c + ch) * hw;
                    for i in start..start + hw {
                        let xh = (x.data()[i] - mean[ch]) * inv_std[ch];
                        xhat.data_mut()[i] = xh;
                        out.data_mut()[i] = g.data()[ch] * xh + b.data()[ch];
                    }
                }
            }
        }
        let rg = self.tape.requires(&[self.id, gamma.id, beta.id]);
        let v = self.tape.push(
            out,
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((v, batch_stats.then_some(BatchStats { mean, var })))
    }

    /// Channel-by-channel inner products of the spatially vectorized maps,
    /// divided by `h·w`. Output shape `[n, 1, c, c]`.
    pub fn gram(&self) -> Var<'t> {
        self.unary(gram, Op::Gram(self.id))
    }

    /// Cosine similarity of each sample's flattened values; `[n,1,1,1]`.
    /// A zero-norm operand yields 0.
    pub fn cosine(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "cosine")?;
        let out = {
            let (a, b) = (self.value(), other.value());
            let data = (0..a.n())
                .map(|s| {
                    let (dot, na, nb) = cosine_parts(a.sample(s), b.sample(s));
                    if na == 0.0 || nb == 0.0 {
                        0.0
                    } else {
                        dot / (na * nb)
                    }
                })
                .collect();
            Tensor::from_vec([a.n(), 1, 1, 1], data)?
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(out, Op::Cosine(self.id, other.id), rg))
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_channels(t: &Tensor) -> Tensor {
    let [n, c, h, w] = t.shape();
    let hw = h * w;
    let mut out = Tensor::zeros(t.shape());
    for s in 0..n {
        for p in 0..hw {
            let idx = |ch: usize| (s * c + ch) * hw + p;
            let max = (0..c).map(|ch| t.data()[idx(ch)]).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for ch in 0..c {
                let e = (t.data()[idx(ch)] - max).exp();
                out.data_mut()[idx(ch)] = e;
                denom += e;
            }
            for ch in 0..c {
                out.data_mut()[idx(ch)] /= denom;
            }
        }
    }
    out
}

pub(crate) fn gram(t: &Tensor) -> Tensor {
    let [n, c, h, w] = t.shape();
    let hw = h * w;
    let mut out = Tensor::zeros([n, 1, c, c]);
    for s in 0..n {
        let m = t.sample(s);
        gemm(c, hw, c, m, hw, 1, m, 1, hw, 0.0, out.sample_mut(s));
        let inv = 1.0 / hw as f64;
        out.sample_mut(s).iter_mut().for_each(|v| *v *= inv);
    }
    out
}
