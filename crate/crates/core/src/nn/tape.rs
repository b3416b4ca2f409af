//! Recording of forward computations and their reverse sweep.
//!
//! Besides the usual layers the tape has tangent companions
//! ([`Tape::norm_tangent`], [`Tape::act_tangent`]) so a directional
//! derivative of a network with respect to its input can itself be
//! recorded and differentiated in the parameters.

use super::kernels::{self, ConvGeom};
use super::{ParamId, ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { x: NodeId, w: ParamId, b: Option<ParamId>, geom: ConvGeom },
    ConvT { x: NodeId, w: ParamId, b: Option<ParamId>, geom: ConvGeom },
    Norm { x: NodeId, inv_std: Vec<f64> },
    NormTangent { x: NodeId, xhat: NodeId, dx: NodeId },
    ChannelAffine { x: NodeId, g: ParamId, b: Option<ParamId> },
    Act { x: NodeId, slope: f64 },
    ActTangent { gate: NodeId, dx: NodeId, slope: f64 },
    Add { a: NodeId, b: NodeId },
    AddUp { x: NodeId },
    Upsample { x: NodeId, factor: usize },
    Linear { x: NodeId, w: ParamId, b: Option<ParamId> },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

/// Result of a reverse sweep: gradients of leaves and of every parameter.
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
    pub params: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn leaf(&self, id: NodeId) -> Option<&Tensor> {
        self.leaves[id.0].as_ref()
    }

    pub fn take_leaf(&mut self, id: NodeId) -> Option<Tensor> {
        self.leaves[id.0].take()
    }

    pub fn param(&self, id: ParamId) -> &[f64] {
        &self.params[id.0]
    }
}

fn act(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        slope * v
    }
}

fn act_slope(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        slope
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self { params, nodes: Vec::new() }
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    fn conv_geom(&self, x: NodeId, w: ParamId, stride: usize) -> ConvGeom {
        let ws = self.params.get(w).shape();
        let xv = self.value(x);
        assert_eq!(ws[1], xv.channels(), "conv input channels for {}", self.params.name(w));
        ConvGeom::new(ws[1], ws[0], ws[2], stride, xv.spatial())
    }

    /// Cubic convolution with padding `(k−1)/2`; weights `[cout, cin, k, k, k]`.
    pub fn conv(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>, stride: usize) -> NodeId {
        let geom = self.conv_geom(x, w, stride);
        let y = kernels::conv_forward(
            self.value(x),
            self.params.get(w).data(),
            b.map(|b| self.params.get(b).data()),
            &geom,
        );
        self.push(y, Op::Conv { x, w, b, geom })
    }

    /// Stride-2 transposed convolution, the adjoint of a stride-2 cubic
    /// convolution; weights `[cin, cout, k, k, k]`, output twice the size.
    pub fn conv_t(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>) -> NodeId {
        let ws = self.params.get(w).shape();
        let xv = self.value(x);
        assert_eq!(ws[0], xv.channels(), "transposed conv input channels for {}", self.params.name(w));
        let fine = xv.spatial().map(|n| 2 * n);
        let geom = ConvGeom::new(ws[1], ws[0], ws[2], 2, fine);
        let mut y = kernels::conv_backward_input(self.params.get(w).data(), xv, &geom);
        if let Some(b) = b {
            let bv = self.params.get(b).data();
            let s = y.spatial_len();
            for n in 0..y.batch() {
                let ys = y.sample_mut(n);
                for (c, v) in bv.iter().enumerate() {
                    ys[c * s..(c + 1) * s].iter_mut().for_each(|y| *y += v);
                }
            }
        }
        self.push(y, Op::ConvT { x, w, b, geom })
    }

    pub fn norm(&mut self, x: NodeId) -> NodeId {
        let (y, inv_std) = kernels::norm_forward(self.value(x));
        self.push(y, Op::Norm { x, inv_std })
    }

    /// Directional derivative of `norm` at the input of `xhat` (a node made
    /// by [`Tape::norm`]) along `dx`.
    pub fn norm_tangent(&mut self, xhat: NodeId, dx: NodeId) -> NodeId {
        let (x, inv) = match &self.nodes[xhat.0].op {
            Op::Norm { x, inv_std } => (*x, inv_std.clone()),
            _ => panic!("norm_tangent needs a norm node"),
        };
        let xh = self.value(xhat);
        let mut t = self.value(dx).clone();
        let m = xh.spatial_len();
        for (b, is) in inv.iter().enumerate() {
            let v = &mut t.data_mut()[b * m..(b + 1) * m];
            kernels::project(v, &xh.data()[b * m..(b + 1) * m]);
            v.iter_mut().for_each(|e| *e *= is);
        }
        self.push(t, Op::NormTangent { x, xhat, dx })
    }

    /// Per-channel `g·x + b`; `g` and `b` have one entry per channel.
    pub fn channel_affine(&mut self, x: NodeId, g: ParamId, b: Option<ParamId>) -> NodeId {
        let mut y = self.value(x).clone();
        let gv = self.params.get(g).data();
        let bv = b.map(|b| self.params.get(b).data());
        let s = y.spatial_len();
        let c = y.channels();
        for n in 0..y.batch() {
            let ys = y.sample_mut(n);
            for ch in 0..c {
                let off = bv.map_or(0.0, |b| b[ch]);
                ys[ch * s..(ch + 1) * s].iter_mut().for_each(|v| *v = gv[ch] * *v + off);
            }
        }
        self.push(y, Op::ChannelAffine { x, g, b })
    }

    /// Leaky rectifier; `slope = 0` is a plain rectifier.
    pub fn act(&mut self, x: NodeId, slope: f64) -> NodeId {
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().for_each(|v| *v = act(*v, slope));
        self.push(y, Op::Act { x, slope })
    }

    /// `dx` gated by the rectifier slope at `gate`.
    pub fn act_tangent(&mut self, gate: NodeId, dx: NodeId, slope: f64) -> NodeId {
        let mut y = self.value(dx).clone();
        for (v, g) in y.data_mut().iter_mut().zip(self.value(gate).data()) {
            *v *= act_slope(*g, slope);
        }
        self.push(y, Op::ActTangent { gate, dx, slope })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut y = self.value(a).clone();
        assert_eq!(y.shape(), self.value(b).shape(), "add shape mismatch");
        y.add_assign(self.value(b));
        self.push(y, Op::Add { a, b })
    }

    /// Trilinear ×2 upsampling followed by summing the two channel halves.
    pub fn add_up(&mut self, x: NodeId) -> NodeId {
        let up = kernels::upsample(self.value(x), 2);
        let [n, c, d, h, w] = up.shape();
        assert!(c % 2 == 0, "additive upsampling needs an even channel count");
        let half = c / 2;
        let s = d * h * w;
        let mut y = Tensor::zeros([n, half, d, h, w]);
        for i in 0..n {
            let u = up.sample(i);
            let ys = y.sample_mut(i);
            for ch in 0..half {
                for q in 0..s {
                    ys[ch * s + q] = u[ch * s + q] + u[(ch + half) * s + q];
                }
            }
        }
        self.push(y, Op::AddUp { x })
    }

    /// Trilinear upsampling by an integer factor.
    pub fn upsample(&mut self, x: NodeId, factor: usize) -> NodeId {
        let y = kernels::upsample(self.value(x), factor);
        self.push(y, Op::Upsample { x, factor })
    }

    /// Fully connected layer on the flattened sample; weights `[out, in]`.
    pub fn linear(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>) -> NodeId {
        let xv = self.value(x);
        let ws = self.params.get(w).shape();
        let (out, k) = (ws[0], ws[1]);
        assert_eq!(k, xv.sample_len(), "linear input size for {}", self.params.name(w));
        let wv = self.params.get(w).data();
        let mut y = Tensor::zeros([xv.batch(), out, 1, 1, 1]);
        for n in 0..xv.batch() {
            let xs = xv.sample(n);
            let ys = y.sample_mut(n);
            for o in 0..out {
                let row = &wv[o * k..(o + 1) * k];
                ys[o] = row.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>() + b.map_or(0.0, |b| self.params.get(b).data()[o]);
            }
        }
        self.push(y, Op::Linear { x, w, b })
    }

    /// Reverse sweep from the given output cotangents. May be called any
    /// number of times on the same tape.
    pub fn backward(&self, seeds: Vec<(NodeId, Tensor)>) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pg: Vec<Vec<f64>> = self.params.ids().map(|id| vec![0.0; self.params.get(id).len()]).collect();
        let mut last = 0;
        for (id, t) in seeds {
            assert_eq!(t.shape(), self.value(id).shape(), "seed shape mismatch");
            last = last.max(id.0);
            accumulate(&mut grads, id, t);
        }
        for i in (0..=last.min(self.nodes.len().saturating_sub(1))).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop(node, gy, &mut grads, &mut pg);
        }
        Gradients { leaves: grads, params: pg }
    }

    fn backprop(&self, node: &Node, gy: Tensor, grads: &mut [Option<Tensor>], pg: &mut [Vec<f64>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let (head, tail) = split_bias(pg, *w, *b);
                kernels::conv_backward_weight(self.value(*x), &gy, geom, head, tail);
                let gx = kernels::conv_backward_input(self.params.get(*w).data(), &gy, geom);
                accumulate(grads, *x, gx);
            }
            Op::ConvT { x, w, b, geom } => {
                if let Some(b) = b {
                    let s = gy.spatial_len();
                    for n in 0..gy.batch() {
                        let gs = gy.sample(n);
                        for (c, v) in pg[b.0].iter_mut().enumerate() {
                            *v += gs[c * s..(c + 1) * s].iter().sum::<f64>();
                        }
                    }
                }
                // y = Cᵀx for the conv C; so dW is conv's weight gradient
                // with (input, output cotangent) = (gy, x).
                kernels::conv_backward_weight(&gy, self.value(*x), geom, &mut pg[w.0], None);
                let gx = kernels::conv_forward(&gy, self.params.get(*w).data(), None, geom);
                accumulate(grads, *x, gx);
            }
            Op::Norm { x, inv_std } => {
                let xh = &node.value;
                let m = xh.spatial_len();
                let mut gx = gy;
                for (b, is) in inv_std.iter().enumerate() {
                    let v = &mut gx.data_mut()[b * m..(b + 1) * m];
                    kernels::project(v, &xh.data()[b * m..(b + 1) * m]);
                    v.iter_mut().for_each(|e| *e *= is);
                }
                accumulate(grads, *x, gx);
            }
            Op::NormTangent { x, xhat, dx } => {
                let inv = match &self.nodes[xhat.0].op {
                    Op::Norm { inv_std, .. } => inv_std,
                    _ => unreachable!(),
                };
                let xh = self.value(*xhat).data();
                let dxv = self.value(*dx).data();
                let t = node.value.data();
                let m = node.value.spatial_len();
                let mf = m as f64;
                let mut gdx = gy.clone();
                let mut gx = Tensor::zeros(gy.shape());
                for (b, is) in inv.iter().enumerate() {
                    let r = b * m..(b + 1) * m;
                    let (xhb, dxb, tb, gyb) = (&xh[r.clone()], &dxv[r.clone()], &t[r.clone()], &gy.data()[r.clone()]);
                    let v = &mut gdx.data_mut()[r.clone()];
                    kernels::project(v, xhb);
                    v.iter_mut().for_each(|e| *e *= is);

                    let rho = xhb.iter().zip(dxb).map(|(a, b)| a * b).sum::<f64>() / mf;
                    let a: f64 = gyb.iter().zip(xhb).map(|(a, b)| a * b).sum();
                    let bsum: f64 = gyb.iter().zip(tb).map(|(a, b)| a * b).sum();
                    let gxb = &mut gx.data_mut()[r];
                    for q in 0..m {
                        gxb[q] = -rho * is * gyb[q] - a * is / mf * dxb[q];
                    }
                    kernels::project(gxb, xhb);
                    for q in 0..m {
                        gxb[q] = gxb[q] * is - bsum * is / mf * xhb[q];
                    }
                }
                accumulate(grads, *dx, gdx);
                accumulate(grads, *x, gx);
            }
            Op::ChannelAffine { x, g, b } => {
                let xv = self.value(*x);
                let gv = self.params.get(*g).data();
                let s = xv.spatial_len();
                let c = xv.channels();
                let mut gx = gy;
                for n in 0..xv.batch() {
                    let xs = xv.sample(n);
                    let gs = gx.sample_mut(n);
                    for ch in 0..c {
                        let r = ch * s..(ch + 1) * s;
                        let mut sg = 0.0;
                        let mut sb = 0.0;
                        for (gq, xq) in gs[r.clone()].iter_mut().zip(&xs[r]) {
                            sg += *gq * xq;
                            sb += *gq;
                            *gq *= gv[ch];
                        }
                        pg[g.0][ch] += sg;
                        if let Some(b) = b {
                            pg[b.0][ch] += sb;
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Act { x, slope } => {
                let mut gx = gy;
                for (g, v) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    *g *= act_slope(*v, *slope);
                }
                accumulate(grads, *x, gx);
            }
            Op::ActTangent { gate, dx, slope } => {
                let mut gx = gy;
                for (g, v) in gx.data_mut().iter_mut().zip(self.value(*gate).data()) {
                    *g *= act_slope(*v, *slope);
                }
                accumulate(grads, *dx, gx);
            }
            Op::Add { a, b } => {
                accumulate(grads, *b, gy.clone());
                accumulate(grads, *a, gy);
            }
            Op::AddUp { x } => {
                let [n, half, d, h, w] = gy.shape();
                let s = d * h * w;
                let mut both = Tensor::zeros([n, 2 * half, d, h, w]);
                for i in 0..n {
                    let g = gy.sample(i);
                    let o = both.sample_mut(i);
                    o[..half * s].copy_from_slice(g);
                    o[half * s..].copy_from_slice(g);
                }
                let gx = kernels::upsample_adjoint(&both, 2, self.value(*x).spatial());
                accumulate(grads, *x, gx);
            }
            Op::Upsample { x, factor } => {
                let gx = kernels::upsample_adjoint(&gy, *factor, self.value(*x).spatial());
                accumulate(grads, *x, gx);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let ws = self.params.get(*w).shape();
                let (out, k) = (ws[0], ws[1]);
                let wv = self.params.get(*w).data();
                let mut gx = Tensor::zeros(xv.shape());
                for n in 0..xv.batch() {
                    let xs = xv.sample(n);
                    let gys = gy.sample(n);
                    let gxs = gx.sample_mut(n);
                    for o in 0..out {
                        let go = gys[o];
                        if go == 0.0 {
                            continue;
                        }
                        let row = &wv[o * k..(o + 1) * k];
                        let grow = &mut pg[w.0][o * k..(o + 1) * k];
                        for q in 0..k {
                            grow[q] += go * xs[q];
                            gxs[q] += go * row[q];
                        }
                        if let Some(b) = b {
                            pg[b.0][o] += go;
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(t) => t.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Disjoint mutable views of a weight gradient and its optional bias gradient.
fn split_bias(pg: &mut [Vec<f64>], w: ParamId, b: Option<ParamId>) -> (&mut [f64], Option<&mut [f64]>) {
    match b {
        None => (&mut pg[w.0], None),
        Some(b) => {
            assert_ne!(w.0, b.0);
            if w.0 < b.0 {
                let (lo, hi) = pg.split_at_mut(b.0);
                (&mut lo[w.0], Some(&mut hi[0]))
            } else {
                let (lo, hi) = pg.split_at_mut(w.0);
                (&mut hi[0], Some(&mut lo[b.0]))
            }
        }
    }
}
