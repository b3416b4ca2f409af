//! Dense kernels: im2col convolution on top of `dgemm`, separable
//! trilinear upsampling and per-channel normalization.

use super::Tensor;

/// Geometry of a cubic-kernel convolution on one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeom {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, in_dims: [usize; 3]) -> Self {
        let pad = (k - 1) / 2;
        let out_dims = in_dims.map(|n| (n + 2 * pad - k) / stride + 1);
        Self { cin, cout, k, stride, pad, in_dims, out_dims }
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.out_dims.iter().product()
    }
}

/// `c (m×n) = op(a) · op(b) + beta · c`, row-major storage.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above; strides describe the row-major
    // (optionally transposed) layouts of those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let [id, ih, iw] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let s = g.out_len();
    let k = g.k;
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &x[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut cols[row * s..(row + 1) * s];
                    for oz in 0..od {
                        let iz = (oz * g.stride + kz) as isize - g.pad as isize;
                        for oy in 0..oh {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            let d = &mut dst[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            if iz < 0 || iz >= id as isize || iy < 0 || iy >= ih as isize {
                                d.fill(0.0);
                                continue;
                            }
                            let src = &xc[(iz as usize * ih + iy as usize) * iw..][..iw];
                            for (ox, v) in d.iter_mut().enumerate() {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                *v = if ix >= 0 && ix < iw as isize { src[ix as usize] } else { 0.0 };
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let [id, ih, iw] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let s = g.out_len();
    let k = g.k;
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &mut x[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let src = &cols[row * s..(row + 1) * s];
                    for oz in 0..od {
                        let iz = (oz * g.stride + kz) as isize - g.pad as isize;
                        if iz < 0 || iz >= id as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let sr = &src[(oz * oh + oy) * ow..][..ow];
                            let dr = &mut xc[(iz as usize * ih + iy as usize) * iw..][..iw];
                            for (ox, v) in sr.iter().enumerate() {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix >= 0 && ix < iw as isize {
                                    dr[ix as usize] += v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Whether the convolution is a plain channel mix (1×1×1, stride 1).
fn is_pointwise(g: &ConvGeom) -> bool {
    g.k == 1 && g.stride == 1
}

/// Stride-1 cubic kernels run directly on a zero-padded copy: in padded
/// linear indexing every tap is a constant offset, so each (cout, cin, tap)
/// triple is one contiguous axpy.
struct Padded {
    dims: [usize; 3],
    start: usize,
    span: usize,
    offsets: Vec<isize>,
}

impl Padded {
    fn new(g: &ConvGeom) -> Self {
        let p = g.pad;
        let dims = g.in_dims.map(|n| n + 2 * p);
        let [_, hp, wp] = dims;
        let [d, h, w] = g.in_dims;
        let lin = |z: usize, y: usize, x: usize| (z * hp + y) * wp + x;
        let start = lin(p, p, p);
        let span = lin(d - 1 + p, h - 1 + p, w - 1 + p) + 1 - start;
        let mut offsets = Vec::with_capacity(g.k * g.k * g.k);
        let r = p as isize;
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    offsets.push((dz * hp as isize + dy) * wp as isize + dx);
                }
            }
        }
        Self { dims, start, span, offsets }
    }

    fn len(&self) -> usize {
        self.dims.iter().product()
    }

    /// Copy channel blocks of `x` into the interior of a zeroed padded buffer.
    fn pad(&self, x: &[f64], c: usize, inner: [usize; 3], out: &mut [f64]) {
        out.fill(0.0);
        let [d, h, w] = inner;
        let [_, hp, wp] = self.dims;
        let p = (self.dims[0] - d) / 2;
        for ch in 0..c {
            let src = &x[ch * d * h * w..];
            let dst = &mut out[ch * self.len()..];
            for z in 0..d {
                for y in 0..h {
                    let o = ((z + p) * hp + y + p) * wp + p;
                    dst[o..o + w].copy_from_slice(&src[(z * h + y) * w..][..w]);
                }
            }
        }
    }

    /// Inverse of [`Padded::pad`] on the interior, relative to `start`.
    fn unpad_span(&self, src: &[f64], c: usize, inner: [usize; 3], out: &mut [f64], accumulate: bool) {
        let [d, h, w] = inner;
        let [_, hp, wp] = self.dims;
        let p = (self.dims[0] - d) / 2;
        for ch in 0..c {
            let s = &src[ch * self.span..];
            let o = &mut out[ch * d * h * w..];
            for z in 0..d {
                for y in 0..h {
                    let q = ((z + p) * hp + y + p) * wp + p - self.start;
                    let dst = &mut o[(z * h + y) * w..][..w];
                    if accumulate {
                        dst.iter_mut().zip(&s[q..q + w]).for_each(|(a, b)| *a += b);
                    } else {
                        dst.copy_from_slice(&s[q..q + w]);
                    }
                }
            }
        }
    }

    /// Extract the interior of full padded channel blocks.
    fn unpad_full(&self, src: &[f64], c: usize, inner: [usize; 3], out: &mut [f64]) {
        let [d, h, w] = inner;
        let [_, hp, wp] = self.dims;
        let p = (self.dims[0] - d) / 2;
        for ch in 0..c {
            let s = &src[ch * self.len()..];
            let o = &mut out[ch * d * h * w..];
            for z in 0..d {
                for y in 0..h {
                    let q = ((z + p) * hp + y + p) * wp + p;
                    o[(z * h + y) * w..][..w].copy_from_slice(&s[q..q + w]);
                }
            }
        }
    }

    /// Scatter an interior-shaped block into span layout, zero elsewhere.
    fn to_span(&self, src: &[f64], c: usize, inner: [usize; 3], out: &mut [f64]) {
        out.fill(0.0);
        let [d, h, w] = inner;
        let [_, hp, wp] = self.dims;
        let p = (self.dims[0] - d) / 2;
        for ch in 0..c {
            let s = &src[ch * d * h * w..];
            let o = &mut out[ch * self.span..];
            for z in 0..d {
                for y in 0..h {
                    let q = ((z + p) * hp + y + p) * wp + p - self.start;
                    o[q..q + w].copy_from_slice(&s[(z * h + y) * w..][..w]);
                }
            }
        }
    }
}

const CHUNK: usize = 2048;

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn is_direct(g: &ConvGeom) -> bool {
    g.stride == 1 && g.k == 3
}

fn direct_forward(x: &Tensor, w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Tensor {
    let pd = Padded::new(g);
    let taps = pd.offsets.len();
    let mut y = Tensor::zeros([x.batch(), g.cout, g.out_dims[0], g.out_dims[1], g.out_dims[2]]);
    let mut xp = vec![0.0; g.cin * pd.len()];
    let mut ys = vec![0.0; g.cout * pd.span];
    for n in 0..x.batch() {
        pd.pad(x.sample(n), g.cin, g.in_dims, &mut xp);
        for co in 0..g.cout {
            ys[co * pd.span..(co + 1) * pd.span].fill(b.map_or(0.0, |b| b[co]));
        }
        let mut c0 = 0;
        while c0 < pd.span {
            let len = CHUNK.min(pd.span - c0);
            for ci in 0..g.cin {
                let xc = &xp[ci * pd.len()..(ci + 1) * pd.len()];
                for (t, off) in pd.offsets.iter().enumerate() {
                    let base = (pd.start as isize + off) as usize + c0;
                    let xs = &xc[base..base + len];
                    for co in 0..g.cout {
                        let wv = w[(co * g.cin + ci) * taps + t];
                        axpy(&mut ys[co * pd.span + c0..co * pd.span + c0 + len], wv, xs);
                    }
                }
            }
            c0 += len;
        }
        pd.unpad_span(&ys, g.cout, g.out_dims, y.sample_mut(n), false);
    }
    y
}

fn direct_backward_input(w: &[f64], gy: &Tensor, g: &ConvGeom) -> Tensor {
    let pd = Padded::new(g);
    let taps = pd.offsets.len();
    let mut gx = Tensor::zeros([gy.batch(), g.cin, g.in_dims[0], g.in_dims[1], g.in_dims[2]]);
    let mut gs = vec![0.0; g.cout * pd.span];
    let mut gxp = vec![0.0; g.cin * pd.len()];
    for n in 0..gy.batch() {
        pd.to_span(gy.sample(n), g.cout, g.out_dims, &mut gs);
        gxp.fill(0.0);
        let mut c0 = 0;
        while c0 < pd.span {
            let len = CHUNK.min(pd.span - c0);
            for ci in 0..g.cin {
                let xc = &mut gxp[ci * pd.len()..(ci + 1) * pd.len()];
                for (t, off) in pd.offsets.iter().enumerate() {
                    let base = (pd.start as isize + off) as usize + c0;
                    let xs = &mut xc[base..base + len];
                    for co in 0..g.cout {
                        let wv = w[(co * g.cin + ci) * taps + t];
                        axpy(xs, wv, &gs[co * pd.span + c0..co * pd.span + c0 + len]);
                    }
                }
            }
            c0 += len;
        }
        pd.unpad_full(&gxp, g.cin, g.in_dims, gx.sample_mut(n));
    }
    gx
}

fn direct_backward_weight(x: &Tensor, gy: &Tensor, g: &ConvGeom, gw: &mut [f64]) {
    let pd = Padded::new(g);
    let taps = pd.offsets.len();
    let mut xp = vec![0.0; g.cin * pd.len()];
    let mut gs = vec![0.0; g.cout * pd.span];
    for n in 0..x.batch() {
        pd.pad(x.sample(n), g.cin, g.in_dims, &mut xp);
        pd.to_span(gy.sample(n), g.cout, g.out_dims, &mut gs);
        for co in 0..g.cout {
            let gc = &gs[co * pd.span..(co + 1) * pd.span];
            for ci in 0..g.cin {
                let xc = &xp[ci * pd.len()..(ci + 1) * pd.len()];
                for (t, off) in pd.offsets.iter().enumerate() {
                    let base = (pd.start as isize + off) as usize;
                    gw[(co * g.cin + ci) * taps + t] += dot(gc, &xc[base..base + pd.span]);
                }
            }
        }
    }
}

pub(crate) fn conv_forward(x: &Tensor, w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Tensor {
    if is_direct(g) {
        return direct_forward(x, w, b, g);
    }
    let n = x.batch();
    let s = g.out_len();
    let mut y = Tensor::zeros([n, g.cout, g.out_dims[0], g.out_dims[1], g.out_dims[2]]);
    let mut cols = if is_pointwise(g) { Vec::new() } else { vec![0.0; g.rows() * s] };
    for i in 0..n {
        let xs = x.sample(i);
        let ys = y.sample_mut(i);
        if let Some(b) = b {
            for (co, bv) in b.iter().enumerate() {
                ys[co * s..(co + 1) * s].fill(*bv);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        if is_pointwise(g) {
            gemm(g.cout, g.rows(), s, w, false, xs, false, ys, beta);
        } else {
            im2col(xs, g, &mut cols);
            gemm(g.cout, g.rows(), s, w, false, &cols, false, ys, beta);
        }
    }
    y
}

pub(crate) fn conv_backward_input(w: &[f64], gy: &Tensor, g: &ConvGeom) -> Tensor {
    if is_direct(g) {
        return direct_backward_input(w, gy, g);
    }
    let n = gy.batch();
    let s = g.out_len();
    let mut gx = Tensor::zeros([n, g.cin, g.in_dims[0], g.in_dims[1], g.in_dims[2]]);
    let mut cols = vec![0.0; if is_pointwise(g) { 0 } else { g.rows() * s }];
    for i in 0..n {
        let gys = gy.sample(i);
        let gxs = gx.sample_mut(i);
        if is_pointwise(g) {
            gemm(g.rows(), g.cout, s, w, true, gys, false, gxs, 0.0);
        } else {
            gemm(g.rows(), g.cout, s, w, true, gys, false, &mut cols, 0.0);
            col2im(&cols, g, gxs);
        }
    }
    gx
}

pub(crate) fn conv_backward_weight(x: &Tensor, gy: &Tensor, g: &ConvGeom, gw: &mut [f64], gb: Option<&mut [f64]>) {
    let n = x.batch();
    let s = g.out_len();
    let direct = is_direct(g);
    if direct {
        direct_backward_weight(x, gy, g, gw);
    }
    let mut cols = vec![0.0; if is_pointwise(g) || direct { 0 } else { g.rows() * s }];
    for i in (0..n).filter(|_| !direct) {
        let gys = gy.sample(i);
        if is_pointwise(g) {
            gemm(g.cout, s, g.rows(), gys, false, x.sample(i), true, gw, 1.0);
        } else {
            im2col(x.sample(i), g, &mut cols);
            gemm(g.cout, s, g.rows(), gys, false, &cols, true, gw, 1.0);
        }
    }
    if let Some(gb) = gb {
        for i in 0..n {
            let gys = gy.sample(i);
            for (co, b) in gb.iter_mut().enumerate() {
                *b += gys[co * s..(co + 1) * s].iter().sum::<f64>();
            }
        }
    }
}

/// Linear interpolation weights from a fine axis of length `n·f` onto a
/// coarse axis of length `n`, coarse sample `o` sitting at fine `f·o`.
fn up_weights(n: usize, f: usize) -> Vec<(usize, usize, f64)> {
    (0..n * f)
        .map(|i| {
            let c = i as f64 / f as f64;
            let i0 = (c.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let w = if i1 == i0 { 0.0 } else { c - i0 as f64 };
            (i0, i1, w)
        })
        .collect()
}

/// Upsample every channel block of `x` along one spatial axis by `f`.
fn up_axis(x: &[f64], blocks: usize, dims: [usize; 3], axis: usize, f: usize) -> (Vec<f64>, [usize; 3]) {
    let mut od = dims;
    od[axis] *= f;
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = blocks * dims[..axis].iter().product::<usize>();
    let n = dims[axis];
    let wts = up_weights(n, f);
    let mut y = vec![0.0; outer * n * f * inner];
    for o in 0..outer {
        let src = &x[o * n * inner..(o + 1) * n * inner];
        let dst = &mut y[o * n * f * inner..(o + 1) * n * f * inner];
        for (i, &(i0, i1, w)) in wts.iter().enumerate() {
            let d = &mut dst[i * inner..(i + 1) * inner];
            let a = &src[i0 * inner..(i0 + 1) * inner];
            let b = &src[i1 * inner..(i1 + 1) * inner];
            for q in 0..inner {
                d[q] = (1.0 - w) * a[q] + w * b[q];
            }
        }
    }
    (y, od)
}

fn up_axis_adjoint(gy: &[f64], blocks: usize, dims: [usize; 3], axis: usize, f: usize) -> Vec<f64> {
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = blocks * dims[..axis].iter().product::<usize>();
    let n = dims[axis];
    let wts = up_weights(n, f);
    let mut gx = vec![0.0; outer * n * inner];
    for o in 0..outer {
        let src = &gy[o * n * f * inner..(o + 1) * n * f * inner];
        let dst = &mut gx[o * n * inner..(o + 1) * n * inner];
        for (i, &(i0, i1, w)) in wts.iter().enumerate() {
            let s = &src[i * inner..(i + 1) * inner];
            for q in 0..inner {
                dst[i0 * inner + q] += (1.0 - w) * s[q];
                dst[i1 * inner + q] += w * s[q];
            }
        }
    }
    gx
}

pub(crate) fn upsample(x: &Tensor, f: usize) -> Tensor {
    if f == 1 {
        return x.clone();
    }
    let blocks = x.batch() * x.channels();
    let mut dims = x.spatial();
    let mut data = x.data().to_vec();
    for axis in 0..3 {
        let (d, nd) = up_axis(&data, blocks, dims, axis, f);
        data = d;
        dims = nd;
    }
    Tensor::from_vec([x.batch(), x.channels(), dims[0], dims[1], dims[2]], data)
}

/// Adjoint of [`upsample`]; `coarse` is the spatial shape of the input.
pub(crate) fn upsample_adjoint(gy: &Tensor, f: usize, coarse: [usize; 3]) -> Tensor {
    if f == 1 {
        return gy.clone();
    }
    let blocks = gy.batch() * gy.channels();
    let mut data = gy.data().to_vec();
    // Undo the axes in reverse order; dims[a] is coarse for axes already undone.
    let mut dims = gy.spatial();
    for axis in (0..3).rev() {
        dims[axis] = coarse[axis];
        data = up_axis_adjoint(&data, blocks, dims, axis, f);
    }
    Tensor::from_vec([gy.batch(), gy.channels(), coarse[0], coarse[1], coarse[2]], data)
}

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Per-sample, per-channel standardization over spatial positions.
/// Returns the output and `1/s` per (sample, channel) block.
pub(crate) fn norm_forward(x: &Tensor) -> (Tensor, Vec<f64>) {
    let m = x.spatial_len();
    let blocks = x.batch() * x.channels();
    let mut y = x.clone();
    let mut inv = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let d = &mut y.data_mut()[b * m..(b + 1) * m];
        let mean = d.iter().sum::<f64>() / m as f64;
        let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        for v in d.iter_mut() {
            *v = (*v - mean) * is;
        }
        inv.push(is);
    }
    (y, inv)
}

/// `P(v) = v − mean(v) − x̂·mean(x̂ v)`, applied in place on one block.
pub(crate) fn project(v: &mut [f64], xhat: &[f64]) {
    let m = v.len() as f64;
    let mean = v.iter().sum::<f64>() / m;
    let corr = xhat.iter().zip(v.iter()).map(|(a, b)| a * b).sum::<f64>() / m;
    for (vi, a) in v.iter_mut().zip(xhat) {
        *vi -= mean + a * corr;
    }
}
