//! The registration network (local displacement plus 12 affine
//! parameters from an image pair) and the displacement discriminator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::FieldCritic;
use crate::nn::{NodeId, ParamId, ParamSet, Tape, Tensor};
use crate::transform::{AffineParams, DisplacementField};
use crate::volume::{Grid3, ScalarField, Volume};

/// Change of the linear part per unit of raw network output.
pub const LINEAR_GAIN: f64 = 0.05;
/// Millimetres of translation per unit of raw network output.
pub const TRANSLATION_GAIN: f64 = 1.0;

const SUMMAND_INIT_STD: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegNetSpec {
    pub n0: usize,
    pub levels: usize,
    /// Training grid shape `[nx, ny, nz]`.
    pub input_shape: [usize; 3],
}

impl RegNetSpec {
    pub fn new(n0: usize, input_shape: [usize; 3]) -> Self {
        Self { n0, levels: 4, input_shape }
    }

    pub fn validate(&self) -> Result<()> {
        validate_shape(self.n0, self.levels, self.input_shape)
    }

    pub fn channels(&self, level: usize) -> usize {
        self.n0 << level
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscNetSpec {
    pub n0: usize,
    pub levels: usize,
    pub slope: f64,
    pub input_shape: [usize; 3],
}

impl DiscNetSpec {
    pub fn new(n0: usize, input_shape: [usize; 3]) -> Self {
        Self { n0, levels: 4, slope: 0.2, input_shape }
    }

    pub fn validate(&self) -> Result<()> {
        validate_shape(self.n0, self.levels, self.input_shape)?;
        if !(0.0..1.0).contains(&self.slope) {
            return Err(Error::Config(format!("leaky slope must lie in [0, 1), got {}", self.slope)));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.n0 << level
    }
}

fn validate_shape(n0: usize, levels: usize, shape: [usize; 3]) -> Result<()> {
    if n0 < 4 {
        return Err(Error::Config(format!("n0 must be at least 4, got {n0}")));
    }
    if levels == 0 {
        return Err(Error::Config("levels must be at least 1".into()));
    }
    let f = 1usize << levels;
    if shape.iter().any(|&n| n == 0 || n % f != 0) {
        return Err(Error::Config(format!("input shape {shape:?} is not divisible by {f} per axis")));
    }
    Ok(())
}

/// Spatial tensor dims `[d, h, w]` for a grid shape `[nx, ny, nz]`.
fn tensor_dims(shape: [usize; 3]) -> [usize; 3] {
    [shape[2], shape[1], shape[0]]
}

pub fn count_parameters(p: &ParamSet) -> usize {
    p.count()
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: [usize; 5], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let d = Normal::new(0.0, std).expect("finite std");
        Tensor::from_vec(shape, (0..n).map(|_| d.sample(&mut self.rng)).collect())
    }

    fn conv(&mut self, p: &mut ParamSet, name: &str, cin: usize, cout: usize, k: usize, bias: bool, std: Option<f64>) -> Conv {
        let fan_in = (cin * k * k * k) as f64;
        let w = p.add(format!("{name}.w"), self.normal([cout, cin, k, k, k], std.unwrap_or((2.0 / fan_in).sqrt())));
        let b = bias.then(|| p.add(format!("{name}.b"), Tensor::zeros([1, 1, 1, 1, cout])));
        Conv { w, b }
    }

    fn conv_t(&mut self, p: &mut ParamSet, name: &str, cin: usize, cout: usize) -> Conv {
        let std = (2.0 / (cin * 27) as f64).sqrt();
        let w = p.add(format!("{name}.w"), self.normal([cin, cout, 3, 3, 3], std));
        let b = Some(p.add(format!("{name}.b"), Tensor::zeros([1, 1, 1, 1, cout])));
        Conv { w, b }
    }

    fn norm(&mut self, p: &mut ParamSet, name: &str, c: usize) -> NormAffine {
        let g = p.add(format!("{name}.g"), Tensor::from_vec([1, 1, 1, 1, c], vec![1.0; c]));
        let b = p.add(format!("{name}.b"), Tensor::zeros([1, 1, 1, 1, c]));
        NormAffine { g, b }
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Debug, Clone, Copy)]
struct NormAffine {
    g: ParamId,
    b: ParamId,
}

/// Pre-activation residual block; `short` is present when it downsamples.
#[derive(Debug, Clone, Copy)]
struct ResBlock {
    n1: NormAffine,
    c1: Conv,
    n2: NormAffine,
    c2: Conv,
    short: Option<Conv>,
}

impl ResBlock {
    fn down(init: &mut Init, p: &mut ParamSet, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            n1: init.norm(p, &format!("{name}.norm1"), cin),
            c1: init.conv(p, &format!("{name}.conv1"), cin, cout, 3, true, None),
            n2: init.norm(p, &format!("{name}.norm2"), cout),
            c2: init.conv(p, &format!("{name}.conv2"), cout, cout, 3, true, None),
            short: Some(init.conv(p, &format!("{name}.short"), cin, cout, 1, false, None)),
        }
    }

    fn same(init: &mut Init, p: &mut ParamSet, name: &str, c: usize) -> Self {
        Self {
            n1: init.norm(p, &format!("{name}.norm1"), c),
            c1: init.conv(p, &format!("{name}.conv1"), c, c, 3, true, None),
            n2: init.norm(p, &format!("{name}.norm2"), c),
            c2: init.conv(p, &format!("{name}.conv2"), c, c, 3, true, None),
            short: None,
        }
    }
}

/// A node and its optional tangent companion.
#[derive(Debug, Clone, Copy)]
struct Dual {
    p: NodeId,
    t: Option<NodeId>,
}

fn conv_d(tape: &mut Tape, x: Dual, c: Conv, stride: usize) -> Dual {
    let p = tape.conv(x.p, c.w, c.b, stride);
    let t = x.t.map(|t| tape.conv(t, c.w, None, stride));
    Dual { p, t }
}

fn norm_act_d(tape: &mut Tape, x: Dual, n: NormAffine, slope: f64) -> Dual {
    let h = tape.norm(x.p);
    let th = x.t.map(|t| tape.norm_tangent(h, t));
    let a = tape.channel_affine(h, n.g, Some(n.b));
    let ta = th.map(|t| tape.channel_affine(t, n.g, None));
    let r = tape.act(a, slope);
    let tr = ta.map(|t| tape.act_tangent(a, t, slope));
    Dual { p: r, t: tr }
}

fn add_d(tape: &mut Tape, a: Dual, b: Dual) -> Dual {
    let p = tape.add(a.p, b.p);
    let t = match (a.t, b.t) {
        (Some(x), Some(y)) => Some(tape.add(x, y)),
        (x, None) | (None, x) => x,
    };
    Dual { p, t }
}

fn res_d(tape: &mut Tape, x: Dual, b: &ResBlock, slope: f64) -> Dual {
    let stride = if b.short.is_some() { 2 } else { 1 };
    let a = norm_act_d(tape, x, b.n1, slope);
    let h = conv_d(tape, a, b.c1, stride);
    let a2 = norm_act_d(tape, h, b.n2, slope);
    let h2 = conv_d(tape, a2, b.c2, 1);
    let s = match b.short {
        Some(c) => conv_d(tape, x, c, 2),
        None => x,
    };
    add_d(tape, h2, s)
}

fn plain(p: NodeId) -> Dual {
    Dual { p, t: None }
}

#[derive(Debug, Clone)]
struct RegLayout {
    stem: Conv,
    enc: Vec<ResBlock>,
    up: Vec<Conv>,
    dec: Vec<ResBlock>,
    summands: Vec<Conv>,
    head: ResBlock,
    head_fc: Conv,
}

/// Registration network and its parameters θ^(reg).
#[derive(Debug, Clone)]
pub struct RegNet {
    spec: RegNetSpec,
    seed: u64,
    params: ParamSet,
    layout: RegLayout,
}

/// Output nodes of a registration forward pass.
#[derive(Debug, Clone, Copy)]
pub struct RegOutputs {
    /// `[n, 3, d, h, w]` local displacement in mm, components x, y, z.
    pub ddf: NodeId,
    /// `[n, 12, 1, 1, 1]` raw affine outputs.
    pub affine: NodeId,
    /// Per-level summands before upsampling, level 0 first.
    pub summands: [Option<NodeId>; 8],
}

pub fn build_regnet(spec: RegNetSpec, seed: u64) -> Result<RegNet> {
    spec.validate()?;
    let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
    let mut p = ParamSet::new();
    let l = spec.levels;
    let ch = |k: usize| spec.channels(k);
    let stem = init.conv(&mut p, "stem", 2, ch(0), 3, true, None);
    let enc = (1..=l).map(|k| ResBlock::down(&mut init, &mut p, &format!("enc{k}"), ch(k - 1), ch(k))).collect();
    let mut up = Vec::new();
    let mut dec = Vec::new();
    for k in (0..l).rev() {
        up.push(init.conv_t(&mut p, &format!("up{k}"), ch(k + 1), ch(k)));
        dec.push(ResBlock::same(&mut init, &mut p, &format!("dec{k}"), ch(k)));
    }
    let summands = (0..=l)
        .map(|k| init.conv(&mut p, &format!("ddf{k}"), ch(k), 3, 3, true, Some(SUMMAND_INIT_STD)))
        .collect();
    let head = ResBlock::same(&mut init, &mut p, "affine.block", ch(l));
    let deep: usize = tensor_dims(spec.input_shape).iter().map(|n| n >> l).product();
    let fc_w = p.add("affine.fc.w", Tensor::zeros([12, ch(l) * deep, 1, 1, 1]));
    let fc_b = p.add("affine.fc.b", Tensor::zeros([1, 1, 1, 1, 12]));
    let layout = RegLayout { stem, enc, up, dec, summands, head, head_fc: Conv { w: fc_w, b: Some(fc_b) } };
    Ok(RegNet { spec, seed, params: p, layout })
}

/// Map raw network outputs to an affine transform; zero is the identity.
///
/// The gains keep one optimizer step on the wide affine head comparable
/// to one step on the displacement summands.
pub fn affine_from_raw(raw: &[f64]) -> AffineParams {
    let mut a = [0.0; 12];
    for (k, v) in a.iter_mut().enumerate() {
        *v = if k < 9 { LINEAR_GAIN * raw[k] } else { TRANSLATION_GAIN * raw[k] };
    }
    for k in [0, 4, 8] {
        a[k] += 1.0;
    }
    AffineParams::from_array(&a)
}

/// Chain a gradient with respect to affine parameters back to raw outputs.
pub fn affine_grad_to_raw(g: &[f64; 12]) -> [f64; 12] {
    let mut r = *g;
    for (k, v) in r.iter_mut().enumerate() {
        *v *= if k < 9 { LINEAR_GAIN } else { TRANSLATION_GAIN };
    }
    r
}

impl RegNet {
    pub fn spec(&self) -> &RegNetSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Concatenate (moving, fixed) pairs into a `[n, 2, d, h, w]` input.
    pub fn input_tensor(&self, pairs: &[(&Volume, &Volume)]) -> Result<Tensor> {
        let dims = tensor_dims(self.spec.input_shape);
        let s: usize = dims.iter().product();
        let mut data = Vec::with_capacity(pairs.len() * 2 * s);
        for (m, f) in pairs {
            for v in [m, f] {
                if v.grid().shape() != self.spec.input_shape {
                    return Err(Error::GridMismatch(format!(
                        "image shape {:?} differs from network input {:?}",
                        v.grid().shape(),
                        self.spec.input_shape
                    )));
                }
                data.extend_from_slice(v.values());
            }
        }
        Ok(Tensor::from_vec([pairs.len(), 2, dims[0], dims[1], dims[2]], data))
    }

    pub fn forward(&self, tape: &mut Tape, input: NodeId) -> RegOutputs {
        let lay = &self.layout;
        let l = self.spec.levels;
        let mut skips = vec![tape.conv(input, lay.stem.w, lay.stem.b, 1)];
        for b in &lay.enc {
            let h = res_d(tape, plain(*skips.last().expect("stem")), b, 0.0).p;
            skips.push(h);
        }
        let mut summands = [None; 8];
        let deep = skips[l];
        let mut y = deep;
        summands[l] = Some(tape.conv(y, lay.summands[l].w, lay.summands[l].b, 1));
        for (i, k) in (0..l).rev().enumerate() {
            let u = tape.conv_t(y, lay.up[i].w, lay.up[i].b);
            let a = tape.add_up(y);
            let up = tape.add(u, a);
            let z = tape.add(up, skips[k]);
            y = res_d(tape, plain(z), &lay.dec[i], 0.0).p;
            summands[k] = Some(tape.conv(y, lay.summands[k].w, lay.summands[k].b, 1));
        }
        let mut ddf = summands[0].expect("level 0");
        for (k, s) in summands.iter().enumerate().take(l + 1).skip(1) {
            let up = tape.upsample(s.expect("summand"), 1 << k);
            ddf = tape.add(ddf, up);
        }
        let h = res_d(tape, plain(deep), &lay.head, 0.0).p;
        let affine = tape.linear(h, lay.head_fc.w, lay.head_fc.b);
        RegOutputs { ddf, affine, summands }
    }

    /// Inference on one image pair already on the network grid.
    pub fn predict(&self, moving: &Volume, fixed: &Volume) -> Result<(DisplacementField, AffineParams)> {
        if !self.params.all_finite() {
            return Err(Error::NonFinite("registration network parameters".into()));
        }
        moving.grid().ensure_same(fixed.grid(), "registration inputs")?;
        let x = self.input_tensor(&[(moving, fixed)])?;
        let mut tape = Tape::new(&self.params);
        let xi = tape.leaf(x);
        let out = self.forward(&mut tape, xi);
        let local = field_from_tensor(tape.value(out.ddf), 0, *fixed.grid())?;
        let affine = affine_from_raw(tape.value(out.affine).sample(0));
        Ok((local, affine))
    }
}

/// Sample `n` of a `[n, 3, d, h, w]` tensor as a field on `grid`.
pub fn field_from_tensor(t: &Tensor, n: usize, grid: Grid3) -> Result<DisplacementField> {
    let s = grid.len();
    if t.channels() != 3 || t.spatial_len() != s {
        return Err(Error::GridMismatch("field tensor does not match grid".into()));
    }
    let d = t.sample(n);
    DisplacementField::new(grid, [d[..s].to_vec(), d[s..2 * s].to_vec(), d[2 * s..].to_vec()])
}

#[derive(Debug, Clone)]
struct DiscLayout {
    stem: Conv,
    enc: Vec<ResBlock>,
    fc: Conv,
}

/// Discriminator over (normalized) displacement fields, parameters θ^(dis).
#[derive(Debug, Clone)]
pub struct DiscNet {
    spec: DiscNetSpec,
    seed: u64,
    params: ParamSet,
    layout: DiscLayout,
}

pub fn build_discriminator(spec: DiscNetSpec, seed: u64) -> Result<DiscNet> {
    spec.validate()?;
    let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
    let mut p = ParamSet::new();
    let l = spec.levels;
    let ch = |k: usize| spec.channels(k);
    let stem = init.conv(&mut p, "stem", 3, ch(0), 3, true, None);
    let enc = (1..=l).map(|k| ResBlock::down(&mut init, &mut p, &format!("enc{k}"), ch(k - 1), ch(k))).collect();
    let deep: usize = tensor_dims(spec.input_shape).iter().map(|n| n >> l).product();
    let k = ch(l) * deep;
    let w = p.add("fc.w", init.normal([1, k, 1, 1, 1], (1.0 / k as f64).sqrt()));
    let b = p.add("fc.b", Tensor::zeros([1, 1, 1, 1, 1]));
    Ok(DiscNet { spec, seed, params: p, layout: DiscLayout { stem, enc, fc: Conv { w, b: Some(b) } } })
}

impl DiscNet {
    pub fn spec(&self) -> &DiscNetSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn field_dims(&self) -> [usize; 3] {
        tensor_dims(self.spec.input_shape)
    }

    /// Stack flat 3-component fields (x block, y block, z block) into a batch.
    pub fn input_tensor(&self, fields: &[&[f64]]) -> Result<Tensor> {
        let d = self.field_dims();
        let s: usize = 3 * d.iter().product::<usize>();
        let mut data = Vec::with_capacity(fields.len() * s);
        for f in fields {
            if f.len() != s {
                return Err(Error::GridMismatch(format!("field of {} values, discriminator expects {s}", f.len())));
            }
            data.extend_from_slice(f);
        }
        Ok(Tensor::from_vec([fields.len(), 3, d[0], d[1], d[2]], data))
    }

    /// Logits `[n, 1, 1, 1, 1]`, and with a tangent input the directional
    /// derivative of each logit along its tangent.
    pub fn forward(&self, tape: &mut Tape, x: NodeId, tangent: Option<NodeId>) -> (NodeId, Option<NodeId>) {
        let lay = &self.layout;
        let slope = self.spec.slope;
        let h = conv_d(tape, Dual { p: x, t: tangent }, lay.stem, 1);
        let r = tape.act(h.p, slope);
        let tr = h.t.map(|t| tape.act_tangent(h.p, t, slope));
        let mut y = Dual { p: r, t: tr };
        for b in &lay.enc {
            y = res_d(tape, y, b, slope);
        }
        let a = tape.act(y.p, slope);
        let ta = y.t.map(|t| tape.act_tangent(y.p, t, slope));
        let logit = tape.linear(a, lay.fc.w, lay.fc.b);
        let tl = ta.map(|t| tape.linear(t, lay.fc.w, None));
        (logit, tl)
    }

    pub fn logits(&self, fields: &[&[f64]]) -> Result<Vec<f64>> {
        let x = self.input_tensor(fields)?;
        let mut tape = Tape::new(&self.params);
        let xi = tape.leaf(x);
        let (l, _) = self.forward(&mut tape, xi, None);
        Ok(tape.value(l).data().to_vec())
    }
}

impl FieldCritic for DiscNet {
    fn logits_and_input_grads(&self, fields: &[&[f64]]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let x = self.input_tensor(fields).expect("fields on the discriminator grid");
        let mut tape = Tape::new(&self.params);
        let xi = tape.leaf(x);
        let (l, _) = self.forward(&mut tape, xi, None);
        let logits = tape.value(l).data().to_vec();
        // Samples are independent, so a unit seed on every logit yields each
        // logit's own input gradient.
        let mut g = tape.backward(vec![(l, Tensor::from_vec(tape.value(l).shape(), vec![1.0; logits.len()]))]);
        let gx = g.take_leaf(xi).expect("input gradient");
        let grads = (0..fields.len()).map(|n| gx.sample(n).to_vec()).collect();
        (logits, grads)
    }
}

/// Copy every tensor of `source` into the same-named tensor of `target`.
pub fn assign_params(target: &mut ParamSet, source: &ParamSet) -> Result<()> {
    if target.len() != source.len() {
        return Err(Error::Config(format!(
            "parameter count mismatch: expected {} tensors, found {}",
            target.len(),
            source.len()
        )));
    }
    for (name, t) in source.iter() {
        let id = target.id(name).ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))?;
        if target.get(id).shape() != t.shape() {
            return Err(Error::Config(format!("shape mismatch for parameter '{name}'")));
        }
        *target.get_mut(id) = t.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        assert!(RegNetSpec::new(4, [32; 3]).validate().is_ok());
        assert!(RegNetSpec::new(4, [24, 32, 32]).validate().is_err());
        assert!(RegNetSpec::new(2, [32; 3]).validate().is_err());
        let toy = RegNetSpec { n0: 4, levels: 2, input_shape: [8; 3] };
        assert!(toy.validate().is_ok());
    }

    #[test]
    fn fresh_regnet_is_identity() {
        let spec = RegNetSpec { n0: 4, levels: 2, input_shape: [8, 8, 8] };
        let net = build_regnet(spec, 3).unwrap();
        let g = Grid3::centered(8, 2.0).unwrap();
        let m = Volume::from_fn(g, |p| (p[0] * 0.3).sin() + p[2] * 0.05);
        let f = Volume::from_fn(g, |p| (p[1] * 0.2).cos());
        let (local, affine) = net.predict(&m, &f).unwrap();
        assert!(affine.is_identity());
        assert!(local.max_magnitude() < 0.05, "{}", local.max_magnitude());
    }
}
