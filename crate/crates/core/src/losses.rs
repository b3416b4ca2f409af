//! Scalar objectives: label-overlap registration loss, the adversarial
//! discriminator/generator losses with their smoothing term, and the two
//! classical smoothness regularizers used as baselines.
//!
//! Every differentiable loss has a `*_grad` companion returning the
//! analytic gradient alongside the value.

use crate::error::{Error, Result};
use crate::transform::DisplacementField;
use crate::volume::{gaussian_values, Grid3, LabelMap, ScalarField};

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Gaussian scales in mm; 0 means the unfiltered label.
    pub sigmas: Vec<f64>,
    pub lambda_adv: f64,
    pub gamma_start: f64,
    pub gamma_end: f64,
    pub baseline_weight: f64,
    pub epsilon_dice: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            sigmas: vec![0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
            lambda_adv: 0.01,
            gamma_start: 0.2,
            gamma_end: 0.05,
            baseline_weight: 0.5,
            epsilon_dice: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigmas.is_empty() || self.sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("sigmas must be a non-empty list of non-negative values".into()));
        }
        if !(self.lambda_adv >= 0.0) || !(self.baseline_weight >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.gamma_end > 0.0 && self.gamma_start >= self.gamma_end) {
            return Err(Error::Config(format!(
                "need gamma_start >= gamma_end > 0, got {} and {}",
                self.gamma_start, self.gamma_end
            )));
        }
        if !(self.epsilon_dice > 0.0) {
            return Err(Error::Config("epsilon_dice must be positive".into()));
        }
        Ok(())
    }
}

/// Soft Dice `(2 Σpq + ε) / (Σp + Σq + ε)` with its gradients.
pub fn soft_dice_values(p: &[f64], q: &[f64], eps: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let (mut spq, mut sp, mut sq) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(q) {
        spq += a * b;
        sp += a;
        sq += b;
    }
    let num = 2.0 * spq + eps;
    let den = sp + sq + eps;
    let d = num / den;
    let gp = q.iter().map(|b| (2.0 * b - d) / den).collect();
    let gq = p.iter().map(|a| (2.0 * a - d) / den).collect();
    (d, gp, gq)
}

fn dice_value(p: &[f64], q: &[f64], eps: f64) -> f64 {
    let (mut spq, mut sp, mut sq) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(q) {
        spq += a * b;
        sp += a;
        sq += b;
    }
    (2.0 * spq + eps) / (sp + sq + eps)
}

pub fn soft_dice(p: &LabelMap, q: &LabelMap, eps: f64) -> Result<f64> {
    p.grid().ensure_same(q.grid(), "soft dice")?;
    Ok(dice_value(p.values(), q.values(), eps))
}

/// A label pre-filtered at every scale of a config; used for the fixed
/// side, which does not change during training.
#[derive(Debug, Clone)]
pub struct MultiscaleLabel {
    grid: Grid3,
    scales: Vec<Vec<f64>>,
}

impl MultiscaleLabel {
    pub fn new(label: &LabelMap, sigmas: &[f64]) -> Self {
        let scales = sigmas.iter().map(|&s| gaussian_values(label.values(), label.grid(), s)).collect();
        Self { grid: *label.grid(), scales }
    }
}

/// Mean soft Dice over Gaussian-smoothed copies of two labels.
pub fn multiscale_dice(w: &LabelMap, f: &LabelMap, cfg: &LossConfig) -> Result<f64> {
    w.grid().ensure_same(f.grid(), "multiscale dice")?;
    let z = cfg.sigmas.len() as f64;
    let total: f64 = cfg
        .sigmas
        .iter()
        .map(|&s| {
            let a = gaussian_values(w.values(), w.grid(), s);
            let b = gaussian_values(f.values(), f.grid(), s);
            dice_value(&a, &b, cfg.epsilon_dice)
        })
        .sum();
    Ok(total / z)
}

/// Multiscale Dice and its gradient with respect to the warped label
/// values. The Gaussian filter is self-adjoint under zero padding, so the
/// per-scale gradient is filtered back with the same kernel.
pub fn multiscale_dice_grad(w: &[f64], fixed: &MultiscaleLabel, cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    if w.len() != fixed.grid.len() || fixed.scales.len() != cfg.sigmas.len() {
        return Err(Error::GridMismatch("multiscale dice inputs".into()));
    }
    let z = cfg.sigmas.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; w.len()];
    for (&s, fs) in cfg.sigmas.iter().zip(&fixed.scales) {
        let ws = gaussian_values(w, &fixed.grid, s);
        let (d, gw, _) = soft_dice_values(&ws, fs, cfg.epsilon_dice);
        value += d;
        let back = gaussian_values(&gw, &fixed.grid, s);
        for (g, b) in grad.iter_mut().zip(back) {
            *g += b / z;
        }
    }
    Ok((value / z, grad))
}

/// Negative expected label similarity over a batch of image pairs; each
/// pair contributes the mean multiscale Dice of its labels.
pub fn registration_loss(warped: &[Vec<LabelMap>], fixed: &[Vec<LabelMap>], cfg: &LossConfig) -> Result<f64> {
    if warped.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if warped.len() != fixed.len() {
        return Err(Error::InvalidArgument("warped and fixed batches differ in length".into()));
    }
    let mut acc = 0.0;
    for (n, (ws, fs)) in warped.iter().zip(fixed).enumerate() {
        if ws.is_empty() {
            return Err(Error::InvalidArgument(format!("image pair {n} has no labels")));
        }
        if ws.len() != fs.len() {
            return Err(Error::InvalidArgument(format!("image pair {n} has unpaired labels")));
        }
        let mut inner = 0.0;
        for (w, f) in ws.iter().zip(fs) {
            inner += multiscale_dice(w, f, cfg)?;
        }
        acc += inner / ws.len() as f64;
    }
    Ok(-acc / warped.len() as f64)
}

/// Gradient of [`registration_loss`] with respect to every warped label.
pub fn registration_loss_grad(
    warped: &[Vec<Vec<f64>>],
    fixed: &[Vec<MultiscaleLabel>],
    cfg: &LossConfig,
) -> Result<(f64, Vec<Vec<Vec<f64>>>)> {
    if warped.is_empty() || warped.len() != fixed.len() {
        return Err(Error::InvalidArgument("empty or misaligned batch".into()));
    }
    let nb = warped.len() as f64;
    let mut acc = 0.0;
    let mut grads = Vec::with_capacity(warped.len());
    for (ws, fs) in warped.iter().zip(fixed) {
        if ws.is_empty() || ws.len() != fs.len() {
            return Err(Error::InvalidArgument("image pair without paired labels".into()));
        }
        let m = ws.len() as f64;
        let mut pair = Vec::with_capacity(ws.len());
        for (w, f) in ws.iter().zip(fs) {
            let (d, mut g) = multiscale_dice_grad(w, f, cfg)?;
            acc += d / m;
            g.iter_mut().for_each(|v| *v *= -1.0 / (m * nb));
            pair.push(g);
        }
        grads.push(pair);
    }
    Ok((-acc / nb, grads))
}

/// First-derivative stencil (mm⁻¹) along `axis` at voxel `pos`: central
/// inside, one-sided at the borders.
#[inline]
fn first_diff(pos: usize, n: usize, stride: usize, h: f64, idx: usize) -> [(usize, f64); 2] {
    if pos == 0 {
        [(idx + stride, 1.0 / h), (idx, -1.0 / h)]
    } else if pos == n - 1 {
        [(idx, 1.0 / h), (idx - stride, -1.0 / h)]
    } else {
        [(idx + stride, 0.5 / h), (idx - stride, -0.5 / h)]
    }
}

fn check_min_shape(d: &DisplacementField) -> Result<()> {
    if d.grid().shape().iter().any(|&n| n < 3) {
        return Err(Error::InvalidGrid("regularizers need at least 3 voxels per axis".into()));
    }
    Ok(())
}

/// Mean over all voxels of the squared Frobenius norm of the displacement
/// Jacobian, with its gradient.
pub fn l2_gradient_penalty_grad(d: &DisplacementField) -> Result<(f64, [Vec<f64>; 3])> {
    check_min_shape(d)?;
    let g = d.grid();
    let shape = g.shape();
    let sp = g.spacing();
    let strides = [1, shape[0], shape[0] * shape[1]];
    let n = g.len();
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grad = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for idx in 0..n {
        let ijk = g.ijk(idx);
        for axis in 0..3 {
            let st = first_diff(ijk[axis], shape[axis], strides[axis], sp[axis], idx);
            for c in 0..3 {
                let u = &d.components()[c];
                let v = st[0].1 * u[st[0].0] + st[1].1 * u[st[1].0];
                total += v * v;
                let gv = 2.0 * v * inv_n;
                grad[c][st[0].0] += gv * st[0].1;
                grad[c][st[1].0] += gv * st[1].1;
            }
        }
    }
    Ok((total * inv_n, grad))
}

pub fn l2_gradient_penalty(d: &DisplacementField) -> Result<f64> {
    Ok(l2_gradient_penalty_grad(d)?.0)
}

/// Mean over interior voxels of the thin-plate bending energy, with its
/// gradient. Second derivatives use central differences in mm.
pub fn bending_energy_grad(d: &DisplacementField) -> Result<(f64, [Vec<f64>; 3])> {
    check_min_shape(d)?;
    let g = d.grid();
    let shape = g.shape();
    let sp = g.spacing();
    let st = [1isize, shape[0] as isize, (shape[0] * shape[1]) as isize];
    let n = g.len();
    let interior = (shape[0] - 2) * (shape[1] - 2) * (shape[2] - 2);
    let inv_n = 1.0 / interior as f64;
    let mut total = 0.0;
    let mut grad = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];

    // (weight, [(offset, coefficient)]) for the six second-derivative terms.
    let mut terms: Vec<(f64, Vec<(isize, f64)>)> = Vec::with_capacity(6);
    for a in 0..3 {
        let h2 = sp[a] * sp[a];
        terms.push((1.0, vec![(st[a], 1.0 / h2), (0, -2.0 / h2), (-st[a], 1.0 / h2)]));
    }
    for (a, b) in [(0usize, 1usize), (1, 2), (0, 2)] {
        let c = 1.0 / (4.0 * sp[a] * sp[b]);
        terms.push((
            2.0,
            vec![(st[a] + st[b], c), (st[a] - st[b], -c), (-st[a] + st[b], -c), (-st[a] - st[b], c)],
        ));
    }

    for k in 1..shape[2] - 1 {
        for j in 1..shape[1] - 1 {
            for i in 1..shape[0] - 1 {
                let idx = g.index(i, j, k) as isize;
                for c in 0..3 {
                    let u = &d.components()[c];
                    for (w, stencil) in &terms {
                        let v: f64 = stencil.iter().map(|(o, a)| a * u[(idx + o) as usize]).sum();
                        total += w * v * v;
                        let gv = 2.0 * w * v * inv_n;
                        for (o, a) in stencil {
                            grad[c][(idx + o) as usize] += gv * a;
                        }
                    }
                }
            }
        }
    }
    Ok((total * inv_n, grad))
}

pub fn bending_energy(d: &DisplacementField) -> Result<f64> {
    Ok(bending_energy_grad(d)?.0)
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Value of the discriminator loss and its derivatives with respect to
/// the real logits, the fake logits and `omega`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscLoss {
    pub value: f64,
    pub d_real: Vec<f64>,
    pub d_fake: Vec<f64>,
    pub d_omega: f64,
}

/// `-½ E log D(real) − ½ E log(1 − D(fake)) + (γ/2) Ω`, with `D` the
/// logistic of the logit, evaluated through softplus.
pub fn discriminator_loss(logits_real: &[f64], logits_fake: &[f64], omega: f64, gamma: f64) -> Result<DiscLoss> {
    if logits_real.is_empty() || logits_fake.is_empty() {
        return Err(Error::InvalidArgument("discriminator loss needs real and fake logits".into()));
    }
    if logits_real.iter().chain(logits_fake).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("discriminator logits".into()));
    }
    let nr = logits_real.len() as f64;
    let nf = logits_fake.len() as f64;
    let real: f64 = logits_real.iter().map(|&x| softplus(-x)).sum::<f64>() / nr;
    let fake: f64 = logits_fake.iter().map(|&x| softplus(x)).sum::<f64>() / nf;
    Ok(DiscLoss {
        value: 0.5 * real + 0.5 * fake + 0.5 * gamma * omega,
        d_real: logits_real.iter().map(|&x| -0.5 * sigmoid(-x) / nr).collect(),
        d_fake: logits_fake.iter().map(|&x| 0.5 * sigmoid(x) / nf).collect(),
        d_omega: 0.5 * gamma,
    })
}

/// Non-saturating generator loss `-½ E log D(fake)` and its gradient.
pub fn generator_loss(logits_fake: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits_fake.is_empty() {
        return Err(Error::InvalidArgument("generator loss needs logits".into()));
    }
    if logits_fake.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("generator logits".into()));
    }
    let n = logits_fake.len() as f64;
    let value = logits_fake.iter().map(|&x| 0.5 * softplus(-x)).sum::<f64>() / n;
    let grad = logits_fake.iter().map(|&x| -0.5 * sigmoid(-x) / n).collect();
    Ok((value, grad))
}

/// A discriminator seen as a differentiable map from fields to logits.
pub trait FieldCritic {
    /// Logit per field and the gradient of each logit with respect to its
    /// own input field.
    fn logits_and_input_grads(&self, fields: &[&[f64]]) -> (Vec<f64>, Vec<Vec<f64>>);
}

/// Per-sample pieces of the smoothing term: a logit and the squared norm
/// of its input gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticSample {
    pub logit: f64,
    pub grad_sq: f64,
}

/// Ω and its partial derivatives with respect to each sample's logit and
/// squared gradient norm.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingTerm {
    pub value: f64,
    /// (dΩ/dlogit, dΩ/dgrad_sq) per real sample.
    pub d_real: Vec<(f64, f64)>,
    pub d_fake: Vec<(f64, f64)>,
}

/// `Ω = E_real (1 − D)² ‖∇d‖² + E_fake D² ‖∇d‖²`.
pub fn smoothing_term_parts(real: &[CriticSample], fake: &[CriticSample]) -> SmoothingTerm {
    let nr = real.len().max(1) as f64;
    let nf = fake.len().max(1) as f64;
    let mut value = 0.0;
    let d_real = real
        .iter()
        .map(|s| {
            let q = sigmoid(-s.logit); // 1 − D
            let p = 1.0 - q;
            value += q * q * s.grad_sq / nr;
            (-2.0 * p * q * q * s.grad_sq / nr, q * q / nr)
        })
        .collect();
    let d_fake = fake
        .iter()
        .map(|s| {
            let p = sigmoid(s.logit);
            let q = sigmoid(-s.logit);
            value += p * p * s.grad_sq / nf;
            (2.0 * p * p * q * s.grad_sq / nf, p * p / nf)
        })
        .collect();
    SmoothingTerm { value, d_real, d_fake }
}

pub fn smoothing_term<C: FieldCritic>(fake: &[&[f64]], real: &[&[f64]], critic: &C) -> f64 {
    let summarize = |fields: &[&[f64]]| -> Vec<CriticSample> {
        if fields.is_empty() {
            return Vec::new();
        }
        let (logits, grads) = critic.logits_and_input_grads(fields);
        logits
            .into_iter()
            .zip(grads)
            .map(|(logit, g)| CriticSample { logit, grad_sq: g.iter().map(|v| v * v).sum() })
            .collect()
    };
    smoothing_term_parts(&summarize(real), &summarize(fake)).value
}

/// Exponential annealing `γ(t) = γ₀ (γ₁/γ₀)^(t/T)`.
pub fn gamma_schedule(step: usize, total_steps: usize, cfg: &LossConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidArgument("total_steps must be at least 1".into()));
    }
    if step > total_steps {
        return Err(Error::InvalidArgument(format!("step {step} exceeds total_steps {total_steps}")));
    }
    if step == 0 {
        return Ok(cfg.gamma_start);
    }
    if step == total_steps {
        return Ok(cfg.gamma_end);
    }
    let frac = step as f64 / total_steps as f64;
    Ok(cfg.gamma_start * (cfg.gamma_end / cfg.gamma_start).powf(frac))
}
