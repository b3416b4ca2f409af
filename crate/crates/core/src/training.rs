//! Alternating optimization of the registration network and the
//! discriminator, baseline regularizer modes, checkpoints and inference.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{text_hash, KeyValues, KvWriter};
use crate::dataset::{load_cases, load_sims, CaseData};
use crate::error::{Error, Result};
use crate::losses::{
    bending_energy_grad, discriminator_loss, gamma_schedule, generator_loss, l2_gradient_penalty_grad,
    registration_loss_grad, smoothing_term_parts, CriticSample, LossConfig, MultiscaleLabel,
};
use crate::networks::{
    affine_from_raw, affine_grad_to_raw, assign_params, build_discriminator, build_regnet, field_from_tensor, DiscNet,
    DiscNetSpec, RegNet, RegNetSpec,
};
use crate::nn::{Adam, ParamSet, Tape, Tensor};
use crate::rng::{derive_seed, rng_for};
use crate::sim::NormStats;
use crate::transform::{affine_to_ddf, compose, compose_backward, random_affine, warp, warp_backward, AffineParams, AffineRanges, DisplacementField};
use crate::volume::{Grid3, LabelMap, ScalarField, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerMode {
    Adversarial,
    Bending,
    L2Grad,
    None,
}

impl RegularizerMode {
    pub const ALL: [RegularizerMode; 4] = [Self::Adversarial, Self::Bending, Self::L2Grad, Self::None];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Adversarial => "adversarial",
            Self::Bending => "bending",
            Self::L2Grad => "l2grad",
            Self::None => "none",
        }
    }
}

impl fmt::Display for RegularizerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegularizerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown regularizer mode '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub lambda_adv: f64,
    pub gamma_start: f64,
    pub gamma_end: f64,
    pub regularizer_mode: RegularizerMode,
    pub baseline_weight: f64,
    pub seed: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub grid_shape: [usize; 3],
    pub grid_spacing: f64,
    pub data_dir: PathBuf,
    pub sim_dir: Option<PathBuf>,
    /// Case ids to train on; empty means every case in `data_dir`.
    pub train_cases: Vec<String>,
    pub n0: usize,
    pub levels: usize,
    pub disc_n0: usize,
    pub sigmas: Vec<f64>,
    pub aug_rotation_deg: f64,
    pub aug_scale: f64,
    pub aug_shear: f64,
    pub aug_translation: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let l = LossConfig::default();
        Self {
            learning_rate: 1e-6,
            batch_size: 4,
            total_steps: 1000,
            lambda_adv: l.lambda_adv,
            gamma_start: l.gamma_start,
            gamma_end: l.gamma_end,
            regularizer_mode: RegularizerMode::Adversarial,
            baseline_weight: l.baseline_weight,
            seed: 0,
            checkpoint_every: 0,
            grid_shape: [32; 3],
            grid_spacing: 2.0,
            data_dir: PathBuf::from("data"),
            sim_dir: Some(PathBuf::from("sims")),
            train_cases: Vec::new(),
            n0: 32,
            levels: 4,
            disc_n0: 32,
            sigmas: l.sigmas,
            aug_rotation_deg: 5.0,
            aug_scale: 0.05,
            aug_shear: 0.02,
            aug_translation: 2.0,
        }
    }
}

impl TrainConfig {
    /// Small networks and a raised learning rate for CPU runs on 32³ grids.
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 1,
            total_steps: 1000,
            baseline_weight: 10.0,
            n0: 4,
            disc_n0: 4,
            ..Self::default()
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            sigmas: self.sigmas.clone(),
            lambda_adv: self.lambda_adv,
            gamma_start: self.gamma_start,
            gamma_end: self.gamma_end,
            baseline_weight: self.baseline_weight,
            ..LossConfig::default()
        }
    }

    pub fn reg_spec(&self) -> RegNetSpec {
        RegNetSpec { n0: self.n0, levels: self.levels, input_shape: self.grid_shape }
    }

    pub fn disc_spec(&self) -> DiscNetSpec {
        DiscNetSpec { levels: self.levels, ..DiscNetSpec::new(self.disc_n0, self.grid_shape) }
    }

    pub fn augment_ranges(&self, grid: &Grid3) -> AffineRanges {
        AffineRanges {
            rotation_deg: self.aug_rotation_deg,
            scale_min: 1.0 - self.aug_scale,
            scale_max: 1.0 + self.aug_scale,
            shear: self.aug_shear,
            translation: [self.aug_translation; 3],
            center: grid.center(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.grid_spacing > 0.0) {
            return Err(Error::Config("grid_spacing must be positive".into()));
        }
        if self.regularizer_mode == RegularizerMode::Adversarial && self.sim_dir.is_none() {
            return Err(Error::Config("adversarial mode requires sim_dir".into()));
        }
        if !(self.aug_scale >= 0.0 && self.aug_scale < 1.0) {
            return Err(Error::Config("aug_scale must be in [0, 1)".into()));
        }
        self.loss_config().validate()?;
        self.reg_spec().validate()?;
        if self.regularizer_mode == RegularizerMode::Adversarial {
            self.disc_spec().validate()?;
        }
        self.augment_ranges(&Grid3::centered(2, 1.0)?).validate()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let c = Self::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(c)
    }

    /// Read every known key from `kv`, leaving unknown keys in place.
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let d = Self::default();
        let c = Self {
            learning_rate: kv.take("learning_rate", d.learning_rate)?,
            batch_size: kv.take("batch_size", d.batch_size)?,
            total_steps: kv.take("total_steps", d.total_steps)?,
            lambda_adv: kv.take("lambda_adv", d.lambda_adv)?,
            gamma_start: kv.take("gamma_start", d.gamma_start)?,
            gamma_end: kv.take("gamma_end", d.gamma_end)?,
            regularizer_mode: kv.take("regularizer_mode", d.regularizer_mode)?,
            baseline_weight: kv.take("baseline_weight", d.baseline_weight)?,
            seed: kv.take("seed", d.seed)?,
            checkpoint_every: kv.take("checkpoint_every", d.checkpoint_every)?,
            grid_shape: kv.take_array("grid_shape", d.grid_shape)?,
            grid_spacing: kv.take("grid_spacing", d.grid_spacing)?,
            data_dir: kv.take("data_dir", d.data_dir)?,
            sim_dir: match kv.take_opt::<String>("sim_dir")? {
                Some(s) if s != "none" => Some(PathBuf::from(s)),
                Some(_) => None,
                None => d.sim_dir,
            },
            train_cases: kv.take_list("train_cases", &d.train_cases)?,
            n0: kv.take("n0", d.n0)?,
            levels: kv.take("levels", d.levels)?,
            disc_n0: kv.take("disc_n0", d.disc_n0)?,
            sigmas: kv.take_list("sigmas", &d.sigmas)?,
            aug_rotation_deg: kv.take("aug_rotation_deg", d.aug_rotation_deg)?,
            aug_scale: kv.take("aug_scale", d.aug_scale)?,
            aug_shear: kv.take("aug_shear", d.aug_shear)?,
            aug_translation: kv.take("aug_translation", d.aug_translation)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut w = KvWriter::default();
        w.put("learning_rate", self.learning_rate)
            .put("batch_size", self.batch_size)
            .put("total_steps", self.total_steps)
            .put("lambda_adv", self.lambda_adv)
            .put("gamma_start", self.gamma_start)
            .put("gamma_end", self.gamma_end)
            .put("regularizer_mode", self.regularizer_mode)
            .put("baseline_weight", self.baseline_weight)
            .put("seed", self.seed)
            .put("checkpoint_every", self.checkpoint_every)
            .put_list("grid_shape", &self.grid_shape)
            .put("grid_spacing", self.grid_spacing)
            .put("data_dir", self.data_dir.display())
            .put("sim_dir", self.sim_dir.as_ref().map_or("none".to_string(), |p| p.display().to_string()))
            .put_list("train_cases", &self.train_cases)
            .put("n0", self.n0)
            .put("levels", self.levels)
            .put("disc_n0", self.disc_n0)
            .put_list("sigmas", &self.sigmas)
            .put("aug_rotation_deg", self.aug_rotation_deg)
            .put("aug_scale", self.aug_scale)
            .put("aug_shear", self.aug_shear)
            .put("aug_translation", self.aug_translation);
        w.finish()
    }
}

/// One augmented training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub moving: Volume,
    pub fixed: Volume,
    pub moving_label: LabelMap,
    pub fixed_label: LabelMap,
}

impl TrainPair {
    pub fn from_case(c: &CaseData) -> Self {
        Self {
            moving: c.moving.clone(),
            fixed: c.fixed.clone(),
            moving_label: c.moving_gland.clone(),
            fixed_label: c.fixed_gland.clone(),
        }
    }
}

/// Warp each image–label pair of a case by its own random affine.
pub fn augment_case(c: &CaseData, ranges: &AffineRanges, seed: u64) -> Result<TrainPair> {
    let g = *c.grid();
    let am = random_affine(derive_seed(seed, &[0]), ranges)?;
    let af = random_affine(derive_seed(seed, &[1]), ranges)?;
    let apply = |a: &AffineParams, img: &Volume, lab: &LabelMap| -> (Volume, LabelMap) {
        if a.is_identity() {
            return (img.clone(), lab.clone());
        }
        let d = affine_to_ddf(a, &g);
        (warp(img, &d), warp(lab, &d))
    };
    let (moving, moving_label) = apply(&am, &c.moving, &c.moving_gland);
    let (fixed, fixed_label) = apply(&af, &c.fixed, &c.fixed_gland);
    Ok(TrainPair { moving, fixed, moving_label, fixed_label })
}

fn check_finite(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} is {v}")))
    }
}

fn check_all_finite(what: &str, vals: &[f64]) -> Result<()> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} has non-finite entries")))
    }
}

/// Parameter gradients of the discriminator objective.
#[derive(Debug, Clone)]
pub struct DiscObjective {
    /// ℒ^(dis), or Ω alone when no γ was given.
    pub value: f64,
    pub omega: f64,
    pub logits_real: Vec<f64>,
    pub logits_fake: Vec<f64>,
    pub grads: Vec<Vec<f64>>,
}

/// Discriminator loss (with `gamma`) or the smoothing term Ω alone
/// (without), and exact parameter gradients.
///
/// Ω depends on input gradients ∇ₓd, so its parameter gradient needs
/// second derivatives: a first sweep gives `g = ∇ₓd`, then a forward pass
/// carrying the tangent `g` yields `J = ∇ₓd · g = ‖g‖²`, whose reverse sweep
/// with `g` held fixed gives `½ ∂‖∇ₓd‖²/∂θ`.
pub fn discriminator_objective(
    disc: &DiscNet,
    real: &[&[f64]],
    fake: &[&[f64]],
    gamma: Option<f64>,
) -> Result<DiscObjective> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::InvalidArgument("discriminator needs real and fake fields".into()));
    }
    let nr = real.len();
    let all: Vec<&[f64]> = real.iter().chain(fake).copied().collect();
    let x = disc.input_tensor(&all)?;
    let params = disc.params();

    let (logits, gx) = {
        let mut tape = Tape::new(params);
        let xi = tape.leaf(x.clone());
        let (l, _) = disc.forward(&mut tape, xi, None);
        let logits = tape.value(l).data().to_vec();
        let ones = Tensor::from_vec(tape.value(l).shape(), vec![1.0; logits.len()]);
        let mut g = tape.backward(vec![(l, ones)]);
        (logits, g.take_leaf(xi).expect("input gradient"))
    };
    check_all_finite("discriminator logits", &logits)?;
    let samples: Vec<CriticSample> = (0..all.len())
        .map(|n| CriticSample { logit: logits[n], grad_sq: gx.sample(n).iter().map(|v| v * v).sum() })
        .collect();
    let st = smoothing_term_parts(&samples[..nr], &samples[nr..]);
    check_finite("smoothing term", st.value)?;
    let parts: Vec<(f64, f64)> = st.d_real.iter().chain(&st.d_fake).copied().collect();

    let mut seed_d = vec![0.0; all.len()];
    let mut seed_j = vec![0.0; all.len()];
    let value = match gamma {
        Some(g) => {
            let dl = discriminator_loss(&logits[..nr], &logits[nr..], st.value, g)?;
            for n in 0..all.len() {
                let a = if n < nr { dl.d_real[n] } else { dl.d_fake[n - nr] };
                seed_d[n] = a + dl.d_omega * parts[n].0;
                seed_j[n] = 2.0 * dl.d_omega * parts[n].1;
            }
            dl.value
        }
        None => {
            for n in 0..all.len() {
                seed_d[n] = parts[n].0;
                seed_j[n] = 2.0 * parts[n].1;
            }
            st.value
        }
    };
    check_finite("discriminator loss", value)?;

    let mut tape = Tape::new(params);
    let xi = tape.leaf(x);
    let ti = tape.leaf(gx);
    let (l, j) = disc.forward(&mut tape, xi, Some(ti));
    let j = j.expect("tangent output");
    let shape = tape.value(l).shape();
    let g = tape.backward(vec![(l, Tensor::from_vec(shape, seed_d)), (j, Tensor::from_vec(shape, seed_j))]);
    for (k, gr) in g.params.iter().enumerate() {
        check_all_finite(&format!("discriminator gradient of '{}'", params.name(crate::nn::ParamId(k))), gr)?;
    }
    Ok(DiscObjective {
        value,
        omega: st.value,
        logits_real: logits[..nr].to_vec(),
        logits_fake: logits[nr..].to_vec(),
        grads: g.params,
    })
}

/// The adversary seen by the registration network.
#[derive(Clone, Copy)]
pub struct Adversary<'a> {
    pub disc: &'a DiscNet,
    pub stats: &'a NormStats,
}

/// Terms of the registration objective for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegTerms {
    /// ℒ^(reg): negative mean multiscale label Dice.
    pub label: f64,
    /// ℒ^(gen), unweighted.
    pub generator: Option<f64>,
    /// Baseline regularizer value, unweighted.
    pub regularizer: Option<f64>,
    pub total: f64,
}

/// Forward pass outputs of the registration network for a batch.
pub struct RegPrediction {
    pub locals: Vec<DisplacementField>,
    pub affines: Vec<AffineParams>,
}

/// Registration objective and its gradient with respect to every
/// registration parameter. Also returns the predicted local fields.
pub fn registration_objective(
    net: &RegNet,
    pairs: &[TrainPair],
    mode: RegularizerMode,
    adversary: Option<Adversary<'_>>,
    loss: &LossConfig,
) -> Result<(RegTerms, Vec<Vec<f64>>, RegPrediction)> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let grid = *pairs[0].fixed.grid();
    let refs: Vec<(&Volume, &Volume)> = pairs.iter().map(|p| (&p.moving, &p.fixed)).collect();
    let x = net.input_tensor(&refs)?;
    let mut tape = Tape::new(net.params());
    let xi = tape.leaf(x);
    let out = net.forward(&mut tape, xi);
    let nb = pairs.len();
    let mut locals = Vec::with_capacity(nb);
    let mut affines = Vec::with_capacity(nb);
    for n in 0..nb {
        let local = field_from_tensor(tape.value(out.ddf), n, grid)?;
        check_all_finite("predicted local field", &local.components().concat())?;
        let raw = tape.value(out.affine).sample(n);
        check_all_finite("predicted affine", raw)?;
        locals.push(local);
        affines.push(affine_from_raw(raw));
    }

    // Label term through compose and warp.
    let composed: Vec<DisplacementField> = locals.iter().zip(&affines).map(|(l, a)| compose(l, a)).collect();
    let warped: Vec<Vec<Vec<f64>>> =
        pairs.iter().zip(&composed).map(|(p, c)| vec![warp(&p.moving_label, c).values().to_vec()]).collect();
    let fixed: Vec<Vec<MultiscaleLabel>> =
        pairs.iter().map(|p| vec![MultiscaleLabel::new(&p.fixed_label, &loss.sigmas)]).collect();
    let (label, g_warped) = registration_loss_grad(&warped, &fixed, loss)?;
    check_finite("label loss", label)?;

    let s = grid.len();
    let mut ddf_seed = Tensor::zeros(tape.value(out.ddf).shape());
    let mut aff_seed = Tensor::zeros(tape.value(out.affine).shape());
    for n in 0..nb {
        let (_, g_u) = warp_backward(&pairs[n].moving_label, &composed[n], &g_warped[n][0]);
        let (g_local, g_aff) = compose_backward(&locals[n], &affines[n], &g_u);
        let dst = ddf_seed.sample_mut(n);
        for c in 0..3 {
            dst[c * s..(c + 1) * s].copy_from_slice(&g_local[c]);
        }
        aff_seed.sample_mut(n).copy_from_slice(&affine_grad_to_raw(&g_aff));
    }
    check_all_finite("label loss gradient", ddf_seed.data())?;

    let mut terms = RegTerms { label, generator: None, regularizer: None, total: label };
    match mode {
        RegularizerMode::None => {}
        RegularizerMode::Bending | RegularizerMode::L2Grad => {
            let mut acc = 0.0;
            for (n, l) in locals.iter().enumerate() {
                let (v, g) = if mode == RegularizerMode::Bending { bending_energy_grad(l)? } else { l2_gradient_penalty_grad(l)? };
                acc += v / nb as f64;
                let dst = ddf_seed.sample_mut(n);
                let w = loss.baseline_weight / nb as f64;
                for c in 0..3 {
                    for (d, gv) in dst[c * s..(c + 1) * s].iter_mut().zip(&g[c]) {
                        *d += w * gv;
                    }
                }
            }
            check_finite("regularizer", acc)?;
            check_all_finite("regularizer gradient", ddf_seed.data())?;
            terms.regularizer = Some(acc);
            terms.total += loss.baseline_weight * acc;
        }
        RegularizerMode::Adversarial => {
            let adv = adversary.ok_or_else(|| Error::InvalidArgument("adversarial mode needs a discriminator".into()))?;
            let fakes: Vec<Vec<f64>> = locals.iter().map(|l| adv.stats.normalize(l)).collect();
            let refs: Vec<&[f64]> = fakes.iter().map(Vec::as_slice).collect();
            let xd = adv.disc.input_tensor(&refs)?;
            let mut dt = Tape::new(adv.disc.params());
            let xdi = dt.leaf(xd);
            let (l, _) = adv.disc.forward(&mut dt, xdi, None);
            let logits = dt.value(l).data().to_vec();
            let (gen, g_logit) = generator_loss(&logits)?;
            check_finite("generator loss", gen)?;
            let shape = dt.value(l).shape();
            let mut g = dt.backward(vec![(l, Tensor::from_vec(shape, g_logit))]);
            let gx = g.take_leaf(xdi).expect("input gradient");
            for n in 0..nb {
                let src = gx.sample(n);
                let dst = ddf_seed.sample_mut(n);
                for c in 0..3 {
                    let w = loss.lambda_adv / adv.stats.std[c];
                    for (d, gv) in dst[c * s..(c + 1) * s].iter_mut().zip(&src[c * s..(c + 1) * s]) {
                        *d += w * gv;
                    }
                }
            }
            check_all_finite("generator loss gradient", ddf_seed.data())?;
            terms.generator = Some(gen);
            terms.total += loss.lambda_adv * gen;
        }
    }

    let g = tape.backward(vec![(out.ddf, ddf_seed), (out.affine, aff_seed)]);
    for (k, gr) in g.params.iter().enumerate() {
        check_all_finite(&format!("registration gradient of '{}'", net.params().name(crate::nn::ParamId(k))), gr)?;
    }
    Ok((terms, g.params, RegPrediction { locals, affines }))
}

/// One step-indexed line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub reg: f64,
    pub dis: Option<f64>,
    pub gen: Option<f64>,
    pub omega: Option<f64>,
    pub gamma: Option<f64>,
    pub regularizer: Option<f64>,
    pub total: f64,
}

impl MetricRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("plain record")
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() }))
        .collect()
}

/// Everything that changes during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub total_steps: usize,
    pub mode: RegularizerMode,
    pub loss: LossConfig,
    pub reg: RegNet,
    pub opt_reg: Adam,
    pub disc: Option<DiscNet>,
    pub opt_dis: Option<Adam>,
    pub stats: Option<NormStats>,
    /// Hash each parameter set around the half-step that must not touch it.
    pub verify_exclusive: bool,
    pub log: Vec<MetricRecord>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, stats: Option<NormStats>) -> Result<Self> {
        cfg.validate()?;
        let reg = build_regnet(cfg.reg_spec(), derive_seed(cfg.seed, &[0x4E6]))?;
        let opt_reg = Adam::new(reg.params(), cfg.learning_rate);
        let (disc, opt_dis) = if cfg.regularizer_mode == RegularizerMode::Adversarial {
            let s = stats.as_ref().ok_or_else(|| Error::Config("adversarial mode requires normalization statistics".into()))?;
            s.validate()?;
            let d = build_discriminator(cfg.disc_spec(), derive_seed(cfg.seed, &[0xD15]))?;
            let o = Adam::new(d.params(), cfg.learning_rate);
            (Some(d), Some(o))
        } else {
            (None, None)
        };
        Ok(Self {
            step: 0,
            total_steps: cfg.total_steps,
            mode: cfg.regularizer_mode,
            loss: cfg.loss_config(),
            reg,
            opt_reg,
            disc,
            opt_dis,
            stats,
            verify_exclusive: false,
            log: Vec::new(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { reg: self.reg.clone(), disc: self.disc.clone(), stats: self.stats, step: self.step }
    }
}

fn digest_if(on: bool, p: &ParamSet) -> Option<String> {
    on.then(|| p.digest())
}

/// One alternating update: the discriminator first (adversarial mode
/// only), then the registration network.
///
/// `sims` are normalized simulated fields (flat x, y, z blocks).
pub fn train_step(state: &mut TrainState, pairs: &[TrainPair], sims: &[&[f64]]) -> Result<MetricRecord> {
    let t = state.step;
    let mut rec = MetricRecord { step: t, reg: 0.0, dis: None, gen: None, omega: None, gamma: None, regularizer: None, total: 0.0 };

    if state.mode == RegularizerMode::Adversarial {
        if sims.is_empty() {
            return Err(Error::InvalidArgument("adversarial step without simulated fields".into()));
        }
        let stats = state.stats.as_ref().expect("checked at construction");
        let disc = state.disc.as_mut().expect("adversarial state has a discriminator");
        let before = digest_if(state.verify_exclusive, state.reg.params());
        let pred = {
            let refs: Vec<(&Volume, &Volume)> = pairs.iter().map(|p| (&p.moving, &p.fixed)).collect();
            let x = state.reg.input_tensor(&refs)?;
            let mut tape = Tape::new(state.reg.params());
            let xi = tape.leaf(x);
            let out = state.reg.forward(&mut tape, xi);
            let grid = *pairs[0].fixed.grid();
            (0..pairs.len())
                .map(|n| field_from_tensor(tape.value(out.ddf), n, grid).map(|f| stats.normalize(&f)))
                .collect::<Result<Vec<_>>>()?
        };
        let fakes: Vec<&[f64]> = pred.iter().map(Vec::as_slice).collect();
        let gamma = gamma_schedule(t, state.total_steps.max(1), &state.loss)?;
        let obj = discriminator_objective(disc, sims, &fakes, Some(gamma))?;
        state.opt_dis.as_mut().expect("optimizer").step(disc.params_mut(), &obj.grads);
        if !disc.params().all_finite() {
            return Err(Error::NonFinite("discriminator parameters after update".into()));
        }
        if before.is_some() && before != digest_if(true, state.reg.params()) {
            return Err(Error::Degenerate("registration parameters changed during the discriminator update".into()));
        }
        rec.dis = Some(obj.value);
        rec.omega = Some(obj.omega);
        rec.gamma = Some(gamma);
    }

    let before = state.disc.as_ref().and_then(|d| digest_if(state.verify_exclusive, d.params()));
    let adversary = match (&state.disc, &state.stats) {
        (Some(disc), Some(stats)) => Some(Adversary { disc, stats }),
        _ => None,
    };
    let (terms, grads, _) = registration_objective(&state.reg, pairs, state.mode, adversary, &state.loss)?;
    state.opt_reg.step(state.reg.params_mut(), &grads);
    if !state.reg.params().all_finite() {
        return Err(Error::NonFinite("registration parameters after update".into()));
    }
    if before.is_some() && before != state.disc.as_ref().and_then(|d| digest_if(true, d.params())) {
        return Err(Error::Degenerate("discriminator parameters changed during the registration update".into()));
    }
    rec.reg = terms.label;
    rec.gen = terms.generator;
    rec.regularizer = terms.regularizer;
    rec.total = terms.total;
    state.step += 1;
    state.log.push(rec);
    Ok(rec)
}

/// Batch `step` of an epoch-shuffled pass over `n` cases.
pub fn batch_indices(seed: u64, step: usize, batch: usize, n: usize) -> Vec<usize> {
    (0..batch)
        .map(|b| {
            let i = step * batch + b;
            let (epoch, pos) = (i / n, i % n);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng_for(seed, &[0xE90C, epoch as u64]));
            order[pos]
        })
        .collect()
}

/// Training data held in memory.
pub struct TrainData<'a> {
    pub cases: &'a [CaseData],
    /// Normalized simulated fields.
    pub sims: &'a [Vec<f64>],
}

/// Run `total_steps` steps from a fresh state; `on_step` sees each record.
pub fn train_in_memory(
    cfg: &TrainConfig,
    data: &TrainData<'_>,
    stats: Option<NormStats>,
    mut on_step: impl FnMut(&TrainState, &MetricRecord) -> Result<()>,
) -> Result<TrainState> {
    if data.cases.is_empty() {
        return Err(Error::InvalidArgument("no training cases".into()));
    }
    if cfg.regularizer_mode == RegularizerMode::Adversarial && data.sims.is_empty() {
        return Err(Error::Config("adversarial mode requires simulated fields".into()));
    }
    let grid = *data.cases[0].grid();
    if grid.shape() != cfg.grid_shape {
        return Err(Error::GridMismatch(format!("cases are {:?}, config expects {:?}", grid.shape(), cfg.grid_shape)));
    }
    let ranges = cfg.augment_ranges(&grid);
    let mut state = TrainState::new(cfg, stats)?;
    for step in 0..cfg.total_steps {
        let idx = batch_indices(cfg.seed, step, cfg.batch_size, data.cases.len());
        let pairs: Vec<TrainPair> = idx
            .iter()
            .enumerate()
            .map(|(b, &i)| augment_case(&data.cases[i], &ranges, derive_seed(cfg.seed, &[0xA06, step as u64, b as u64])))
            .collect::<Result<_>>()?;
        let mut rng = rng_for(cfg.seed, &[0x51, step as u64]);
        let sims: Vec<&[f64]> = if cfg.regularizer_mode == RegularizerMode::Adversarial {
            (0..cfg.batch_size).map(|_| data.sims[rng.gen_range(0..data.sims.len())].as_slice()).collect()
        } else {
            Vec::new()
        };
        let rec = train_step(&mut state, &pairs, &sims)?;
        on_step(&state, &rec)?;
    }
    Ok(state)
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<MetricRecord>,
    pub written: Vec<PathBuf>,
}

/// Load datasets named by `cfg`, train, and write checkpoints plus the
/// metrics log under `out_dir`.
pub fn train(cfg: &TrainConfig, out_dir: &Path, force: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut cases = load_cases(&cfg.data_dir)?;
    if !cfg.train_cases.is_empty() {
        for id in &cfg.train_cases {
            if !cases.iter().any(|c| &c.id == id) {
                return Err(Error::Config(format!("training case '{id}' not in {}", cfg.data_dir.display())));
            }
        }
        cases.retain(|c| cfg.train_cases.contains(&c.id));
    }
    let (sims, stats) = match (&cfg.sim_dir, cfg.regularizer_mode) {
        (Some(dir), RegularizerMode::Adversarial) => {
            let (fields, stats) = load_sims(dir)?;
            let grid = *cases.first().ok_or_else(|| Error::InvalidArgument("no training cases".into()))?.grid();
            for f in &fields {
                f.grid().ensure_same(&grid, "simulated field")?;
            }
            (fields.iter().map(|f| stats.normalize(f)).collect::<Vec<_>>(), Some(stats))
        }
        _ => (Vec::new(), None),
    };

    crate::dataset::ensure_writable(out_dir, "checkpoint", force)?;
    let cfg_path = out_dir.join("config");
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    let log_path = out_dir.join("metrics.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut written = vec![cfg_path, log_path.clone()];
    let cfg_hash = text_hash(&cfg.to_text());
    let state = train_in_memory(cfg, &TrainData { cases: &cases, sims: &sims }, stats, |st, rec| {
        writeln!(log, "{}", rec.to_line()).map_err(|e| Error::io(&log_path, e))?;
        if cfg.checkpoint_every > 0 && st.step % cfg.checkpoint_every == 0 && st.step < cfg.total_steps {
            let p = out_dir.join(format!("checkpoint-{:06}", st.step));
            st.checkpoint().save(&p, &cfg_hash)?;
            written.push(p);
        }
        Ok(())
    })?;
    let ckpt = state.checkpoint();
    let p = out_dir.join("checkpoint");
    ckpt.save(&p, &cfg_hash)?;
    written.push(p);
    Ok(TrainOutcome { checkpoint: ckpt, log: state.log, written })
}

const CHECKPOINT_MAGIC: &str = "advreg-checkpoint 1";

/// Trained parameters with the specs and seeds needed to rebuild them.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub reg: RegNet,
    pub disc: Option<DiscNet>,
    pub stats: Option<NormStats>,
    pub step: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    net: String,
    name: String,
    shape: [usize; 5],
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    reg_spec: RegNetSpec,
    reg_seed: u64,
    disc_spec: Option<DiscNetSpec>,
    disc_seed: Option<u64>,
    norm_stats: Option<NormStats>,
    step: usize,
    config_hash: String,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// Text header line, JSON metadata line, then raw little-endian `f64`
    /// tensor data in header order.
    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        let mut push = |net: &str, p: &ParamSet| {
            for (name, t) in p.iter() {
                tensors.push(TensorEntry { net: net.into(), name: name.into(), shape: t.shape() });
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        };
        push("reg", self.reg.params());
        if let Some(d) = &self.disc {
            push("disc", d.params());
        }
        let header = CheckpointHeader {
            reg_spec: *self.reg.spec(),
            reg_seed: self.reg.seed(),
            disc_spec: self.disc.as_ref().map(|d| *d.spec()),
            disc_seed: self.disc.as_ref().map(|d| d.seed()),
            norm_stats: self.stats,
            step: self.step,
            config_hash: config_hash.into(),
            tensors,
        };
        let json = serde_json::to_string(&header).map_err(|e| Error::Format { path: path.into(), reason: e.to_string() })?;
        let mut bytes = format!("{CHECKPOINT_MAGIC}\n{json}\n").into_bytes();
        bytes.extend_from_slice(&payload);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |r: String| Error::Format { path: path.to_path_buf(), reason: r };
        let mut lines = bytes.splitn(3, |b| *b == b'\n');
        if lines.next() != Some(CHECKPOINT_MAGIC.as_bytes()) {
            return Err(bad("not a checkpoint file".into()));
        }
        let json = lines.next().ok_or_else(|| bad("missing header".into()))?;
        let payload = lines.next().unwrap_or(&[]);
        let h: CheckpointHeader = serde_json::from_slice(json).map_err(|e| bad(e.to_string()))?;
        let mut reg = build_regnet(h.reg_spec, h.reg_seed)?;
        let mut disc = match (h.disc_spec, h.disc_seed) {
            (Some(s), Some(seed)) => Some(build_discriminator(s, seed)?),
            _ => None,
        };
        let mut reg_p = ParamSet::new();
        let mut disc_p = ParamSet::new();
        let mut off = 0usize;
        for e in &h.tensors {
            let n: usize = e.shape.iter().product();
            let end = off + 8 * n;
            let chunk = payload.get(off..end).ok_or_else(|| bad("truncated tensor data".into()))?;
            let data = chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::from_vec(e.shape, data);
            match e.net.as_str() {
                "reg" => reg_p.add(e.name.clone(), t),
                "disc" => disc_p.add(e.name.clone(), t),
                other => return Err(bad(format!("unknown network '{other}'"))),
            };
            off = end;
        }
        if off != payload.len() {
            return Err(bad("trailing bytes after tensor data".into()));
        }
        assign_params(reg.params_mut(), &reg_p)?;
        if let Some(d) = disc.as_mut() {
            assign_params(d.params_mut(), &disc_p)?;
        }
        if !reg.params().all_finite() {
            return Err(Error::NonFinite("checkpoint registration parameters".into()));
        }
        Ok(Self { reg, disc, stats: h.norm_stats, step: h.step })
    }
}

/// Inference result of [`register`].
#[derive(Debug, Clone, PartialEq)]
pub struct Registration {
    pub local: DisplacementField,
    pub affine: AffineParams,
    pub composed: DisplacementField,
    pub warped: Volume,
}

/// Register an image pair with a trained network; no labels involved.
pub fn register(net: &RegNet, moving: &Volume, fixed: &Volume) -> Result<Registration> {
    moving.grid().ensure_same(fixed.grid(), "registration inputs")?;
    if fixed.grid().shape() != net.spec().input_shape {
        return Err(Error::GridMismatch(format!(
            "images are {:?}, the network expects {:?}",
            fixed.grid().shape(),
            net.spec().input_shape
        )));
    }
    let (local, affine) = net.predict(moving, fixed)?;
    let composed = compose(&local, &affine);
    let warped = warp(moving, &composed);
    Ok(Registration { local, affine, composed, warped })
}
