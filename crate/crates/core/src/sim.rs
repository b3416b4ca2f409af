//! The regularizing deformation prior and the synthetic phantom data.
//!
//! Probe-induced gland motion is modelled by a regularized Kelvinlet (the
//! closed-form displacement of an elastic medium under a smoothed point
//! load), tapered to zero at the domain boundary. Fields are produced in
//! the resampling convention: a deformed image is `I(x + v(x))`.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{KeyValues, KvWriter};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for};
use crate::transform::{
    compose, decompose_ddf, random_affine, warp, AffineParams, AffineRanges, BBox3,
    DisplacementField,
};
use crate::volume::{centroid, gaussian_filter3, normalize_intensity, Grid3, LabelKind, LabelMap, ScalarField, Volume};

/// Poisson ratio of the (nearly incompressible) surrogate tissue.
const POISSON: f64 = 0.49;
const INVERSION_ITERS: usize = 60;

/// Closed range `[lo, hi]` in the units of its field.
pub type Range = (f64, f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub probe_radius: Range,
    pub balloon: Range,
    pub depth: Range,
    pub cone_deg: f64,
    pub semi_axes: [Range; 3],
    pub stiffness: Range,
    /// Bound on the mean squared displacement gradient of a sample.
    pub max_gradient_penalty: f64,
    /// Simulation domain: cubic grid of `sim_n` voxels at `sim_spacing` mm.
    pub sim_n: usize,
    pub sim_spacing: f64,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            probe_radius: (7.0, 10.0),
            balloon: (0.0, 5.0),
            depth: (1.0, 5.0),
            cone_deg: 20.0,
            semi_axes: [(15.0, 19.0), (11.0, 14.0), (13.0, 17.0)],
            stiffness: (1.0, 3.0),
            max_gradient_penalty: 1.0,
            sim_n: 40,
            sim_spacing: 2.5,
            seed: 0,
        }
    }
}

fn check_range(name: &str, r: Range) -> Result<()> {
    if !(r.0 >= 0.0 && r.1 >= r.0 && r.1.is_finite()) {
        return Err(Error::Config(format!("{name} range ({}, {}) must be non-negative and ordered", r.0, r.1)));
    }
    Ok(())
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        check_range("probe_radius", self.probe_radius)?;
        check_range("balloon", self.balloon)?;
        check_range("depth", self.depth)?;
        check_range("stiffness", self.stiffness)?;
        for (a, r) in self.semi_axes.iter().enumerate() {
            check_range(&format!("semi_axes[{a}]"), *r)?;
            if r.0 <= 0.0 {
                return Err(Error::Config("gland semi-axes must be positive".into()));
            }
        }
        if self.probe_radius.0 <= 0.0 {
            return Err(Error::Config("probe radius must be positive".into()));
        }
        if self.stiffness.0 <= 0.0 {
            return Err(Error::Config("stiffness contrast must be positive".into()));
        }
        if self.depth.1 > self.probe_radius.1 + self.balloon.1 {
            return Err(Error::Config(format!(
                "indentation depth {} exceeds probe radius + balloon {}",
                self.depth.1,
                self.probe_radius.1 + self.balloon.1
            )));
        }
        if !(0.0..90.0).contains(&self.cone_deg) {
            return Err(Error::Config(format!("cone angle {} must be in [0, 90)", self.cone_deg)));
        }
        if self.sim_n < 4 || !(self.sim_spacing > 0.0) {
            return Err(Error::Config("simulation grid must have at least 4 voxels and positive spacing".into()));
        }
        if !(self.max_gradient_penalty > 0.0) {
            return Err(Error::Config("max_gradient_penalty must be positive".into()));
        }
        Ok(())
    }

    pub fn sim_grid(&self) -> Result<Grid3> {
        Grid3::centered(self.sim_n, self.sim_spacing)
    }

    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let d = Self::default();
        let range = |kv: &mut KeyValues, k: &str, r: Range| -> Result<Range> {
            let a = kv.take_array(k, [r.0, r.1])?;
            Ok((a[0], a[1]))
        };
        let c = Self {
            probe_radius: range(kv, "probe_radius", d.probe_radius)?,
            balloon: range(kv, "balloon", d.balloon)?,
            depth: range(kv, "depth", d.depth)?,
            cone_deg: kv.take("cone_deg", d.cone_deg)?,
            semi_axes: [
                range(kv, "semi_axis_x", d.semi_axes[0])?,
                range(kv, "semi_axis_y", d.semi_axes[1])?,
                range(kv, "semi_axis_z", d.semi_axes[2])?,
            ],
            stiffness: range(kv, "stiffness", d.stiffness)?,
            max_gradient_penalty: kv.take("max_gradient_penalty", d.max_gradient_penalty)?,
            sim_n: kv.take("sim_n", d.sim_n)?,
            sim_spacing: kv.take("sim_spacing", d.sim_spacing)?,
            seed: kv.take("seed", d.seed)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let c = Self::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(c)
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.put_list("probe_radius", &[self.probe_radius.0, self.probe_radius.1])
            .put_list("balloon", &[self.balloon.0, self.balloon.1])
            .put_list("depth", &[self.depth.0, self.depth.1])
            .put("cone_deg", self.cone_deg)
            .put_list("semi_axis_x", &[self.semi_axes[0].0, self.semi_axes[0].1])
            .put_list("semi_axis_y", &[self.semi_axes[1].0, self.semi_axes[1].1])
            .put_list("semi_axis_z", &[self.semi_axes[2].0, self.semi_axes[2].1])
            .put_list("stiffness", &[self.stiffness.0, self.stiffness.1])
            .put("max_gradient_penalty", self.max_gradient_penalty)
            .put("sim_n", self.sim_n)
            .put("sim_spacing", self.sim_spacing)
            .put("seed", self.seed);
    }

    pub fn to_text(&self) -> String {
        let mut w = KvWriter::default();
        self.write_kv(&mut w);
        w.finish()
    }
}

/// An axis-aligned ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    /// Normalized radius: 1 on the surface.
    pub fn radius(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.semi_axes[a]).powi(2)).sum::<f64>().sqrt()
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.radius(p) <= 1.0
    }

    /// Distance from the center to the surface along unit direction `n`.
    pub fn extent_along(&self, n: [f64; 3]) -> f64 {
        1.0 / (0..3).map(|a| (n[a] / self.semi_axes[a]).powi(2)).sum::<f64>().sqrt()
    }
}

/// Parameters drawn for one simulated deformation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub gland: Ellipsoid,
    pub probe_radius: f64,
    pub balloon: f64,
    pub depth: f64,
    /// Unit push direction of the probe into the gland.
    pub direction: [f64; 3],
    pub stiffness: f64,
}

impl SimParams {
    /// Load center: behind the gland surface, along the push direction.
    pub fn contact(&self) -> [f64; 3] {
        let r = self.gland.extent_along(self.direction) + 0.5 * (self.probe_radius + self.balloon);
        std::array::from_fn(|a| self.gland.center[a] - r * self.direction[a])
    }

    pub fn regularization(&self) -> f64 {
        (self.probe_radius + self.balloon) * self.stiffness.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSample {
    pub field: DisplacementField,
    pub gland: LabelMap,
    pub seed: u64,
    pub params: SimParams,
}

fn uniform(rng: &mut ChaCha8Rng, r: Range) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.gen_range(r.0..=r.1)
    }
}

/// A random gland shape near the origin.
pub fn draw_gland(rng: &mut ChaCha8Rng, axes: &[Range; 3], jitter: f64) -> Ellipsoid {
    let semi_axes = std::array::from_fn(|a| uniform(rng, axes[a]));
    let center = std::array::from_fn(|_| uniform(rng, (-jitter, jitter)));
    Ellipsoid { center, semi_axes }
}

pub fn draw_sim_params(cfg: &SurrogateConfig, seed: u64) -> Result<SimParams> {
    cfg.validate()?;
    let mut rng = rng_for(seed, &[0x5EED]);
    let gland = draw_gland(&mut rng, &cfg.semi_axes, 2.0);
    let theta = uniform(&mut rng, (0.0, cfg.cone_deg.to_radians()));
    let phi = uniform(&mut rng, (0.0, 2.0 * std::f64::consts::PI));
    // Nominal push is anterior (+y), tilted inside the cone.
    let direction = [theta.sin() * phi.cos(), theta.cos(), theta.sin() * phi.sin()];
    Ok(SimParams {
        gland,
        probe_radius: uniform(&mut rng, cfg.probe_radius),
        balloon: uniform(&mut rng, cfg.balloon),
        depth: uniform(&mut rng, cfg.depth),
        direction,
        stiffness: uniform(&mut rng, cfg.stiffness),
    })
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Physical (forward) displacement at `p`, before tapering.
fn kelvinlet(p: [f64; 3], params: &SimParams) -> [f64; 3] {
    let x0 = params.contact();
    let eps = params.regularization();
    let a = 1.0;
    let b = a / (4.0 * (1.0 - POISSON));
    let r: [f64; 3] = std::array::from_fn(|i| p[i] - x0[i]);
    let r2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    let re = (r2 + eps * eps).sqrt();
    let re3 = re * re * re;
    let f = params.direction;
    // Normalized so the displacement at the load center equals `depth`.
    let scale = params.depth * eps / (1.5 * a - b);
    let iso = (a - b) / re + a * eps * eps / (2.0 * re3);
    let rf = r[0] * f[0] + r[1] * f[1] + r[2] * f[2];
    std::array::from_fn(|i| scale * (iso * f[i] + b / re3 * rf * r[i]))
}

fn taper(p: [f64; 3], grid: &Grid3) -> f64 {
    let (lo, hi) = grid.bounds();
    (0..3)
        .map(|a| {
            let margin = 0.25 * (hi[a] - lo[a]);
            smoothstep((p[a] - lo[a]).min(hi[a] - p[a]) / margin)
        })
        .product()
}

fn forward_displacement(p: [f64; 3], params: &SimParams, grid: &Grid3) -> [f64; 3] {
    let w = taper(p, grid);
    if w == 0.0 {
        return [0.0; 3];
    }
    kelvinlet(p, params).map(|v| v * w)
}

/// Deformation for given parameters on `grid`, inverted into the
/// resampling convention by fixed-point iteration `v = −u(x + v)`.
pub fn simulate_with_params(grid: &Grid3, params: &SimParams) -> (DisplacementField, LabelMap) {
    let n = grid.len();
    let mut u = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut inside = vec![0.0; n];
    for idx in 0..n {
        let x = grid.world_of(idx);
        let mut v = [0.0; 3];
        if params.depth > 0.0 {
            for _ in 0..INVERSION_ITERS {
                let q = [x[0] + v[0], x[1] + v[1], x[2] + v[2]];
                let f = forward_displacement(q, params, grid);
                v = [-f[0], -f[1], -f[2]];
            }
        }
        for c in 0..3 {
            u[c][idx] = v[c];
        }
        if params.gland.contains([x[0] + v[0], x[1] + v[1], x[2] + v[2]]) {
            inside[idx] = 1.0;
        }
    }
    let field = DisplacementField::from_parts(*grid, u);
    let gland = LabelMap::binary(*grid, inside, LabelKind::Gland).expect("binary mask");
    (field, gland)
}

pub fn simulate_probe_deformation(cfg: &SurrogateConfig, seed: u64) -> Result<SimSample> {
    let params = draw_sim_params(cfg, seed)?;
    let (field, gland) = simulate_with_params(&cfg.sim_grid()?, &params);
    Ok(SimSample { field, gland, seed, params })
}

/// Sample `k` of simulated patient `patient`: the gland shape is fixed per
/// patient, the probe and tissue parameters vary per sample.
pub fn simulate_patient_sample(cfg: &SurrogateConfig, base_seed: u64, patient: u64, k: u64) -> Result<SimSample> {
    let seed = derive_seed(base_seed, &[patient, k]);
    let mut params = draw_sim_params(cfg, seed)?;
    params.gland = draw_gland(&mut rng_for(base_seed, &[patient]), &cfg.semi_axes, 2.0);
    let (field, gland) = simulate_with_params(&cfg.sim_grid()?, &params);
    Ok(SimSample { field, gland, seed, params })
}

/// Per-component displacement moments of the prepared simulated set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config(format!("invalid normalization statistics {self:?}")));
        }
        Ok(())
    }

    /// Standardized field, in units of standard deviations.
    pub fn apply(&self, d: &DisplacementField) -> DisplacementField {
        let c = d.components();
        let norm = |k: usize| c[k].iter().map(|v| (v - self.mean[k]) / self.std[k]).collect::<Vec<_>>();
        DisplacementField::from_parts(*d.grid(), [norm(0), norm(1), norm(2)])
    }

    /// Flat standardized field: component blocks x, y, z.
    pub fn normalize(&self, d: &DisplacementField) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * d.grid().len());
        for c in 0..3 {
            out.extend(d.components()[c].iter().map(|v| (v - self.mean[c]) / self.std[c]));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = format!(
            "mean = {} {} {}\nstd = {} {} {}\n",
            self.mean[0], self.mean[1], self.mean[2], self.std[0], self.std[1], self.std[2]
        );
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |r: &str| Error::Format { path: path.to_path_buf(), reason: r.to_string() };
        let mut mean = None;
        let mut std = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad("expected 'key = values'"))?;
            let vals: Vec<f64> = v.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad("bad number"))?;
            let arr: [f64; 3] = vals.try_into().map_err(|_| bad("expected three values"))?;
            match k.trim() {
                "mean" => mean = Some(arr),
                "std" => std = Some(arr),
                other => return Err(bad(&format!("unknown key '{other}'"))),
            }
        }
        let s = Self { mean: mean.ok_or_else(|| bad("missing mean"))?, std: std.ok_or_else(|| bad("missing std"))? };
        s.validate()?;
        Ok(s)
    }
}

pub fn compute_norm_stats(fields: &[DisplacementField]) -> Result<NormStats> {
    if fields.len() < 2 {
        return Err(Error::InvalidArgument("normalization needs at least 2 fields".into()));
    }
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for c in 0..3 {
        let count: usize = fields.iter().map(|f| f.grid().len()).sum();
        let m = fields.iter().flat_map(|f| f.components()[c].iter()).sum::<f64>() / count as f64;
        let var = fields.iter().flat_map(|f| f.components()[c].iter()).map(|v| (v - m) * (v - m)).sum::<f64>() / count as f64;
        if !(var > 0.0) {
            return Err(Error::DegenerateIntensity);
        }
        mean[c] = m;
        std[c] = var.sqrt();
    }
    Ok(NormStats { mean, std })
}

/// `compose(resample_ddf_to_fov(d, ..), a)` with the resampled field read
/// directly from `d` at `A(x)`, so no zero padding enters at the FOV border.
fn fov_compose(d: &DisplacementField, src: &BBox3, grid: &Grid3, dst: &BBox3, a: &AffineParams) -> Result<DisplacementField> {
    let (lo, hi) = d.grid().bounds();
    if !(BBox3 { min: lo, max: hi }).contains_box(src, 1e-9) {
        return Err(Error::InvalidArgument("deformed gland box exceeds the simulated field".into()));
    }
    let ss = src.size();
    let ds = dst.size();
    let scale = [ss[0] / ds[0], ss[1] / ds[1], ss[2] / ds[2]];
    let n = grid.len();
    let mut u = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for idx in 0..n {
        let x = grid.world_of(idx);
        let y = a.apply(x);
        let z: [f64; 3] = std::array::from_fn(|k| src.min[k] + scale[k] * (y[k] - dst.min[k]));
        let v = d.sample_extrapolated(z);
        for c in 0..3 {
            u[c][idx] = y[c] - x[c] + v[c] / scale[c];
        }
    }
    Ok(DisplacementField::from_parts(*grid, u))
}

/// Resample a simulated field into an estimated fixed-image field of view,
/// augment it with a random affine and keep the affine-free local part.
/// Without `stats` the result stays in mm.
pub fn prep_sim_sample(
    s: &SimSample,
    fixed_gland_pool: &[LabelMap],
    train_grid: &Grid3,
    augment: &AffineRanges,
    seed: u64,
    stats: Option<&NormStats>,
) -> Result<DisplacementField> {
    if fixed_gland_pool.is_empty() {
        return Err(Error::InvalidArgument("empty fixed-gland pool".into()));
    }
    let mut rng = rng_for(seed, &[0xF0F]);
    let pick = &fixed_gland_pool[rng.gen_range(0..fixed_gland_pool.len())];
    let src = BBox3::of_label(&s.gland)?;
    let dst = BBox3::of_label(pick)?;
    let a = random_affine(derive_seed(seed, &[0xAFF]), augment)?;
    let augmented = fov_compose(&s.field, &src, train_grid, &dst, &a)?;
    let (_, local) = decompose_ddf(&augmented, None)?;
    Ok(match stats {
        Some(st) => st.apply(&local),
        None => local,
    })
}

/// Round every value through `f32`, the precision of the `.vol` format.
pub fn quantize(d: &DisplacementField) -> DisplacementField {
    let c = d.components();
    let q = |v: &Vec<f64>| v.iter().map(|x| *x as f32 as f64).collect::<Vec<_>>();
    DisplacementField::from_parts(*d.grid(), [q(&c[0]), q(&c[1]), q(&c[2])])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub grid_n: usize,
    pub spacing: f64,
    pub landmarks: usize,
    pub landmark_radius: f64,
    pub surrogate: SurrogateConfig,
    pub rotation_deg: f64,
    pub scale_delta: f64,
    pub shear: f64,
    pub translation: f64,
    /// Multiplicative speckle strength of the fixed image.
    pub speckle: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            grid_n: 32,
            spacing: 2.0,
            landmarks: 3,
            landmark_radius: 3.5,
            surrogate: SurrogateConfig::default(),
            rotation_deg: 10.0,
            scale_delta: 0.05,
            shear: 0.03,
            translation: 8.0,
            speckle: 0.5,
        }
    }
}

impl PhantomConfig {
    pub fn grid(&self) -> Result<Grid3> {
        Grid3::centered(self.grid_n, self.spacing)
    }

    pub fn affine_ranges(&self) -> Result<AffineRanges> {
        let g = self.grid()?;
        Ok(AffineRanges {
            rotation_deg: self.rotation_deg,
            scale_min: 1.0 - self.scale_delta,
            scale_max: 1.0 + self.scale_delta,
            shear: self.shear,
            translation: [self.translation; 3],
            center: g.center(),
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let d = Self::default();
        let c = Self {
            grid_n: kv.take("grid_n", d.grid_n)?,
            spacing: kv.take("spacing", d.spacing)?,
            landmarks: kv.take("landmarks", d.landmarks)?,
            landmark_radius: kv.take("landmark_radius", d.landmark_radius)?,
            rotation_deg: kv.take("rotation_deg", d.rotation_deg)?,
            scale_delta: kv.take("scale_delta", d.scale_delta)?,
            shear: kv.take("shear", d.shear)?,
            translation: kv.take("translation", d.translation)?,
            speckle: kv.take("speckle", d.speckle)?,
            surrogate: SurrogateConfig::from_kv(&mut kv)?,
        };
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut w = KvWriter::default();
        w.put("grid_n", self.grid_n)
            .put("spacing", self.spacing)
            .put("landmarks", self.landmarks)
            .put("landmark_radius", self.landmark_radius)
            .put("rotation_deg", self.rotation_deg)
            .put("scale_delta", self.scale_delta)
            .put("shear", self.shear)
            .put("translation", self.translation)
            .put("speckle", self.speckle);
        self.surrogate.write_kv(&mut w);
        w.finish()
    }

    pub fn validate(&self) -> Result<()> {
        self.surrogate.validate()?;
        self.grid()?;
        self.affine_ranges()?.validate()?;
        if self.landmarks < 2 {
            return Err(Error::Config("phantoms need at least 2 landmarks".into()));
        }
        if !(self.landmark_radius > 0.0) || !(self.speckle >= 0.0 && self.speckle < 1.0) {
            return Err(Error::Config("landmark radius must be positive and speckle in [0, 1)".into()));
        }
        if !(self.scale_delta >= 0.0 && self.scale_delta < 1.0) {
            return Err(Error::Config("scale_delta must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub seed: u64,
    pub moving: Volume,
    pub fixed: Volume,
    pub moving_gland: LabelMap,
    pub fixed_gland: LabelMap,
    pub moving_landmarks: Vec<LabelMap>,
    pub fixed_landmarks: Vec<LabelMap>,
    /// Ground-truth field: `fixed ≈ moving(x + truth(x))`.
    pub truth: DisplacementField,
}

const MAX_ATTEMPTS: u64 = 10;

fn smooth_noise(grid: &Grid3, rng: &mut ChaCha8Rng, sigma: f64) -> Result<Volume> {
    let white = Volume::new(*grid, (0..grid.len()).map(|_| StandardNormal.sample(rng)).collect())?;
    let s = gaussian_filter3(&white, sigma)?;
    let sd = (s.values().iter().map(|v| v * v).sum::<f64>() / s.values().len() as f64).sqrt();
    Volume::new(*grid, s.values().iter().map(|v| v / sd.max(1e-12)).collect())
}

fn blend(mask: &LabelMap, sigma: f64) -> Result<Vec<f64>> {
    Ok(gaussian_filter3(mask, sigma)?.values().to_vec())
}

fn place_landmarks(rng: &mut ChaCha8Rng, gland: &Ellipsoid, count: usize, radius: f64) -> Result<Vec<[f64; 3]>> {
    let mut pts: Vec<[f64; 3]> = Vec::with_capacity(count);
    let mut tries = 0;
    while pts.len() < count {
        tries += 1;
        if tries > 10_000 {
            return Err(Error::Degenerate("cannot place landmarks inside the gland".into()));
        }
        let u: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..=1.0));
        let r2: f64 = u.iter().map(|v| v * v).sum();
        if r2 > 0.7 * 0.7 {
            continue;
        }
        let p: [f64; 3] = std::array::from_fn(|a| gland.center[a] + u[a] * gland.semi_axes[a]);
        let far = pts.iter().all(|q| (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>().sqrt() >= 2.5 * radius);
        if far {
            pts.push(p);
        }
    }
    Ok(pts)
}

fn attempt_case(seed: u64, cfg: &PhantomConfig) -> Result<Option<PhantomCase>> {
    let grid = cfg.grid()?;
    let mut rng = rng_for(seed, &[1]);
    let gland = draw_gland(&mut rng, &cfg.surrogate.semi_axes, 2.0);
    let lm_pts = place_landmarks(&mut rng, &gland, cfg.landmarks, cfg.landmark_radius)?;

    let moving_gland = LabelMap::from_mask(grid, LabelKind::Gland, |p| gland.contains(p));
    let moving_landmarks: Vec<LabelMap> = lm_pts
        .iter()
        .map(|c| {
            LabelMap::from_mask(grid, LabelKind::Landmark, |p| {
                (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>().sqrt() <= cfg.landmark_radius
            })
        })
        .collect();

    // The surrogate acts on this case's own gland.
    let mut params = draw_sim_params(&cfg.surrogate, derive_seed(seed, &[2]))?;
    params.gland = gland;
    let (sim, _) = simulate_with_params(&grid, &params);
    let affine = random_affine(derive_seed(seed, &[3]), &cfg.affine_ranges()?)?;
    let truth = compose(&sim, &affine);

    let fixed_gland = warp(&moving_gland, &truth).binarize();
    let warped_lms: Vec<LabelMap> = moving_landmarks.iter().map(|l| warp(l, &truth)).collect();
    let fixed_landmarks: Vec<LabelMap> = warped_lms.iter().map(LabelMap::binarize).collect();
    for l in &fixed_landmarks {
        if l.sum() == 0.0 {
            return Ok(None);
        }
        let c = centroid(l)?;
        let ci = grid.continuous_index(c).map(|v| v.round() as usize);
        if ci.iter().zip(grid.shape()).any(|(i, n)| *i >= n) || fixed_gland.values()[grid.index(ci[0], ci[1], ci[2])] < 0.5 {
            return Ok(None);
        }
    }

    // MR-like moving image: bright landmarks in a textured gland.
    let tex_m = smooth_noise(&grid, &mut rng, 3.0)?;
    let g_m = blend(&moving_gland, 1.0)?;
    let mut lm_m = vec![0.0; grid.len()];
    for l in &moving_landmarks {
        for (a, b) in lm_m.iter_mut().zip(blend(l, 0.8)?) {
            *a += b;
        }
    }
    let moving_raw: Vec<f64> = (0..grid.len())
        .map(|i| 0.25 + 0.35 * g_m[i] + 0.4 * lm_m[i] + 0.06 * tex_m.values()[i])
        .collect();
    let moving = normalize_intensity(&Volume::new(grid, moving_raw)?)?;

    // TRUS-like fixed image: darker gland, hypoechoic landmarks, speckle.
    let echo_m: Vec<f64> = (0..grid.len()).map(|i| 0.55 - 0.2 * g_m[i] - 0.25 * lm_m[i]).collect();
    let echo = warp(&Volume::new(grid, echo_m)?, &truth);
    let speckle = smooth_noise(&grid, &mut rng, 0.8)?;
    let fixed_raw: Vec<f64> = echo
        .values()
        .iter()
        .zip(speckle.values())
        .map(|(e, s)| e * (1.0 + cfg.speckle * s.tanh()))
        .collect();
    let fixed = normalize_intensity(&Volume::new(grid, fixed_raw)?)?;

    Ok(Some(PhantomCase { seed, moving, fixed, moving_gland, fixed_gland, moving_landmarks, fixed_landmarks, truth }))
}

/// A synthetic moving/fixed pair with labels and its ground-truth field.
pub fn generate_phantom_case(seed: u64, cfg: &PhantomConfig) -> Result<PhantomCase> {
    cfg.validate()?;
    for attempt in 0..MAX_ATTEMPTS {
        let s = if attempt == 0 { seed } else { derive_seed(seed, &[0xA77, attempt]) };
        if let Some(mut case) = attempt_case(s, cfg)? {
            case.seed = seed;
            return Ok(case);
        }
    }
    Err(Error::Degenerate(format!("landmarks left the gland in {MAX_ATTEMPTS} attempts for seed {seed}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_depth_gives_zero_field() {
        let cfg = SurrogateConfig { depth: (0.0, 0.0), sim_n: 12, sim_spacing: 6.0, ..SurrogateConfig::default() };
        let s = simulate_probe_deformation(&cfg, 4).unwrap();
        assert_eq!(s.field, DisplacementField::zeros(*s.field.grid()));
    }

    #[test]
    fn displacement_bounded_by_depth() {
        let cfg = SurrogateConfig { sim_n: 16, sim_spacing: 6.0, ..SurrogateConfig::default() };
        for seed in 0..3 {
            let s = simulate_probe_deformation(&cfg, seed).unwrap();
            assert!(s.field.max_magnitude() <= 1.5 * s.params.depth + 1e-12);
            assert!(s.field.max_magnitude() > 0.0);
        }
    }

    #[test]
    fn configs_round_trip_as_text() {
        let mut c = PhantomConfig::default();
        c.surrogate.depth = (0.5, 2.25);
        c.speckle = 0.3;
        assert_eq!(PhantomConfig::parse(&c.to_text()).unwrap(), c);
        let s = SurrogateConfig { seed: 9, ..SurrogateConfig::default() };
        assert_eq!(SurrogateConfig::parse(&s.to_text()).unwrap(), s);
        assert!(SurrogateConfig::parse("depth = 1 50").is_err());
        assert!(SurrogateConfig::parse("bogus = 1").is_err());
    }

    #[test]
    fn norm_stats_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("norm_stats");
        let s = NormStats { mean: [0.1, -0.25, 1e-9], std: [1.5, 0.3, 2.0 / 3.0] };
        s.save(&p).unwrap();
        assert_eq!(NormStats::load(&p).unwrap(), s);
    }
}
