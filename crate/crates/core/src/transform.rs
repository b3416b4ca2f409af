//! Dense displacement fields, affine transforms and the geometric operators
//! that act on them.
//!
//! Fields follow the resampling convention: warping an image `I` by `u`
//! produces `out(x) = I(x + u(x))`. Composition is local-first: warping by
//! `compose(local, A)` equals warping by `local` and then by `A`.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::volume::{stencil_extrapolate, stencil_from_index, stencil_zero, Grid3, LabelMap, ScalarField, Stencil};

/// Three-component displacement (mm) per voxel, stored as three full
/// component blocks (x, y, z).
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    grid: Grid3,
    u: [Vec<f64>; 3],
}

impl DisplacementField {
    pub fn new(grid: Grid3, u: [Vec<f64>; 3]) -> Result<Self> {
        if u.iter().any(|c| c.len() != grid.len()) {
            return Err(Error::GridMismatch("field components must match the grid".into()));
        }
        if u.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("displacement field".into()));
        }
        Ok(Self { grid, u })
    }

    pub fn zeros(grid: Grid3) -> Self {
        let n = grid.len();
        Self { grid, u: [vec![0.0; n], vec![0.0; n], vec![0.0; n]] }
    }

    pub fn from_fn(grid: Grid3, f: impl Fn([f64; 3]) -> [f64; 3]) -> Self {
        let n = grid.len();
        let mut u = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for idx in 0..n {
            let v = f(grid.world_of(idx));
            u[0][idx] = v[0];
            u[1][idx] = v[1];
            u[2][idx] = v[2];
        }
        Self { grid, u }
    }

    /// Unchecked constructor for values produced internally.
    pub(crate) fn from_parts(grid: Grid3, u: [Vec<f64>; 3]) -> Self {
        Self { grid, u }
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    pub fn components(&self) -> &[Vec<f64>; 3] {
        &self.u
    }

    pub fn into_components(self) -> [Vec<f64>; 3] {
        self.u
    }

    #[inline]
    pub fn at(&self, idx: usize) -> [f64; 3] {
        [self.u[0][idx], self.u[1][idx], self.u[2][idx]]
    }

    pub fn max_magnitude(&self) -> f64 {
        (0..self.grid.len())
            .map(|i| {
                let v = self.at(i);
                (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
            })
            .fold(0.0, f64::max)
    }

    pub fn mean_magnitude(&self) -> f64 {
        let n = self.grid.len();
        (0..n)
            .map(|i| {
                let v = self.at(i);
                (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
            })
            .sum::<f64>()
            / n as f64
    }

    /// Component-wise zero-padded trilinear sample at a world point.
    pub fn sample(&self, p: [f64; 3]) -> [f64; 3] {
        let st = stencil_zero(&self.grid, p);
        [st.sample(&self.u[0]), st.sample(&self.u[1]), st.sample(&self.u[2])]
    }

    /// Sample with linear extrapolation beyond the grid.
    pub fn sample_extrapolated(&self, p: [f64; 3]) -> [f64; 3] {
        let st = stencil_extrapolate(&self.grid, p);
        [st.sample(&self.u[0]), st.sample(&self.u[1]), st.sample(&self.u[2])]
    }

    pub fn scaled(&self, s: f64) -> Self {
        let u = [0, 1, 2].map(|c| self.u[c].iter().map(|v| v * s).collect());
        Self { grid: self.grid, u }
    }
}

/// `A(x) = L x + t` in world coordinates (mm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub l: [[f64; 3]; 3],
    pub t: [f64; 3],
}

const MAX_CONDITION: f64 = 1e6;

impl AffineParams {
    pub fn identity() -> Self {
        Self { l: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], t: [0.0; 3] }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self { t, ..Self::identity() }
    }

    /// Checked constructor enforcing `det(L) > 0` and a bounded condition
    /// number.
    pub fn new(l: [[f64; 3]; 3], t: [f64; 3]) -> Result<Self> {
        let a = Self { l, t };
        a.validate()?;
        Ok(a)
    }

    /// Row-major `L` followed by `t`.
    pub fn from_array(p: &[f64; 12]) -> Self {
        Self {
            l: [[p[0], p[1], p[2]], [p[3], p[4], p[5]], [p[6], p[7], p[8]]],
            t: [p[9], p[10], p[11]],
        }
    }

    pub fn to_array(&self) -> [f64; 12] {
        let l = &self.l;
        [
            l[0][0], l[0][1], l[0][2], l[1][0], l[1][1], l[1][2], l[2][0], l[2][1], l[2][2], self.t[0], self.t[1],
            self.t[2],
        ]
    }

    fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.l[r][c])
    }

    pub fn det(&self) -> f64 {
        self.matrix().determinant()
    }

    pub fn condition_number(&self) -> f64 {
        let sv = self.matrix().singular_values();
        let lo = sv.min();
        if lo <= 0.0 {
            f64::INFINITY
        } else {
            sv.max() / lo
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_array().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidAffine("non-finite parameters".into()));
        }
        let det = self.det();
        if !(det > 0.0) {
            return Err(Error::InvalidAffine(format!("determinant {det} is not positive")));
        }
        let cond = self.condition_number();
        if !(cond < MAX_CONDITION) {
            return Err(Error::InvalidAffine(format!("condition number {cond:e} too large")));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let l = &self.l;
        [
            l[0][0] * p[0] + l[0][1] * p[1] + l[0][2] * p[2] + self.t[0],
            l[1][0] * p[0] + l[1][1] * p[1] + l[1][2] * p[2] + self.t[1],
            l[2][0] * p[0] + l[2][1] * p[1] + l[2][2] * p[2] + self.t[2],
        ]
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .matrix()
            .try_inverse()
            .ok_or_else(|| Error::InvalidAffine("singular linear part".into()))?;
        let t = -(inv * Vector3::from(self.t));
        Ok(Self { l: std::array::from_fn(|r| std::array::from_fn(|c| inv[(r, c)])), t: [t[0], t[1], t[2]] })
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn after(&self, inner: &AffineParams) -> Self {
        let m = self.matrix() * inner.matrix();
        let t = self.matrix() * Vector3::from(inner.t) + Vector3::from(self.t);
        Self { l: std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)])), t: [t[0], t[1], t[2]] }
    }

    pub fn max_abs_diff(&self, other: &AffineParams) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Axis-aligned box in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox3 {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl BBox3 {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        if (0..3).any(|a| !(max[a] > min[a])) {
            return Err(Error::InvalidArgument(format!("degenerate bounding box {min:?}..{max:?}")));
        }
        Ok(Self { min, max })
    }

    /// Box around the voxels of `l` at or above 0.5.
    pub fn of_label(l: &LabelMap) -> Result<Self> {
        let (lo, hi) = l.bbox().ok_or(Error::EmptyLabel)?;
        Self::new(lo, hi)
    }

    pub fn size(&self) -> [f64; 3] {
        [self.max[0] - self.min[0], self.max[1] - self.min[1], self.max[2] - self.min[2]]
    }

    pub fn contains_box(&self, other: &BBox3, tol: f64) -> bool {
        (0..3).all(|a| other.min[a] >= self.min[a] - tol && other.max[a] <= self.max[a] + tol)
    }
}

#[inline]
fn grid_point_stencil(img_grid: &Grid3, out_grid: &Grid3, idx: usize, u: [f64; 3]) -> Stencil {
    if img_grid == out_grid {
        // Stay in index space so an all-zero field reproduces the input exactly.
        let [i, j, k] = out_grid.ijk(idx);
        let sp = out_grid.spacing();
        let c = [i as f64 + u[0] / sp[0], j as f64 + u[1] / sp[1], k as f64 + u[2] / sp[2]];
        stencil_from_index(img_grid, c, false)
    } else {
        let x = out_grid.world_of(idx);
        stencil_zero(img_grid, [x[0] + u[0], x[1] + u[1], x[2] + u[2]])
    }
}

/// Warp `img` by `d`: `out(x) = img(x + u(x))`, trilinear, zero outside the
/// image. The output lives on `d`'s grid.
pub fn warp<F: ScalarField>(img: &F, d: &DisplacementField) -> F {
    let og = d.grid;
    let ig = *img.grid();
    let vals = img.values();
    let out = (0..og.len()).map(|idx| grid_point_stencil(&ig, &og, idx, d.at(idx)).sample(vals)).collect();
    img.rebuild(og, out)
}

/// [`warp`] onto an explicitly requested output grid.
pub fn warp_to<F: ScalarField>(img: &F, d: &DisplacementField, out_grid: &Grid3) -> Result<F> {
    d.grid.ensure_same(out_grid, "warp output grid")?;
    Ok(warp(img, d))
}

/// Adjoint of [`warp`]: returns the gradient with respect to the image
/// values and to the three displacement components given `grad_out`.
pub fn warp_backward<F: ScalarField>(img: &F, d: &DisplacementField, grad_out: &[f64]) -> (Vec<f64>, [Vec<f64>; 3]) {
    let og = d.grid;
    let ig = *img.grid();
    let vals = img.values();
    let n = og.len();
    let mut g_img = vec![0.0; ig.len()];
    let mut g_u = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for idx in 0..n {
        let go = grad_out[idx];
        if go == 0.0 {
            continue;
        }
        let st = grid_point_stencil(&ig, &og, idx, d.at(idx));
        for c in 0..st.n {
            g_img[st.idx[c]] += go * st.w[c];
        }
        let gp = st.gradient(vals);
        g_u[0][idx] = go * gp[0];
        g_u[1][idx] = go * gp[1];
        g_u[2][idx] = go * gp[2];
    }
    (g_img, g_u)
}

/// Dense field of an affine transform: `u(x) = A(x) - x`.
pub fn affine_to_ddf(a: &AffineParams, g: &Grid3) -> DisplacementField {
    let n = g.len();
    let mut u = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for idx in 0..n {
        let x = g.world_of(idx);
        let y = a.apply(x);
        for c in 0..3 {
            u[c][idx] = y[c] - x[c];
        }
    }
    DisplacementField { grid: *g, u }
}

/// Field equivalent to warping by `local` and then by `global`:
/// `u(x) = A(x) - x + local(A(x))`, with `local` zero outside its grid.
pub fn compose(local: &DisplacementField, global: &AffineParams) -> DisplacementField {
    if global.is_identity() {
        return local.clone();
    }
    let g = local.grid;
    let n = g.len();
    let mut u = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for idx in 0..n {
        let x = g.world_of(idx);
        let y = global.apply(x);
        let st = stencil_zero(&g, y);
        for c in 0..3 {
            u[c][idx] = (y[c] - x[c]) + st.sample(&local.u[c]);
        }
    }
    DisplacementField { grid: g, u }
}

/// Adjoint of [`compose`]: gradients with respect to the local field and
/// to the twelve affine parameters (row-major `L`, then `t`).
pub fn compose_backward(
    local: &DisplacementField,
    global: &AffineParams,
    grad_out: &[Vec<f64>; 3],
) -> ([Vec<f64>; 3], [f64; 12]) {
    let g = local.grid;
    let n = g.len();
    let mut g_local = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut g_aff = [0.0; 12];
    for idx in 0..n {
        let go = [grad_out[0][idx], grad_out[1][idx], grad_out[2][idx]];
        if go == [0.0; 3] {
            continue;
        }
        let x = g.world_of(idx);
        let y = global.apply(x);
        let st = stencil_zero(&g, y);
        for c in 0..3 {
            for k in 0..st.n {
                g_local[c][st.idx[k]] += go[c] * st.w[k];
            }
        }
        // J = I + d local / d y, and du_c / dA_{r,s} = J_{c,r} x_s.
        let mut jt_go = go;
        for c in 0..3 {
            let dl = st.gradient(&local.u[c]);
            for r in 0..3 {
                jt_go[r] += go[c] * dl[r];
            }
        }
        for r in 0..3 {
            for s in 0..3 {
                g_aff[3 * r + s] += jt_go[r] * x[s];
            }
            g_aff[9 + r] += jt_go[r];
        }
    }
    (g_local, g_aff)
}

/// Result of a least-squares affine fit.
#[derive(Debug, Clone, Copy)]
pub struct AffineFit {
    pub affine: AffineParams,
    /// Sum of squared residuals `Σ w ‖A(p1) − p0‖²`.
    pub residual: f64,
}

/// Affine `A` minimizing `Σ ‖A(p1_i) − p0_i‖²`.
pub fn fit_affine_lsq(p0: &[[f64; 3]], p1: &[[f64; 3]]) -> Result<AffineFit> {
    fit_affine_weighted(p0, p1, None)
}

/// Weighted normal equations, solved after centring both point sets.
pub(crate) fn fit_affine_weighted(p0: &[[f64; 3]], p1: &[[f64; 3]], w: Option<&[f64]>) -> Result<AffineFit> {
    if p0.len() != p1.len() {
        return Err(Error::InvalidArgument(format!("point counts differ: {} vs {}", p0.len(), p1.len())));
    }
    let weight = |i: usize| w.map_or(1.0, |w| w[i]);
    let support = (0..p0.len()).filter(|&i| weight(i) > 0.0).count();
    if support < 4 {
        return Err(Error::Degenerate(format!("need at least 4 weighted point pairs, got {support}")));
    }
    let mut sw = 0.0;
    let mut m0 = [0.0; 3];
    let mut m1 = [0.0; 3];
    for i in 0..p0.len() {
        let wi = weight(i);
        if wi == 0.0 {
            continue;
        }
        sw += wi;
        for a in 0..3 {
            m0[a] += wi * p0[i][a];
            m1[a] += wi * p1[i][a];
        }
    }
    for a in 0..3 {
        m0[a] /= sw;
        m1[a] /= sw;
    }
    let mut c11 = Matrix3::<f64>::zeros();
    let mut c01 = Matrix3::<f64>::zeros();
    for i in 0..p0.len() {
        let wi = weight(i);
        if wi == 0.0 {
            continue;
        }
        let q1 = Vector3::new(p1[i][0] - m1[0], p1[i][1] - m1[1], p1[i][2] - m1[2]);
        let q0 = Vector3::new(p0[i][0] - m0[0], p0[i][1] - m0[1], p0[i][2] - m0[2]);
        c11 += wi * q1 * q1.transpose();
        c01 += wi * q0 * q1.transpose();
    }
    let eig = c11.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if !(hi > 0.0) || lo <= 1e-12 * hi {
        return Err(Error::Degenerate("point set is coplanar or collinear (rank-deficient normal matrix)".into()));
    }
    let inv = c11
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("normal matrix is singular".into()))?;
    let l = c01 * inv;
    let t = Vector3::from(m0) - l * Vector3::from(m1);
    let affine = AffineParams {
        l: std::array::from_fn(|r| std::array::from_fn(|c| l[(r, c)])),
        t: [t[0], t[1], t[2]],
    };
    let mut residual = 0.0;
    for i in 0..p0.len() {
        let wi = weight(i);
        if wi == 0.0 {
            continue;
        }
        let y = affine.apply(p1[i]);
        residual += wi * ((y[0] - p0[i][0]).powi(2) + (y[1] - p0[i][1]).powi(2) + (y[2] - p0[i][2]).powi(2));
    }
    Ok(AffineFit { affine, residual })
}

fn support_weights(g: &Grid3, support: Option<&LabelMap>) -> Result<Option<Vec<f64>>> {
    match support {
        None => Ok(None),
        Some(l) => {
            g.ensure_same(l.grid(), "decomposition support")?;
            Ok(Some(l.values().to_vec()))
        }
    }
}

/// Best-fit affine of a field over its grid: fits `A` to the pairs
/// `(x, x + u(x))`.
pub fn best_fit_affine(d: &DisplacementField, support: Option<&LabelMap>) -> Result<AffineFit> {
    let g = d.grid;
    let w = support_weights(&g, support)?;
    let p1: Vec<[f64; 3]> = (0..g.len()).map(|i| g.world_of(i)).collect();
    let p0: Vec<[f64; 3]> = p1
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let u = d.at(i);
            [x[0] + u[0], x[1] + u[1], x[2] + u[2]]
        })
        .collect();
    fit_affine_weighted(&p0, &p1, w.as_deref())
}

/// Local field that, composed with `a`, reproduces `d`:
/// `local(y) = A⁻¹(y) + u(A⁻¹(y)) − y`, sampling `u` with linear
/// extrapolation.
fn local_given_affine(d: &DisplacementField, a: &AffineParams) -> Result<DisplacementField> {
    let inv = a.inverse()?;
    let g = d.grid;
    let n = g.len();
    let mut u = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for idx in 0..n {
        let y = g.world_of(idx);
        let z = inv.apply(y);
        let uz = d.sample_extrapolated(z);
        for c in 0..3 {
            u[c][idx] = (z[c] - y[c]) + uz[c];
        }
    }
    Ok(DisplacementField { grid: g, u })
}

const DECOMPOSE_MAX_ITERS: usize = 50;
const DECOMPOSE_TOL: f64 = 1e-13;

/// Split a field into a global affine and an affine-free local remainder
/// with `compose(local, affine) ≈ d`.
///
/// The local part is re-expressed on the grid after the affine, so the
/// affine is refined until the local part's own best fit is the identity.
pub fn decompose_ddf(d: &DisplacementField, support: Option<&LabelMap>) -> Result<(AffineParams, DisplacementField)> {
    let mut a = best_fit_affine(d, support)?.affine;
    a.validate()?;
    let mut local = local_given_affine(d, &a)?;
    for _ in 0..DECOMPOSE_MAX_ITERS {
        let b = best_fit_affine(&local, support)?.affine;
        if b.max_abs_diff(&AffineParams::identity()) < DECOMPOSE_TOL {
            break;
        }
        a = b.after(&a);
        a.validate()?;
        local = local_given_affine(d, &a)?;
    }
    Ok((a, local))
}

/// Re-express `d` inside a destination field of view.
///
/// `C` maps `dst_bbox` onto `src_bbox` by per-axis scale and shift; the
/// output is `Λ⁻¹ u(C(x))` on `dst_grid`, where `Λ` is `C`'s scale.
pub fn resample_ddf_to_fov(
    d: &DisplacementField,
    src_bbox: &BBox3,
    dst_grid: &Grid3,
    dst_bbox: &BBox3,
) -> Result<DisplacementField> {
    BBox3::new(src_bbox.min, src_bbox.max)?;
    BBox3::new(dst_bbox.min, dst_bbox.max)?;
    let (lo, hi) = d.grid.bounds();
    let extent = BBox3 { min: lo, max: hi };
    if !extent.contains_box(src_bbox, 1e-9) {
        return Err(Error::InvalidArgument(format!(
            "source box {:?}..{:?} exceeds the field extent {lo:?}..{hi:?}",
            src_bbox.min, src_bbox.max
        )));
    }
    let ss = src_bbox.size();
    let ds = dst_bbox.size();
    let scale = [ss[0] / ds[0], ss[1] / ds[1], ss[2] / ds[2]];
    let n = dst_grid.len();
    let mut u = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for idx in 0..n {
        let x = dst_grid.world_of(idx);
        let y: [f64; 3] = std::array::from_fn(|a| src_bbox.min[a] + scale[a] * (x[a] - dst_bbox.min[a]));
        let v = d.sample(y);
        for c in 0..3 {
            u[c][idx] = v[c] / scale[c];
        }
    }
    Ok(DisplacementField { grid: *dst_grid, u })
}

/// Sampling ranges for random affine augmentation, centred on `center`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineRanges {
    /// Maximum absolute rotation about each axis, degrees.
    pub rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Maximum absolute shear coefficient.
    pub shear: f64,
    /// Maximum absolute translation per axis, mm.
    pub translation: [f64; 3],
    pub center: [f64; 3],
}

impl AffineRanges {
    /// ±10° rotation, scale in [0.9, 1.1], ±0.05 shear, ±5% of the extent.
    pub fn default_for(grid: &Grid3) -> Self {
        let e = grid.extent();
        Self {
            rotation_deg: 10.0,
            scale_min: 0.9,
            scale_max: 1.1,
            shear: 0.05,
            translation: [0.05 * e[0], 0.05 * e[1], 0.05 * e[2]],
            center: grid.center(),
        }
    }

    pub fn identity_at(center: [f64; 3]) -> Self {
        Self { rotation_deg: 0.0, scale_min: 1.0, scale_max: 1.0, shear: 0.0, translation: [0.0; 3], center }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.rotation_deg >= 0.0 && self.rotation_deg < 90.0) {
            return bad(format!("rotation range {} must be in [0, 90) degrees", self.rotation_deg));
        }
        if !(self.scale_min > 0.0) {
            return bad(format!("scale_min {} admits non-positive determinants", self.scale_min));
        }
        if !(self.scale_max >= self.scale_min) || self.scale_max / self.scale_min > 100.0 {
            return bad(format!("scale range [{}, {}] is invalid", self.scale_min, self.scale_max));
        }
        if !(self.shear >= 0.0 && self.shear <= 0.5) {
            return bad(format!("shear range {} must be in [0, 0.5]", self.shear));
        }
        if self.translation.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
            return bad("translation ranges must be non-negative".into());
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Seeded random affine: rotation · scale · shear about `ranges.center`,
/// plus a translation.
pub fn random_affine(seed: u64, ranges: &AffineRanges) -> Result<AffineParams> {
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = ranges.rotation_deg.to_radians();
    let ang: [f64; 3] = std::array::from_fn(|_| uniform(&mut rng, -r, r));
    let sc: [f64; 3] = std::array::from_fn(|_| uniform(&mut rng, ranges.scale_min, ranges.scale_max));
    let sh: [f64; 3] = std::array::from_fn(|_| uniform(&mut rng, -ranges.shear, ranges.shear));
    let tr: [f64; 3] = std::array::from_fn(|a| uniform(&mut rng, -ranges.translation[a], ranges.translation[a]));

    let (sx, cx) = ang[0].sin_cos();
    let (sy, cy) = ang[1].sin_cos();
    let (sz, cz) = ang[2].sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
    let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rz = Matrix3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0);
    let s = Matrix3::from_diagonal(&Vector3::from(sc));
    let h = Matrix3::new(1.0, sh[0], sh[1], 0.0, 1.0, sh[2], 0.0, 0.0, 1.0);
    let l = rz * ry * rx * s * h;
    let c = Vector3::from(ranges.center);
    let t = c + Vector3::from(tr) - l * c;
    AffineParams::new(std::array::from_fn(|i| std::array::from_fn(|j| l[(i, j)])), [t[0], t[1], t[2]])
}
