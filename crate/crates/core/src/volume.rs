//! Voxel grids, scalar volumes, label maps and the resampling/filtering
//! primitives every other module builds on.
//!
//! Arrays are stored with x varying fastest: the flat index of voxel
//! `(i, j, k)` is `(k * ny + j) * nx + i`. The world position of that voxel
//! is `origin + (i, j, k) * spacing`, in millimetres.

use crate::error::{Error, Result};

/// Shape, spacing and origin of a regular 3D lattice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid3 {
    shape: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
}

impl Grid3 {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if shape.iter().any(|&n| n < 2) {
            return Err(Error::InvalidGrid(format!("every axis needs at least 2 voxels, got {shape:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidGrid(format!("spacing must be positive, got {spacing:?}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid(format!("origin must be finite, got {origin:?}")));
        }
        Ok(Self { shape, spacing, origin })
    }

    /// Isotropic grid whose centre voxel position sits at the world origin.
    pub fn centered(n: usize, spacing: f64) -> Result<Self> {
        let o = -0.5 * (n as f64 - 1.0) * spacing;
        Self::new([n; 3], [spacing; 3], [o; 3])
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.shape[1] + j) * self.shape[0] + i
    }

    #[inline]
    pub fn ijk(&self, idx: usize) -> [usize; 3] {
        let nx = self.shape[0];
        let ny = self.shape[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    #[inline]
    pub fn world(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        ]
    }

    #[inline]
    pub fn world_of(&self, idx: usize) -> [f64; 3] {
        let [i, j, k] = self.ijk(idx);
        self.world(i, j, k)
    }

    /// Continuous voxel coordinates of a world point.
    #[inline]
    pub fn continuous_index(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// World positions of the first and last voxel along each axis.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let hi = self.world(self.shape[0] - 1, self.shape[1] - 1, self.shape[2] - 1);
        (self.origin, hi)
    }

    /// Physical extent covered by the voxels (count times spacing).
    pub fn extent(&self) -> [f64; 3] {
        [
            self.shape[0] as f64 * self.spacing[0],
            self.shape[1] as f64 * self.spacing[1],
            self.shape[2] as f64 * self.spacing[2],
        ]
    }

    pub fn center(&self) -> [f64; 3] {
        let (lo, hi) = self.bounds();
        [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])]
    }

    pub fn with_origin(&self, origin: [f64; 3]) -> Result<Self> {
        Self::new(self.shape, self.spacing, origin)
    }

    pub fn ensure_same(&self, other: &Grid3, what: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!("{what}: {self:?} vs {other:?}")))
        }
    }
}

/// Common access to grid-backed scalar fields.
pub trait ScalarField: Sized {
    fn grid(&self) -> &Grid3;
    fn values(&self) -> &[f64];
    /// Same kind of field on `grid` with new values.
    fn rebuild(&self, grid: Grid3, values: Vec<f64>) -> Self;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: Grid3,
    values: Vec<f64>,
}

impl Volume {
    pub fn new(grid: Grid3, values: Vec<f64>) -> Result<Self> {
        check_len(&grid, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid3) -> Self {
        Self { values: vec![0.0; grid.len()], grid }
    }

    pub fn from_fn(grid: Grid3, f: impl Fn([f64; 3]) -> f64) -> Self {
        let values = (0..grid.len()).map(|i| f(grid.world_of(i))).collect();
        Self { grid, values }
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

impl ScalarField for Volume {
    fn grid(&self) -> &Grid3 {
        &self.grid
    }
    fn values(&self) -> &[f64] {
        &self.values
    }
    fn rebuild(&self, grid: Grid3, values: Vec<f64>) -> Self {
        Self { grid, values }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    Gland,
    Landmark,
}

impl LabelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LabelKind::Gland => "gland",
            LabelKind::Landmark => "landmark",
        }
    }
}

/// Soft or binary label on a grid; values live in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    grid: Grid3,
    values: Vec<f64>,
    kind: LabelKind,
}

impl LabelMap {
    /// Binary label: every value must be exactly 0 or 1, and landmarks must
    /// have support.
    pub fn binary(grid: Grid3, values: Vec<f64>, kind: LabelKind) -> Result<Self> {
        check_len(&grid, values.len())?;
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument("binary label values must be 0 or 1".into()));
        }
        if kind == LabelKind::Landmark && values.iter().all(|&v| v == 0.0) {
            return Err(Error::EmptyLabel);
        }
        Ok(Self { grid, values, kind })
    }

    pub fn soft(grid: Grid3, values: Vec<f64>, kind: LabelKind) -> Result<Self> {
        check_len(&grid, values.len())?;
        if values.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument("label values must lie in [0, 1]".into()));
        }
        Ok(Self { grid, values, kind })
    }

    pub fn from_mask(grid: Grid3, kind: LabelKind, inside: impl Fn([f64; 3]) -> bool) -> Self {
        let values = (0..grid.len())
            .map(|i| if inside(grid.world_of(i)) { 1.0 } else { 0.0 })
            .collect();
        Self { grid, values, kind }
    }

    pub fn kind(&self) -> LabelKind {
        self.kind
    }

    /// Threshold at 0.5 (inclusive).
    pub fn binarize(&self) -> LabelMap {
        let values = self.values.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
        LabelMap { grid: self.grid, values, kind: self.kind }
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// World-space bounding box of voxels with value >= 0.5.
    pub fn bbox(&self) -> Option<([f64; 3], [f64; 3])> {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        let mut any = false;
        for (idx, &v) in self.values.iter().enumerate() {
            if v >= 0.5 {
                any = true;
                let p = self.grid.world_of(idx);
                for a in 0..3 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            }
        }
        any.then_some((lo, hi))
    }
}

impl ScalarField for LabelMap {
    fn grid(&self) -> &Grid3 {
        &self.grid
    }
    fn values(&self) -> &[f64] {
        &self.values
    }
    fn rebuild(&self, grid: Grid3, values: Vec<f64>) -> Self {
        Self { grid, values, kind: self.kind }
    }
}

fn check_len(grid: &Grid3, n: usize) -> Result<()> {
    if n != grid.len() {
        return Err(Error::GridMismatch(format!(
            "value count {n} does not match grid of {} voxels",
            grid.len()
        )));
    }
    Ok(())
}

/// Trilinear interpolation weights for one world point.
///
/// `dw[c]` is the derivative of weight `c` with respect to the world
/// position. Only corners that fall inside the grid are kept, which is how
/// zero padding is realised.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
    pub dw: [[f64; 3]; 8],
    pub n: usize,
}

impl Stencil {
    #[inline]
    pub fn sample(&self, values: &[f64]) -> f64 {
        let mut acc = 0.0;
        for c in 0..self.n {
            acc += self.w[c] * values[self.idx[c]];
        }
        acc
    }

    #[inline]
    pub fn gradient(&self, values: &[f64]) -> [f64; 3] {
        let mut g = [0.0; 3];
        for c in 0..self.n {
            let v = values[self.idx[c]];
            g[0] += self.dw[c][0] * v;
            g[1] += self.dw[c][1] * v;
            g[2] += self.dw[c][2] * v;
        }
        g
    }
}

/// Zero-padded trilinear stencil: corners outside the grid read 0.
#[inline]
pub(crate) fn stencil_zero(grid: &Grid3, p: [f64; 3]) -> Stencil {
    stencil_impl(grid, p, false)
}

/// Trilinear stencil that extends the boundary cell's interpolant linearly
/// beyond the grid, so affine functions are reproduced everywhere.
#[inline]
pub(crate) fn stencil_extrapolate(grid: &Grid3, p: [f64; 3]) -> Stencil {
    stencil_impl(grid, p, true)
}

#[inline]
fn stencil_impl(grid: &Grid3, p: [f64; 3], extrapolate: bool) -> Stencil {
    stencil_from_index(grid, grid.continuous_index(p), extrapolate)
}

/// Stencil at continuous voxel coordinates `c`.
#[inline]
pub(crate) fn stencil_from_index(grid: &Grid3, c: [f64; 3], extrapolate: bool) -> Stencil {
    let shape = grid.shape();
    let sp = grid.spacing();
    let mut i0 = [0i64; 3];
    let mut f = [0.0; 3];
    for a in 0..3 {
        let fl = c[a].floor();
        let mut base = fl as i64;
        if extrapolate {
            base = base.clamp(0, shape[a] as i64 - 2);
        }
        i0[a] = base;
        f[a] = c[a] - base as f64;
    }
    let mut st = Stencil { idx: [0; 8], w: [0.0; 8], dw: [[0.0; 3]; 8], n: 0 };
    for dz in 0..2i64 {
        let z = i0[2] + dz;
        if z < 0 || z >= shape[2] as i64 {
            continue;
        }
        let (wz, dwz) = if dz == 0 { (1.0 - f[2], -1.0) } else { (f[2], 1.0) };
        for dy in 0..2i64 {
            let y = i0[1] + dy;
            if y < 0 || y >= shape[1] as i64 {
                continue;
            }
            let (wy, dwy) = if dy == 0 { (1.0 - f[1], -1.0) } else { (f[1], 1.0) };
            for dx in 0..2i64 {
                let x = i0[0] + dx;
                if x < 0 || x >= shape[0] as i64 {
                    continue;
                }
                let (wx, dwx) = if dx == 0 { (1.0 - f[0], -1.0) } else { (f[0], 1.0) };
                let n = st.n;
                st.idx[n] = grid.index(x as usize, y as usize, z as usize);
                st.w[n] = wx * wy * wz;
                st.dw[n] = [
                    dwx * wy * wz / sp[0],
                    wx * dwy * wz / sp[1],
                    wx * wy * dwz / sp[2],
                ];
                st.n += 1;
            }
        }
    }
    st
}

/// Zero-padded trilinear sample of a field at a world point.
pub fn sample_trilinear<F: ScalarField>(field: &F, p: [f64; 3]) -> f64 {
    stencil_zero(field.grid(), p).sample(field.values())
}

/// Standardize to zero mean and unit (population) variance.
pub fn normalize_intensity(v: &Volume) -> Result<Volume> {
    let n = v.values.len() as f64;
    let mean = v.values.iter().sum::<f64>() / n;
    let var = v.values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::DegenerateIntensity);
    }
    let inv = 1.0 / var.sqrt();
    let values = v.values.iter().map(|x| (x - mean) * inv).collect();
    Ok(Volume { grid: v.grid, values })
}

/// Resample onto an isotropic grid with the same origin, covering the same
/// physical extent (rounded up to whole target voxels). Trilinear, zero
/// padded.
pub fn resample_isotropic<F: ScalarField>(v: &F, target_spacing: f64) -> Result<F> {
    if !(target_spacing > 0.0) {
        return Err(Error::InvalidArgument(format!("target spacing must be positive, got {target_spacing}")));
    }
    let g = v.grid();
    let extent = g.extent();
    if extent.iter().any(|&e| target_spacing > e) {
        return Err(Error::InvalidArgument(format!(
            "target spacing {target_spacing} mm exceeds the volume extent {extent:?}"
        )));
    }
    let mut shape = [0usize; 3];
    for a in 0..3 {
        // Guard against 7.999999 / 1.0 style rounding before taking ceil.
        let r = extent[a] / target_spacing;
        let rr = r.round();
        shape[a] = if (r - rr).abs() < 1e-9 { rr as usize } else { r.ceil() as usize }.max(2);
    }
    let out = Grid3::new(shape, [target_spacing; 3], g.origin())?;
    if out == *g {
        return Ok(v.rebuild(out, v.values().to_vec()));
    }
    let values = (0..out.len())
        .map(|idx| stencil_zero(g, out.world_of(idx)).sample(v.values()))
        .collect();
    Ok(v.rebuild(out, values))
}

/// Unit-sum Gaussian kernel sampled at multiples of `spacing`, truncated at
/// radius `ceil(3 sigma / spacing)`.
pub fn gaussian_kernel(sigma: f64, spacing: f64) -> Vec<f64> {
    let radius = (3.0 * sigma / spacing).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| {
            let x = i as f64 * spacing;
            (-(x * x) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= s);
    k
}

/// Apply a symmetric odd-length kernel along one axis with zero padding.
pub(crate) fn filter_axis(values: &[f64], shape: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let n = shape[axis] as i64;
    let stride = match axis {
        0 => 1,
        1 => shape[0],
        _ => shape[0] * shape[1],
    };
    let mut out = vec![0.0; values.len()];
    let (outer_a, outer_b) = match axis {
        0 => (shape[1] * shape[2], 1),
        1 => (shape[2], shape[0]),
        _ => (1, shape[0] * shape[1]),
    };
    // Enumerate line starts.
    let mut starts = Vec::with_capacity(values.len() / shape[axis]);
    match axis {
        0 => {
            for l in 0..outer_a {
                starts.push(l * shape[0]);
            }
        }
        1 => {
            for k in 0..outer_a {
                for i in 0..outer_b {
                    starts.push(k * shape[0] * shape[1] + i);
                }
            }
        }
        _ => {
            for l in 0..outer_b {
                starts.push(l);
            }
        }
    }
    let mut line = vec![0.0; n as usize];
    for s in starts {
        for (t, slot) in line.iter_mut().enumerate() {
            *slot = values[s + t * stride];
        }
        for i in 0..n {
            let lo = (i - r).max(0);
            let hi = (i + r).min(n - 1);
            let mut acc = 0.0;
            for j in lo..=hi {
                acc += kernel[(j - i + r) as usize] * line[j as usize];
            }
            out[s + i as usize * stride] = acc;
        }
    }
    out
}

/// Separable Gaussian smoothing of raw grid values. `sigma == 0` copies.
pub(crate) fn gaussian_values(values: &[f64], grid: &Grid3, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return values.to_vec();
    }
    let shape = grid.shape();
    let sp = grid.spacing();
    let mut cur = values.to_vec();
    for axis in 0..3 {
        let k = gaussian_kernel(sigma, sp[axis]);
        cur = filter_axis(&cur, shape, axis, &k);
    }
    cur
}

/// Isotropic Gaussian filter with standard deviation `sigma` in mm.
pub fn gaussian_filter3<F: ScalarField>(v: &F, sigma: f64) -> Result<F> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be non-negative, got {sigma}")));
    }
    Ok(v.rebuild(*v.grid(), gaussian_values(v.values(), v.grid(), sigma)))
}

/// Value-weighted mean world position of a label.
pub fn centroid(l: &LabelMap) -> Result<[f64; 3]> {
    let mut acc = [0.0; 3];
    let mut total = 0.0;
    for (idx, &v) in l.values.iter().enumerate() {
        if v != 0.0 {
            let p = l.grid.world_of(idx);
            acc[0] += v * p[0];
            acc[1] += v * p[1];
            acc[2] += v * p[2];
            total += v;
        }
    }
    if !(total > 0.0) {
        return Err(Error::EmptyLabel);
    }
    Ok([acc[0] / total, acc[1] / total, acc[2] / total])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid(n: usize) -> Grid3 {
        Grid3::new([n; 3], [1.0; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn grid_rejects_bad_shapes() {
        assert!(Grid3::new([1, 4, 4], [1.0; 3], [0.0; 3]).is_err());
        assert!(Grid3::new([4, 4, 4], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
    }

    #[test]
    fn normalize_rejects_constant() {
        let g = Grid3::new([2, 2, 1 + 1], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume::new(g, vec![1.0; 8]).unwrap();
        assert!(matches!(normalize_intensity(&v), Err(Error::DegenerateIntensity)));
    }

    #[test]
    fn normalize_two_point() {
        let g = Grid3::new([2, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        let vals = vec![0.0, 2.0, 0.0, 2.0, 0.0, 2.0, 0.0, 2.0];
        let out = normalize_intensity(&Volume::new(g, vals).unwrap()).unwrap();
        for (i, v) in out.values().iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { -1.0 } else { 1.0 });
        }
    }

    #[test]
    fn resample_identity_is_bit_exact() {
        let g = Grid3::new([5, 6, 7], [1.5; 3], [1.0, -2.0, 0.5]).unwrap();
        let v = Volume::from_fn(g, |p| (p[0] * 0.3).sin() + p[1] * p[2]);
        let r = resample_isotropic(&v, 1.5).unwrap();
        assert_eq!(r, v);
    }

    #[test]
    fn resample_upsample_midpoint() {
        let g = Grid3::new([4; 3], [2.0; 3], [0.0; 3]).unwrap();
        let v = Volume::from_fn(g, |p| p[0] * p[0] + 3.0 * p[1] - p[2]);
        let r = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(r.grid().shape(), [8; 3]);
        // x = 1 mm lies halfway between samples at 0 and 2 mm.
        let got = r.values()[r.grid().index(1, 2, 4)];
        let a = v.values()[g.index(0, 1, 2)];
        let b = v.values()[g.index(1, 1, 2)];
        assert_abs_diff_eq!(got, 0.5 * (a + b), epsilon = 1e-12);
    }

    #[test]
    fn resample_rejects_oversized_spacing() {
        let v = Volume::zeros(grid(4));
        assert!(resample_isotropic(&v, 5.0).is_err());
        assert!(resample_isotropic(&v, 0.0).is_err());
    }

    #[test]
    fn gaussian_sigma_zero_is_identity() {
        let v = Volume::from_fn(grid(6), |p| p[0] - 2.0 * p[2]);
        assert_eq!(gaussian_filter3(&v, 0.0).unwrap(), v);
        assert!(gaussian_filter3(&v, -1.0).is_err());
    }

    #[test]
    fn gaussian_impulse_matches_kernel_cube() {
        let g = grid(15);
        let mut vals = vec![0.0; g.len()];
        vals[g.index(7, 7, 7)] = 1.0;
        let v = Volume::new(g, vals).unwrap();
        let out = gaussian_filter3(&v, 1.0).unwrap();
        // Independent tabulation of the 3-sigma kernel.
        let w: Vec<f64> = (-3..=3).map(|i: i32| (-(i * i) as f64 / 2.0).exp()).collect();
        let centre = 1.0 / w.iter().sum::<f64>();
        assert_abs_diff_eq!(out.values()[g.index(7, 7, 7)], centre.powi(3), epsilon = 1e-12);
        assert_abs_diff_eq!(out.values().iter().sum::<f64>(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn gaussian_constant_interior() {
        let v = Volume::from_fn(grid(16), |_| 3.5);
        let out = gaussian_filter3(&v, 1.0).unwrap();
        let g = out.grid();
        for k in 3..13 {
            for j in 3..13 {
                for i in 3..13 {
                    assert_abs_diff_eq!(out.values()[g.index(i, j, k)], 3.5, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn centroid_cases() {
        let g = grid(6);
        let mut vals = vec![0.0; g.len()];
        vals[g.index(2, 3, 4)] = 1.0;
        let l = LabelMap::binary(g, vals, LabelKind::Landmark).unwrap();
        assert_eq!(centroid(&l).unwrap(), [2.0, 3.0, 4.0]);

        let mut vals = vec![0.0; g.len()];
        vals[g.index(0, 1, 1)] = 1.0;
        vals[g.index(4, 1, 1)] = 1.0;
        let l = LabelMap::binary(g, vals, LabelKind::Gland).unwrap();
        assert_eq!(centroid(&l).unwrap()[0], 2.0);

        let empty = LabelMap::binary(g, vec![0.0; g.len()], LabelKind::Gland).unwrap();
        assert!(matches!(centroid(&empty), Err(Error::EmptyLabel)));
    }

    #[test]
    fn empty_landmark_rejected() {
        let g = grid(3);
        assert!(LabelMap::binary(g, vec![0.0; g.len()], LabelKind::Landmark).is_err());
    }
}
