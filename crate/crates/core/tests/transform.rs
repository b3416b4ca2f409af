use std::f64::consts::PI;

use advreg::rng::rng_for;
use advreg::transform::*;
use advreg::volume::*;
use approx::assert_abs_diff_eq;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

fn sub(a: &DisplacementField, b: &DisplacementField) -> DisplacementField {
    DisplacementField::new(
        *a.grid(),
        std::array::from_fn(|c| a.components()[c].iter().zip(&b.components()[c]).map(|(x, y)| x - y).collect()),
    )
    .unwrap()
}

/// Relative L2 difference over voxels at least `border` away from the faces.
fn rel_diff(a: &DisplacementField, b: &DisplacementField, border: usize) -> f64 {
    let g = b.grid();
    let s = g.shape();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..g.len() {
        let q = g.ijk(i);
        if (0..3).any(|k| q[k] < border || q[k] + border >= s[k]) {
            continue;
        }
        for c in 0..3 {
            let (x, y) = (a.components()[c][i], b.components()[c][i]);
            num += (x - y).powi(2);
            den += y * y;
        }
    }
    (num / den).sqrt()
}

/// Remove a field's own best-fit affine so that it is affine-free.
fn affine_free(d: DisplacementField) -> DisplacementField {
    let fit = best_fit_affine(&d, None).unwrap().affine;
    sub(&d, &affine_to_ddf(&fit, d.grid()))
}

fn waves(g: Grid3, wavelength: f64, amp: [f64; 3], phase: f64) -> DisplacementField {
    let k = 2.0 * PI / wavelength;
    DisplacementField::from_fn(g, |p| {
        [
            amp[0] * (k * p[1] + phase).sin() * (k * p[2]).cos(),
            amp[1] * (k * p[0] - phase).cos(),
            amp[2] * (k * (p[0] + p[1]) + phase).sin(),
        ]
    })
}

/// The 24 proper rotations mapping a centred cubic grid onto itself.
fn cube_rotations() -> Vec<AffineParams> {
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut out = Vec::new();
    for p in perms {
        for signs in 0..8 {
            let mut l = [[0.0; 3]; 3];
            for r in 0..3 {
                l[r][p[r]] = if signs >> r & 1 == 1 { -1.0 } else { 1.0 };
            }
            if let Ok(a) = AffineParams::new(l, [0.0; 3]) {
                out.push(a);
            }
        }
    }
    out
}

#[test]
fn cube_rotation_table_is_complete() {
    assert_eq!(cube_rotations().len(), 24);
}

#[test]
fn linear_images_warp_exactly() {
    let g = Grid3::centered(12, 1.5).unwrap();
    let ramp = |p: [f64; 3]| 2.0 * p[0] - 0.75 * p[1] + 0.3 * p[2] - 1.0;
    let img = Volume::from_fn(g, ramp);
    let d = DisplacementField::from_fn(g, |p| [0.8 * (p[1] / 4.0).sin(), 0.5 * (p[2] / 3.0).cos(), -0.6 * (p[0] / 5.0).sin()]);
    let out = warp(&img, &d);
    let (lo, hi) = g.bounds();
    let mut checked = 0;
    for i in 0..g.len() {
        let x = g.world_of(i);
        let u = d.at(i);
        let y = [x[0] + u[0], x[1] + u[1], x[2] + u[2]];
        if (0..3).all(|a| y[a] >= lo[a] && y[a] <= hi[a]) {
            assert_abs_diff_eq!(out.values()[i], ramp(y), epsilon = 1e-12);
            checked += 1;
        }
    }
    assert!(checked > g.len() / 2);
}

#[test]
fn scaled_affine_gives_a_linear_field() {
    let g = Grid3::new([5, 6, 7], [1.0, 2.0, 0.5], [-3.0, 1.0, 4.0]).unwrap();
    let a = AffineParams::new([[1.1, 0.0, 0.0], [0.0, 1.1, 0.0], [0.0, 0.0, 1.1]], [0.0; 3]).unwrap();
    let d = affine_to_ddf(&a, &g);
    for i in 0..g.len() {
        let x = g.world_of(i);
        for c in 0..3 {
            assert_abs_diff_eq!(d.at(i)[c], 0.1 * x[c], epsilon = 1e-12);
        }
    }
}

#[test]
fn composed_warp_matches_sequential_warps() {
    let g = Grid3::centered(32, 1.0).unwrap();
    let img = Volume::from_fn(g, |p| (p[0] / 16.0).sin() + (p[1] / 20.0).cos() + 0.5 * (p[2] / 12.0).sin());
    let local = waves(g, 40.0, [0.8, 0.6, 0.5], 0.3);
    let a = AffineParams::new([[1.02, 0.01, 0.0], [-0.01, 0.99, 0.015], [0.0, 0.01, 1.01]], [0.5, -0.3, 0.4]).unwrap();
    let composed = warp(&img, &compose(&local, &a));
    let sequential = warp(&warp(&img, &local), &affine_to_ddf(&a, &g));
    let range = img.values().iter().cloned().fold(f64::MIN, f64::max) - img.values().iter().cloned().fold(f64::MAX, f64::min);
    let worst = (0..g.len())
        .filter(|&i| g.ijk(i).iter().all(|&q| (4..28).contains(&q)))
        .map(|i| (composed.values()[i] - sequential.values()[i]).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-3 * range, "{worst} of range {range}");
}

#[test]
fn exact_affine_point_sets_are_recovered() {
    let a = AffineParams::new([[0.9, 0.1, -0.2], [0.05, 1.2, 0.1], [-0.1, 0.0, 1.05]], [3.0, -2.0, 7.5]).unwrap();
    let mut rng = rng_for(3, &[]);
    let p1: Vec<[f64; 3]> = (0..30).map(|_| std::array::from_fn(|_| rng.gen::<f64>() * 40.0 - 20.0)).collect();
    let p0: Vec<[f64; 3]> = p1.iter().map(|p| a.apply(*p)).collect();
    let fit = fit_affine_lsq(&p0, &p1).unwrap();
    assert!(fit.affine.max_abs_diff(&a) < 1e-9);
    assert!(fit.residual < 1e-12);
}

/// Least squares through an SVD of the design matrix.
fn svd_affine(p0: &[[f64; 3]], p1: &[[f64; 3]]) -> [f64; 12] {
    let x = DMatrix::from_fn(p1.len(), 4, |i, j| if j < 3 { p1[i][j] } else { 1.0 });
    let y = DMatrix::from_fn(p0.len(), 3, |i, j| p0[i][j]);
    let w = x.svd(true, true).solve(&y, 1e-14).unwrap();
    let mut out = [0.0; 12];
    for r in 0..3 {
        for s in 0..3 {
            out[3 * r + s] = w[(s, r)];
        }
        out[9 + r] = w[(3, r)];
    }
    out
}

#[test]
fn noisy_fit_matches_an_svd_solve() {
    let mut rng = rng_for(4, &[]);
    let p1: Vec<[f64; 3]> = (0..50).map(|_| std::array::from_fn(|_| rng.gen::<f64>() * 30.0)).collect();
    let p0: Vec<[f64; 3]> =
        p1.iter().map(|p| [1.1 * p[0] - 0.2 * p[2] + 1.0, 0.95 * p[1] + 2.0, p[2] + 0.1 * p[0] - 3.0]).collect();
    let p0: Vec<[f64; 3]> = p0.iter().map(|p| std::array::from_fn(|a| p[a] + rng.gen::<f64>() - 0.5)).collect();
    let fit = fit_affine_lsq(&p0, &p1).unwrap();
    let oracle = svd_affine(&p0, &p1);
    for (a, b) in fit.affine.to_array().iter().zip(oracle) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-9);
    }
}

#[test]
fn exact_affine_fields_decompose_without_residual() {
    let g = Grid3::centered(16, 2.0).unwrap();
    let a = AffineParams::new([[1.05, 0.02, -0.03], [-0.01, 0.97, 0.04], [0.02, -0.02, 1.02]], [1.5, -2.0, 0.5]).unwrap();
    let (got, local) = decompose_ddf(&affine_to_ddf(&a, &g), None).unwrap();
    assert!(got.max_abs_diff(&a) < 1e-9);
    assert!(local.max_magnitude() < 1e-9, "{}", local.max_magnitude());
}

#[test]
fn affine_of_a_bump_is_recovered() {
    // The affine maps grid points onto grid points, so no interpolation
    // error enters and both parts come back exactly.
    let g = Grid3::centered(24, 2.0).unwrap();
    let bump = affine_free(DisplacementField::from_fn(g, |p| {
        let e = (-(p[0].powi(2) + (p[1] - 3.0).powi(2) + p[2].powi(2)) / (2.0 * 36.0)).exp();
        [1.5 * e, -0.8 * e, 0.6 * e]
    }));
    let a = AffineParams::new([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]], [0.0; 3]).unwrap();
    let (got, local) = decompose_ddf(&compose(&bump, &a), None).unwrap();
    assert!(got.max_abs_diff(&a) < 1e-6);
    assert!(sub(&local, &bump).max_magnitude() < 1e-9);
}

#[test]
fn general_affine_round_trip_is_limited_by_interpolation() {
    let g = Grid3::centered(32, 2.0).unwrap();
    let bump = affine_free(waves(g, 64.0, [0.5, 0.3, 0.2], 0.0));
    let a = AffineParams::new([[1.02, 0.01, -0.015], [-0.01, 0.98, 0.02], [0.005, 0.01, 1.01]], [0.7, -0.4, 0.3]).unwrap();
    let d = compose(&bump, &a);
    let (got, local) = decompose_ddf(&d, None).unwrap();
    assert!(rel_diff(&compose(&local, &got), &d, 4) < 1e-2);
    assert!(got.max_abs_diff(&a) < 5e-3);
}

#[test]
fn fov_resampling_conjugates_affine_fields() {
    let src_grid = Grid3::centered(16, 2.0).unwrap();
    let l = [[0.05, 0.02, 0.0], [-0.01, 0.03, 0.02], [0.0, 0.01, -0.04]];
    let t = [1.0, -0.5, 2.0];
    let u = |p: [f64; 3]| -> [f64; 3] { std::array::from_fn(|r| (0..3).map(|s| l[r][s] * p[s]).sum::<f64>() + t[r]) };
    let d = DisplacementField::from_fn(src_grid, u);
    let src = BBox3::new([-10.0, -8.0, -12.0], [10.0, 12.0, 8.0]).unwrap();
    let dst = BBox3::new([0.0, 0.0, 0.0], [40.0, 10.0, 20.0]).unwrap();
    let dst_grid = Grid3::new([9, 6, 11], [5.0, 2.0, 2.0], [0.0; 3]).unwrap();
    let out = resample_ddf_to_fov(&d, &src, &dst_grid, &dst).unwrap();
    let scale = [20.0 / 40.0, 20.0 / 10.0, 20.0 / 20.0];
    for i in 0..dst_grid.len() {
        let x = dst_grid.world_of(i);
        let y: [f64; 3] = std::array::from_fn(|a| src.min[a] + scale[a] * (x[a] - dst.min[a]));
        let v = u(y);
        for c in 0..3 {
            assert_abs_diff_eq!(out.at(i)[c], v[c] / scale[c], epsilon = 1e-9);
        }
    }
    let too_big = BBox3::new([-40.0; 3], [40.0; 3]).unwrap();
    assert!(resample_ddf_to_fov(&d, &too_big, &dst_grid, &dst).is_err());
}

#[test]
fn random_affines_stay_within_their_ranges() {
    let g = Grid3::centered(32, 2.0).unwrap();
    let r = AffineRanges::default_for(&g);
    let (mut det_lo, mut det_hi) = (f64::MAX, f64::MIN);
    let mut t_hi = [0.0f64; 3];
    for seed in 0..10_000u64 {
        let a = random_affine(seed, &r).unwrap();
        a.validate().unwrap();
        let det = a.det();
        det_lo = det_lo.min(det);
        det_hi = det_hi.max(det);
        // Rotation, scale and shear act about the centre, so the centre
        // moves by the translation draw alone.
        let c = a.apply(r.center);
        for k in 0..3 {
            let tk = c[k] - r.center[k];
            assert!(tk.abs() <= r.translation[k] + 1e-9);
            t_hi[k] = t_hi[k].max(tk.abs());
        }
        // Singular values of L lie within the scale range widened by the shear.
        let l = a.to_array();
        let m = nalgebra::Matrix3::from_row_slice(&l[..9]);
        let sv = m.singular_values();
        let h = 1.0 + 3.0 * r.shear;
        assert!(sv.max() <= r.scale_max * h + 1e-12 && sv.min() >= r.scale_min / h - 1e-12, "{sv:?}");
    }
    assert!(det_lo >= r.scale_min.powi(3) - 1e-12 && det_hi <= r.scale_max.powi(3) + 1e-12);
    assert!(det_lo < 0.8 && det_hi > 1.2, "{det_lo} {det_hi}");
    for k in 0..3 {
        assert!(t_hi[k] > 0.95 * r.translation[k]);
    }
    assert_eq!(random_affine(7, &r).unwrap(), random_affine(7, &r).unwrap());
}

fn smooth_image(g: Grid3) -> Volume {
    Volume::from_fn(g, |p| (p[0] / 3.0).sin() + 0.5 * (p[1] / 4.0).cos() * (p[2] / 5.0).sin())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn warp_is_linear_in_the_image(seed in 0u64..1000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let g = Grid3::centered(8, 1.0).unwrap();
        let mut rng = rng_for(seed, &[]);
        let mut r = || (0..g.len()).map(|_| rng.gen::<f64>()).collect::<Vec<_>>();
        let (a, b) = (r(), r());
        let d = DisplacementField::new(g, [r(), r(), r()]).unwrap();
        let ab = Volume::new(g, a.iter().zip(&b).map(|(x, y)| alpha * x + beta * y).collect()).unwrap();
        let wa = warp(&Volume::new(g, a).unwrap(), &d);
        let wb = warp(&Volume::new(g, b).unwrap(), &d);
        let wab = warp(&ab, &d);
        for i in 0..g.len() {
            prop_assert!((wab.values()[i] - alpha * wa.values()[i] - beta * wb.values()[i]).abs() < 1e-12);
        }
        let zero = DisplacementField::zeros(g);
        prop_assert_eq!(warp(&wa, &zero), wa);
    }

    #[test]
    fn warp_gradient_matches_finite_differences(seed in 0u64..1000) {
        let g = Grid3::centered(8, 1.5).unwrap();
        let img = smooth_image(g);
        let mut rng = rng_for(seed, &[]);
        let mut r = |s: f64| (0..g.len()).map(|_| s * (rng.gen::<f64>() - 0.5)).collect::<Vec<_>>();
        let d = DisplacementField::new(g, [r(2.0), r(2.0), r(2.0)]).unwrap();
        let w = r(2.0);
        let f = |d: &DisplacementField| -> f64 { warp(&img, d).values().iter().zip(&w).map(|(a, b)| a * b).sum() };
        let (_, gu) = warp_backward(&img, &d, &w);
        let dir = [r(2.0), r(2.0), r(2.0)];
        let eps = 1e-6;
        let shifted = |s: f64| {
            DisplacementField::new(g, std::array::from_fn(|c| d.components()[c].iter().zip(&dir[c]).map(|(a, b)| a + s * b).collect())).unwrap()
        };
        let fd = (f(&shifted(eps)) - f(&shifted(-eps))) / (2.0 * eps);
        let an: f64 = (0..3).map(|c| gu[c].iter().zip(&dir[c]).map(|(a, b)| a * b).sum::<f64>()).sum();
        prop_assert!((fd - an).abs() <= 1e-5 * an.abs().max(fd.abs()), "{} {}", fd, an);
    }

    #[test]
    fn affine_fit_beats_the_identity(seed in 0u64..1000, n in 4usize..40) {
        let mut rng = rng_for(seed, &[]);
        let p1: Vec<[f64; 3]> = (0..n).map(|_| std::array::from_fn(|_| rng.gen::<f64>() * 20.0)).collect();
        let p0: Vec<[f64; 3]> = p1.iter().map(|p| std::array::from_fn(|a| p[a] + 3.0 * (rng.gen::<f64>() - 0.5))).collect();
        let fit = fit_affine_lsq(&p0, &p1).unwrap();
        let identity: f64 = p0.iter().zip(&p1).map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>()).sum();
        prop_assert!(fit.residual <= identity + 1e-9);
    }

    #[test]
    fn decompose_then_compose_round_trips(
        rot in 0usize..24,
        wavelength in 8.0f64..64.0,
        amp in prop::array::uniform3(0.1f64..2.0),
        phase in 0.0f64..6.3,
    ) {
        let g = Grid3::centered(32, 2.0).unwrap();
        let local = affine_free(waves(g, wavelength, amp, phase));
        let a = cube_rotations()[rot];
        let d = compose(&local, &a);
        let (got, back) = decompose_ddf(&d, None).unwrap();
        prop_assert!(got.max_abs_diff(&a) < 1e-9);
        prop_assert!(rel_diff(&compose(&back, &got), &d, 0) < 1e-6);
    }
}
