use advreg::losses::l2_gradient_penalty;
use advreg::sim::*;
use advreg::transform::{
    best_fit_affine, compose, decompose_ddf, random_affine, warp, AffineParams, AffineRanges, DisplacementField,
};
use advreg::volume::{centroid, Grid3, LabelKind, LabelMap, ScalarField};

fn small_cfg() -> SurrogateConfig {
    SurrogateConfig { sim_n: 20, sim_spacing: 5.0, ..SurrogateConfig::default() }
}

fn dice(a: &[f64], b: &[f64]) -> f64 {
    let inter: f64 = a.iter().zip(b).map(|(x, y)| ((*x >= 0.5) && (*y >= 0.5)) as u8 as f64).sum();
    let na = a.iter().filter(|x| **x >= 0.5).count() as f64;
    let nb = b.iter().filter(|x| **x >= 0.5).count() as f64;
    2.0 * inter / (na + nb)
}

#[test]
fn simulation_is_deterministic() {
    let a = simulate_probe_deformation(&small_cfg(), 11).unwrap();
    let b = simulate_probe_deformation(&small_cfg(), 11).unwrap();
    assert_eq!(a, b);
    let c = simulate_probe_deformation(&small_cfg(), 12).unwrap();
    assert_ne!(a.field, c.field);
}

#[test]
fn doubling_depth_increases_displacement() {
    let cfg = small_cfg();
    let grid = cfg.sim_grid().unwrap();
    for seed in 0..4 {
        let mut p = draw_sim_params(&cfg, seed).unwrap();
        p.depth = 2.0;
        let (f1, _) = simulate_with_params(&grid, &p);
        p.depth = 4.0;
        let (f2, _) = simulate_with_params(&grid, &p);
        assert!(f2.max_magnitude() > f1.max_magnitude());
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = SurrogateConfig::default();
    c.depth = (1.0, 40.0);
    assert!(simulate_probe_deformation(&c, 0).is_err());
    let mut c = SurrogateConfig::default();
    c.probe_radius = (10.0, 7.0);
    assert!(c.validate().is_err());
    let mut c = SurrogateConfig::default();
    c.balloon = (-1.0, 2.0);
    assert!(c.validate().is_err());
}

fn divergence_and_gradient(d: &DisplacementField) -> (f64, f64) {
    let g = d.grid();
    let [nx, ny, nz] = g.shape();
    let sp = g.spacing();
    let u = d.components();
    let mut div_sum = 0.0;
    let mut count = 0.0;
    let mut grad_max: f64 = 0.0;
    for k in 1..nz - 1 {
        for j in 1..ny - 1 {
            for i in 1..nx - 1 {
                let mut jac = [[0.0; 3]; 3];
                for c in 0..3 {
                    let f = &u[c];
                    jac[c][0] = (f[g.index(i + 1, j, k)] - f[g.index(i - 1, j, k)]) / (2.0 * sp[0]);
                    jac[c][1] = (f[g.index(i, j + 1, k)] - f[g.index(i, j - 1, k)]) / (2.0 * sp[1]);
                    jac[c][2] = (f[g.index(i, j, k + 1)] - f[g.index(i, j, k - 1)]) / (2.0 * sp[2]);
                }
                div_sum += (jac[0][0] + jac[1][1] + jac[2][2]).abs();
                count += 1.0;
                let fro = jac.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
                grad_max = grad_max.max(fro);
            }
        }
    }
    (div_sum / count, grad_max)
}

#[test]
fn surrogate_fields_are_bounded_smooth_and_nearly_incompressible() {
    let cfg = small_cfg();
    for seed in 0..6 {
        let s = simulate_probe_deformation(&cfg, seed).unwrap();
        assert!(s.field.max_magnitude() <= 1.5 * s.params.depth);
        assert!(l2_gradient_penalty(&s.field).unwrap() < cfg.max_gradient_penalty);
        let (div, grad) = divergence_and_gradient(&s.field);
        assert!(div < 0.2 * grad, "seed {seed}: mean |div| {div} vs max |grad| {grad}");
        assert!(s.gland.sum() > 0.0);
    }
}

#[test]
fn displacement_peaks_near_the_contact_and_vanishes_at_the_boundary() {
    let cfg = small_cfg();
    let s = simulate_probe_deformation(&cfg, 3).unwrap();
    let g = *s.field.grid();
    let [nx, ny, nz] = g.shape();
    for idx in 0..g.len() {
        let [i, j, k] = g.ijk(idx);
        if i == 0 || j == 0 || k == 0 || i == nx - 1 || j == ny - 1 || k == nz - 1 {
            assert_eq!(s.field.at(idx), [0.0; 3]);
        }
    }
    let contact = s.params.contact();
    let far = [-contact[0], -contact[1], -contact[2]];
    let mag = |p: [f64; 3]| {
        let v = s.field.sample(p);
        (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
    };
    assert!(mag(contact) > mag(far));
}

#[test]
fn norm_stats_examples() {
    let g = Grid3::centered(3, 1.0).unwrap();
    // y and z are given spread here; constant components are degenerate.
    let a = DisplacementField::from_fn(g, |p| [1.0, p[1], p[2]]);
    let b = DisplacementField::from_fn(g, |p| [-1.0, p[1], p[2]]);
    let st = compute_norm_stats(&[a.clone(), b.clone()]).unwrap();
    assert!(st.mean[0].abs() < 1e-15);
    assert!((st.std[0] - 1.0).abs() < 1e-15);

    let a0 = DisplacementField::from_fn(g, |_| [1.0, 0.0, 0.0]);
    let b0 = DisplacementField::from_fn(g, |_| [-1.0, 0.0, 0.0]);
    assert!(compute_norm_stats(&[a0, b0]).is_err());
    assert!(compute_norm_stats(&[a]).is_err());
}

#[test]
fn norm_stats_restandardize_random_sets() {
    let cfg = small_cfg();
    let fields: Vec<_> = (0..3).map(|s| simulate_probe_deformation(&cfg, s).unwrap().field).collect();
    let st = compute_norm_stats(&fields).unwrap();
    for c in 0..3 {
        let vals: Vec<f64> = fields.iter().flat_map(|f| st.apply(f).components()[c].clone()).collect();
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-9, "component {c}: mean {m} var {v}");
    }
}

fn sample_with_field(field: DisplacementField) -> SimSample {
    let cfg = small_cfg();
    let grid = *field.grid();
    let params = draw_sim_params(&cfg, 0).unwrap();
    let gland = LabelMap::from_mask(grid, LabelKind::Gland, |p| params.gland.contains(p));
    SimSample { field, gland, seed: 0, params }
}

#[test]
fn prep_zero_field_gives_zero_local() {
    let cfg = small_cfg();
    let grid = cfg.sim_grid().unwrap();
    let s = sample_with_field(DisplacementField::zeros(grid));
    let train = Grid3::centered(12, 4.0).unwrap();
    let pool = vec![s.gland.clone()];
    let aug = AffineRanges::default_for(&train);
    let raw = prep_sim_sample(&s, &pool, &train, &aug, 5, None).unwrap();
    assert!(raw.max_magnitude() < 1e-9);
    let st = NormStats { mean: [0.5, -0.2, 0.1], std: [2.0, 0.5, 1.0] };
    let out = prep_sim_sample(&s, &pool, &train, &aug, 5, Some(&st)).unwrap();
    for c in 0..3 {
        for (v, r) in out.components()[c].iter().zip(raw.components()[c].iter()) {
            assert!((v - (r - st.mean[c]) / st.std[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn prep_affine_field_gives_zero_local() {
    let cfg = small_cfg();
    let grid = cfg.sim_grid().unwrap();
    let b = random_affine(9, &AffineRanges::default_for(&grid)).unwrap();
    let field = compose(&DisplacementField::zeros(grid), &b);
    let s = sample_with_field(field);
    let train = Grid3::centered(12, 4.0).unwrap();
    let pool = vec![LabelMap::from_mask(train, LabelKind::Gland, |p| {
        (p[0] / 14.0).powi(2) + (p[1] / 10.0).powi(2) + (p[2] / 12.0).powi(2) <= 1.0
    })];
    let out = prep_sim_sample(&s, &pool, &train, &AffineRanges::default_for(&train), 3, None).unwrap();
    assert!(out.max_magnitude() < 1e-6, "{}", out.max_magnitude());
}

#[test]
fn prep_recovers_a_known_bump_under_affines() {
    // Radial, zero-mean bump on a symmetric grid: orthogonal to every affine
    // field, so its own affine-free part is itself.
    let grid = Grid3::centered(52, 1.0).unwrap();
    let g1 = |p: [f64; 3]| (-(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]) / (2.0 * 36.0)).exp();
    let g2 = |p: [f64; 3]| (-(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]) / (2.0 * 81.0)).exp();
    let alpha = (0..grid.len()).map(|i| g1(grid.world_of(i))).sum::<f64>()
        / (0..grid.len()).map(|i| g2(grid.world_of(i))).sum::<f64>();
    let bump = |p: [f64; 3]| {
        let w = 0.08 * (g1(p) - alpha * g2(p));
        [w, -0.5 * w, 0.3 * w]
    };
    let expected = DisplacementField::from_fn(grid, bump);
    let ranges = AffineRanges {
        rotation_deg: 3.0,
        scale_min: 0.98,
        scale_max: 1.02,
        shear: 0.01,
        translation: [1.0; 3],
        center: grid.center(),
    };
    let b = random_affine(21, &ranges).unwrap();
    let s = sample_with_field(DisplacementField::from_fn(grid, |x| {
        let y = b.apply(x);
        let v = bump(y);
        std::array::from_fn(|c| y[c] - x[c] + v[c])
    }));
    let pool = vec![s.gland.clone()];
    let out = prep_sim_sample(&s, &pool, &grid, &ranges, 8, None).unwrap();
    // Compare away from the border, where the bump has decayed.
    let [nx, ny, nz] = grid.shape();
    let mut worst: f64 = 0.0;
    for idx in 0..grid.len() {
        let [i, j, k] = grid.ijk(idx);
        if i < 3 || j < 3 || k < 3 || i + 3 >= nx || j + 3 >= ny || k + 3 >= nz {
            continue;
        }
        let (a, e) = (out.at(idx), expected.at(idx));
        for c in 0..3 {
            worst = worst.max((a[c] - e[c]).abs());
        }
    }
    assert!(worst < 1e-3, "max deviation {worst} mm");
}

fn prepared_set(n: usize) -> Vec<DisplacementField> {
    let cfg = small_cfg();
    let train = Grid3::centered(12, 4.0).unwrap();
    let pool: Vec<LabelMap> = (0..3)
        .map(|k| {
            let s = 12.0 + k as f64;
            LabelMap::from_mask(train, LabelKind::Gland, |p| {
                (p[0] / (s + 2.0)).powi(2) + (p[1] / s).powi(2) + (p[2] / (s + 1.0)).powi(2) <= 1.0
            })
        })
        .collect();
    let aug = AffineRanges::default_for(&train);
    (0..n as u64)
        .map(|k| {
            let s = simulate_probe_deformation(&cfg, k).unwrap();
            prep_sim_sample(&s, &pool, &train, &aug, 100 + k, None).unwrap()
        })
        .collect()
}

#[test]
fn prepared_fields_have_identity_best_fit_affine() {
    for f in prepared_set(4) {
        let fit = best_fit_affine(&f, None).unwrap();
        assert!(fit.affine.max_abs_diff(&AffineParams::identity()) < 1e-6);
    }
}

#[test]
fn prepared_set_restandardizes() {
    let set: Vec<_> = prepared_set(3).iter().map(quantize).collect();
    let st = compute_norm_stats(&set).unwrap();
    for c in 0..3 {
        let vals: Vec<f64> = set.iter().flat_map(|f| st.apply(f).components()[c].clone()).collect();
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-6);
    }
}

#[test]
fn phantom_cases_are_deterministic() {
    let cfg = PhantomConfig { grid_n: 20, spacing: 3.0, ..PhantomConfig::default() };
    assert_eq!(generate_phantom_case(4, &cfg).unwrap(), generate_phantom_case(4, &cfg).unwrap());
}

#[test]
fn phantom_without_motion_has_identical_geometry() {
    let mut cfg = PhantomConfig { grid_n: 20, spacing: 3.0, ..PhantomConfig::default() };
    cfg.surrogate.depth = (0.0, 0.0);
    cfg.rotation_deg = 0.0;
    cfg.scale_delta = 0.0;
    cfg.shear = 0.0;
    cfg.translation = 0.0;
    let c = generate_phantom_case(2, &cfg).unwrap();
    assert_eq!(c.truth, DisplacementField::zeros(*c.moving.grid()));
    assert_eq!(c.moving_gland, c.fixed_gland);
    assert_eq!(c.moving_landmarks, c.fixed_landmarks);
    assert_ne!(c.moving.values(), c.fixed.values());
}

#[test]
fn phantom_ground_truth_is_consistent() {
    let cfg = PhantomConfig::default();
    let spacing = cfg.spacing;
    for seed in 0..3 {
        let c = generate_phantom_case(seed, &cfg).unwrap();
        assert!(c.moving_landmarks.len() >= 2);
        let warped = warp(&c.moving_gland, &c.truth);
        assert!(dice(warped.values(), c.fixed_gland.values()) >= 0.98);
        let mut sq = 0.0;
        for (m, f) in c.moving_landmarks.iter().zip(&c.fixed_landmarks) {
            let a = centroid(&warp(m, &c.truth)).unwrap();
            let b = centroid(f).unwrap();
            sq += (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
            let g = f.grid();
            let ci = g.continuous_index(b).map(|v| v.round() as usize);
            assert!(c.fixed_gland.values()[g.index(ci[0], ci[1], ci[2])] >= 0.5);
        }
        let tre = (sq / c.moving_landmarks.len() as f64).sqrt();
        assert!(tre < 0.5 * spacing, "seed {seed}: {tre}");
        // The motion is large enough to be worth registering.
        let (_, local) = decompose_ddf(&c.truth, None).unwrap();
        assert!(local.max_magnitude() > 0.5);
    }
}
