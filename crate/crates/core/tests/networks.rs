use advreg::losses::FieldCritic;
use advreg::networks::*;
use advreg::nn::Tape;
use advreg::rng::rng_for;
use advreg::transform::{compose, AffineParams};
use advreg::volume::{Grid3, Volume};
use rand::Rng;

fn random_volume(g: Grid3, seed: u64) -> Volume {
    let mut rng = rng_for(seed, &[]);
    Volume::new(g, (0..g.len()).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()).unwrap()
}

#[test]
fn registration_outputs_have_the_contracted_shapes() {
    let g = Grid3::centered(32, 2.0).unwrap();
    let net = build_regnet(RegNetSpec::new(4, [32; 3]), 1).unwrap();
    let (m, f) = (random_volume(g, 2), random_volume(g, 3));
    let x = net.input_tensor(&[(&m, &f)]).unwrap();
    let mut tape = Tape::new(net.params());
    let xi = tape.leaf(x);
    let out = net.forward(&mut tape, xi);
    assert_eq!(tape.value(out.ddf).shape(), [1, 3, 32, 32, 32]);
    assert_eq!(tape.value(out.affine).len(), 12);
    let summands: Vec<_> = out.summands.iter().flatten().collect();
    assert_eq!(summands.len(), 5);
    for (k, s) in summands.iter().enumerate() {
        let n = 32 >> k;
        assert_eq!(tape.value(**s).shape(), [1, 3, n, n, n]);
    }
    let (local, affine) = net.predict(&m, &f).unwrap();
    assert_eq!(local.grid(), &g);
    assert!(affine.is_identity());
    assert_eq!(compose(&local, &affine), local);
    assert!(local.max_magnitude() < 0.1 * g.spacing()[0]);
}

#[test]
fn frozen_identity_affine_leaves_the_local_field() {
    assert!(affine_from_raw(&[0.0; 12]).is_identity());
    let g = Grid3::centered(16, 2.0).unwrap();
    let net = build_regnet(RegNetSpec::new(4, [16; 3]), 9).unwrap();
    let (local, _) = net.predict(&random_volume(g, 1), &random_volume(g, 2)).unwrap();
    assert_eq!(compose(&local, &AffineParams::identity()), local);
}

#[test]
fn channel_widths_double_per_level() {
    let spec = RegNetSpec::new(32, [16; 3]);
    let widths: Vec<usize> = (0..=4).map(|k| spec.channels(k)).collect();
    assert_eq!(widths, [32, 64, 128, 256, 512]);
    let net = build_regnet(spec, 0).unwrap();
    let shape = |name: &str| net.params().get(net.params().id(name).unwrap()).shape();
    assert_eq!(shape("stem.w")[0], 32);
    for k in 1..=4 {
        assert_eq!(shape(&format!("enc{k}.conv1.w"))[..2], [widths[k], widths[k - 1]]);
    }
    for k in 0..=4 {
        assert_eq!(shape(&format!("ddf{k}.w"))[..2], [3, widths[k]]);
    }
    assert_eq!(shape("affine.fc.w")[0], 12);
}

/// Parameter count of the registration network, layer by layer.
fn tally_regnet(n0: usize, levels: usize, shape: [usize; 3]) -> usize {
    let c = |k: usize| n0 << k;
    let conv = |i: usize, o: usize, k: usize, bias: bool| i * o * k * k * k + if bias { o } else { 0 };
    let norm = |ch: usize| 2 * ch;
    let same = |ch: usize| norm(ch) + conv(ch, ch, 3, true) + norm(ch) + conv(ch, ch, 3, true);
    let down = |i: usize, o: usize| norm(i) + conv(i, o, 3, true) + norm(o) + conv(o, o, 3, true) + conv(i, o, 1, false);
    let deep: usize = shape.iter().map(|n| n >> levels).product();
    let mut n = conv(2, c(0), 3, true);
    for k in 1..=levels {
        n += down(c(k - 1), c(k));
    }
    for k in 0..levels {
        n += conv(c(k + 1), c(k), 3, true) + same(c(k));
    }
    for k in 0..=levels {
        n += conv(c(k), 3, 3, true);
    }
    n + same(c(levels)) + 12 * c(levels) * deep + 12
}

fn tally_disc(n0: usize, levels: usize, shape: [usize; 3]) -> usize {
    let c = |k: usize| n0 << k;
    let conv = |i: usize, o: usize, k: usize, bias: bool| i * o * k * k * k + if bias { o } else { 0 };
    let down = |i: usize, o: usize| 2 * i + conv(i, o, 3, true) + 2 * o + conv(o, o, 3, true) + conv(i, o, 1, false);
    let deep: usize = shape.iter().map(|n| n >> levels).product();
    let mut n = conv(3, c(0), 3, true);
    for k in 1..=levels {
        n += down(c(k - 1), c(k));
    }
    n + c(levels) * deep + 1
}

#[test]
fn parameter_counts_match_a_layer_tally() {
    let spec = RegNetSpec::new(4, [16; 3]);
    let a = count_parameters(build_regnet(spec, 1).unwrap().params());
    assert_eq!(a, count_parameters(build_regnet(spec, 2).unwrap().params()));
    assert_eq!(a, tally_regnet(4, 4, [16; 3]));
    let b = count_parameters(build_regnet(RegNetSpec::new(8, [16; 3]), 1).unwrap().params());
    assert_eq!(b, tally_regnet(8, 4, [16; 3]));
    let ratio = b as f64 / a as f64;
    assert!(ratio > 2.0 && ratio < 4.0, "{ratio}");

    let d = build_discriminator(DiscNetSpec::new(4, [16; 3]), 1).unwrap();
    assert_eq!(count_parameters(d.params()), tally_disc(4, 4, [16; 3]));
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(build_regnet(RegNetSpec::new(4, [24; 3]), 0).is_err());
    assert!(build_regnet(RegNetSpec::new(2, [16; 3]), 0).is_err());
    assert!(build_discriminator(DiscNetSpec::new(4, [16, 16, 8]), 0).is_err());
    let net = build_regnet(RegNetSpec::new(4, [16; 3]), 0).unwrap();
    let g = Grid3::centered(32, 1.0).unwrap();
    assert!(net.predict(&random_volume(g, 1), &random_volume(g, 2)).is_err());
    let d = build_discriminator(DiscNetSpec::new(4, [16; 3]), 0).unwrap();
    assert!(d.logits(&[&[0.0; 10][..]]).is_err());
}

#[test]
fn forward_passes_are_deterministic() {
    let g = Grid3::centered(16, 2.0).unwrap();
    let (m, f) = (random_volume(g, 4), random_volume(g, 5));
    let a = build_regnet(RegNetSpec::new(4, [16; 3]), 11).unwrap();
    let b = build_regnet(RegNetSpec::new(4, [16; 3]), 11).unwrap();
    assert_eq!(a.predict(&m, &f).unwrap(), b.predict(&m, &f).unwrap());
    assert_eq!(a.params().digest(), b.params().digest());
    let d = build_discriminator(DiscNetSpec::new(4, [16; 3]), 3).unwrap();
    let x: Vec<f64> = (0..3 * g.len()).map(|i| (i as f64 * 0.01).sin()).collect();
    assert_eq!(d.logits(&[&x]).unwrap(), d.logits(&[&x]).unwrap());
}

#[test]
fn discriminator_scores_each_field() {
    let d = build_discriminator(DiscNetSpec::new(4, [16; 3]), 5).unwrap();
    let n = 3 * 16usize.pow(3);
    let zero = vec![0.0; n];
    let mut rng = rng_for(6, &[]);
    let fields: Vec<Vec<f64>> = (0..4).map(|_| (0..n).map(|_| rng.gen::<f64>() - 0.5).collect()).collect();
    let refs: Vec<&[f64]> = fields.iter().map(Vec::as_slice).collect();
    let logits = d.logits(&refs).unwrap();
    assert_eq!(logits.len(), 4);
    assert!(logits.iter().all(|v| v.is_finite()));
    let z = d.logits(&[&zero]).unwrap()[0];
    assert!(z.is_finite() && z.abs() < 10.0, "{z}");
    // Instance statistics are per sample, so batching does not change a logit.
    assert!((d.logits(&refs[..1]).unwrap()[0] - logits[0]).abs() < 1e-12);
}

#[test]
fn discriminator_input_gradient_matches_finite_differences() {
    let d = build_discriminator(DiscNetSpec { levels: 2, ..DiscNetSpec::new(4, [8; 3]) }, 8).unwrap();
    let mut rng = rng_for(9, &[]);
    let x: Vec<f64> = (0..3 * 512).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    let (_, grads) = d.logits_and_input_grads(&[&x]);
    let g = &grads[0];
    let eps = 1e-5;
    let (mut num, mut den) = (0.0, 0.0);
    let mut picks: Vec<usize> = (0..24).map(|_| rng.gen_range(0..x.len())).collect();
    picks.push((0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap());
    for i in picks {
        let mut p = x.clone();
        p[i] += eps;
        let fp = d.logits(&[&p]).unwrap()[0];
        p[i] -= 2.0 * eps;
        let fm = d.logits(&[&p]).unwrap()[0];
        let fd = (fp - fm) / (2.0 * eps);
        num += (fd - g[i]).powi(2);
        den += fd * fd;
    }
    let err = (num / den).sqrt();
    assert!(err < 1e-3, "relative error {err}");
}
