use marf::autodiff::Tape;
use marf::data::SupervisionSample;
use marf::geometry::{Ray, Vec3};
use marf::loss::{build_loss, term_index, Batch, BatchRandomness, LossConfig, LossWeights, MultiviewMode, Schedule};
use marf::network::{init_params, NetworkConfig, NetworkParams};

fn small_config(n_atoms: usize) -> NetworkConfig {
    NetworkConfig {
        hidden_layers: 2,
        width: 8,
        n_atoms,
        dropout_rate: 0.0,
        ..NetworkConfig::default()
    }
}

/// A network that predicts the same atoms for every ray.
fn constant_net(atoms: &[(Vec3, f64)]) -> NetworkParams {
    let mut p = init_params(&small_config(atoms.len()), 1, 0).unwrap();
    let k = p.tensors.len() - 3;
    p.tensors[k].fill(0.0);
    for (i, (c, r)) in atoms.iter().enumerate() {
        for j in 0..3 {
            p.tensors[k + 1][[0, 4 * i + j]] = c[j];
        }
        p.tensors[k + 1][[0, 4 * i + 3]] = *r;
    }
    p
}

fn all_on() -> LossConfig {
    let mut w = LossWeights::default();
    for s in [
        &mut w.p, &mut w.n, &mut w.s, &mut w.h, &mut w.r, &mut w.ih, &mut w.im, &mut w.sigma, &mut w.mv, &mut w.z,
    ] {
        *s = Schedule::Constant(1.0);
    }
    LossConfig {
        weights: w,
        ..LossConfig::default()
    }
}

fn terms(params: &NetworkParams, samples: &[SupervisionSample], perm: Option<Vec<usize>>, cfg: &LossConfig) -> [f64; 11] {
    let batch = Batch::from_samples(samples);
    let mut rnd = BatchRandomness::none(batch.len());
    if let Some(p) = perm {
        rnd.permutation = p;
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    build_loss(&mut tape, params, &bound, &batch, &rnd, cfg, 0.0).unwrap().breakdown.terms
}

fn t(name: &str) -> usize {
    term_index(name).unwrap()
}

fn z_ray(x: f64) -> Ray {
    Ray::new(Vec3::new(x, 0.0, -2.0), Vec3::z()).unwrap()
}

fn hit(ray: Ray, p: Vec3, n: Vec3) -> SupervisionSample {
    SupervisionSample {
        ray,
        shape: 0,
        p_gt: Some(p),
        n_gt: Some(n),
        s_gt: None,
    }
}

fn miss(ray: Ray, s: f64) -> SupervisionSample {
    SupervisionSample {
        ray,
        shape: 0,
        p_gt: None,
        n_gt: None,
        s_gt: Some(s),
    }
}

fn missing(ray: Ray) -> SupervisionSample {
    SupervisionSample {
        ray,
        shape: 0,
        p_gt: None,
        n_gt: None,
        s_gt: None,
    }
}

#[test]
fn gates_follow_the_available_ground_truth() {
    let r = z_ray(0.0);
    assert_eq!(hit(r, Vec3::zeros(), Vec3::z()).gates(), (true, false));
    assert_eq!(miss(r, 0.3).gates(), (false, true));
    assert_eq!(missing(r).gates(), (false, false));
}

#[test]
fn intersection_and_normal_examples() {
    let net = constant_net(&[(Vec3::zeros(), 0.5)]);
    let cfg = all_on();
    let p_gt = Vec3::new(0.0, 0.0, -0.6);
    let v = terms(&net, &[hit(z_ray(0.0), p_gt, -Vec3::z())], None, &cfg);
    assert!((v[t("p")] - 0.1).abs() < 1e-12);
    assert!(v[t("n")].abs() < 1e-12);
    let v = terms(&net, &[hit(z_ray(0.0), Vec3::new(0.0, 0.0, -0.5), Vec3::z())], None, &cfg);
    assert!(v[t("p")].abs() < 1e-12);
    assert!((v[t("n")] - 2.0).abs() < 1e-12);
    let v = terms(&net, &[hit(z_ray(0.0), p_gt, Vec3::x())], None, &cfg);
    assert!((v[t("n")] - 1.0).abs() < 1e-12);
}

#[test]
fn predicted_miss_gates_out_point_and_normal() {
    let net = constant_net(&[(Vec3::new(0.7, 0.0, 0.0), 0.5)]);
    let v = terms(&net, &[hit(z_ray(0.0), Vec3::new(0.0, 0.0, -0.5), -Vec3::z())], None, &all_on());
    assert_eq!(v[t("p")], 0.0);
    assert_eq!(v[t("n")], 0.0);
    assert!((v[t("h")] - 0.04).abs() < 1e-12);
}

#[test]
fn silhouette_examples() {
    let cfg = all_on();
    let net = constant_net(&[(Vec3::new(0.4, 0.0, 0.0), 0.5)]);
    let v = terms(&net, &[miss(z_ray(0.0), 0.5)], None, &cfg);
    assert!((v[t("s")] - 0.36).abs() < 1e-12);
    let net = constant_net(&[(Vec3::new(0.8, 0.0, 0.0), 0.5)]);
    let v = terms(&net, &[miss(z_ray(0.0), 0.3)], None, &cfg);
    assert!(v[t("s")].abs() < 1e-12);
}

#[test]
fn maximality_value_and_radius_gradient() {
    let net = constant_net(&[(Vec3::zeros(), 0.3), (Vec3::x() * 0.2, 0.1)]);
    let samples = [miss(z_ray(0.9), 0.1), hit(z_ray(0.0), Vec3::new(0.0, 0.0, -0.3), -Vec3::z()), missing(z_ray(0.5))];
    let batch = Batch::from_samples(&samples);
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, true);
    let g = build_loss(&mut tape, &net, &bound, &batch, &BatchRandomness::none(3), &all_on(), 0.0).unwrap();
    assert_eq!(g.breakdown.terms[t("r")], 1.0);
    let grads = tape.backward(g.terms[t("r")]).unwrap();
    let k = bound.vars.len() - 2;
    let gb = grads.wrt(bound.vars[k], (1, 8));
    // Every ray shares the bias, so the per-radius -1/(|B| n) adds up to -1/n.
    for i in 0..2 {
        assert!((gb[[0, 4 * i + 3]] + 0.5).abs() < 1e-12);
        for j in 0..3 {
            assert_eq!(gb[[0, 4 * i + j]], 0.0);
        }
    }
}

#[test]
fn inscription_examples() {
    let cfg = all_on();
    let net = constant_net(&[(Vec3::zeros(), 0.5)]);
    let b = hit(z_ray(0.0), Vec3::new(0.0, 0.0, -0.4), -Vec3::z());
    let v = terms(&net, &[missing(z_ray(0.0)), b], Some(vec![1, 0]), &cfg);
    assert!((v[t("ih")] - 0.1 / 2.0).abs() < 1e-12);
    let b = miss(z_ray(0.65), 0.4);
    let v = terms(&net, &[missing(z_ray(0.0)), b], Some(vec![1, 0]), &cfg);
    assert!((v[t("im")] - 0.0625 / 2.0).abs() < 1e-12);
    // An atom strictly inside the truth never obscures or crowds.
    let net = constant_net(&[(Vec3::zeros(), 0.3)]);
    let samples = [
        hit(z_ray(0.0), Vec3::new(0.0, 0.0, -0.5), -Vec3::z()),
        miss(z_ray(0.6), 0.1),
    ];
    let v = terms(&net, &samples, Some(vec![1, 0]), &cfg);
    assert_eq!(v[t("ih")], 0.0);
    assert_eq!(v[t("im")], 0.0);
}

#[test]
fn missing_rays_only_dilute_gated_terms() {
    let net = constant_net(&[(Vec3::zeros(), 0.45)]);
    let cfg = all_on();
    let a = hit(z_ray(0.1), Vec3::new(0.1, 0.0, -0.48), Vec3::new(0.2, 0.0, -1.0).normalize());
    let single = terms(&net, &[a], None, &cfg);
    let padded = terms(&net, &[a, missing(z_ray(0.3))], None, &cfg);
    for name in ["p", "n", "s", "h"] {
        assert!((padded[t(name)] - single[t(name)] / 2.0).abs() < 1e-12, "{name}");
    }
}

#[test]
fn specialization_matches_direct_computation() {
    let cfg = NetworkConfig {
        dropout_rate: 0.0,
        ..small_config(3)
    };
    let net = init_params(&cfg, 1, 5).unwrap();
    let rays: Vec<Ray> = (0..6)
        .map(|i| Ray::new(Vec3::new(0.1 * i as f64, -0.2, 0.3), Vec3::new(0.3, 1.0, -0.2 * i as f64)).unwrap())
        .collect();
    let samples: Vec<SupervisionSample> = rays.iter().map(|&r| missing(r)).collect();
    let v = terms(&net, &samples, None, &all_on())[t("sigma")];
    let atoms: Vec<Vec<_>> = rays
        .iter()
        .map(|r| net.forward(&marf::geometry::canonicalize(r).unwrap(), None).unwrap())
        .collect();
    let mut expected = 0.0;
    for i in 0..3 {
        let mean: Vec3 = atoms.iter().map(|a| a[i].center).sum::<Vec3>() / 6.0;
        expected += atoms.iter().map(|a| (a[i].center - mean).norm_squared()).sum::<f64>();
    }
    expected /= 18.0;
    assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");

    // Translating one candidate's centers leaves the loss unchanged.
    let mut moved = net.clone();
    let k = moved.tensors.len() - 2;
    for j in 0..3 {
        moved.tensors[k][[0, 4 + j]] += 0.37;
    }
    let w = terms(&moved, &samples, None, &all_on())[t("sigma")];
    assert!((v - w).abs() < 1e-12);
}

#[test]
fn specialization_two_ray_example() {
    // Two rays, one candidate, centers (0,0,0) and (0,0,2) → 1/n with n = 1.
    let mut net = constant_net(&[(Vec3::zeros(), 0.1)]);
    let k = net.tensors.len() - 3;
    // Column 8 is the first embedding channel (q̂_x) of the final skip.
    net.tensors[k][[2, 8]] = 1.0;
    let samples = [
        missing(Ray::new(Vec3::zeros(), -Vec3::x()).unwrap()),
        missing(Ray::new(Vec3::zeros(), Vec3::x()).unwrap()),
    ];
    let mut shifted = net.clone();
    shifted.tensors[k + 1][[0, 2]] = 1.0;
    let v = terms(&shifted, &samples, None, &all_on())[t("sigma")];
    assert!((v - 1.0).abs() < 1e-12, "{v}");
}

#[test]
fn latent_prior_example() {
    let cfg = NetworkConfig {
        latent_dim: 2,
        ..small_config(1)
    };
    let mut net = init_params(&cfg, 1, 0).unwrap();
    let li = net.latent_index();
    net.tensors[li][[0, 0]] = 3.0;
    net.tensors[li][[0, 1]] = 4.0;
    let samples = [missing(z_ray(0.0)), missing(z_ray(0.2))];
    let v = terms(&net, &samples, None, &all_on())[t("z")];
    assert!((v - 25.0).abs() < 1e-12);
    net.tensors[li].mapv_inplace(|x| 2.0 * x);
    let v = terms(&net, &samples, None, &all_on())[t("z")];
    assert!((v - 100.0).abs() < 1e-12);
}

fn random_batch(seed: u64, rows: usize) -> Vec<SupervisionSample> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let shape = marf::data::ShapeSource::parse("sphere:0.5").unwrap();
    (0..rows)
        .map(|_| {
            let o = Vec3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), -1.5);
            let d = Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 1.0).normalize();
            let r = Ray::new(o, d).unwrap();
            match shape.cast(&o, &d) {
                Some(h) => hit(r, h.point, h.normal),
                None => {
                    let foot = o - d * o.dot(&d);
                    miss(r, foot.norm() - 0.5)
                }
            }
        })
        .collect()
}

#[test]
fn constant_predictor_has_zero_multiview_loss() {
    let net = constant_net(&[(Vec3::zeros(), 0.5), (Vec3::new(0.1, 0.2, 0.0), 0.3)]);
    let samples = random_batch(1, 40);
    let v = terms(&net, &samples, None, &all_on());
    assert_eq!(v[t("mv")], 0.0);
    assert!(v[t("p")] > 0.0 || samples.iter().any(|s| s.p_gt.is_some()));
}

#[test]
fn multiview_analytic_matches_finite_differences() {
    for seed in 0..4 {
        let mut net = init_params(&small_config(4), 1, seed).unwrap();
        let k = net.tensors.len() - 2;
        for i in 0..4 {
            net.tensors[k][[0, 4 * i + 3]] = 0.45;
        }
        let samples = random_batch(seed + 10, 48);
        let analytic = terms(&net, &samples, None, &all_on())[t("mv")];
        let fd_cfg = LossConfig {
            multiview: MultiviewMode::FiniteDifference { h: 1e-5 },
            ..all_on()
        };
        let fd = terms(&net, &samples, None, &fd_cfg)[t("mv")];
        assert!(analytic > 0.0);
        assert!((analytic - fd).abs() <= 1e-3 * analytic, "seed {seed}: {analytic} vs {fd}");
    }
}

#[test]
fn terms_are_nonnegative_and_total_is_weighted_sum() {
    let cfg = NetworkConfig {
        latent_dim: 3,
        ..small_config(4)
    };
    for seed in 0..5 {
        let net = init_params(&cfg, 1, seed).unwrap();
        let samples = random_batch(seed, 32);
        let batch = Batch::from_samples(&samples);
        for epoch in [0.0, 20.0, 37.0, 100.0, 250.0] {
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape, true);
            let lc = LossConfig::default();
            let g = build_loss(&mut tape, &net, &bound, &batch, &BatchRandomness::none(32), &lc, epoch).unwrap();
            assert!(g.breakdown.terms.iter().all(|&v| v >= 0.0));
            assert!((g.breakdown.total - g.breakdown.weighted_sum()).abs() < 1e-12);
            assert_eq!(g.breakdown.weights, lc.weights.at(epoch));
        }
    }
}
