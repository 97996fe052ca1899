use ndarray::Axis;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use zpt_core::params::ParamSet;
use zpt_core::rng;
use zpt_core::tensor::Mat;
use zpt_core::ubcg::{
    generate_class_samples, generation_latents, kl_standard_normal, reparameterize, train_ubcg, ubcg_loss,
    LatentGaussian, UbcgConfig, UbcgModel,
};

/// `E[log q(z) − log p(z)]` under `z ~ q` for a diagonal Gaussian `q`.
fn monte_carlo_kl(g: &LatentGaussian, draws: usize, seed: u64) -> f64 {
    let mut r = rng::stream(seed, "kl-oracle", 0);
    let mut sum = 0.0;
    for _ in 0..draws {
        let mut log_ratio = 0.0;
        for (&mu, &lv) in g.mu.iter().zip(&g.logvar) {
            let e: f64 = r.sample(StandardNormal);
            let z = mu + (0.5 * lv).exp() * e;
            // log N(z; mu, σ²) − log N(z; 0, 1); the 2π terms cancel
            log_ratio += -0.5 * lv - 0.5 * e * e + 0.5 * z * z;
        }
        sum += log_ratio;
    }
    sum / draws as f64
}

#[test]
fn kl_matches_monte_carlo_for_variance_e() {
    let g = LatentGaussian {
        mu: vec![0.0],
        logvar: vec![1.0],
    };
    let closed = kl_standard_normal(&g);
    assert!((closed - 0.5 * (std::f64::consts::E - 2.0)).abs() < 1e-7);
    assert!((closed - 0.3591409).abs() < 1e-7);
    let mc = monte_carlo_kl(&g, 1_000_000, 1);
    assert!((mc - closed).abs() / closed < 0.01, "closed {closed} mc {mc}");
}

#[test]
fn reparameterized_draws_center_on_mu() {
    let g = LatentGaussian {
        mu: vec![1.5, -0.3, 0.0, 4.0],
        logvar: vec![0.0, 1.2, -2.0, 0.5],
    };
    let n = 100_000;
    let mut r = rng::stream(2, "z-mean", 0);
    let mut sum = vec![0.0; 4];
    for _ in 0..n {
        let eps: Vec<f64> = (0..4).map(|_| r.sample(StandardNormal)).collect();
        for (s, z) in sum.iter_mut().zip(reparameterize(&g, &eps)) {
            *s += z;
        }
    }
    for i in 0..4 {
        let sigma = (0.5 * g.logvar[i]).exp();
        let mean = sum[i] / n as f64;
        assert!(
            (mean - g.mu[i]).abs() <= 3.0 * sigma / (n as f64).sqrt(),
            "coordinate {i}: mean {mean} mu {}",
            g.mu[i]
        );
    }
}

#[test]
fn generation_latents_have_vanishing_mean() {
    let model = UbcgModel::new(UbcgConfig::default()).unwrap();
    let count = 10_000;
    let z = generation_latents(&model, count, 9);
    let tol = 4.0 / (count as f64).sqrt();
    for m in z.mean_axis(Axis(0)).unwrap() {
        assert!(m.abs() < tol, "{m}");
    }
}

fn zeroed(config: UbcgConfig) -> UbcgModel {
    let template = UbcgModel::new(config.clone()).unwrap();
    let mut params = ParamSet::new();
    for (name, m) in template.params.iter() {
        params.insert(name, Mat::zeros(m.raw_dim()));
    }
    UbcgModel::from_params(config, params).unwrap()
}

#[test]
fn perfect_reconstruction_at_the_prior_costs_nothing() {
    let model = zeroed(UbcgConfig::default());
    let zero = vec![0.0; 128];
    let loss = ubcg_loss(&zero, &zero, &model, &[0.3; 8], &[-1.0; 8]).unwrap();
    assert_eq!(loss.total(), 0.0);
}

#[test]
fn class_samples_have_reference_shape_and_are_seeded() {
    let mut r = rng::stream(4, "pairs", 0);
    let n = Normal::new(0.0, 1.0).unwrap();
    let nodes = Mat::from_shape_simple_fn((64, 128), || n.sample(&mut r));
    let texts = Mat::from_shape_simple_fn((64, 128), || n.sample(&mut r));
    let model = train_ubcg(&nodes, &texts, &UbcgConfig { epochs: 1, ..UbcgConfig::default() })
        .unwrap()
        .model;
    let cond = texts.row(0).to_vec();
    let a = generate_class_samples(&cond, 200, &model, 5).unwrap();
    assert_eq!(a.len(), 200);
    assert_eq!(a.nodes.dim(), (200, 128));
    assert_eq!(a.texts.dim(), (200, 128));
    assert_eq!(a, generate_class_samples(&cond, 200, &model, 5).unwrap());
    assert_ne!(a, generate_class_samples(&cond, 200, &model, 6).unwrap());
}

/// Pairs with `v = A t + noise`. `A` is orthogonal and symmetric, so the
/// reverse direction `t | v` has conditional mean `A v` as well and one
/// shared decoder can serve both.
fn toy_pairs(count: usize, seed: u64) -> (Mat, Mat) {
    let a = ndarray::array![[0.6, 0.8], [0.8, -0.6]];
    let mut r = rng::stream(seed, "toy", 0);
    let noise = Normal::new(0.0, 0.1).unwrap();
    let t = Mat::from_shape_simple_fn((count, 2), || r.sample(StandardNormal));
    let v = t.dot(&a.t()) + Mat::from_shape_simple_fn((count, 2), || noise.sample(&mut r));
    (v, t)
}

#[test]
fn toy_generator_recovers_the_conditional_mean() {
    let (v, t) = toy_pairs(2000, 1);
    let config = UbcgConfig {
        input_dim: 2,
        cond_dim: 2,
        enc_hidden: vec![32, 32],
        dec_hidden: vec![32],
        latent_dim: 2,
        epochs: 60,
        seed: 3,
        ..UbcgConfig::default()
    };
    let model = train_ubcg(&v, &t, &config).unwrap().model;
    let (_, test_t) = toy_pairs(100, 2);
    let a = ndarray::array![[0.6, 0.8], [0.8, -0.6]];
    let mut err = 0.0;
    for (i, row) in test_t.rows().into_iter().enumerate() {
        let s = generate_class_samples(&row.to_vec(), 500, &model, i as u64).unwrap();
        let mean = s.nodes.mean_axis(Axis(0)).unwrap();
        let target = a.dot(&row);
        err += (&mean - &target).mapv(|x| x * x).sum().sqrt();
    }
    err /= test_t.nrows() as f64;
    assert!(err < 0.15, "mean conditional-mean error {err}");
}

#[test]
fn training_lowers_the_loss_and_is_seeded() {
    let (v, t) = toy_pairs(300, 5);
    let config = UbcgConfig {
        input_dim: 2,
        cond_dim: 2,
        enc_hidden: vec![16, 16],
        dec_hidden: vec![16],
        latent_dim: 2,
        epochs: 10,
        seed: 1,
        ..UbcgConfig::default()
    };
    let a = train_ubcg(&v, &t, &config).unwrap();
    let b = train_ubcg(&v, &t, &config).unwrap();
    assert!(a.epoch_losses.last() < a.epoch_losses.first(), "{:?}", a.epoch_losses);
    assert_eq!(a.model.params, b.model.params);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_zero_only_at_the_prior(
        mu in prop::collection::vec(-3.0f64..3.0, 1..9),
        lv in prop::collection::vec(-3.0f64..3.0, 8),
    ) {
        let g = LatentGaussian { logvar: lv[..mu.len()].to_vec(), mu };
        let kl = kl_standard_normal(&g);
        let at_prior = g.mu.iter().chain(&g.logvar).all(|&x| x == 0.0);
        prop_assert!(kl >= 0.0);
        prop_assert_eq!(kl == 0.0, at_prior);
    }

    #[test]
    fn both_kl_terms_are_nonnegative(seed in 0u64..1000) {
        let model = UbcgModel::new(UbcgConfig { seed, ..UbcgConfig::default() }).unwrap();
        let mut r = rng::stream(seed, "kl-terms", 0);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| r.sample(StandardNormal)).collect() };
        let (v, t, ev, et) = (draw(128), draw(128), draw(8), draw(8));
        let loss = ubcg_loss(&v, &t, &model, &ev, &et).unwrap();
        prop_assert!(loss.node_kl >= 0.0);
        prop_assert!(loss.text_kl >= 0.0);
    }
}
