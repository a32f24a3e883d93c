use proptest::{prop_assert, proptest};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use s2rl_core::datastore::evaluate_policy;
use s2rl_core::envsim::{make_env, EnvSpec, Family, Perturbation, Role, ScriptedExpert};
use s2rl_core::gapmetrics::{
    degradation_study, gaussian_fit_kl, gaussian_kl, kl_ratio, kl_ratio_encoded, knn_kl,
    m_identity_gap, GapError,
};
use s2rl_core::latentspace::{LatentConfig, LatentModel};
use s2rl_core::numgrad::Array;
use s2rl_core::worldmodel::{EnsembleModel, ModelConfig};

fn normal(n: usize, d: usize, mean: f64, sd: f64, rng: &mut ChaCha8Rng) -> Array {
    let data = (0..n * d)
        .map(|_| mean + sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Array::matrix(n, d, data)
}

/// Shifted and rescaled so every column has exactly the given moments.
fn standardized(x: &Array, mean: f64, sd: f64) -> Array {
    let n = x.rows() as f64;
    let mut out = x.clone();
    for c in 0..x.cols() {
        let m = (0..x.rows()).map(|r| x.get(r, c)).sum::<f64>() / n;
        let v = (0..x.rows()).map(|r| (x.get(r, c) - m).powi(2)).sum::<f64>() / n;
        for r in 0..x.rows() {
            out.set(r, c, mean + sd * (x.get(r, c) - m) / v.sqrt());
        }
    }
    out
}

fn latent_model(seed: u64) -> LatentModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let single = EnsembleModel::new(3, 1, ModelConfig::default(), &mut rng);
    LatentModel::init_from_single(&single, Role::Real, LatentConfig::default(), &mut rng).unwrap()
}

/// Trapezoidal integration of `p log(p/q)` for two 1-d Gaussians.
fn kl_by_quadrature(m0: f64, v0: f64, m1: f64, v1: f64) -> f64 {
    let pdf = |x: f64, m: f64, v: f64| (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
    let (s0, s1) = (v0.sqrt(), v1.sqrt());
    let lo = (m0 - 12.0 * s0).min(m1 - 12.0 * s1);
    let hi = (m0 + 12.0 * s0).max(m1 + 12.0 * s1);
    let n = 200_000;
    let h = (hi - lo) / n as f64;
    let f = |x: f64| {
        let p = pdf(x, m0, v0);
        if p < 1e-300 {
            0.0
        } else {
            p * (p / pdf(x, m1, v1)).ln()
        }
    };
    let inner: f64 = (1..n).map(|i| f(lo + i as f64 * h)).sum();
    h * (inner + 0.5 * (f(lo) + f(hi)))
}

#[test]
fn gaussian_kl_analytic_fixtures() {
    assert_eq!(gaussian_kl(&[0.0], &[1.0], &[1.0], &[1.0]).unwrap(), 0.5);
    assert_eq!(gaussian_kl(&[0.3, -2.0], &[0.5, 4.0], &[0.3, -2.0], &[0.5, 4.0]).unwrap(), 0.0);
    assert!(matches!(
        gaussian_kl(&[0.0], &[0.0], &[0.0], &[1.0]),
        Err(GapError::NonPositiveVariance(_))
    ));
    assert!(matches!(
        gaussian_kl(&[0.0], &[1.0], &[0.0, 1.0], &[1.0]),
        Err(GapError::Dimension(..))
    ));
}

#[test]
fn gaussian_kl_matches_numeric_integration() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let (m0, m1) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let (v0, v1) = (rng.random_range(0.2..3.0), rng.random_range(0.2..3.0));
        let exact = gaussian_kl(&[m0], &[v0], &[m1], &[v1]).unwrap();
        let oracle = kl_by_quadrature(m0, v0, m1, v1);
        assert!(
            (exact - oracle).abs() <= 0.01 * oracle.max(1e-3),
            "{exact} vs {oracle}"
        );
    }
}

proptest! {
    #[test]
    fn gaussian_kl_is_non_negative(
        params in proptest::collection::vec((-5.0f64..5.0, 0.01f64..10.0, -5.0f64..5.0, 0.01f64..10.0), 1..6)
    ) {
        let (m0, v0, m1, v1): (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) = params.iter().fold(
            (vec![], vec![], vec![], vec![]),
            |mut acc, p| {
                acc.0.push(p.0);
                acc.1.push(p.1);
                acc.2.push(p.2);
                acc.3.push(p.3);
                acc
            },
        );
        prop_assert!(gaussian_kl(&m0, &v0, &m1, &v1).unwrap() >= 0.0);
        prop_assert!(gaussian_kl(&m0, &v0, &m0, &v0).unwrap().abs() <= 1e-12);
    }
}

#[test]
fn kl_is_invariant_to_a_shared_affine_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let real = standardized(&normal(2000, 1, 0.0, 1.0, &mut rng), 0.0, 1.0);
    let sim = standardized(&normal(2000, 1, 0.0, 1.0, &mut rng), 3.0, 1.0);
    let twice = |x: &Array| x.map(|v| 2.0 * v);
    let r = kl_ratio_encoded(&real, &sim, &twice(&real), &twice(&sim), false).unwrap();
    assert!((r.kl_original - 4.5).abs() < 1e-6, "{}", r.kl_original);
    assert!((r.kl_latent - 4.5).abs() < 1e-6, "{}", r.kl_latent);
    assert!((r.kl_latent - r.kl_original).abs() < 1e-6);
}

#[test]
fn identical_sets_give_zero_everywhere() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = normal(300, 3, 0.0, 1.0, &mut rng);
    let model = latent_model(1);
    let r = kl_ratio(&model, &x, &x, false).unwrap();
    assert_eq!((r.kl_original, r.kl_latent, r.kl_ratio), (0.0, 0.0, 0.0));
}

#[test]
fn identity_encoders_give_unit_ratio() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let real = normal(500, 3, 0.0, 1.0, &mut rng);
    let sim = normal(500, 3, 0.5, 1.3, &mut rng);
    let model = latent_model(2);
    let r = kl_ratio(&model, &real, &sim, false).unwrap();
    assert_eq!(r.excluded_latent, vec![3, 4]);
    assert!(r.excluded_original.is_empty());
    assert!(r.kl_original > 0.1);
    assert!((r.kl_ratio - 1.0).abs() < 1e-9, "{}", r.kl_ratio);
    assert!(!r.floored);
}

#[test]
fn kl_requires_enough_samples_and_flags_floored_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = latent_model(3);
    let small = normal(50, 3, 0.0, 1.0, &mut rng);
    let big = normal(200, 3, 0.0, 1.0, &mut rng);
    assert!(matches!(
        kl_ratio(&model, &small, &big, false),
        Err(GapError::TooFewSamples { .. })
    ));
    let mut flat = big.clone();
    for r in 0..flat.rows() {
        flat.set(r, 0, 0.25);
    }
    let fit = gaussian_fit_kl(&flat, &big).unwrap();
    assert!(fit.floored && fit.kl.is_finite());
}

#[test]
fn knn_estimate_tracks_the_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = normal(2000, 1, 0.0, 1.0, &mut rng);
    let q = normal(2000, 1, 1.0, 1.0, &mut rng);
    let est = knn_kl(&p, &q, 5).unwrap();
    assert!((est - 0.5).abs() < 0.15, "knn estimate {est}");
    let same = knn_kl(&p, &normal(2000, 1, 0.0, 1.0, &mut rng), 5).unwrap();
    assert!(same.abs() < 0.1, "{same}");
}

#[test]
fn m_gap_is_zero_at_init_and_tracks_a_constant_offset() {
    let mut model = latent_model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let obs = normal(64, 3, 0.0, 1.0, &mut rng);
    assert_eq!(m_identity_gap(&model, &obs).unwrap(), 0.0);
    let last = model.m.num_layers() - 1;
    model.m.bias_mut(last).data_mut().copy_from_slice(&[1.2, 0.0, 1.6, 0.0, 0.0]);
    assert!((m_identity_gap(&model, &obs).unwrap() - 2.0).abs() < 1e-12);
    assert!(matches!(
        m_identity_gap(&model, &Array::zeros(&[0, 3])),
        Err(GapError::Empty)
    ));
}

#[test]
fn degradation_table_shape_and_shared_unit_column() {
    let home = make_env(&EnvSpec::base(Family::Pendulum, Role::Real)).unwrap();
    let expert = ScriptedExpert::new(&home);
    let scales = [1.0, 1.05, 1.1, 1.5, 2.0];
    let seeds = [1, 2];
    let table = degradation_study(
        &expert,
        Family::Pendulum,
        &[Perturbation::Gravity, Perturbation::Mass],
        &scales,
        2,
        &seeds,
    )
    .unwrap();
    assert_eq!(table.rows.len(), 2);
    let unit: Vec<_> = table.rows.iter().map(|r| r.cells[0].per_seed.clone()).collect();
    assert_eq!(unit[0], unit[1]);
    for (i, &s) in seeds.iter().enumerate() {
        assert_eq!(unit[0][i], evaluate_policy(&home, &expert, 2, s).unwrap().mean);
    }
    let csv = table.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "axis,1,1.05,1.1,1.5,2");
    assert_eq!(lines.len(), 3);
    assert!(lines.iter().all(|l| l.split(',').count() == 6));
    assert_eq!(table.to_long_csv().lines().count(), 1 + 2 * 5 * 2);
}
