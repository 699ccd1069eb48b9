mod common;

use common::*;
use intentgrasp_core::ambiguity::{divergence_matrices_with_data, kl_gauss, pinsker_bound, DivergenceReport};
use intentgrasp_core::gaussian::GaussianParams;
use intentgrasp_core::taskmodel::FitConfig;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_gaussian(rng: &mut ChaCha8Rng) -> GaussianParams {
    let a = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
    let cov = &a * a.transpose() + DMatrix::identity(2, 2) * 0.3;
    let mean = DVector::from_fn(2, |_, _| rng.random_range(-1.5..1.5));
    GaussianParams::new(mean, cov).unwrap()
}

/// `E_P[log p(x) − log q(x)]` by sampling from `P`.
fn monte_carlo_kl(p: &GaussianParams, q: &GaussianParams, n: usize, seed: u64) -> f64 {
    let draws = p.sample(n, seed);
    draws
        .iter()
        .map(|x| p.log_pdf(x).unwrap() - q.log_pdf(x).unwrap())
        .sum::<f64>()
        / n as f64
}

#[test]
fn closed_form_kl_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut done = 0;
    while done < 10 {
        let (p, q) = (random_gaussian(&mut rng), random_gaussian(&mut rng));
        let exact = kl_gauss(&p, &q).unwrap();
        // A 1% relative check is meaningless for near-identical pairs.
        if exact < 0.2 {
            continue;
        }
        let estimate = monte_carlo_kl(&p, &q, 400_000, 100 + done);
        assert!(
            (estimate - exact).abs() <= 0.01 * exact,
            "pair {done}: closed form {exact}, sampled {estimate}"
        );
        done += 1;
    }
}

fn symmetric_between(report: &DivergenceReport, a: &str, b: &str) -> f64 {
    report.symmetric[report.index_of(a).unwrap()][report.index_of(b).unwrap()]
}

#[test]
fn removing_handover_zones_separates_transfer_from_handover() {
    let report = |name: &str| {
        let (model, data) = builtin_model(name);
        divergence_matrices_with_data(&model, &data.samples, &FitConfig::default()).unwrap()
    };
    let seven = report("cup7");
    let five = report("cup5");
    assert!(symmetric_between(&five, "Transfer", "Handover") < symmetric_between(&seven, "Transfer", "Handover"));
    assert!(symmetric_between(&five, "Usage", "Handover") > symmetric_between(&seven, "Usage", "Handover"));
    assert_eq!(five.substituted, vec!["Handover".to_string()]);
}

#[test]
fn reports_on_builtin_models_are_consistent() {
    for name in MODELS {
        let (model, data) = builtin_model(name);
        let r = divergence_matrices_with_data(&model, &data.samples, &FitConfig::default()).unwrap();
        let m = r.tasks.len();
        for i in 0..m {
            assert_eq!(r.nonsymmetric[i][i], 0.0);
            for j in 0..m {
                assert_eq!(r.symmetric[i][j], r.nonsymmetric[i][j] + r.nonsymmetric[j][i]);
                assert_eq!(r.pinsker[i][j], pinsker_bound(r.nonsymmetric[i][j]).unwrap());
                assert_eq!(r.pinsker[i][j], (r.nonsymmetric[i][j] / 2.0).sqrt());
            }
        }
        assert!(r.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        let trace: f64 = r.eigenvalues.iter().sum();
        assert!(trace.abs() <= 1e-9 * r.eigenvalues[0].abs().max(1.0));
    }
}
