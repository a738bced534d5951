mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rseio_core::analysis::{random_pdm, riemannian_distance};
use rseio_core::channel::{log_sequence_probability, ArrivalSequence, DropoutModel};
use rseio_core::estimator::pcm_step;
use rseio_core::linalg::sym_eigenvalues;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn shape_strategy() -> impl Strategy<Value = PlantShape> {
    (1usize..=4, 1usize..=3, 1usize..=3, 1usize..=3).prop_map(|(n, m, p, e)| PlantShape::new(n, m, p, e))
}

fn channel_strategy() -> impl Strategy<Value = DropoutModel> {
    prop_oneof![
        (0.0f64..=1.0).prop_map(|gamma| DropoutModel::Bernoulli { gamma }),
        (0.01f64..0.99, 0.01f64..0.99, 0.0f64..=1.0)
            .prop_map(|(alpha, beta, gamma0)| DropoutModel::Markov { alpha, beta, gamma0 }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn perturbation_is_affine_in_error(shape in shape_strategy(), seed: u64, a in -1.0f64..1.0, b in -1.0f64..1.0) {
        let mut r = rng(seed);
        let model = random_plant(shape, 0.8, &mut r);
        let e1: Vec<f64> = (0..shape.n_e).map(|k| (k as f64 + 1.0) * 0.3).collect();
        let e2: Vec<f64> = (0..shape.n_e).map(|k| 0.5 - k as f64 * 0.2).collect();
        let mix: Vec<f64> = e1.iter().zip(&e2).map(|(x, y)| a * x + b * y).collect();
        let nominal = model.a(0).unwrap();
        let lhs = model.a_perturbed(0, &mix).unwrap() - &nominal;
        let rhs = (model.a_perturbed(0, &e1).unwrap() - &nominal) * a + (model.a_perturbed(0, &e2).unwrap() - &nominal) * b;
        prop_assert!(max_abs_diff(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn sensitivities_are_output_derivatives(shape in shape_strategy(), seed: u64) {
        // C(ε')A(ε) is bilinear, so a central difference is exact up to rounding
        let mut r = rng(seed);
        let model = random_plant(shape, 0.8, &mut r);
        let pair = model.sensitivity_matrices(0).unwrap();
        let h = 1e-3;
        for k in 0..shape.n_e {
            let mut e = vec![0.0; shape.n_e];
            e[k] = h;
            let plus = model.a_perturbed(0, &e).unwrap();
            e[k] = -h;
            let minus = model.a_perturbed(0, &e).unwrap();
            let c = model.c(1).unwrap();
            let d_state = (&c * &plus - &c * &minus) / (2.0 * h);
            let rows = pair.s_mat.rows(2 * k * shape.p, shape.p).into_owned();
            prop_assert!(max_abs_diff(&d_state, &rows) < 1e-9);
        }
    }

    #[test]
    fn distance_is_symmetric_and_invariant(n in 1usize..=4, seed: u64) {
        let mut r = rng(seed);
        let p = random_pdm(n, &mut r);
        let q = random_pdm(n, &mut r);
        let d = riemannian_distance(&p, &q).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!(riemannian_distance(&p, &p).unwrap() < 1e-7);
        prop_assert!((riemannian_distance(&q, &p).unwrap() - d).abs() < 1e-9 * d.max(1.0));
        let inv = |m: &Mat| m.clone().try_inverse().unwrap();
        prop_assert!((riemannian_distance(&inv(&p), &inv(&q)).unwrap() - d).abs() < 1e-8 * d.max(1.0));
        let m = random_state_matrix(n, 1.0, &mut r);
        let cp = &m * &p * m.transpose();
        let cq = &m * &q * m.transpose();
        prop_assert!((riemannian_distance(&cp, &cq).unwrap() - d).abs() < 1e-7 * d.max(1.0));
    }

    #[test]
    fn sequence_probabilities_sum_to_one(channel in channel_strategy(), len in 1usize..=8) {
        let total: f64 = (0..1u64 << len)
            .map(|m| log_sequence_probability(&channel, &ArrivalSequence::from_index(m, len)).unwrap().exp())
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pcm_step_stays_symmetric_positive_definite(shape in shape_strategy(), seed: u64, mu in 0.2f64..=1.0, gamma: bool) {
        let mut r = rng(seed);
        let model = random_plant(shape, mu, &mut r);
        let p = random_spd(shape.n, 0.05, &mut r);
        let next = pcm_step(&model, &p, gamma, 0).unwrap();
        prop_assert_eq!(&next, &next.transpose());
        prop_assert!(sym_eigenvalues(&next)[0] > 0.0);
    }
}
