use proptest::prelude::*;
use scoremix::activation::rho;
use scoremix::decomposition::robust_decompose;
use scoremix::evaluation::match_components;
use scoremix::io::{read_csv, write_csv};
use scoremix::moments::{empirical_m3, exact_cp_tensor};
use scoremix::score::ScoreTensor;
use scoremix::tensor::{Matrix, SymTensor3};
use scoremix::{Activation, Dataset, DecompositionParams, MomentMode, ScoreModel, Transform};

fn unit_matrix(d: usize, r: usize, raw: &[f64]) -> Matrix {
    let mut u = Matrix::from_fn(d, r, |i, j| raw[j * d + i]);
    for mut c in u.column_iter_mut() {
        let n = c.norm();
        c /= n;
    }
    u
}

fn max_asymmetry(t: &SymTensor3) -> f64 {
    let d = t.dim();
    let mut worst: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            for k in 0..d {
                let v = t.get(i, j, k);
                for w in [t.get(j, i, k), t.get(k, j, i), t.get(i, k, j)] {
                    worst = worst.max((v - w).abs());
                }
            }
        }
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gaussian_recursion_matches_hermite_form(x in prop::collection::vec(-4.0f64..4.0, 1..6)) {
        let d = x.len();
        let model = ScoreModel::standard_gaussian(d).unwrap();
        let ScoreTensor::Order3(s3) = model.score_m_recursive(&x, 3).unwrap() else {
            panic!("order 3 must give a third-order tensor");
        };
        let dl = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    let h3 = x[i] * x[j] * x[k] - x[i] * dl(j, k) - x[j] * dl(i, k) - x[k] * dl(i, j);
                    prop_assert!((s3.get(i, j, k) - h3).abs() <= 1e-10 * (1.0 + h3.abs()));
                }
            }
        }
    }

    #[test]
    fn mixture_scores_are_symmetric(
        x in prop::collection::vec(-6.0f64..6.0, 3),
        shift in -3.0f64..3.0,
        pi0 in 0.05f64..0.95,
    ) {
        let means = Matrix::from_column_slice(3, 2, &[shift, 0.0, 1.0, -shift, 0.5, -1.0]);
        let model = ScoreModel::gaussian_mixture(means, vec![pi0, 1.0 - pi0]).unwrap();
        let eval = model.evaluate(&x).unwrap();
        prop_assert!((&eval.s2 - eval.s2.transpose()).abs().max() == 0.0);
        prop_assert!(max_asymmetry(&eval.s3) == 0.0);
        prop_assert!(eval.s3.is_finite());
    }

    #[test]
    fn cubic_transform_inverts(x in -5.0f64..5.0, a3 in 0.0f64..2.0, a1 in 0.1f64..3.0) {
        let phi = Transform::new_cubic(a3, a1).unwrap();
        let back = phi.inverse(phi.forward(x));
        prop_assert!((back - x).abs() <= 1e-10 * (1.0 + x.abs()));
    }

    #[test]
    fn rho_of_cubic_is_six(norm in 0.1f64..3.0, bias in -2.0f64..2.0) {
        let est = rho(Activation::Cubic, norm, bias).unwrap();
        prop_assert!((est.value - 6.0).abs() < 1e-9);
    }

    #[test]
    fn concatenation_is_weighted_average(seed in 0u64..1000, n1 in 1usize..300, n2 in 1usize..300) {
        let d = 3;
        let cfg = scoremix::ExperimentConfig { d, r: 2, n: n1 + n2, master_seed: seed, ..Default::default() };
        let model = cfg.generate_model().unwrap();
        let data = cfg.generate_data(&model).unwrap();
        let a = data.head(n1);
        let b = Dataset::new(d, data.x_raw()[n1 * d..].to_vec(), data.y()[n1..].to_vec()).unwrap();
        let score = ScoreModel::standard_gaussian(d).unwrap();
        let whole = empirical_m3(&a.concat(&b).unwrap(), &score, MomentMode::Glm).unwrap().tensor;
        let ta = empirical_m3(&a, &score, MomentMode::Glm).unwrap().tensor;
        let tb = empirical_m3(&b, &score, MomentMode::Glm).unwrap().tensor;
        let n = (n1 + n2) as f64;
        let mix = ta.scaled(n1 as f64 / n).add_scaled(n2 as f64 / n, &tb).unwrap();
        prop_assert!(whole.max_abs_diff(&mix) <= 1e-12 * (1.0 + whole.max_abs()));
    }

    #[test]
    fn decomposition_reconstructs_and_scales(
        raw in prop::collection::vec(-1.0f64..1.0, 18),
        c in prop::collection::vec(0.3f64..2.0, 3),
        alpha in 0.1f64..10.0,
        seed in 0u64..1000,
    ) {
        let u = unit_matrix(6, 3, &raw);
        prop_assume!(u.singular_values().min() >= 0.2);
        let t = exact_cp_tensor(&u, &c).unwrap();
        let p = DecompositionParams::default_for(3);
        let res = robust_decompose(&t, 3, &p, seed).unwrap();
        prop_assert!(res.residual_fro / t.frobenius_norm() <= 1e-6);
        prop_assert!(match_components(&u, &res.directions).unwrap().max_error <= 1e-6);
        for i in 0..3 {
            for j in i + 1..3 {
                prop_assert!(res.directions.column(i).dot(&res.directions.column(j)).abs() < 0.999);
            }
        }
        let scaled = robust_decompose(&t.scaled(alpha), 3, &p, seed).unwrap();
        prop_assert!((&scaled.directions - &res.directions).abs().max() <= 1e-8);
        for (x, y) in scaled.coefficients.iter().zip(&res.coefficients) {
            prop_assert!((x - alpha * y).abs() <= 1e-8 * alpha * (1.0 + y.abs()));
        }
    }

    #[test]
    fn match_is_invariant_to_joint_permutation_and_sign(
        raw in prop::collection::vec(-1.0f64..1.0, 24),
        flips in prop::collection::vec(any::<bool>(), 3),
        shift in 0usize..3,
    ) {
        let truth = unit_matrix(4, 3, &raw[..12]);
        let est = unit_matrix(4, 3, &raw[12..]);
        let base = match_components(&truth, &est).unwrap();
        let perm = |m: &Matrix, signed: bool| {
            Matrix::from_fn(4, 3, |i, j| {
                let s = if signed && flips[j] { -1.0 } else { 1.0 };
                s * m[(i, (j + shift) % 3)]
            })
        };
        let moved = match_components(&perm(&truth, true), &perm(&est, false)).unwrap();
        prop_assert!((base.max_error - moved.max_error).abs() < 1e-12);
        prop_assert!((base.mean_error - moved.mean_error).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip_is_bit_exact(values in prop::collection::vec(-1e6f64..1e6, 1..40)) {
        let d = 1 + values.len() % 3;
        let n = values.len() / d;
        prop_assume!(n >= 1);
        let x = values[..n * d].to_vec();
        let y: Vec<f64> = x.iter().step_by(d).map(|v| v.sin() * 1e-7).collect();
        let data = Dataset::new(d, x, y).unwrap();
        let mut buf = Vec::new();
        write_csv(&data, &mut buf).unwrap();
        prop_assert_eq!(read_csv(buf.as_slice()).unwrap(), data);
    }
}
