//! Monte Carlo checks of score and moment statistics.

use scoremix::evaluation::{ols_slope, sweep};
use scoremix::moments::empirical_m3;
use scoremix::rng::SeedStream;
use scoremix::tensor::Matrix;
use scoremix::{ExperimentConfig, MomentMode, ScoreModel, Transform};

/// Largest |mean| / standard-error over every entry of `S1`, `S2`, `S3`.
fn worst_z(model: &ScoreModel, n: usize, seed: u64) -> [f64; 3] {
    let d = model.dim();
    let mut rng = SeedStream::new(seed).rng("zero-mean", 0);
    let mut raw = vec![0.0; d];
    let sizes = [d, d * d, d * d * d];
    let mut sum: Vec<Vec<f64>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
    let mut sq = sum.clone();
    for _ in 0..n {
        model.sample_into(&mut rng, &mut raw);
        let e = model.evaluate(&raw).unwrap();
        let s3 = e.s3.to_tensor3();
        let parts: [&[f64]; 3] = [e.s1.as_slice(), e.s2.as_slice(), s3.as_slice()];
        for (m, part) in parts.iter().enumerate() {
            for (k, v) in part.iter().enumerate() {
                sum[m][k] += v;
                sq[m][k] += v * v;
            }
        }
    }
    let nf = n as f64;
    let mut out = [0.0; 3];
    for m in 0..3 {
        for k in 0..sizes[m] {
            let mean = sum[m][k] / nf;
            let var = sq[m][k] / nf - mean * mean;
            if var > 1e-20 {
                out[m] = f64::max(out[m], mean.abs() / (var / nf).sqrt());
            }
        }
    }
    out
}

#[test]
fn scores_have_zero_mean() {
    let n = 1_000_000;
    let means = Matrix::from_column_slice(3, 2, &[1.5, 0.0, -0.5, -1.5, 0.5, 0.0]);
    let models = [
        ScoreModel::standard_gaussian(3).unwrap(),
        ScoreModel::gaussian_mixture(means, vec![0.4, 0.6]).unwrap(),
        ScoreModel::transformed(
            ScoreModel::standard_gaussian(2).unwrap(),
            Transform::new_affine(2.0, 0.5).unwrap(),
        ),
    ];
    for (i, model) in models.iter().enumerate() {
        let z = worst_z(model, n, i as u64);
        for (m, v) in z.iter().enumerate() {
            assert!(
                *v <= 5.0,
                "{} S{}: {v:.2} standard errors",
                model.family_name(),
                m + 1
            );
        }
    }
}

#[test]
fn empirical_m3_concentrates_at_root_n() {
    let cfg = ExperimentConfig {
        d: 5,
        r: 2,
        ..Default::default()
    };
    let model = cfg.generate_model().unwrap();
    let exact = model.exact_m3(MomentMode::Glm).unwrap();
    let score = cfg.score_model().unwrap();
    let exps = [4.0, 4.4, 4.8, 5.2, 5.6, 6.0];
    let mut lx = Vec::new();
    let mut ly = Vec::new();
    for (i, e) in exps.iter().enumerate() {
        let n = 10f64.powf(*e).round() as usize;
        // average over repeats so one unlucky draw cannot tilt the slope
        let reps = 4;
        let mut err = 0.0;
        for rep in 0..reps {
            let seeds = SeedStream::new(100 + i as u64).child("rep", rep);
            let data = cfg.generate_data_with(&model, n, &seeds).unwrap();
            let m3 = empirical_m3(&data, &score, MomentMode::Glm).unwrap().tensor;
            err += m3.add_scaled(-1.0, &exact).unwrap().frobenius_norm() / reps as f64;
        }
        lx.push((n as f64).ln());
        ly.push(err.ln());
    }
    let (slope, _, _) = ols_slope(&lx, &ly).unwrap();
    assert!((-0.65..=-0.35).contains(&slope), "slope {slope}");
}

#[test]
fn sweep_errors_decrease_with_n() {
    let cfg = ExperimentConfig {
        d: 6,
        r: 2,
        n_values: vec![10_000, 30_000, 100_000, 300_000],
        trials: 5,
        master_seed: 3,
        ..Default::default()
    };
    let res = sweep(&cfg).unwrap();
    let inversions = res.errors.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(inversions <= 1, "errors {:?}", res.errors);
    assert!(res.slope.unwrap() < 0.0);
}
