mod common;

use minbal::rng::{standard_normal, stream_rng, uniform_open01};
use minbal::{gen_kang_schafer, gen_wong_chan, load_csv, CsvSchema, OutcomeModel, Overlap};

#[test]
fn kang_schafer_moments() {
    let d = gen_kang_schafer(100_000, Overlap::Good, 2024).unwrap();
    let t = d.truth.as_ref().unwrap();
    let x1_mean = d.x.column(0).mean().unwrap();
    assert!((x1_mean - (1.0f64 / 8.0).exp()).abs() < 0.01, "{x1_mean}");
    assert_eq!(t.target_mean, Some(210.0));
    assert!(t.propensity.iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn kang_schafer_full_outcome_mean() {
    // Replays the generator's stream to recover outcomes for every unit.
    let n = 100_000;
    let d = gen_kang_schafer(n, Overlap::Bad, 7).unwrap();
    let mut rng = stream_rng(7, 0);
    let mut sum = 0.0;
    let y = d.y.as_ref().unwrap();
    for i in 0..n {
        let u: [f64; 4] = std::array::from_fn(|_| standard_normal(&mut rng));
        let eps = standard_normal(&mut rng);
        let _ = uniform_open01(&mut rng);
        let yi = 210.0 + 27.4 * u[0] + 13.7 * (u[1] + u[2] + u[3]) + eps;
        if d.z[i] {
            assert_eq!(yi, y[i]);
        }
        sum += yi;
    }
    let mean = sum / n as f64;
    assert!((mean - 210.0).abs() < 0.3, "{mean}");
}

#[test]
fn wong_chan_treatment_rate_matches_monte_carlo() {
    let d = gen_wong_chan(100_000, OutcomeModel::A, 99).unwrap();
    let rate = d.respondents() as f64 / d.n() as f64;
    // E[expit(-Z1 - 0.1 Z4)] by brute force with an unrelated sampler.
    let mut rng = common::rng(123);
    let draws = 10_000_000;
    let mut acc = 0.0;
    for _ in 0..draws {
        let z1 = common::normal(&mut rng);
        let z4 = common::normal(&mut rng);
        let eta: f64 = -z1 - 0.1 * z4;
        acc += 1.0 / (1.0 + (-eta).exp());
    }
    let oracle = acc / draws as f64;
    assert!((rate - oracle).abs() < 0.005, "rate {rate} oracle {oracle}");
}

#[test]
fn wong_chan_model_a_effect_identity() {
    let n = 500;
    let d = gen_wong_chan(n, OutcomeModel::A, 5).unwrap();
    let t = d.truth.as_ref().unwrap();
    let (y1, y0) = (t.y1.as_ref().unwrap(), t.y0.as_ref().unwrap());
    let mut rng = stream_rng(5, 0);
    for i in 0..n {
        let l: [f64; 10] = std::array::from_fn(|_| standard_normal(&mut rng));
        let _eps = standard_normal(&mut rng);
        let _ = uniform_open01(&mut rng);
        let s = 27.4 * l[0] + 13.7 * l[1] + 13.7 * l[2] + 13.7 * l[3];
        // (1.5 T - 0.5) is 1 for T = 1 and -0.5 for T = 0.
        assert!((y1[i] - y0[i] - 1.5 * s).abs() < 1e-9 * (1.0 + s.abs()));
        assert!((d.x[[i, 4]] - l[4]).abs() == 0.0);
    }
    let yb = gen_wong_chan(n, OutcomeModel::B, 5).unwrap();
    let tb = yb.truth.unwrap();
    assert_eq!(tb.y1, tb.y0);
    assert_eq!(tb.ate(), Some(0.0));
}

#[test]
fn simulated_csv_round_trips_through_loader() {
    let d = gen_wong_chan(64, OutcomeModel::B, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wc.csv");
    d.write_csv_path(&path).unwrap();
    let schema = CsvSchema {
        z_column: "z".into(),
        y_column: Some("y".into()),
        covariate_columns: d.names.clone(),
    };
    let back = load_csv(&path, &schema).unwrap();
    assert_eq!(back.x, d.x);
    assert_eq!(back.z, d.z);
    assert_eq!(back.y, d.y);
    assert!(back.truth.is_none());
}

/// Mean standardized covariate differences between respondents and
/// non-respondents under good overlap, against the published values.
/// The generator gives about (-0.52, -1.04, 0.00, -0.83), so this fails.
#[test]
fn kang_schafer_covariate_mean_differences() {
    let d = gen_kang_schafer(100_000, Overlap::Good, 31).unwrap();
    let expected = [-0.4, -0.2, 0.1, -0.1];
    for j in 0..4 {
        let col = d.x.column(j);
        let (mut s1, mut s0, mut n1, mut n0) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..d.n() {
            if d.z[i] {
                s1 += col[i];
                n1 += 1.0;
            } else {
                s0 += col[i];
                n0 += 1.0;
            }
        }
        let mean = col.mean().unwrap();
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.n() as f64 - 1.0)).sqrt();
        let diff = (s1 / n1 - s0 / n0) / sd;
        assert!((diff - expected[j]).abs() <= 0.05, "x{}: {diff} vs {}", j + 1, expected[j]);
    }
}
