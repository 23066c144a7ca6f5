//! Acceptance suite. Each test prints one `[PASS]` or `[FAIL]` line with the
//! measured quantity, then asserts.

mod common;

use std::time::{Duration, Instant};

use minbal::balance::{expand_basis, target_profile, BasisConfig, TargetKind};
use minbal::bench::{run_bench, BalanceMode, BenchSpec, DgpSpec, TuningSpec};
use minbal::dispersion::linspace;
use minbal::tuning::{tune_delta, TuneConfig};
use minbal::{
    check_conjugacy, gen_kang_schafer, solve_dual, variance_estimate, DispersionKind, DispersionSpec, DualProblem, Estimand, Overlap,
    SolveResult, SolverOptions,
};
use ndarray::{array, Array1, Array2};
use rand::Rng;

use common::*;

fn report(id: &str, pass: bool, detail: String) {
    println!("[{}] {id} {detail}", if pass { "PASS" } else { "FAIL" });
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

/// Worst standardized KKT residual of a converged solve.
fn kkt_worst(res: &SolveResult, basis: &minbal::BasisMatrix) -> f64 {
    res.kkt
        .iter()
        .map(|e| e.residual / basis.columns[e.k].stored_sd())
        .fold(0.0, f64::max)
}

#[test]
fn c01_conjugacy_identity() {
    let start = Instant::now();
    let var = DispersionSpec::new(DispersionKind::Variance, 500, 1000).unwrap();
    let ent = DispersionSpec::new(DispersionKind::NegativeEntropy, 500, 1000).unwrap();
    // Variance scores stay near 0 (weights near 1/r); entropy scores sit
    // around log(r) - 1 for weights near 1/r.
    let rv = check_conjugacy(&var, &linspace(-1.0, 1.0, 101)).unwrap();
    let re = check_conjugacy(&ent, &linspace(-2.0, 12.0, 101)).unwrap();
    let worst = rv.max_discrepancy().max(re.max_discrepancy());
    let elapsed = start.elapsed();
    let pass = worst <= 1e-8 && within(elapsed, 1);
    report(
        "C1 conjugacy",
        pass,
        format!("variance={:.2e} entropy={:.2e} time={:?}", rv.max_discrepancy(), re.max_discrepancy(), elapsed),
    );
    assert!(pass);
}

/// Solves every instance and returns the worst l-inf gap to the oracle.
fn oracle_sweep(kind: DispersionKind, count: usize, seed: u64) -> (f64, usize, f64) {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    let mut worst_kkt = 0.0f64;
    let mut solved = 0;
    while solved < count {
        let n = rng.random_range(12..=30);
        let k = rng.random_range(1..=3);
        let inst = random_instance(&mut rng, n, k, k + 4);
        let oracle = match kind {
            DispersionKind::Variance => Some(variance_qp(&inst.basis, &inst.z)),
            _ => entropy_newton(&inst.basis, &inst.z),
        };
        // Entropy balance is infeasible when the target leaves the
        // respondents' hull; those draws are skipped.
        let Some(oracle) = oracle else { continue };
        let spec = DispersionSpec::for_indicator(kind, &inst.z, 1e-3).unwrap();
        let p = DualProblem::new(&inst.basis, &inst.z, Array1::zeros(k + 1), spec).unwrap();
        let res = solve_dual(&p, &SolverOptions::default()).unwrap();
        let gap = if res.converged {
            linf(res.weights.as_slice().unwrap(), &oracle)
        } else {
            f64::INFINITY
        };
        worst = worst.max(gap);
        worst_kkt = worst_kkt.max(kkt_worst(&res, &inst.basis));
        solved += 1;
    }
    (worst, solved, worst_kkt)
}

#[test]
fn c02_variance_matches_quadratic_program() {
    let start = Instant::now();
    let (worst, count, _) = oracle_sweep(DispersionKind::Variance, 100, 2);
    let elapsed = start.elapsed();
    let pass = worst <= 1e-6 && within(elapsed, 10);
    report("C2 variance-qp", pass, format!("instances={count} linf={worst:.2e} time={elapsed:?}"));
    assert!(pass);
}

#[test]
fn c03_entropy_matches_newton() {
    let start = Instant::now();
    let (worst, count, _) = oracle_sweep(DispersionKind::NegativeEntropy, 50, 3);
    let elapsed = start.elapsed();
    let pass = worst <= 1e-6 && within(elapsed, 10);
    report("C3 entropy-newton", pass, format!("instances={count} linf={worst:.2e} time={elapsed:?}"));
    assert!(pass);
}

#[test]
fn c04_kkt_certificate() {
    let mut rng = rng(4);
    let mut worst = 0.0f64;
    let mut converged = 0;
    // Exact-balance instances from the oracle sweeps.
    for (kind, seed) in [(DispersionKind::Variance, 2), (DispersionKind::NegativeEntropy, 3)] {
        let (_, n, k) = oracle_sweep(kind, 30, seed);
        converged += n;
        worst = worst.max(k);
    }
    // Approximate balance on standardized bases for every dispersion.
    let cfg = BasisConfig::default();
    for _ in 0..60 {
        let n = rng.random_range(30..=80);
        let d = rng.random_range(1..=4);
        let x = Array2::from_shape_fn((n, d), |_| normal(&mut rng));
        let names: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
        let basis = expand_basis(x.view(), &names, &cfg).unwrap();
        let z: Vec<bool> = (0..n).map(|i| i % 5 != 0).collect();
        let delta = rng.random_range(0.0..0.3);
        for kind in DispersionKind::ALL {
            let spec = DispersionSpec::for_indicator(kind, &z, 1e-3).unwrap();
            let p = DualProblem::new(&basis, &z, basis.delta_vector(delta), spec).unwrap();
            let res = solve_dual(&p, &SolverOptions::default()).unwrap();
            if res.converged {
                converged += 1;
                worst = worst.max(kkt_worst(&res, &basis));
            }
        }
    }
    let pass = worst <= 1e-6 && converged > 0;
    report("C4 kkt", pass, format!("converged_solves={converged} worst_residual={worst:.2e}"));
    assert!(pass);
}

#[test]
fn c05_inverse_propensity_consistency() {
    let start = Instant::now();
    let mut medians = Vec::new();
    for (idx, n) in [500usize, 2000, 8000].into_iter().enumerate() {
        let mut errs = Vec::new();
        for rep in 0..20u64 {
            let data = gen_kang_schafer(n, Overlap::Good, 5_000 + 100 * idx as u64 + rep).unwrap();
            let basis = expand_basis(data.x.view(), &data.names, &BasisConfig::default()).unwrap();
            let spec = DispersionSpec::for_indicator(DispersionKind::NegativeEntropy, &data.z, 1e-3).unwrap();
            let p = DualProblem::new(&basis, &data.z, Array1::zeros(basis.ncols()), spec).unwrap();
            let res = solve_dual(&p, &SolverOptions::default()).unwrap();
            let pi = &data.truth.as_ref().unwrap().propensity;
            let mut ss = 0.0;
            let mut r = 0;
            for i in 0..n {
                if data.z[i] {
                    ss += (n as f64 * res.weights[i] - 1.0 / pi[i]).powi(2);
                    r += 1;
                }
            }
            errs.push((ss / r as f64).sqrt());
        }
        medians.push(median(errs));
    }
    let elapsed = start.elapsed();
    let decreasing = medians.windows(2).all(|w| w[1] < w[0]);
    let pass = decreasing && within(elapsed, 120);
    report(
        "C5 consistency",
        pass,
        format!("median_rmse n=500:{:.4} n=2000:{:.4} n=8000:{:.4} time={elapsed:?}", medians[0], medians[1], medians[2]),
    );
    assert!(pass);
}

fn ks_spec(overlap: Overlap, n: usize, reps: usize, kind: DispersionKind, modes: Vec<BalanceMode>, seed: u64) -> BenchSpec {
    BenchSpec {
        dgp: DgpSpec::KangSchafer { n, overlap },
        replications: reps,
        estimands: vec![Estimand::Mean],
        dispersions: vec![kind],
        modes,
        moments: 1,
        tuning: TuningSpec::default(),
        seed,
        solver: SolverOptions::default(),
        epsilon: 1e-3,
    }
}

#[test]
fn c06_rmse_band_good_overlap() {
    let start = Instant::now();
    let spec = ks_spec(Overlap::Good, 1000, 200, DispersionKind::NegativeEntropy, vec![BalanceMode::Exact], 6);
    let rep = run_bench(&spec).unwrap();
    let row = rep.row(Estimand::Mean, DispersionKind::NegativeEntropy, "exact").unwrap();
    let elapsed = start.elapsed();
    let rmse = row.rmse.unwrap_or(f64::NAN);
    let pass = (3.0..=8.0).contains(&rmse) && within(elapsed, 300);
    report(
        "C6 rmse-band",
        pass,
        format!(
            "rmse={rmse:.4} mc_se={:.4} bias={:.4} completed={}/{} time={elapsed:?}",
            row.mc_se_rmse.unwrap_or(f64::NAN),
            row.bias.unwrap_or(f64::NAN),
            row.completed,
            row.replications
        ),
    );
    assert!(pass);
}

#[test]
fn c07_tuned_vs_exact_bad_overlap() {
    let start = Instant::now();
    let spec = ks_spec(
        Overlap::Bad,
        1000,
        200,
        DispersionKind::NegativeEntropy,
        vec![BalanceMode::Exact, BalanceMode::Tuned],
        7,
    );
    let rep = run_bench(&spec).unwrap();
    let exact = rep.row(Estimand::Mean, DispersionKind::NegativeEntropy, "exact").unwrap();
    let tuned = rep.row(Estimand::Mean, DispersionKind::NegativeEntropy, "tuned").unwrap();
    let elapsed = start.elapsed();
    let (re, rt) = (exact.rmse.unwrap_or(f64::NAN), tuned.rmse.unwrap_or(f64::NAN));
    let pass = rt <= 1.05 * re && within(elapsed, 900);
    report(
        "C7 tuned-vs-exact",
        pass,
        format!(
            "exact={re:.4} ({} infeasible) tuned={rt:.4} mean_delta={:.4} ratio={:.4} time={elapsed:?}",
            exact.infeasible,
            tuned.mean_delta.unwrap_or(f64::NAN),
            rt / re
        ),
    );
    assert!(pass);
}

#[test]
fn c08_coverage() {
    let start = Instant::now();
    let spec = ks_spec(Overlap::Good, 2000, 300, DispersionKind::Variance, vec![BalanceMode::Exact], 8);
    let rep = run_bench(&spec).unwrap();
    let row = rep.row(Estimand::Mean, DispersionKind::Variance, "exact").unwrap();
    let elapsed = start.elapsed();
    let cov = row.coverage.unwrap_or(f64::NAN);
    let pass = (0.88..=0.99).contains(&cov) && within(elapsed, 600);
    report(
        "C8 coverage",
        pass,
        format!(
            "coverage={cov:.4} rmse={:.4} bias={:.4} completed={} time={elapsed:?}",
            row.rmse.unwrap_or(f64::NAN),
            row.bias.unwrap_or(f64::NAN),
            row.completed
        ),
    );
    assert!(pass);
}

#[test]
fn c09_variance_transcription() {
    let two = minbal::BasisMatrix::from_values(Array2::ones((2, 1)), vec!["(intercept)".into()], true).unwrap();
    let v2 = variance_estimate(&array![0.5, 0.5], &[true, true], &array![2.0, 4.0], &two).unwrap().v_hat;

    let mut rng = rng(9);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(6..=15);
        let k = rng.random_range(1..=2);
        let inst = random_instance(&mut rng, n, k, k + 2);
        let w: Vec<f64> = (0..n).map(|i| if inst.z[i] { rng.random_range(0.01..1.0) } else { 0.0 }).collect();
        let y: Vec<f64> = (0..n).map(|i| if inst.z[i] { normal(&mut rng) * 3.0 + 1.0 } else { f64::NAN }).collect();
        let ours = variance_estimate(&Array1::from(w.clone()), &inst.z, &Array1::from(y.clone()), &inst.basis)
            .unwrap()
            .v_hat;
        let oracle = transcribed_variance(&w, &inst.z, &y, &inst.basis);
        worst = worst.max((ours - oracle).abs() / (1.0 + oracle.abs()));
    }
    let pass = (v2 - 1.0).abs() <= 1e-12 && worst <= 1e-10;
    report("C9 variance-transcription", pass, format!("n2_example={v2} worst_rel={worst:.2e}"));
    assert!(pass);
}

#[test]
fn c10_determinism() {
    // Tuning report twice.
    let data = gen_kang_schafer(400, Overlap::Good, 10).unwrap();
    let basis = expand_basis(data.x.view(), &data.names, &BasisConfig::default()).unwrap();
    let target = target_profile(&basis, &data.z, TargetKind::PopulationMean).unwrap();
    let spec = DispersionSpec::for_indicator(DispersionKind::NegativeEntropy, &data.z, 1e-3).unwrap();
    let cfg = TuneConfig::new(TuneConfig::default_grid(basis.balanced_count(), 11), 77);
    let run = || serde_json::to_string(&tune_delta(&basis, &data.z, &target, &spec, &SolverOptions::default(), &cfg).unwrap()).unwrap();
    let tune_same = run() == run();

    let bspec = ks_spec(Overlap::Bad, 300, 6, DispersionKind::NegativeEntropy, vec![BalanceMode::Exact, BalanceMode::Tuned], 10);
    let brun = || serde_json::to_string(&run_bench(&bspec).unwrap()).unwrap();
    let bench_same = brun() == brun();

    let single = TuneConfig::new(vec![0.07], 1);
    let sole = tune_delta(&basis, &data.z, &target, &spec, &SolverOptions::default(), &single).unwrap().selected;

    let pass = tune_same && bench_same && sole == 0.07;
    report("C10 determinism", pass, format!("tune_identical={tune_same} bench_identical={bench_same} singleton={sole}"));
    assert!(pass);
}
