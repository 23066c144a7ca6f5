use minbal::balance::ColumnKind;
use minbal::bench::{curves_csv, emit_curves, run_bench, BenchSpec};
use minbal::dispersion::linspace;
use minbal::estimator::{estimate_effect, estimate_mean, uniform_weights};
use minbal::simgen::read_headers;
use minbal::tuning::{grid_ceiling, tune_delta_with_solution, TuneResult};
use minbal::{
    check_conjugacy, expand_basis, gen_kang_schafer, gen_wong_chan, load_csv, solve_dual, target_profile, BalanceTarget, BasisConfig,
    BasisMatrix, CsvSchema, Dataset, DispersionKind, DispersionSpec, DualProblem, EstimateReport, Estimand, EstimatorForm,
    SolveResult, SolverOptions, TargetKind, TuneConfig,
};
use log::info;
use serde::Serialize;

use crate::args::*;
use crate::report::{envelope, write_json, ArmReport, Failure};

pub fn run(cli: &Cli) -> Result<(), Failure> {
    let det = cli.deterministic;
    match &cli.command {
        Command::Weights(a) => weights(a, det),
        Command::Tune(a) => tune(a, det),
        Command::Estimate(a) => estimate(a, det),
        Command::Simulate(a) => simulate(a),
        Command::Bench(a) => bench(a, det),
        Command::Check(a) => check(a, det),
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn check_model(m: &ModelArgs) -> Result<(), Failure> {
    if !(1..=2).contains(&m.moments) {
        return Err(usage(format!("--moments must be 1 or 2, got {}", m.moments)));
    }
    if !(m.epsilon.is_finite() && m.epsilon > 0.0) {
        return Err(usage("--epsilon must be positive"));
    }
    Ok(())
}

fn solver_options(s: &SolverArgs) -> Result<SolverOptions, Failure> {
    if !(s.tol.is_finite() && s.tol > 0.0) {
        return Err(usage("--tol must be positive"));
    }
    if s.max_iters == 0 {
        return Err(usage("--max-iters must be at least 1"));
    }
    Ok(SolverOptions {
        tol: s.tol,
        max_iters: s.max_iters,
        ..SolverOptions::default()
    })
}

fn check_delta(delta: f64) -> Result<(), Failure> {
    if !(delta.is_finite() && delta >= 0.0) {
        return Err(usage(format!("--delta must be finite and nonnegative, got {delta}")));
    }
    Ok(())
}

struct Loaded {
    data: Dataset,
    basis: BasisMatrix,
}

fn load(input: &InputArgs, model: &ModelArgs, need_y: bool) -> Result<Loaded, Failure> {
    if need_y && input.y.is_none() {
        return Err(usage("--y is required for this command"));
    }
    let covariates = match &input.covariates {
        Some(c) => c.clone(),
        None => read_headers(&input.input)?
            .into_iter()
            .filter(|h| *h != input.z && Some(h) != input.y.as_ref())
            .collect(),
    };
    let schema = CsvSchema {
        z_column: input.z.clone(),
        y_column: input.y.clone(),
        covariate_columns: covariates,
    };
    let data = load_csv(&input.input, &schema)?;
    let config = BasisConfig {
        moments: model.moments,
        standardize: !model.no_standardize,
        intercept: !model.no_intercept,
        cross_products: model.cross_products,
    };
    let basis = expand_basis(data.x.view(), &data.names, &config)?;
    info!(
        "{}: {} rows, {} with z = 1, {} basis columns",
        input.input.display(),
        data.n(),
        data.respondents(),
        basis.ncols()
    );
    if !basis.dropped.is_empty() {
        info!("dropped constant columns: {}", basis.dropped.join(", "));
    }
    Ok(Loaded { data, basis })
}

/// A group of units to weight and the profile it is balanced towards.
struct Arm {
    label: &'static str,
    z: Vec<bool>,
    target: BalanceTarget,
    spec: DispersionSpec,
}

fn arms(l: &Loaded, model: &ModelArgs) -> Result<Vec<Arm>, Failure> {
    let kind: DispersionKind = model.dispersion.into();
    let z = l.data.z.clone();
    let control: Vec<bool> = z.iter().map(|v| !v).collect();
    let b = &l.basis;
    let make = |label, z: Vec<bool>, target| -> Result<Arm, Failure> {
        let spec = DispersionSpec::for_indicator(kind, &z, model.epsilon)?;
        Ok(Arm { label, z, target, spec })
    };
    match model.estimand {
        EstimandArg::Mean => Ok(vec![make("respondents", z.clone(), target_profile(b, &z, TargetKind::PopulationMean)?)?]),
        EstimandArg::Att => Ok(vec![make("control", control, target_profile(b, &z, TargetKind::TreatedMean)?)?]),
        EstimandArg::Ate => {
            let pop = target_profile(b, &z, TargetKind::PopulationMean)?;
            Ok(vec![make("treated", z, pop.clone())?, make("control", control, pop)?])
        }
    }
}

impl Arm {
    fn units(&self) -> usize {
        self.z.iter().filter(|&&v| v).count()
    }

    fn solve(&self, basis: &BasisMatrix, delta: f64, opts: &SolverOptions) -> Result<SolveResult, Failure> {
        let p = DualProblem::with_target(basis, &self.z, self.target.clone(), basis.delta_vector(delta), self.spec)?;
        Ok(solve_dual(&p, opts)?)
    }
}

fn strict_check(strict: bool, reports: &[ArmReport]) -> Result<(), Failure> {
    if !strict {
        return Ok(());
    }
    match reports.iter().find(|r| !r.converged) {
        Some(r) => Err(Failure::NonConvergence(format!(
            "{} weights did not converge (status {}, {} iterations)",
            r.arm, r.status, r.iterations
        ))),
        None => Ok(()),
    }
}

#[derive(Serialize)]
struct BasisInfo {
    columns: Vec<ColumnInfo>,
    dropped: Vec<String>,
    balanced: usize,
}

#[derive(Serialize)]
struct ColumnInfo {
    name: String,
    kind: ColumnKind,
    sd: f64,
}

fn basis_info(b: &BasisMatrix) -> BasisInfo {
    BasisInfo {
        columns: b
            .columns
            .iter()
            .map(|c| ColumnInfo {
                name: c.name.clone(),
                kind: c.kind,
                sd: c.raw_sd,
            })
            .collect(),
        dropped: b.dropped.clone(),
        balanced: b.balanced_count(),
    }
}

#[derive(Serialize)]
struct WeightsPayload {
    n: usize,
    basis: BasisInfo,
    arms: Vec<ArmReport>,
}

fn weights(a: &WeightsArgs, det: bool) -> Result<(), Failure> {
    check_model(&a.model)?;
    check_delta(a.delta)?;
    let opts = solver_options(&a.solver)?;
    let l = load(&a.input, &a.model, false)?;
    let names = l.basis.names();
    let mut reports = Vec::new();
    for arm in arms(&l, &a.model)? {
        let res = arm.solve(&l.basis, a.delta, &opts)?;
        reports.push(ArmReport::new(arm.label, arm.units(), a.delta, &res, &names, true));
    }
    let payload = WeightsPayload {
        n: l.data.n(),
        basis: basis_info(&l.basis),
        arms: reports,
    };
    write_json(&envelope("weights", det, a, &payload), a.out.as_deref())?;
    strict_check(a.solver.strict, &payload.arms)
}

fn tune_config(g: &GridArgs, balanced: usize, seed: u64) -> Result<TuneConfig, Failure> {
    if g.grid_points == 0 {
        return Err(usage("--grid-points must be at least 1"));
    }
    let max = match g.grid_max.as_str() {
        "auto" => grid_ceiling(balanced),
        s => s
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite() && *v >= 0.0)
            .ok_or_else(|| usage(format!("--grid-max must be 'auto' or a nonnegative number, got '{s}'")))?,
    };
    let mut c = TuneConfig::new(linspace(0.0, max, g.grid_points), seed);
    c.replicates = g.replicates;
    c.replicate_fraction = g.fraction;
    c.allow_large_delta = g.allow_large_delta;
    c.validate(balanced).map_err(|e| usage(e.to_string()))?;
    Ok(c)
}

/// Per-arm tuning seed; the first arm uses the configured seed as is.
fn arm_seed(seed: u64, index: usize) -> u64 {
    if index == 0 {
        seed
    } else {
        minbal::rng::derive_seed(seed, minbal::rng::tags::TUNING_CONTROL, index as u64)
    }
}

#[derive(Serialize)]
struct TunedArm {
    tuning: TuneResult,
    solution: ArmReport,
}

#[derive(Serialize)]
struct TunePayload {
    n: usize,
    basis: BasisInfo,
    grid_ceiling: f64,
    arms: Vec<TunedArm>,
}

fn run_tuning(l: &Loaded, model: &ModelArgs, grid: &GridArgs, opts: &SolverOptions, with_weights: bool) -> Result<Vec<(TuneResult, SolveResult, ArmReport)>, Failure> {
    let names = l.basis.names();
    let mut out = Vec::new();
    for (i, arm) in arms(l, model)?.into_iter().enumerate() {
        let cfg = tune_config(grid, l.basis.balanced_count(), arm_seed(grid.seed, i))?;
        let (t, res) = tune_delta_with_solution(&l.basis, &arm.z, &arm.target, &arm.spec, opts, &cfg)?;
        info!("{}: selected delta {} of {} grid points", arm.label, t.selected, t.per_delta.len());
        let rep = ArmReport::new(arm.label, arm.units(), t.selected, &res, &names, with_weights);
        out.push((t, res, rep));
    }
    Ok(out)
}

fn tune(a: &TuneArgs, det: bool) -> Result<(), Failure> {
    check_model(&a.model)?;
    let opts = solver_options(&a.solver)?;
    let l = load(&a.input, &a.model, false)?;
    let tuned = run_tuning(&l, &a.model, &a.grid, &opts, true)?;
    let payload = TunePayload {
        n: l.data.n(),
        grid_ceiling: grid_ceiling(l.basis.balanced_count()),
        basis: basis_info(&l.basis),
        arms: tuned.into_iter().map(|(t, _, rep)| TunedArm { tuning: t, solution: rep }).collect(),
    };
    write_json(&envelope("tune", det, a, &payload), a.out.as_deref())?;
    if a.solver.strict {
        if let Some(t) = payload.arms.iter().find(|t| !t.solution.converged) {
            return Err(Failure::NonConvergence(format!("{} weights did not converge at the selected delta", t.solution.arm)));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct EstimatePayload {
    n: usize,
    basis: BasisInfo,
    arms: Vec<ArmReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    tuning: Vec<TuneResult>,
    estimate: EstimateReport,
}

fn estimate(a: &EstimateArgs, det: bool) -> Result<(), Failure> {
    check_model(&a.model)?;
    check_delta(a.delta)?;
    let opts = solver_options(&a.solver)?;
    let l = load(&a.input, &a.model, true)?;
    let names = l.basis.names();

    let (results, reports, tuning): (Vec<SolveResult>, Vec<ArmReport>, Vec<TuneResult>) = if a.tune {
        let tuned = run_tuning(&l, &a.model, &a.grid, &opts, false)?;
        let mut rs = Vec::new();
        let mut reps = Vec::new();
        let mut ts = Vec::new();
        for (t, r, rep) in tuned {
            ts.push(t);
            rs.push(r);
            reps.push(rep);
        }
        (rs, reps, ts)
    } else {
        let mut rs = Vec::new();
        let mut reps = Vec::new();
        for arm in arms(&l, &a.model)? {
            let res = arm.solve(&l.basis, a.delta, &opts)?;
            reps.push(ArmReport::new(arm.label, arm.units(), a.delta, &res, &names, false));
            rs.push(res);
        }
        (rs, reps, Vec::new())
    };
    strict_check(a.solver.strict, &reports)?;

    let y = l.data.y.as_ref().expect("outcome column checked above");
    let z = &l.data.z;
    let est = match Estimand::from(a.model.estimand) {
        Estimand::Mean => {
            let form = if a.hajek { EstimatorForm::Hajek } else { EstimatorForm::HorvitzThompson };
            estimate_mean(&results[0].weights, z, y, &l.basis, form)?
        }
        Estimand::Att => estimate_effect(z, y, &l.basis, &uniform_weights(z), &results[0].weights, Estimand::Att)?,
        Estimand::Ate => estimate_effect(z, y, &l.basis, &results[0].weights, &results[1].weights, Estimand::Ate)?,
    };
    let payload = EstimatePayload {
        n: l.data.n(),
        basis: basis_info(&l.basis),
        arms: reports,
        tuning,
        estimate: est,
    };
    write_json(&envelope("estimate", det, a, &payload), a.out.as_deref())
}

fn simulate(a: &SimulateArgs) -> Result<(), Failure> {
    if a.n < 2 {
        return Err(usage("--n must be at least 2"));
    }
    let data = match a.dgp {
        DgpArg::KangSchafer => gen_kang_schafer(a.n, a.overlap.into(), a.seed)?,
        DgpArg::WongChan => gen_wong_chan(a.n, a.outcome_model.into(), a.seed)?,
    };
    let data = if a.with_propensity { data } else { Dataset { truth: None, ..data } };
    data.write_csv_path(&a.out)?;
    println!("wrote {} rows ({} with z = 1) to {}", data.n(), data.respondents(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct BenchPayload {
    report: minbal::bench::BenchReport,
}

fn bench(a: &BenchArgs, det: bool) -> Result<(), Failure> {
    let mut spec = match (&a.spec, &a.preset) {
        (Some(path), None) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str::<BenchSpec>(&text).map_err(|e| Failure::Data {
                code: "E_SPEC",
                message: format!("{}: {e}", path.display()),
            })?
        }
        (None, Some(name)) => BenchSpec::preset(name)?,
        _ => return Err(usage("give exactly one of --spec or --preset")),
    };
    if let Some(r) = a.replications {
        spec.replications = r;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let report = run_bench(&spec)?;
    if let Some(p) = &a.csv {
        std::fs::write(p, report.rows_csv())?;
    }
    if let Some(dir) = &a.curves_dir {
        curves_csv(&report)?;
        emit_curves(&report, dir)?;
    }
    let payload = BenchPayload { report };
    write_json(&envelope("bench", det, a, &payload), a.out.as_deref())?;
    for row in &payload.report.rows {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        eprintln!(
            "{} {} {}: rmse={} coverage={} completed={}/{} infeasible={}",
            row.estimand,
            row.dispersion,
            row.mode,
            fmt(row.rmse),
            fmt(row.coverage),
            row.completed,
            row.replications,
            row.infeasible
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct CheckEntry {
    dispersion: DispersionKind,
    grid: [f64; 2],
    points: usize,
    max_discrepancy: f64,
    worst_t: f64,
    pass: bool,
}

#[derive(Serialize)]
struct CheckPayload {
    tolerance: f64,
    results: Vec<CheckEntry>,
    all_pass: bool,
}

const CHECK_TOL: f64 = 1e-8;

fn check(a: &CheckArgs, det: bool) -> Result<(), Failure> {
    if a.points < 2 {
        return Err(usage("--points must be at least 2"));
    }
    let (r, n) = (500, 1000);
    let mut results = Vec::new();
    for kind in DispersionKind::ALL {
        let range = match kind {
            DispersionKind::Variance => [-1.0, 1.0],
            DispersionKind::NegativeEntropy => [-2.0, 12.0],
            DispersionKind::SmoothedAbsoluteDeviation => [-3.0, 3.0],
        };
        let spec = DispersionSpec::new(kind, r, n)?;
        let rep = check_conjugacy(&spec, &linspace(range[0], range[1], a.points))?;
        let pass = rep.max_discrepancy() <= CHECK_TOL;
        println!(
            "{} {}: max discrepancy {:.3e} on [{}, {}]",
            if pass { "PASS" } else { "FAIL" },
            kind,
            rep.max_discrepancy(),
            range[0],
            range[1]
        );
        results.push(CheckEntry {
            dispersion: kind,
            grid: range,
            points: a.points,
            max_discrepancy: rep.max_discrepancy(),
            worst_t: rep.worst_t,
            pass,
        });
    }
    let all_pass = results.iter().all(|r| r.pass);
    let payload = CheckPayload {
        tolerance: CHECK_TOL,
        results,
        all_pass,
    };
    if let Some(p) = &a.out {
        write_json(&envelope("check", det, a, &payload), Some(p.as_path()))?;
    }
    if all_pass {
        Ok(())
    } else {
        Err(Failure::NonConvergence("conjugacy check failed".into()))
    }
}
