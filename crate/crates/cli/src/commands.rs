use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use odflow::approx::{fit_approx, OuterLoopConfig, OuterStop};
use odflow::exact::{fit_exact, FitResult, InitStrategy, SolverConfig};
use odflow::metrics::{aggregate_inout, nae, offdiag_nae};
use odflow::scaling::{apply_scaling, descale_flows, plan_scaling, LambdaRule, ScalePlan};
use odflow::simulator::{make_benchmark_grid, make_benchmark_ring, simulate, ScenarioSpec};
use odflow::{build_distance_matrix, neighbor_sets, FlowTensor};
use serde::Serialize;

use crate::args::{
    Benchmark, Command, EvaluateArgs, FitApproxArgs, FitExactArgs, InitArg, InputArgs, LambdaRuleArg, Method,
    OuterArgs, SimulateArgs, SolverArgs, SweepArgs,
};
use crate::io::{self, LoadedCounts, Window};
use crate::report::{Metrics, OuterEcho, RunReport, ScalingMode, SweepRow};

pub(crate) fn execute(command: &Command, report: &mut RunReport) -> Result<()> {
    match command {
        Command::Simulate(a) => run_simulate(a, report),
        Command::FitExact(a) => run_fit_exact(a, report),
        Command::FitApprox(a) => run_fit_approx(a, report),
        Command::Evaluate(a) => run_evaluate(a, report),
        Command::Sweep(a) => run_sweep(a, report),
    }
}

fn run_simulate(args: &SimulateArgs, report: &mut RunReport) -> Result<()> {
    let mut spec: ScenarioSpec = match (&args.scenario, args.benchmark) {
        (Some(path), _) => {
            report.config.inputs.insert("scenario".into(), path.clone());
            io::read_json(path)?
        }
        (None, Some(Benchmark::Grid)) => make_benchmark_grid(),
        (None, Some(Benchmark::Ring)) => make_benchmark_ring(args.population)?,
        (None, None) => bail!("either --scenario or --benchmark is required"),
    };
    if let Some(b) = args.benchmark {
        report.config.extra.insert("benchmark".into(), serde_json::to_value(b)?);
        report.config.extra.insert("population".into(), args.population.into());
    }
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let truth = simulate(&spec)?;
    let out = &args.out;
    let stamps: Vec<String> = (0..truth.counts.snapshots()).map(|t| t.to_string()).collect();
    io::write_json(&out.join("scenario.json"), &spec)?;
    io::write_centroids(&out.join("centroids.csv"), &spec.regions)?;
    io::write_counts(&out.join("counts.csv"), &truth.counts, &spec.regions, &stamps)?;
    io::write_flows(&out.join("truth_flows.csv"), &truth.flows, &spec.regions)?;
    io::write_params(&out.join("truth_params.json"), &truth.params, &spec.regions)?;
    log::info!("simulated {} regions over {} steps into {}", spec.regions.len(), spec.steps, out.display());
    report.snapshots = Some(stamps);
    Ok(())
}

/// Resolves solver settings: defaults, then the config file, then flags.
fn solver_config(args: &SolverArgs) -> Result<SolverConfig> {
    let mut config: SolverConfig = match &args.config {
        Some(path) => io::read_json(path)?,
        None => SolverConfig::default(),
    };
    if let Some(v) = args.cutoff {
        config.cutoff = v;
    }
    if let Some(v) = args.lambda {
        config.lambda = v;
    }
    if let Some(v) = args.epsilon {
        config.epsilon = v;
    }
    if let (Some(lo), Some(hi)) = (args.beta_min, args.beta_max) {
        config.beta_bounds = Some((lo, hi));
    }
    if let Some(v) = args.max_outer {
        config.max_outer = v;
    }
    if let Some(v) = args.max_inner {
        config.max_inner = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    config.validate()?;
    Ok(config)
}

fn lambda_rule(arg: LambdaRuleArg) -> LambdaRule {
    match arg {
        LambdaRuleArg::InverseScale => LambdaRule::InverseScale,
        LambdaRuleArg::InverseSquare => LambdaRule::InverseSquare,
    }
}

fn init_strategy(arg: InitArg, seed: u64) -> InitStrategy {
    match arg {
        InitArg::Static => InitStrategy::Static,
        InitArg::Jittered => InitStrategy::StaticJittered { seed },
        InitArg::Moving => InitStrategy::Moving,
    }
}

fn outer_config(args: &OuterArgs, truth: Option<&Arc<FlowTensor>>) -> OuterLoopConfig {
    let stop = match (args.nae_target, truth) {
        (Some(target), Some(truth)) => OuterStop::NaeTarget { target, truth: Arc::clone(truth) },
        _ if args.rounds > 1 => OuterStop::FlowChange { threshold: args.flow_change },
        _ => OuterStop::Rounds,
    };
    OuterLoopConfig { max_rounds: args.rounds, stop, inner_tol: args.inner_tol }
}

fn outer_echo(args: &OuterArgs) -> OuterEcho {
    OuterEcho {
        max_rounds: args.rounds,
        flow_change: args.flow_change,
        nae_target: args.nae_target,
        inner_tol: args.inner_tol,
    }
}

/// Data and settings shared by the fitting commands.
struct Prepared {
    loaded: LoadedCounts,
    config: SolverConfig,
    scaling: ScalingMode,
    rule: LambdaRule,
    truth: Option<FlowTensor>,
}

fn prepare(input: &InputArgs, solver: &SolverArgs, truth: Option<&Path>, report: &mut RunReport) -> Result<Prepared> {
    report.config.inputs.insert("counts".into(), input.counts.clone());
    report.config.inputs.insert("centroids".into(), input.centroids.clone());
    if let Some(path) = truth {
        report.config.inputs.insert("truth".into(), path.to_path_buf());
    }
    let window = Window::from_args(input.window.as_deref(), input.from.as_deref(), input.to.as_deref())?;
    let config = solver_config(solver)?;
    let scaling = ScalingMode::parse(&solver.scaling, solver.scale_target)?;
    let rule = lambda_rule(solver.lambda_rule);
    report.config.window = Some(window.clone());
    report.config.solver = Some(config.clone());
    report.config.scaling = Some(scaling);
    report.config.lambda_rule = Some(rule);

    let centroids = io::read_centroids(&input.centroids)?;
    let loaded = io::load_counts(&input.counts, &centroids, &window)?;
    log::info!(
        "loaded {} regions x {} snapshots ({} dropped)",
        loaded.regions.len(),
        loaded.panel.snapshots(),
        loaded.dropped.len()
    );
    report.snapshots = Some(loaded.timestamps.clone());
    report.dropped_regions = loaded.dropped.clone();
    let truth = match truth {
        Some(path) => {
            let t = io::read_flows(path, &loaded.regions, true)?;
            if t.steps() != loaded.panel.steps() {
                bail!(
                    "truth covers {} steps but the selected counts give {}; pick a matching window",
                    t.steps(),
                    loaded.panel.steps()
                );
            }
            Some(t)
        }
        None => None,
    };
    Ok(Prepared { loaded, config, scaling, rule, truth })
}

fn scale_plan(prep: &Prepared, lambda: f64) -> Result<ScalePlan> {
    Ok(match prep.scaling {
        ScalingMode::Off => ScalePlan::identity(lambda),
        ScalingMode::Factor { factor } => ScalePlan::with_factor(factor, lambda, prep.rule)?,
        ScalingMode::Auto { target } => {
            let d = build_distance_matrix(&prep.loaded.regions)?;
            let pattern = Arc::new(neighbor_sets(&d, prep.config.cutoff)?);
            plan_scaling(&prep.loaded.panel, &pattern, target, lambda, prep.rule)?
        }
    })
}

enum Procedure<'a> {
    Exact(InitStrategy),
    Approx(&'a OuterArgs),
}

/// Scales, fits and descales; flows in the result are in original units.
fn fit_scaled(prep: &Prepared, config: &SolverConfig, procedure: &Procedure) -> Result<(FitResult, ScalePlan)> {
    let plan = scale_plan(prep, config.lambda)?;
    if plan.factor != 1.0 {
        log::info!("scaling counts by {} (lambda {} -> {})", plan.factor, plan.lambda_original, plan.lambda_scaled);
    }
    let counts = apply_scaling(&prep.loaded.panel, &plan);
    let mut scaled_config = config.clone();
    scaled_config.lambda = plan.lambda_scaled;
    let mut fit = match procedure {
        Procedure::Exact(init) => fit_exact(&counts, &prep.loaded.regions, &scaled_config, *init)?,
        Procedure::Approx(outer) => {
            let truth = prep.truth.as_ref().map(|t| Arc::new(t.scaled(plan.factor)));
            fit_approx(&counts, &prep.loaded.regions, &scaled_config, &outer_config(outer, truth.as_ref()))?
        }
    };
    fit.flows = descale_flows(&fit.flows, &plan);
    log::info!("fit finished: {:?} after {} iterations in {:.1}s", fit.termination, fit.iterations, fit.seconds);
    Ok((fit, plan))
}

fn metrics(est: &FlowTensor, truth: &FlowTensor) -> Result<Metrics> {
    Ok(Metrics { nae: nae(est, truth)?, offdiag_nae: offdiag_nae(est, truth)? })
}

fn record_fit(out: &Path, prep: &Prepared, fit: &FitResult, plan: ScalePlan, report: &mut RunReport) -> Result<()> {
    io::write_flows(&out.join("flows.csv"), &fit.flows, &prep.loaded.regions)?;
    io::write_params(&out.join("params.json"), &fit.params, &prep.loaded.regions)?;
    report.scale = Some(plan);
    report.trace = fit.trace.clone();
    report.termination = Some(fit.termination);
    report.iterations = Some(fit.iterations);
    report.cycles_detected = Some(fit.cycles_detected);
    report.round_metric = fit.round_metric.clone();
    if let Some(truth) = &prep.truth {
        let m = metrics(&fit.flows, truth)?;
        println!("nae {:.6} offdiag_nae {:.6}", m.nae, m.offdiag_nae);
        report.metrics = Some(m);
    }
    Ok(())
}

fn run_fit_exact(args: &FitExactArgs, report: &mut RunReport) -> Result<()> {
    let prep = prepare(&args.input, &args.solver, args.truth.as_deref(), report)?;
    let init = init_strategy(args.init, prep.config.seed);
    report.config.init = Some(init);
    let (fit, plan) = fit_scaled(&prep, &prep.config, &Procedure::Exact(init))?;
    record_fit(&args.out, &prep, &fit, plan, report)
}

fn run_fit_approx(args: &FitApproxArgs, report: &mut RunReport) -> Result<()> {
    let prep = prepare(&args.input, &args.solver, args.truth.as_deref(), report)?;
    report.config.outer = Some(outer_echo(&args.outer));
    let (fit, plan) = fit_scaled(&prep, &prep.config, &Procedure::Approx(&args.outer))?;
    record_fit(&args.out, &prep, &fit, plan, report)
}

#[derive(Serialize)]
struct InOutRow<'a> {
    region_id: &'a str,
    outbound: f64,
    inbound: f64,
}

fn run_evaluate(args: &EvaluateArgs, report: &mut RunReport) -> Result<()> {
    report.config.inputs.insert("truth".into(), args.truth.clone());
    report.config.inputs.insert("flows".into(), args.flows.clone());
    report.config.inputs.insert("centroids".into(), args.centroids.clone());
    let regions = io::read_centroids(&args.centroids)?;
    let truth = io::read_flows(&args.truth, &regions, false)?;
    let est = io::read_flows(&args.flows, &regions, false)?;
    if truth.steps() != est.steps() {
        bail!("truth has {} steps but the fitted flows have {}", truth.steps(), est.steps());
    }
    let m = metrics(&est, &truth)?;
    println!("nae {:.6} offdiag_nae {:.6}", m.nae, m.offdiag_nae);
    report.metrics = Some(m);

    let window = match &args.steps {
        Some(spec) => {
            let (first, last) = io::parse_index_range(spec)?;
            report.config.extra.insert("steps".into(), spec.as_str().into());
            first..last + 1
        }
        None => 0..est.steps(),
    };
    let summary = aggregate_inout(&est, window)?;
    let path = args.out.join("inout.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("cannot create {}", path.display()))?;
    for (i, id) in regions.ids().iter().enumerate() {
        w.serialize(InOutRow { region_id: id, outbound: summary.outbound[i], inbound: summary.inbound[i] })?;
    }
    w.flush()?;
    Ok(())
}

fn run_sweep(args: &SweepArgs, report: &mut RunReport) -> Result<()> {
    if args.lambdas.is_empty() || args.epsilons.is_empty() {
        bail!("sweep needs at least one lambda and one epsilon");
    }
    let prep = prepare(&args.input, &args.solver, args.truth.as_deref(), report)?;
    report.config.extra.insert("method".into(), serde_json::to_value(args.method)?);
    report.config.extra.insert("lambdas".into(), serde_json::to_value(&args.lambdas)?);
    report.config.extra.insert("epsilons".into(), serde_json::to_value(&args.epsilons)?);
    let procedure = match args.method {
        Method::Exact => {
            let init = init_strategy(args.init, prep.config.seed);
            report.config.init = Some(init);
            Procedure::Exact(init)
        }
        Method::Approx => {
            report.config.outer = Some(outer_echo(&args.outer));
            Procedure::Approx(&args.outer)
        }
    };

    let path = args.out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("cannot create {}", path.display()))?;
    for &lambda in &args.lambdas {
        for &epsilon in &args.epsilons {
            let mut config = prep.config.clone();
            config.lambda = lambda;
            config.epsilon = epsilon;
            config.validate()?;
            let (fit, plan) = fit_scaled(&prep, &config, &procedure)?;
            let last = fit.trace.last().context("fit returned an empty trace")?;
            let m = prep.truth.as_ref().map(|t| metrics(&fit.flows, t)).transpose()?;
            let row = SweepRow {
                lambda,
                epsilon,
                termination: fit.termination,
                iterations: fit.iterations,
                loglik: last.total,
                cost: last.cost,
                seconds: fit.seconds,
                nae: m.map(|m| m.nae),
                offdiag_nae: m.map(|m| m.offdiag_nae),
            };
            println!(
                "lambda {lambda:<8} epsilon {epsilon:<8e} {:?} iterations {} nae {}",
                row.termination,
                row.iterations,
                row.nae.map_or("-".to_owned(), |v| format!("{v:.6}"))
            );
            w.serialize(&row)?;
            report.scale = Some(plan);
            report.sweep.push(row);
        }
    }
    w.flush()?;
    Ok(())
}
