use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "odflow", version, about = "Infer origin-destination flows from per-region count panels")]
pub struct Cli {
    /// More log output (-v debug, -vv trace)
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate movement and write centroids, counts and the true flows
    Simulate(SimulateArgs),
    /// Fit flows with the alternating exact maximization
    FitExact(FitExactArgs),
    /// Fit flows with the decoupled approximate procedure
    FitApprox(FitApproxArgs),
    /// Compare fitted flows against known flows
    Evaluate(EvaluateArgs),
    /// Repeat a fit over a grid of penalty weights and tolerances
    Sweep(SweepArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Simulate(_) => "simulate",
            Self::FitExact(_) => "fit-exact",
            Self::FitApprox(_) => "fit-approx",
            Self::Evaluate(_) => "evaluate",
            Self::Sweep(_) => "sweep",
        }
    }

    pub fn out_dir(&self) -> &PathBuf {
        match self {
            Self::Simulate(a) => &a.out,
            Self::FitExact(a) => &a.out,
            Self::FitApprox(a) => &a.out,
            Self::Evaluate(a) => &a.out,
            Self::Sweep(a) => &a.out,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Benchmark {
    /// 3x3 unit grid, one step
    Grid,
    /// 15x15 cell lattice with a central attractor, three steps
    Ring,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Scenario JSON
    #[arg(long, conflicts_with = "benchmark", required_unless_present = "benchmark")]
    pub scenario: Option<PathBuf>,

    /// Built-in scenario instead of a scenario file
    #[arg(long, value_enum)]
    pub benchmark: Option<Benchmark>,

    /// Population scale of the ring benchmark
    #[arg(long, default_value_t = 1e4)]
    pub population: f64,

    /// Override the scenario seed
    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct InputArgs {
    /// Long-format counts CSV: region_id,timestamp,count
    #[arg(long)]
    pub counts: PathBuf,

    /// Centroid CSV: region_id,x,y
    #[arg(long)]
    pub centroids: PathBuf,

    /// Snapshot index range FIRST:LAST (inclusive)
    #[arg(long, conflicts_with_all = ["from", "to"])]
    pub window: Option<String>,

    /// First timestamp to keep (inclusive)
    #[arg(long)]
    pub from: Option<String>,

    /// Last timestamp to keep (inclusive)
    #[arg(long)]
    pub to: Option<String>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaRuleArg {
    #[default]
    InverseScale,
    InverseSquare,
}

#[derive(Args, Debug, Clone)]
pub struct SolverArgs {
    /// Solver settings JSON; flags below override its fields
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Travel cutoff in centroid units
    #[arg(long)]
    pub cutoff: Option<f64>,

    /// Conservation penalty weight (before scaling compensation)
    #[arg(long)]
    pub lambda: Option<f64>,

    /// Relative likelihood change that ends the outer loop
    #[arg(long)]
    pub epsilon: Option<f64>,

    #[arg(long, requires = "beta_max")]
    pub beta_min: Option<f64>,

    #[arg(long, requires = "beta_min")]
    pub beta_max: Option<f64>,

    #[arg(long)]
    pub max_outer: Option<usize>,

    #[arg(long)]
    pub max_inner: Option<usize>,

    /// Seed for randomized initializations
    #[arg(long)]
    pub seed: Option<u64>,

    /// Population scaling: auto, off, or an explicit factor
    #[arg(long, default_value = "auto")]
    pub scaling: String,

    /// Smallest starting flow that automatic scaling aims for
    #[arg(long, default_value_t = 1.0)]
    pub scale_target: f64,

    /// How lambda follows the scale factor
    #[arg(long, value_enum, default_value_t = LambdaRuleArg::InverseScale)]
    pub lambda_rule: LambdaRuleArg,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitArg {
    /// Everyone stays put
    #[default]
    Static,
    /// Static with random off-diagonal scatter (uses --seed)
    Jittered,
    /// Start from a guess where many people move
    Moving,
}

#[derive(Args, Debug)]
pub struct FitExactArgs {
    #[command(flatten)]
    pub input: InputArgs,

    #[command(flatten)]
    pub solver: SolverArgs,

    #[arg(long, value_enum, default_value_t = InitArg::Static)]
    pub init: InitArg,

    /// Known flows CSV; adds NAE to the report
    #[arg(long)]
    pub truth: Option<PathBuf>,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct OuterArgs {
    /// Maximum number of outer rounds
    #[arg(long, default_value_t = 1)]
    pub rounds: usize,

    /// Stop once the largest relative flow change between rounds is below this
    #[arg(long, default_value_t = 1e-2)]
    pub flow_change: f64,

    /// Stop at this NAE against --truth instead (testing only)
    #[arg(long, requires = "truth")]
    pub nae_target: Option<f64>,

    /// Relative change of the approximate objective ending each round
    #[arg(long, default_value_t = 1e-5)]
    pub inner_tol: f64,
}

#[derive(Args, Debug)]
pub struct FitApproxArgs {
    #[command(flatten)]
    pub input: InputArgs,

    #[command(flatten)]
    pub solver: SolverArgs,

    #[command(flatten)]
    pub outer: OuterArgs,

    #[arg(long)]
    pub truth: Option<PathBuf>,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Known flows CSV
    #[arg(long)]
    pub truth: PathBuf,

    /// Fitted flows CSV
    #[arg(long)]
    pub flows: PathBuf,

    /// Centroid CSV fixing the region order
    #[arg(long)]
    pub centroids: PathBuf,

    /// Step range FIRST:LAST (inclusive) for the inbound/outbound totals
    #[arg(long)]
    pub steps: Option<String>,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Exact,
    Approx,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub input: InputArgs,

    #[command(flatten)]
    pub solver: SolverArgs,

    #[arg(long, value_enum, default_value_t = Method::Exact)]
    pub method: Method,

    /// Penalty weights to try, comma separated
    #[arg(long, value_delimiter = ',', default_value = "1,10,100")]
    pub lambdas: Vec<f64>,

    /// Outer tolerances to try, comma separated
    #[arg(long, value_delimiter = ',', default_value = "0.0001")]
    pub epsilons: Vec<f64>,

    #[arg(long, value_enum, default_value_t = InitArg::Static)]
    pub init: InitArg,

    #[command(flatten)]
    pub outer: OuterArgs,

    #[arg(long)]
    pub truth: Option<PathBuf>,

    #[arg(long)]
    pub out: PathBuf,
}
