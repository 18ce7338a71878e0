use std::collections::BTreeMap;
use std::path::PathBuf;

use odflow::exact::{FitTermination, InitStrategy, SolverConfig};
use odflow::scaling::ScalePlan;
use odflow::LikelihoodBreakdown;
use serde::Serialize;

use crate::io::Window;

/// How the counts are rescaled before fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum ScalingMode {
    Off,
    Auto { target: f64 },
    Factor { factor: f64 },
}

impl ScalingMode {
    pub fn parse(text: &str, target: f64) -> anyhow::Result<Self> {
        match text.trim() {
            "off" | "none" => Ok(Self::Off),
            "auto" => Ok(Self::Auto { target }),
            other => {
                let factor: f64 = other
                    .parse()
                    .map_err(|_| anyhow::anyhow!("--scaling must be auto, off or a number, got {other:?}"))?;
                Ok(Self::Factor { factor })
            }
        }
    }
}

/// Settings of the outer loop of the approximate procedure.
#[derive(Debug, Clone, Serialize)]
pub struct OuterEcho {
    pub max_rounds: usize,
    pub flow_change: f64,
    pub nae_target: Option<f64>,
    pub inner_tol: f64,
}

/// Everything that determined a run, echoed into its report.
#[derive(Debug, Clone, Default, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub inputs: BTreeMap<String, PathBuf>,
    pub out_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<InitStrategy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scaling: Option<ScalingMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_rule: Option<odflow::scaling::LambdaRule>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<Window>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outer: Option<OuterEcho>,
    /// Command-specific extras (benchmark name, sweep grid, ...).
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub nae: f64,
    pub offdiag_nae: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub epsilon: f64,
    pub termination: FitTermination,
    pub iterations: usize,
    pub loglik: f64,
    pub cost: f64,
    pub seconds: f64,
    pub nae: Option<f64>,
    pub offdiag_nae: Option<f64>,
}

/// One per run, written as `report.json` in the output directory.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub version: String,
    pub config: RunConfig,
    pub snapshots: Option<Vec<String>>,
    pub dropped_regions: Vec<String>,
    pub scale: Option<ScalePlan>,
    /// Likelihood at the start and after each outer iteration, in scaled units.
    pub trace: Vec<LikelihoodBreakdown>,
    pub termination: Option<FitTermination>,
    pub iterations: Option<usize>,
    pub cycles_detected: Option<usize>,
    pub round_metric: Vec<f64>,
    pub metrics: Option<Metrics>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepRow>,
    pub wall_seconds: f64,
    pub error: Option<String>,
}

impl RunReport {
    pub fn new(config: RunConfig) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_owned(),
            config,
            snapshots: None,
            dropped_regions: Vec::new(),
            scale: None,
            trace: Vec::new(),
            termination: None,
            iterations: None,
            cycles_detected: None,
            round_metric: Vec::new(),
            metrics: None,
            sweep: Vec::new(),
            wall_seconds: 0.0,
            error: None,
        }
    }
}
