//! Experiment configuration: schema version "1", strict about unknown fields.

use serde::{Deserialize, Serialize};

use super::CliError;

/// Statistical acceptance knobs. These are configuration, not code constants,
/// and are echoed into every report.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    /// Confidence-interval multiplier for Monte Carlo vs. exact comparisons.
    pub ci_multiplier: f64,
    /// Smallest acceptable p-value for goodness-of-fit and independence tests.
    pub p_min: f64,
    /// Acceptance band for log-log convergence slopes.
    pub slope_band: (f64, f64),
    /// Largest acceptable total-variation distance for occupation checks.
    pub tv_max: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopConfig {
    schema: String,
    name: String,
    kind: String,
    seed: u64,
    #[serde(default)]
    out: Option<String>,
    thresholds: Thresholds,
    params: serde_json::Value,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtendCheckParams {
    pub count: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Exactness tolerance for row sums and the extension identity.
    pub tolerance: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LifetimeKsParams {
    pub horizon: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovStratParams {
    pub u: f64,
    pub s: f64,
    pub t: f64,
    pub condition_state: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KillSemigroupParams {
    pub rate_matrix: Vec<Vec<f64>>,
    pub kill_rates: Vec<f64>,
    pub x0: usize,
    pub n: usize,
    #[serde(default)]
    pub t_grid: Vec<f64>,
    #[serde(default)]
    pub mc_vs_exact: bool,
    #[serde(default)]
    pub hard_vs_weighted: bool,
    #[serde(default)]
    pub lifetime_ks: Option<LifetimeKsParams>,
    #[serde(default)]
    pub markov_strat: Option<MarkovStratParams>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExitJointParams {
    pub rate_matrix: Vec<Vec<f64>>,
    pub kill_rates: Vec<f64>,
    pub x0: usize,
    pub n: usize,
    pub bins: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorKillParams {
    pub models: usize,
    pub size: usize,
    pub hs: Vec<f64>,
    /// Off-diagonal rates are drawn uniformly from this range.
    pub rate_range: (f64, f64),
    /// Kill rates are drawn uniformly from this range.
    pub kill_range: (f64, f64),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaKsParams {
    pub n: usize,
    /// Which renewal time to test: `sigma_k ~ Gamma(k, c)`.
    pub k: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcatSemigroupParams {
    pub n: usize,
    pub t: f64,
    pub f: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcatGeneratorParams {
    pub models: usize,
    pub size: usize,
    pub hs: Vec<f64>,
    pub rate_range: (f64, f64),
    pub kill_range: (f64, f64),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcatStratParams {
    pub n: usize,
    pub u: f64,
    pub s: f64,
    pub t: f64,
    pub condition_state: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LifetimesIidParams {
    pub n: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcatParams {
    pub rate_matrix: Vec<Vec<f64>>,
    pub kill_rates: Vec<f64>,
    pub mu: Vec<f64>,
    pub x0: usize,
    pub horizon: f64,
    #[serde(default)]
    pub gamma_ks: Option<GammaKsParams>,
    #[serde(default)]
    pub semigroup: Option<ConcatSemigroupParams>,
    #[serde(default)]
    pub generator: Option<ConcatGeneratorParams>,
    #[serde(default)]
    pub markov_strat: Option<ConcatStratParams>,
    #[serde(default)]
    pub lifetimes_iid: Option<LifetimesIidParams>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockParams {
    pub rate_matrix: Vec<Vec<f64>>,
    pub kill_rates: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RevivalParams {
    pub block1: BlockParams,
    pub block2: BlockParams,
    /// Explicit revival matrix; drawn at random from the seed when absent.
    #[serde(default)]
    pub mu_matrix: Option<Vec<Vec<f64>>>,
    pub x0: usize,
    pub n: usize,
    pub horizon: f64,
    pub renewal_index: usize,
    pub min_per_state: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestoreInvariantParams {
    pub models: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub horizon: f64,
    pub rate_range: (f64, f64),
    pub kill_range: (f64, f64),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CtmcRestartParams {
    pub rate_matrix: Vec<Vec<f64>>,
    pub c: f64,
    pub mu: Vec<f64>,
    pub f: Vec<f64>,
    pub t: f64,
    pub x0: usize,
    pub n: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuRestartParams {
    pub theta: f64,
    pub sigma: f64,
    pub c: f64,
    pub x0: f64,
    pub restart_point: f64,
    pub t: f64,
    pub dt: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestartsParams {
    #[serde(default)]
    pub ctmc: Option<CtmcRestartParams>,
    #[serde(default)]
    pub ou: Option<OuRestartParams>,
}

#[derive(Debug, Clone)]
pub enum ExperimentParams {
    ExtendCheck(ExtendCheckParams),
    KillSemigroup(KillSemigroupParams),
    ExitJoint(ExitJointParams),
    GeneratorKill(GeneratorKillParams),
    Concat(ConcatParams),
    Revival(RevivalParams),
    RestoreInvariant(RestoreInvariantParams),
    RestartsFormula(RestartsParams),
}

/// A validated experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub name: String,
    pub kind: String,
    pub seed: u64,
    pub out: Option<String>,
    pub thresholds: Thresholds,
    pub params: ExperimentParams,
}

pub(super) fn parse(text: &str) -> Result<ExperimentConfig, CliError> {
    let top: TopConfig =
        serde_json::from_str(text).map_err(|e| CliError::Schema(e.to_string()))?;
    if top.schema != "1" {
        return Err(CliError::Schema(format!(
            "unsupported schema version {:?}; this build reads version \"1\"",
            top.schema
        )));
    }
    let sub = |e: serde_json::Error| CliError::Schema(format!("params: {e}"));
    let params = match top.kind.as_str() {
        "extend-check" => {
            ExperimentParams::ExtendCheck(serde_json::from_value(top.params).map_err(sub)?)
        }
        "kill-semigroup" => {
            ExperimentParams::KillSemigroup(serde_json::from_value(top.params).map_err(sub)?)
        }
        "exit-joint" => {
            ExperimentParams::ExitJoint(serde_json::from_value(top.params).map_err(sub)?)
        }
        "generator-kill" => {
            ExperimentParams::GeneratorKill(serde_json::from_value(top.params).map_err(sub)?)
        }
        "concat" => ExperimentParams::Concat(serde_json::from_value(top.params).map_err(sub)?),
        "revival" => ExperimentParams::Revival(serde_json::from_value(top.params).map_err(sub)?),
        "restore-invariant" => {
            ExperimentParams::RestoreInvariant(serde_json::from_value(top.params).map_err(sub)?)
        }
        "restarts-formula" => {
            ExperimentParams::RestartsFormula(serde_json::from_value(top.params).map_err(sub)?)
        }
        other => {
            return Err(CliError::Schema(format!(
                "unknown experiment kind {other:?}; expected one of extend-check, \
                 kill-semigroup, exit-joint, generator-kill, concat, revival, \
                 restore-invariant, restarts-formula"
            )))
        }
    };
    Ok(ExperimentConfig {
        name: top.name,
        kind: top.kind,
        seed: top.seed,
        out: top.out,
        thresholds: top.thresholds,
        params,
    })
}
