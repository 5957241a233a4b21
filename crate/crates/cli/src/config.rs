//! Experiment configuration schema and validating loader.

use serde::{Deserialize, Serialize};

use feller_core::geometry::{MetricSpec, Point};
use feller_core::measure::FiniteMeasure;
use feller_core::system::{
    AffineMap, DiscreteIFS, Dynamics, ExactChain, FlowSpec, JumpFlowSystem, ProbabilityField,
};
use feller_core::Result;

/// Top-level config. The seed is mandatory: every Monte Carlo number in
/// a report must be reproducible from the file alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub system: SystemConfig,
    #[serde(default)]
    pub checks: Vec<CheckConfig>,
    #[serde(default)]
    pub output: Option<OutputConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub format: OutputFormat,
    pub path: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
}

/// System description; `type` selects the branch.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum SystemConfig {
    Ifs {
        maps: Vec<AffineMap>,
        probs: ProbabilityField,
        #[serde(default = "euclidean")]
        metric: MetricSpec,
    },
    Jumpflow {
        lambda: Vec<f64>,
        gamma: f64,
        maps: Vec<AffineMap>,
        probs: ProbabilityField,
        #[serde(default = "euclidean")]
        metric: MetricSpec,
    },
    Chain {
        p: Vec<Vec<f64>>,
        #[serde(default)]
        embedding: Option<Vec<Vec<f64>>>,
    },
}

fn euclidean() -> MetricSpec {
    MetricSpec::Euclidean
}

/// The constructed, validated system.
pub enum BuiltSystem {
    Sampled(Dynamics),
    Chain(ExactChain),
}

impl SystemConfig {
    pub fn build(&self) -> Result<BuiltSystem> {
        match self.clone() {
            SystemConfig::Ifs { maps, probs, metric } => Ok(BuiltSystem::Sampled(Dynamics::Ifs(
                DiscreteIFS::new(maps, probs, metric)?,
            ))),
            SystemConfig::Jumpflow {
                lambda,
                gamma,
                maps,
                probs,
                metric,
            } => Ok(BuiltSystem::Sampled(Dynamics::JumpFlow(JumpFlowSystem::new(
                FlowSpec::new(lambda)?,
                gamma,
                maps,
                probs,
                metric,
            )?))),
            SystemConfig::Chain { p, embedding } => {
                let chain = ExactChain::new(p)?;
                let chain = match embedding {
                    Some(coords) => {
                        let points = coords
                            .into_iter()
                            .map(Point::new)
                            .collect::<Result<Vec<_>>>()?;
                        chain.with_embedding(points)?
                    }
                    None => chain,
                };
                Ok(BuiltSystem::Chain(chain))
            }
        }
    }
}

/// A reference measure: either the dyadic uniform oracle or explicit
/// atoms.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MeasureConfig {
    Dyadic { dyadic_levels: u32 },
    Atoms { atoms: Vec<(Vec<f64>, f64)> },
}

impl MeasureConfig {
    pub fn build(&self) -> Result<FiniteMeasure> {
        match self {
            MeasureConfig::Dyadic { dyadic_levels } => {
                feller_core::criteria::dyadic_lebesgue_oracle(*dyadic_levels)
            }
            MeasureConfig::Atoms { atoms } => {
                let atoms = atoms
                    .iter()
                    .map(|(c, w)| Ok((Point::new(c.clone())?, *w)))
                    .collect::<Result<Vec<_>>>()?;
                FiniteMeasure::from_atoms(atoms)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeMode {
    Exact,
    Sampled,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuliConfig {
    pub r_coef: f64,
    pub r_exponent: f64,
    pub omega_coef: f64,
    pub omega_exponent: f64,
    pub grid: Vec<f64>,
    pub partial_len: usize,
}

/// One requested check; `check` selects the kind. Each kind maps
/// one-to-one onto a library operation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case", deny_unknown_fields)]
pub enum CheckConfig {
    Simulate {
        start: Vec<f64>,
        steps: usize,
        particles: usize,
        #[serde(default = "one")]
        record_every: usize,
    },
    EstimateInvariant {
        start: Vec<f64>,
        steps: usize,
        particles: usize,
        #[serde(default)]
        merge_radius: f64,
        #[serde(default)]
        reference: Option<MeasureConfig>,
    },
    InvariantResidual {
        candidate: MeasureConfig,
    },
    LowerBoundMass {
        z: Vec<f64>,
        eps: f64,
        starts: Vec<Vec<f64>>,
        horizon: usize,
        window: usize,
        particles: usize,
    },
    LowerBoundMassChain {
        start: usize,
        ball_states: Vec<usize>,
        horizon: usize,
        window: usize,
    },
    StabilityLowerBound {
        z: Vec<f64>,
        eps: f64,
        grid: Vec<Vec<f64>>,
        horizon: usize,
        window: usize,
        particles: usize,
    },
    StabilityLowerBoundChain {
        ball_states: Vec<usize>,
        horizon: usize,
        window: usize,
    },
    EProperty {
        x: Vec<f64>,
        radii: Vec<f64>,
        horizon: usize,
        mode: ProbeMode,
        #[serde(default = "default_particles")]
        particles: usize,
        dict_lo: f64,
        dict_hi: f64,
    },
    Cauchy {
        z: Vec<f64>,
        grid: Vec<usize>,
        dict_lo: f64,
        dict_hi: f64,
        #[serde(default)]
        merge_radius: f64,
    },
    UniformCompact {
        grid: Vec<Vec<f64>>,
        mu_star: MeasureConfig,
        horizon: usize,
        tol: f64,
        dict_lo: f64,
        dict_hi: f64,
    },
    Conditions {
        #[serde(default = "default_pairs")]
        pairs: usize,
        #[serde(default)]
        moduli: Option<ModuliConfig>,
    },
    CoupleVerify {
        mu1: Vec<f64>,
        mu2: Option<Vec<f64>>,
        alpha: f64,
        /// Present: run the Cesaro-block decomposition with the sigma
        /// schedule built from (alpha, epsilon). Absent: run the
        /// telescoping decomposition plus the coupling bound check.
        #[serde(default)]
        epsilon: Option<f64>,
        ball_states: Vec<usize>,
        times: Vec<usize>,
        #[serde(default)]
        dictionary: Vec<Vec<f64>>,
    },
    OracleChain {
        #[serde(default)]
        z: usize,
        n: usize,
        #[serde(default)]
        times: Vec<usize>,
        #[serde(default)]
        t_final: usize,
    },
}

fn one() -> usize {
    1
}

fn default_particles() -> usize {
    1000
}

fn default_pairs() -> usize {
    200
}

impl CheckConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            CheckConfig::Simulate { .. } => "simulate",
            CheckConfig::EstimateInvariant { .. } => "estimate_invariant",
            CheckConfig::InvariantResidual { .. } => "invariant_residual",
            CheckConfig::LowerBoundMass { .. } => "lower_bound_mass",
            CheckConfig::LowerBoundMassChain { .. } => "lower_bound_mass_chain",
            CheckConfig::StabilityLowerBound { .. } => "stability_lower_bound",
            CheckConfig::StabilityLowerBoundChain { .. } => "stability_lower_bound_chain",
            CheckConfig::EProperty { .. } => "e_property",
            CheckConfig::Cauchy { .. } => "cauchy",
            CheckConfig::UniformCompact { .. } => "uniform_compact",
            CheckConfig::Conditions { .. } => "conditions",
            CheckConfig::CoupleVerify { .. } => "couple_verify",
            CheckConfig::OracleChain { .. } => "oracle_chain",
        }
    }

    /// Subcommand family the check belongs to.
    pub fn family(&self) -> &'static str {
        match self {
            CheckConfig::Simulate { .. } => "simulate",
            CheckConfig::EstimateInvariant { .. } | CheckConfig::InvariantResidual { .. } => {
                "estimate-invariant"
            }
            CheckConfig::Conditions { .. } => "check-conditions",
            CheckConfig::CoupleVerify { .. } => "couple-verify",
            CheckConfig::OracleChain { .. } => "oracle-chain",
            _ => "check-criteria",
        }
    }
}

/// Parse a config file, reporting the failing field path on schema
/// violations.
pub fn load_config(text: &str) -> std::result::Result<ExperimentConfig, String> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de)
        .map_err(|e| format!("config error at `{}`: {}", e.path(), e.inner()))
}
