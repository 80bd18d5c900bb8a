//! Run configuration: file format and validation.
//!
//! Configs are TOML. A minimal offline run looks like:
//!
//! ```toml
//! n = 16
//! strategy = "toa"
//! master_seed = 7
//! reward_backend_ref = "oracle"
//!
//! [[agents]]
//! agent_id = "A"
//! param_count = 8000000000
//! backend_ref = "sim"
//!
//! [[agents]]
//! agent_id = "B"
//! param_count = 8000000000
//! backend_ref = "sim"
//!
//! [backends.sim]
//! kind = "mock"
//! mock_params_ref = "testbed"
//!
//! [reward_backends.oracle]
//! kind = "mock"
//!
//! [testbed]
//! cross_model_bonus = 0.1
//! agents = [
//!   { agent_id = "A", base_quality = 0.5, refine_gain = 0.5, noise = 0.02 },
//!   { agent_id = "B", base_quality = 0.6, refine_gain = 0.5, noise = 0.02 },
//! ]
//! ```
//!
//! Strategy knobs live under `[strategy_params.toa]`, `[strategy_params.moa]`
//! and `[strategy_params.random_single]`; prompt templates under `[templates]`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendDescriptor, BackendKind, TemplateConfig, TemplateMode, Templates};
use crate::compute::DEFAULT_FLOPS_MULTIPLIER;
use crate::domain::{AgentSpec, DecodingParams, Strategy};
use crate::reward::RewardBackendDescriptor;
use crate::samplers::MoaParams;
use crate::testbed::{valid_mock_agent_id, LandscapeConfig};
use crate::toa::{RootMergeMode, ToaParams};

pub const DEFAULT_ALPHA: f64 = 0.01;
pub const DEFAULT_MOA_LAYERS: usize = 3;
pub const DEFAULT_MAX_CONCURRENCY: usize = 8;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToaSettings {
    pub alpha: Option<f64>,
    pub max_width: Option<usize>,
    pub max_depth: Option<usize>,
    pub root_merge_mode: Option<RootMergeMode>,
    /// Use the parent's visit count instead of `N` inside the logarithm.
    pub ucb_parent_visits: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoaSettings {
    pub num_layers: Option<usize>,
    pub aggregate_template_ref: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomSingleSettings {
    /// Agent to sample from; the first agent when absent.
    pub agent_id: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyParams {
    pub toa: ToaSettings,
    pub moa: MoaSettings,
    pub random_single: RandomSingleSettings,
}

fn default_max_concurrency() -> usize {
    DEFAULT_MAX_CONCURRENCY
}

fn default_flops_multiplier() -> f64 {
    DEFAULT_FLOPS_MULTIPLIER
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub agents: Vec<AgentSpec>,
    #[serde(default)]
    pub backends: BTreeMap<String, BackendDescriptor>,
    pub reward_backend_ref: String,
    #[serde(default)]
    pub reward_backends: BTreeMap<String, RewardBackendDescriptor>,
    /// Samples per prompt.
    pub n: usize,
    pub strategy: Strategy,
    #[serde(default)]
    pub strategy_params: StrategyParams,
    #[serde(default)]
    pub decoding: DecodingParams,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub templates: TemplateConfig,
    #[serde(default)]
    pub testbed: Option<LandscapeConfig>,
    #[serde(default = "default_max_concurrency")]
    pub max_concurrency: usize,
    #[serde(default = "default_flops_multiplier")]
    pub flops_multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.reason)
    }
}

/// Every violation found in one config.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration: ")?;
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl ConfigErrors {
    pub fn has_field(&self, field: &str) -> bool {
        self.0.iter().any(|e| e.field == field)
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read config `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
}

impl RunConfig {
    /// A self-contained config on the simulated landscape: one agent per
    /// landscape entry (8B parameters each), mock backend `sim`, noiseless
    /// mock reward `oracle`, master seed 1.
    pub fn mock(landscape: LandscapeConfig, n: usize, strategy: Strategy) -> Self {
        RunConfig {
            agents: landscape
                .agents
                .iter()
                .map(|a| AgentSpec::new(a.agent_id.clone(), 8_000_000_000, "sim"))
                .collect(),
            backends: BTreeMap::from([("sim".to_string(), BackendDescriptor::mock())]),
            reward_backend_ref: "oracle".into(),
            reward_backends: BTreeMap::from([("oracle".to_string(), RewardBackendDescriptor::mock(0.0))]),
            n,
            strategy,
            strategy_params: StrategyParams::default(),
            decoding: DecodingParams::default(),
            master_seed: 1,
            templates: TemplateConfig::default(),
            testbed: Some(landscape),
            max_concurrency: DEFAULT_MAX_CONCURRENCY,
            flops_multiplier: DEFAULT_FLOPS_MULTIPLIER,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, LoadError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LoadError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| LoadError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn k(&self) -> usize {
        self.agents.len()
    }
}

/// A config that passed [`validate_config`], with strategy defaults filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedRunConfig {
    config: RunConfig,
    templates: Templates,
    toa: ToaParams,
    moa: MoaParams,
    single_agent: usize,
}

impl ValidatedRunConfig {
    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn templates(&self) -> &Templates {
        &self.templates
    }

    pub fn toa(&self) -> &ToaParams {
        &self.toa
    }

    pub fn moa(&self) -> &MoaParams {
        &self.moa
    }

    /// Index of the agent used by `random_single`.
    pub fn single_agent(&self) -> usize {
        self.single_agent
    }

    pub fn n(&self) -> usize {
        self.config.n
    }

    pub fn k(&self) -> usize {
        self.config.agents.len()
    }

    pub fn strategy(&self) -> Strategy {
        self.config.strategy
    }
}

struct Collector(Vec<ConfigError>);

impl Collector {
    fn push(&mut self, field: impl Into<String>, reason: impl Into<String>) {
        self.0.push(ConfigError {
            field: field.into(),
            reason: reason.into(),
        });
    }
}

/// Checks every rule at once and fills strategy defaults
/// (TOA width `max(1, ⌊N/3⌋)`, `α = 0.01`, MoA with 3 layers).
pub fn validate_config(cfg: RunConfig) -> Result<ValidatedRunConfig, ConfigErrors> {
    let mut errs = Collector(Vec::new());
    let k = cfg.agents.len();
    let n = cfg.n;

    if k == 0 {
        errs.push("agents", "at least one agent is required");
    }
    let mut seen = BTreeSet::new();
    for (i, a) in cfg.agents.iter().enumerate() {
        let field = format!("agents[{i}]");
        if a.agent_id.is_empty() || a.agent_id.chars().any(char::is_whitespace) {
            errs.push(
                format!("{field}.agent_id"),
                "must be nonempty and contain no whitespace",
            );
        }
        if !seen.insert(a.agent_id.as_str()) {
            errs.push(
                format!("{field}.agent_id"),
                format!("duplicate agent id `{}`", a.agent_id),
            );
        }
        if a.param_count == 0 {
            errs.push(format!("{field}.param_count"), "must be positive");
        }
        match cfg.backends.get(&a.backend_ref) {
            None => errs.push(
                format!("{field}.backend_ref"),
                format!("unknown backend `{}`", a.backend_ref),
            ),
            Some(b) if b.kind == BackendKind::Mock => {
                if !valid_mock_agent_id(&a.agent_id) {
                    errs.push(
                        format!("{field}.agent_id"),
                        "mock agent ids may only use ASCII alphanumerics and `_-.:`",
                    );
                }
                match (&cfg.testbed, b.mock_params_ref.as_deref()) {
                    (Some(tb), Some("testbed")) if tb.agent(&a.agent_id).is_none() => errs.push(
                        format!("{field}.agent_id"),
                        format!("mock agent `{}` has no entry in [testbed].agents", a.agent_id),
                    ),
                    _ => {}
                }
            }
            Some(_) => {}
        }
    }
    for (name, b) in &cfg.backends {
        if let Err(reason) = b.check() {
            errs.push(format!("backends.{name}"), reason);
        }
        if b.kind == BackendKind::Mock {
            match b.mock_params_ref.as_deref() {
                Some("testbed") if cfg.testbed.is_none() => errs.push(
                    format!("backends.{name}.mock_params_ref"),
                    "no [testbed] table in this config",
                ),
                Some("testbed") | None => {}
                Some(other) => errs.push(
                    format!("backends.{name}.mock_params_ref"),
                    format!("unknown landscape `{other}` (only `testbed` is defined)"),
                ),
            }
        }
    }
    match cfg.reward_backends.get(&cfg.reward_backend_ref) {
        None => errs.push(
            "reward_backend_ref",
            format!("unknown reward backend `{}`", cfg.reward_backend_ref),
        ),
        Some(rb) => {
            if let Err(reason) = rb.check() {
                errs.push(format!("reward_backends.{}", cfg.reward_backend_ref), reason);
            }
        }
    }
    if let Some(tb) = &cfg.testbed {
        for reason in tb.check() {
            errs.push("testbed", reason);
        }
    }

    if n == 0 {
        errs.push("n", "must be at least 1");
    }
    let d = &cfg.decoding;
    if !d.temperature.is_finite() || d.temperature < 0.0 {
        errs.push("decoding.temperature", "must be a nonnegative number");
    }
    if !(d.top_p > 0.0 && d.top_p <= 1.0) {
        errs.push("decoding.top_p", "must lie in (0, 1]");
    }
    if d.max_tokens == 0 {
        errs.push("decoding.max_tokens", "must be positive");
    }
    if cfg.max_concurrency == 0 {
        errs.push("max_concurrency", "must be at least 1");
    }
    if !cfg.flops_multiplier.is_finite() || cfg.flops_multiplier <= 0.0 {
        errs.push("flops_multiplier", "must be positive");
    }

    if k > 0 && n > 0 {
        match cfg.strategy {
            Strategy::ParallelEnsemble | Strategy::SequentialRefine if !n.is_multiple_of(k) => errs.push(
                "n",
                format!(
                    "{} needs N divisible by the number of agents (N={n}, K={k})",
                    cfg.strategy
                ),
            ),
            Strategy::Moa if !n.is_multiple_of(k) => errs.push(
                "n",
                format!("moa needs N to be a multiple of the number of agents (N={n}, K={k})"),
            ),
            _ => {}
        }
    }

    let ts = &cfg.strategy_params.toa;
    let alpha = ts.alpha.unwrap_or(DEFAULT_ALPHA);
    if !alpha.is_finite() || alpha <= 0.0 {
        errs.push("strategy_params.toa.alpha", "must be positive");
    }
    let max_width = ts.max_width.unwrap_or((n / 3).max(1));
    if max_width == 0 {
        errs.push("strategy_params.toa.max_width", "must be at least 1");
    }
    if ts.max_depth == Some(0) {
        errs.push("strategy_params.toa.max_depth", "must be at least 1 when set");
    }
    let toa = ToaParams {
        alpha,
        max_width,
        max_depth: ts.max_depth,
        root_merge_mode: ts.root_merge_mode.unwrap_or_default(),
        n,
        ucb_parent_visits: ts.ucb_parent_visits,
    };

    let ms = &cfg.strategy_params.moa;
    let num_layers = ms.num_layers.unwrap_or(DEFAULT_MOA_LAYERS);
    if num_layers == 0 {
        errs.push("strategy_params.moa.num_layers", "must be at least 1");
    }
    let aggregate_ref = ms
        .aggregate_template_ref
        .clone()
        .unwrap_or_else(|| cfg.templates.aggregate_many.clone());
    let moa = MoaParams {
        num_layers,
        aggregate_template_ref: aggregate_ref.clone(),
    };

    let single_agent = match &cfg.strategy_params.random_single.agent_id {
        None => 0,
        Some(id) => match cfg.agents.iter().position(|a| &a.agent_id == id) {
            Some(i) => i,
            None => {
                errs.push(
                    "strategy_params.random_single.agent_id",
                    format!("unknown agent `{id}`"),
                );
                0
            }
        },
    };

    let mut resolve = |field: &str, name: &str, mode: TemplateMode| match cfg.templates.lookup(name) {
        None => {
            errs.push(field, format!("unknown template `{name}`"));
            None
        }
        Some(t) if t.mode != mode => {
            errs.push(
                field,
                format!("template `{name}` has mode {:?}, expected {mode:?}", t.mode),
            );
            None
        }
        Some(t) => match t.validate() {
            Ok(()) => Some(t),
            Err(e) => {
                errs.push(field, e.to_string());
                None
            }
        },
    };
    let fresh = resolve("templates.fresh", &cfg.templates.fresh, TemplateMode::Fresh);
    let refine_one = resolve(
        "templates.refine_one",
        &cfg.templates.refine_one,
        TemplateMode::RefineOne,
    );
    let aggregate_many = resolve(
        "strategy_params.moa.aggregate_template_ref",
        &aggregate_ref,
        TemplateMode::AggregateMany,
    );

    if !errs.0.is_empty() {
        return Err(ConfigErrors(errs.0));
    }
    Ok(ValidatedRunConfig {
        templates: Templates {
            fresh: fresh.expect("checked"),
            refine_one: refine_one.expect("checked"),
            aggregate_many: aggregate_many.expect("checked"),
        },
        config: cfg,
        toa,
        moa,
        single_agent,
    })
}
