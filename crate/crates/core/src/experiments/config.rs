//! Experiment files: one TOML document per run, versioned by
//! `schema_version`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{heart_schema, GeneratorSpec, SchemaConfig};
use crate::error::{Error, Result};
use crate::federation::{FitConfig, Scenario, TransportKind};
use crate::math::AdamConfig;
use crate::models::{Family, Formulation, ModelSpec};
use crate::soul::SoulConfig;
use crate::variational::VariationalConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Overrides `seed`.
pub const ENV_SEED: &str = "VFL_SEED";
/// Overrides `output_dir`.
pub const ENV_OUTPUT_DIR: &str = "VFL_OUTPUT_DIR";
/// Path of the heart-disease CSV when a table source gives none.
pub const ENV_HEART_CSV: &str = "VFL_HEART_CSV";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Federated augmented-variable VI.
    Alg1,
    /// Federated power-likelihood VI.
    Alg2,
    Soul,
    /// Single-process VI, any formulation.
    Monolithic,
    /// Non-Bayesian split NN trained by maximum likelihood; the baseline
    /// for the hierarchical split NN.
    PointEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Generate {
        generator: GeneratorSpec,
    },
    /// A directory written by `generate`.
    Directory {
        path: PathBuf,
    },
    /// A raw CSV preprocessed per fit. Without a path (here or in
    /// `VFL_HEART_CSV`) a synthetic table of the heart data's shape is used.
    Table {
        #[serde(default)]
        path: Option<PathBuf>,
        #[serde(default = "heart_schema")]
        schema: SchemaConfig,
        #[serde(default)]
        fallback_seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub folds: usize,
    /// Run only the first this-many folds (all when unset).
    pub run_folds: Option<usize>,
    pub fold_seed: u64,
    /// Posterior draws per predictive estimate.
    pub samples: usize,
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            folds: 10,
            run_folds: None,
            fold_seed: 0,
            samples: 100,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// ρ values of the linear sweep; the ρ = 0 posterior is always added.
    pub rhos: Vec<f64>,
    /// Points per axis of the quadrature grid (odd).
    pub grid_points: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            rhos: vec![2.0, 1.0, 0.5, 0.1],
            grid_points: 201,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Rows of `samples.csv`.
    pub samples: usize,
    /// Record every message to `messages.jsonl`.
    pub message_log: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            message_log: false,
        }
    }
}

fn default_iterations() -> u64 {
    1000
}

/// A complete run description. `seed`, `iterations` and `transport` apply
/// to every algorithm; the same keys inside `[soul]` are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub transport: TransportKind,
    /// Who holds `y`.
    #[serde(default)]
    pub scenario: Scenario,
    pub model: ModelSpec,
    pub data: DataSource,
    #[serde(default)]
    pub variational: VariationalConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub soul: SoulConfig,
    #[serde(default)]
    pub evaluate: EvalConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads, applies environment overrides and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(s) = var(ENV_SEED) {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{ENV_SEED}={s:?} is not an unsigned integer")))?;
        }
        if let Some(d) = var(ENV_OUTPUT_DIR) {
            self.output_dir = Some(PathBuf::from(d));
        }
        Ok(())
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(&self.name))
    }

    /// Cross-field checks: the model/algorithm feasibility matrix, the data
    /// source against the family, and the evaluation settings.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.name.trim().is_empty() {
            return bad("name must not be empty".into());
        }
        self.model.validate()?;
        let f = self.model.formulation;
        let uses_vi = matches!(self.algorithm, Algorithm::Alg1 | Algorithm::Alg2 | Algorithm::Monolithic);
        if uses_vi {
            self.variational.validate(f)?;
            if !(self.optimizer.lr > 0.0) {
                return bad("optimizer.lr must be > 0".into());
            }
        }
        match self.algorithm {
            Algorithm::Alg1 if f != Formulation::Augmented => {
                return bad(format!("alg1 fits the augmented-variable model, not {f:?}"));
            }
            Algorithm::Alg2 if f != Formulation::Power => {
                return bad(format!("alg2 fits the power-likelihood model, not {f:?}"));
            }
            Algorithm::Soul if f == Formulation::True => {
                return bad("soul needs auxiliary variables; use the augmented or power formulation".into());
            }
            Algorithm::Soul if self.model.family == Family::SplitnnBernoulli => {
                return bad("soul does not support the split NN (its feature network is not sampled)".into());
            }
            Algorithm::PointEstimate
                if self.model.family != Family::SplitnnBernoulli || f != Formulation::True =>
            {
                return bad("point-estimate is the split NN baseline: family splitnn-bernoulli, formulation true".into());
            }
            _ => {}
        }
        let clients_need_y = matches!(self.algorithm, Algorithm::Alg2)
            || (self.algorithm == Algorithm::Soul && f == Formulation::Power);
        if clients_need_y && self.scenario == Scenario::PrivateResponse {
            return bad(
                "the power-likelihood protocol evaluates the likelihood at every client, \
                 so y cannot stay with the server; set scenario = \"shared-response\""
                    .into(),
            );
        }
        if self.algorithm == Algorithm::Soul {
            self.soul_config().validate()?;
        }
        match &self.data {
            DataSource::Generate { generator } => {
                if generator.family != self.model.family {
                    return bad(format!(
                        "generator family {:?} does not match model family {:?}",
                        generator.family, self.model.family
                    ));
                }
            }
            DataSource::Table { schema, .. } => {
                if self.model.family.likelihood() != crate::models::Likelihood::Bernoulli {
                    return bad("table sources produce a binary response; use logistic or splitnn-bernoulli".into());
                }
                schema.validate()?;
            }
            DataSource::Directory { .. } => {}
        }
        let e = &self.evaluate;
        if e.folds < 2 || e.run_folds == Some(0) || e.run_folds.is_some_and(|r| r > e.folds) {
            return bad("evaluate needs folds >= 2 and 1 <= run_folds <= folds".into());
        }
        if e.samples == 0 || !(e.threshold > 0.0 && e.threshold < 1.0) {
            return bad("evaluate needs samples >= 1 and 0 < threshold < 1".into());
        }
        if self.oracle.grid_points < 3 || self.oracle.grid_points % 2 == 0 {
            return bad("oracle.grid_points must be odd and >= 3".into());
        }
        if self.oracle.rhos.iter().any(|r| !(*r >= 0.0)) {
            return bad("oracle.rhos must be >= 0".into());
        }
        Ok(())
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            iterations: self.iterations,
            seed: self.seed,
            optimizer: self.optimizer,
            variational: self.variational.clone(),
            scenario: self.scenario,
            transport: self.transport,
            ..FitConfig::default()
        }
    }

    pub fn soul_config(&self) -> SoulConfig {
        SoulConfig {
            iterations: self.iterations,
            seed: self.seed,
            transport: self.transport,
            ..self.soul.clone()
        }
    }
}

/// Process exit status for a failed command: 2 for configuration errors,
/// 3 for numerical failures, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Numerical { .. } | Error::NonFinite(_) => 3,
        _ => 1,
    }
}
