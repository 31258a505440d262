//! Config-driven runs: fitting with any algorithm, held-out evaluation and
//! cross-validation, exact and quadrature oracles, and density exports.
//! Everything is written as CSV/JSON; plotting is left to the user.

pub mod baseline;
pub mod config;
pub mod export;
pub mod oracle;
pub mod predict;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    fold_split, generate, kfold, read_dataset, read_table, synthetic_heart, DatasetMeta, GeneratorSpec, Preprocessor,
    RawTable, SchemaConfig,
};
use crate::error::{Error, Result};
use crate::federation::{
    monolithic_reference, run_algorithm1, run_algorithm2, FitResult, MessageCounters, RunStatus,
};
use crate::math::RngStream;
use crate::models::{Dataset, ModelSpec, SharedParam, SharedValues};
use crate::neural::MlpParams;
use crate::soul::{run_soul, SoulResult};
use crate::variational::{load_state, save_state, ClientState, SharedState};

pub use baseline::{fit_point_split_nn, PointFit};
pub use export::{export_density, write_density, DensityExport};
pub use oracle::{run_oracle, OracleReport};
pub use config::{exit_code, Algorithm, DataSource, EvalConfig, ExperimentConfig, OracleConfig, ENV_HEART_CSV};
pub use predict::{
    fold_metrics, predictive, vi_draws, FittedModel, FoldMetrics, MeanStd, MetricsReport, PosteriorDraw,
    RowPrediction,
};

const SAMPLES_STREAM: u64 = 0x300;

/// Simulated data plus metadata recording the generator and its truth.
pub fn generate_with_meta(spec: &GeneratorSpec) -> Result<(Dataset, DatasetMeta)> {
    let (data, truth) = generate(spec)?;
    let meta = DatasetMeta {
        truth: Some(truth),
        generator: Some(spec.clone()),
        family: Some(spec.family),
        ..DatasetMeta::describe(&data)
    };
    Ok((data, meta))
}

/// Reads a generator description: either a bare generator table or an
/// experiment config whose data source is `generate`.
pub fn load_generator(path: &Path) -> Result<GeneratorSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    if let Ok(cfg) = ExperimentConfig::from_toml(&text) {
        return match cfg.data {
            DataSource::Generate { generator } => Ok(generator),
            _ => Err(Error::Config(format!("{} does not use a generated data source", path.display()))),
        };
    }
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Data as configured, before any train/test split.
#[derive(Debug, Clone)]
pub enum Source {
    Numeric { data: Dataset, meta: DatasetMeta },
    Table { table: RawTable, schema: SchemaConfig, synthetic: bool },
}

/// A dataset ready for fitting plus what describes its columns.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub data: Dataset,
    pub meta: DatasetMeta,
    pub preprocessor: Option<Preprocessor>,
}

impl Source {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        match &cfg.data {
            DataSource::Generate { generator } => {
                let (data, meta) = generate_with_meta(generator)?;
                Ok(Source::Numeric { data, meta })
            }
            DataSource::Directory { path } => {
                let (data, meta) = read_dataset(path)?;
                Ok(Source::Numeric { data, meta })
            }
            DataSource::Table {
                path,
                schema,
                fallback_seed,
            } => {
                let path = path
                    .clone()
                    .or_else(|| std::env::var_os(ENV_HEART_CSV).map(PathBuf::from));
                match path {
                    Some(p) => Ok(Source::Table {
                        table: read_table(&p)?,
                        schema: schema.clone(),
                        synthetic: false,
                    }),
                    None => {
                        log::warn!("no table path and {ENV_HEART_CSV} unset; using the synthetic stand-in");
                        Ok(Source::Table {
                            table: synthetic_heart(*fallback_seed),
                            schema: schema.clone(),
                            synthetic: true,
                        })
                    }
                }
            }
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            Source::Numeric { data, .. } => data.n(),
            Source::Table { table, .. } => table.len(),
        }
    }

    pub fn is_synthetic_table(&self) -> bool {
        matches!(self, Source::Table { synthetic: true, .. })
    }

    /// Training and test sets; table preprocessing is fitted on `train`.
    pub fn split(&self, train: &[usize], test: &[usize]) -> Result<(Prepared, Dataset)> {
        match self {
            Source::Numeric { data, meta } => {
                let train_data = data.select_rows(train);
                let meta = DatasetMeta {
                    offset: None,
                    group: None,
                    ..meta.clone()
                };
                Ok((
                    Prepared {
                        data: train_data,
                        meta,
                        preprocessor: None,
                    },
                    data.select_rows(test),
                ))
            }
            Source::Table { table, schema, .. } => {
                let pre = Preprocessor::fit(table, schema, train)?;
                let data = pre.transform(table, train)?;
                let test = pre.transform(table, test)?;
                let meta = DatasetMeta {
                    columns: pre.feature_names(),
                    ..DatasetMeta::describe(&data)
                };
                Ok((
                    Prepared {
                        data,
                        meta,
                        preprocessor: Some(pre),
                    },
                    test,
                ))
            }
        }
    }

    /// Every row, for a plain fit.
    pub fn all(&self) -> Result<Prepared> {
        let rows: Vec<usize> = (0..self.rows()).collect();
        Ok(self.split(&rows, &[])?.0)
    }
}

/// Result of one fit, by algorithm family.
#[derive(Debug, Clone)]
pub enum Outcome {
    Vi(FitResult),
    Soul(SoulResult),
    Point(PointFit),
}

impl Outcome {
    pub fn status(&self) -> RunStatus {
        match self {
            Outcome::Vi(r) => r.status.clone(),
            Outcome::Soul(r) => r.status.clone(),
            Outcome::Point(_) => RunStatus::Completed,
        }
    }

    pub fn counters(&self) -> MessageCounters {
        match self {
            Outcome::Vi(r) => r.counters.clone(),
            Outcome::Soul(r) => r.counters.clone(),
            Outcome::Point(_) => MessageCounters::default(),
        }
    }

    pub fn wall_seconds(&self) -> Option<f64> {
        match self {
            Outcome::Vi(r) => Some(r.wall_seconds),
            Outcome::Soul(r) => Some(r.wall_seconds),
            Outcome::Point(_) => None,
        }
    }

    pub fn nets(&self, clients: usize) -> Vec<Option<MlpParams>> {
        match self {
            Outcome::Vi(r) => r.clients.iter().map(|c| c.net.clone()).collect(),
            Outcome::Soul(_) => vec![None; clients],
            Outcome::Point(p) => p.nets.iter().cloned().map(Some).collect(),
        }
    }

    /// `s` posterior draws. SOUL cycles through its archived Langevin draws,
    /// newest first; the point fit repeats its single value.
    pub fn draws(&self, spec: &ModelSpec, s: usize, seed: u64) -> Result<Vec<PosteriorDraw>> {
        match self {
            Outcome::Vi(r) => vi_draws(&r.clients, &r.shared, s, seed),
            Outcome::Soul(r) => {
                let len = r.conditional_draws.iter().map(Vec::len).min().unwrap_or(0);
                if len == 0 {
                    return Err(Error::Config("the SOUL run kept no θ draws; run at least one iteration".into()));
                }
                let intercept = match spec.intercept {
                    SharedParam::Fixed { value } => value,
                    _ => 0.0,
                };
                Ok((0..s)
                    .map(|k| PosteriorDraw {
                        theta: r
                            .conditional_draws
                            .iter()
                            .map(|c| c[c.len() - 1 - k % len].clone())
                            .collect(),
                        shared: SharedValues {
                            intercept,
                            sigma: r.sigma,
                        },
                    })
                    .collect())
            }
            Outcome::Point(p) => Ok(vec![
                PosteriorDraw {
                    theta: p.theta.clone(),
                    shared: SharedValues::default(),
                };
                s
            ]),
        }
    }
}

/// Runs the configured algorithm on `data`.
pub fn run_algorithm(cfg: &ExperimentConfig, data: &Dataset, message_log: Option<PathBuf>) -> Result<Outcome> {
    let spec = &cfg.model;
    match cfg.algorithm {
        Algorithm::Alg1 | Algorithm::Alg2 | Algorithm::Monolithic => {
            let mut fc = cfg.fit_config();
            fc.message_log = message_log;
            let r = match cfg.algorithm {
                Algorithm::Alg1 => run_algorithm1(spec, data, &fc)?,
                Algorithm::Alg2 => run_algorithm2(spec, data, &fc)?,
                _ => monolithic_reference(spec, data, &fc)?,
            };
            Ok(Outcome::Vi(r))
        }
        Algorithm::Soul => {
            let mut sc = cfg.soul_config();
            sc.message_log = message_log;
            Ok(Outcome::Soul(run_soul(spec, data, &sc)?))
        }
        Algorithm::PointEstimate => Ok(Outcome::Point(fit_point_split_nn(
            spec,
            data,
            cfg.iterations,
            cfg.optimizer,
            cfg.seed,
        )?)),
    }
}

/// Names of the columns of `samples.csv`: every client's θ, then the
/// shared values.
pub fn sample_columns(spec: &ModelSpec, data: &Dataset) -> Result<Vec<String>> {
    let mut names: Vec<String> = spec
        .predictor_kinds(data)?
        .iter()
        .enumerate()
        .flat_map(|(j, k)| k.param_names(j))
        .collect();
    names.push("intercept".into());
    names.push("sigma".into());
    Ok(names)
}

/// `run_meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub schema_version: u32,
    pub name: String,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub iterations: u64,
    pub status: RunStatus,
    pub wall_seconds: Option<f64>,
    pub counters: MessageCounters,
    /// Mean total ELBO over the last 100 iterations (VI only).
    pub final_elbo: Option<f64>,
    pub model: ModelSpec,
    pub param_names: Vec<Vec<String>>,
    /// Dataset description without the per-row offset and group vectors.
    pub data: DatasetMeta,
    pub preprocessor: Option<Preprocessor>,
    pub synthetic_table: bool,
    pub config: ExperimentConfig,
}

impl RunMeta {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("run_meta.json");
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let meta: RunMeta = serde_json::from_str(&text)?;
        if meta.schema_version != config::SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "{} has schema_version {}",
                path.display(),
                meta.schema_version
            )));
        }
        Ok(meta)
    }
}

/// What `fit` wrote.
#[derive(Debug, Clone)]
pub struct FitSummary {
    pub dir: PathBuf,
    pub meta: RunMeta,
    pub outcome: Outcome,
}

fn write_rows(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn strs(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// Loads the data, fits, and writes the run directory. A run stopped by a
/// numerical failure still writes its outputs; the status is in the
/// returned metadata.
pub fn fit_experiment(cfg: &ExperimentConfig) -> Result<FitSummary> {
    cfg.validate()?;
    let source = Source::load(cfg)?;
    let prepared = source.all()?;
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir)?;
    let log = cfg.output.message_log.then(|| dir.join("messages.jsonl"));
    let outcome = run_algorithm(cfg, &prepared.data, log)?;
    let meta = write_outputs(&dir, cfg, &prepared, &outcome, source.is_synthetic_table())?;
    Ok(FitSummary { dir, meta, outcome })
}

pub fn write_outputs(
    dir: &Path,
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    outcome: &Outcome,
    synthetic_table: bool,
) -> Result<RunMeta> {
    let spec = &cfg.model;
    let data = &prepared.data;
    let columns = sample_columns(spec, data)?;
    let mut final_elbo = None;
    match outcome {
        Outcome::Vi(r) => {
            write_rows(
                &dir.join("elbo_trace.csv"),
                &strs(&["iteration", "l0", "local", "total"]),
                r.trace.iter().map(|t| vec![t.iteration as f64, t.server, t.local, t.total]),
            )?;
            save_state(&dir.join("factors.bin"), &r.clients, &r.shared)?;
            if !r.trace.is_empty() {
                final_elbo = Some(r.tail_mean(100));
            }
        }
        Outcome::Soul(r) => {
            write_rows(
                &dir.join("soul_trace.csv"),
                &strs(&["iteration", "grad_norm", "z_sup", "sigma"]),
                r.trace
                    .iter()
                    .map(|t| vec![t.iteration as f64, t.grad_norm, t.z_sup, t.sigma]),
            )?;
            let header: Vec<String> = (0..r.z_map.len()).map(|j| format!("z_{j}")).collect();
            write_rows(
                &dir.join("z_map.csv"),
                &header,
                (0..data.n()).map(|i| r.z_map.iter().map(|z| z[i]).collect()),
            )?;
        }
        Outcome::Point(p) => {
            write_rows(
                &dir.join("point_trace.csv"),
                &strs(&["iteration", "loglik"]),
                p.trace.iter().map(|(t, v)| vec![*t as f64, *v]),
            )?;
            fs::write(dir.join("point_fit.json"), serde_json::to_string(p)?)?;
        }
    }
    let draws = match outcome {
        Outcome::Soul(r) if r.conditional_draws.iter().all(|c| !c.is_empty()) => {
            let len = r.conditional_draws.iter().map(Vec::len).min().unwrap_or(0);
            outcome.draws(spec, len, cfg.seed)?
        }
        Outcome::Soul(_) => Vec::new(),
        _ => outcome.draws(spec, cfg.output.samples, seed_for(cfg.seed, SAMPLES_STREAM))?,
    };
    write_rows(
        &dir.join("samples.csv"),
        &columns,
        draws.iter().map(|d| {
            let mut row: Vec<f64> = d.theta.iter().flatten().copied().collect();
            row.push(d.shared.intercept);
            row.push(d.shared.sigma);
            row
        }),
    )?;
    let meta = RunMeta {
        schema_version: config::SCHEMA_VERSION,
        name: cfg.name.clone(),
        algorithm: cfg.algorithm,
        seed: cfg.seed,
        iterations: cfg.iterations,
        status: outcome.status(),
        wall_seconds: outcome.wall_seconds(),
        counters: outcome.counters(),
        final_elbo,
        model: spec.clone(),
        param_names: spec
            .predictor_kinds(data)?
            .iter()
            .enumerate()
            .map(|(j, k)| k.param_names(j))
            .collect(),
        data: DatasetMeta {
            offset: None,
            group: None,
            ..prepared.meta.clone()
        },
        preprocessor: prepared.preprocessor.clone(),
        synthetic_table,
        config: cfg.clone(),
    };
    fs::write(dir.join("run_meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

/// A seed for a derived random stream, distinct from the fitting streams.
fn seed_for(seed: u64, purpose: u64) -> u64 {
    use rand::RngCore;
    RngStream::new(seed, purpose).next_u64()
}

/// Reloads what `fit` wrote, for evaluation or export.
#[derive(Debug, Clone)]
pub enum SavedFit {
    Vi { clients: Vec<ClientState>, shared: SharedState },
    Point(PointFit),
    /// SOUL draws read back from `samples.csv`.
    Draws(Vec<PosteriorDraw>),
}

pub fn load_fit(dir: &Path) -> Result<(RunMeta, SavedFit)> {
    let meta = RunMeta::read(dir)?;
    let saved = match meta.algorithm {
        Algorithm::Alg1 | Algorithm::Alg2 | Algorithm::Monolithic => {
            let (clients, shared) = load_state(&dir.join("factors.bin"))?;
            SavedFit::Vi { clients, shared }
        }
        Algorithm::PointEstimate => {
            SavedFit::Point(serde_json::from_str(&fs::read_to_string(dir.join("point_fit.json"))?)?)
        }
        Algorithm::Soul => {
            let sizes: Vec<usize> = meta.param_names.iter().map(Vec::len).collect();
            let mut r = csv::Reader::from_path(dir.join("samples.csv"))?;
            let mut draws = Vec::new();
            for rec in r.records() {
                let v = rec?
                    .iter()
                    .map(|c| c.parse::<f64>().map_err(|_| Error::Data(format!("samples.csv: {c:?}"))))
                    .collect::<Result<Vec<f64>>>()?;
                let total: usize = sizes.iter().sum();
                if v.len() != total + 2 {
                    return Err(Error::Data("samples.csv has the wrong number of columns".into()));
                }
                let mut at = 0;
                let theta = sizes
                    .iter()
                    .map(|&s| {
                        at += s;
                        v[at - s..at].to_vec()
                    })
                    .collect();
                draws.push(PosteriorDraw {
                    theta,
                    shared: SharedValues {
                        intercept: v[total],
                        sigma: v[total + 1],
                    },
                });
            }
            SavedFit::Draws(draws)
        }
    };
    Ok((meta, saved))
}

/// Held-out evaluation of a saved fit on `data`.
pub fn evaluate_saved(dir: &Path, data: &Dataset, samples: usize, threshold: f64, seed: u64) -> Result<MetricsReport> {
    let (meta, saved) = load_fit(dir)?;
    let spec = &meta.model;
    spec.validate_for(data)
        .map_err(|e| Error::Config(format!("test data does not match the fitted model: {e}")))?;
    let fitted_sizes: Vec<usize> = meta.data.block_sizes.clone();
    if fitted_sizes != data.block_sizes() {
        return Err(Error::Config(format!(
            "fitted on blocks {fitted_sizes:?}, test data has {:?}",
            data.block_sizes()
        )));
    }
    let (nets, draws) = match saved {
        SavedFit::Vi { clients, shared } => (
            clients.iter().map(|c| c.net.clone()).collect(),
            vi_draws(&clients, &shared, samples, seed)?,
        ),
        SavedFit::Point(p) => {
            let o = Outcome::Point(p);
            (o.nets(data.num_clients()), o.draws(spec, 1, seed)?)
        }
        SavedFit::Draws(d) => (vec![None; data.num_clients()], d.into_iter().take(samples).collect()),
    };
    let model = FittedModel::new(spec, data, nets)?;
    let rows = predictive(&model, data, &draws, seed)?;
    let m = fold_metrics(0, model.lik, &data.y, &rows, threshold)?;
    Ok(MetricsReport::new(vec![m]))
}

/// Cross-validation report with the settings it ran under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub name: String,
    pub algorithm: Algorithm,
    pub rho: Option<f64>,
    pub iterations: u64,
    pub folds: usize,
    pub synthetic_table: bool,
    pub metrics: MetricsReport,
    /// Folds whose fit stopped on a numerical failure.
    pub aborted: Vec<usize>,
}

/// k-fold cross-validation: preprocessing and fitting use the training rows
/// of each fold only. Writes `cv_metrics.json` and `cv_folds.csv` when
/// `write` is set.
pub fn cross_validate(cfg: &ExperimentConfig, write: bool) -> Result<CvReport> {
    cfg.validate()?;
    let source = Source::load(cfg)?;
    let e = &cfg.evaluate;
    let folds = kfold(source.rows(), e.folds, e.fold_seed)?;
    let mut metrics = Vec::new();
    let mut aborted = Vec::new();
    for f in 0..e.run_folds.unwrap_or(e.folds) {
        let (train, test) = fold_split(&folds, f);
        let (prepared, test_data) = source.split(&train, &test)?;
        let outcome = run_algorithm(cfg, &prepared.data, None)?;
        if let RunStatus::Aborted { iteration, detail, .. } = outcome.status() {
            log::warn!("fold {f}: fit aborted at iteration {iteration}: {detail}");
            aborted.push(f);
        }
        let model = FittedModel::new(&cfg.model, &prepared.data, outcome.nets(prepared.data.num_clients()))?;
        let draws = outcome.draws(&cfg.model, e.samples, seed_for(cfg.seed, SAMPLES_STREAM + f as u64))?;
        let rows = predictive(&model, &test_data, &draws, cfg.seed)?;
        let m = fold_metrics(f, model.lik, &test_data.y, &rows, e.threshold)?;
        log::info!(
            "fold {f}: accuracy {:?} loglik {:.3}",
            m.accuracy.map(|a| (a * 100.0).round() / 100.0),
            m.loglik_all
        );
        metrics.push(m);
    }
    let report = CvReport {
        name: cfg.name.clone(),
        algorithm: cfg.algorithm,
        rho: cfg.model.rho,
        iterations: cfg.iterations,
        folds: e.folds,
        synthetic_table: source.is_synthetic_table(),
        metrics: MetricsReport::new(metrics),
        aborted,
    };
    if write {
        let dir = cfg.output_dir();
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("cv_metrics.json"), serde_json::to_string_pretty(&report)?)?;
        let mut w = csv::Writer::from_path(dir.join("cv_folds.csv"))?;
        w.write_record(["fold", "n_test", "accuracy", "loglik_all", "loglik_incorrect", "n_incorrect"])?;
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        for m in &report.metrics.folds {
            w.write_record([
                m.fold.to_string(),
                m.n_test.to_string(),
                opt(m.accuracy),
                m.loglik_all.to_string(),
                opt(m.loglik_incorrect),
                m.n_incorrect.to_string(),
            ])?;
        }
        w.flush()?;
    }
    Ok(report)
}

/// Runs the configured oracle on all of the configured data; writes
/// `oracle.json` when `write` is set.
pub fn oracle_experiment(cfg: &ExperimentConfig, write: bool) -> Result<OracleReport> {
    cfg.validate()?;
    let prepared = Source::load(cfg)?.all()?;
    let report = run_oracle(&cfg.model, &prepared.data, &cfg.oracle)?;
    if write {
        let dir = cfg.output_dir();
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("oracle.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}
