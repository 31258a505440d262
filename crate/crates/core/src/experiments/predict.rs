//! Posterior predictive on held-out rows and the classification metrics
//! reported for cross-validation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{sigmoid, RngStream};
use crate::models::{predictor, Dataset, Formulation, Likelihood, ModelSpec, PredictorKind, SharedValues};
use crate::neural::MlpParams;
use crate::variational::{ClientState, SharedState};

const PREDICT_STREAM: u64 = 0x301;

/// One joint draw of every client's θ_j and the shared values.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraw {
    pub theta: Vec<Vec<f64>>,
    pub shared: SharedValues,
}

/// What is needed to push draws through the model on new rows.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub lik: Likelihood,
    pub kinds: Vec<PredictorKind>,
    pub nets: Vec<Option<MlpParams>>,
    /// `Some(ρ)` when new rows get their own auxiliary draw.
    pub rho: Option<f64>,
}

impl FittedModel {
    pub fn new(spec: &ModelSpec, data: &Dataset, nets: Vec<Option<MlpParams>>) -> Result<Self> {
        let kinds = spec.predictor_kinds(data)?;
        if nets.len() != kinds.len() {
            return Err(Error::Shape(format!("{} feature nets for {} clients", nets.len(), kinds.len())));
        }
        Ok(Self {
            lik: spec.family.likelihood(),
            kinds,
            nets,
            rho: match spec.formulation {
                Formulation::True => None,
                _ => Some(spec.rho()?),
            },
        })
    }
}

/// `s` draws from the fitted variational factors.
pub fn vi_draws(clients: &[ClientState], shared: &SharedState, s: usize, seed: u64) -> Result<Vec<PosteriorDraw>> {
    let mut rng = RngStream::new(seed, PREDICT_STREAM);
    (0..s)
        .map(|_| {
            let theta = clients
                .iter()
                .map(|c| c.theta.sample(&rng.standard_normal(c.theta.dim())))
                .collect::<Result<Vec<_>>>()?;
            let shared = shared.draw(&rng.standard_normal(shared.num_learned()))?.values;
            Ok(PosteriorDraw { theta, shared })
        })
        .collect()
}

/// Predictive summary of one held-out row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowPrediction {
    /// Posterior-mean probability (Bernoulli) or mean response.
    pub mean: f64,
    /// `log (1/S) Σ_s p(y | draw_s)`.
    pub log_lik: f64,
}

fn row_logpdf(lik: Likelihood, y: f64, eta: f64, sigma: f64) -> Result<f64> {
    Ok(lik.eval(&[y], &[eta], sigma)?.value)
}

fn response_mean(lik: Likelihood, eta: f64) -> f64 {
    match lik {
        Likelihood::Gaussian => eta,
        Likelihood::Bernoulli => sigmoid(eta),
        Likelihood::Poisson => eta.exp(),
    }
}

/// Monte Carlo posterior predictive for every row of `data`. New rows draw
/// `z_j ~ N(g_j, ρ)` from the model; the power formulation uses the same
/// additive predictor.
pub fn predictive(model: &FittedModel, data: &Dataset, draws: &[PosteriorDraw], seed: u64) -> Result<Vec<RowPrediction>> {
    if draws.is_empty() {
        return Err(Error::Config("predictive needs at least one posterior draw".into()));
    }
    let n = data.n();
    let mut rng = RngStream::new(seed, PREDICT_STREAM + 1);
    let mut logs = vec![Vec::with_capacity(draws.len()); n];
    let mut mean = vec![0.0; n];
    for d in draws {
        let mut eta = vec![d.shared.intercept; n];
        if let Some(off) = &data.offset {
            eta.iter_mut().zip(off).for_each(|(e, o)| *e += o);
        }
        for (j, kind) in model.kinds.iter().enumerate() {
            let g = predictor(kind, data.client_inputs(j), &d.theta[j], model.nets[j].as_ref())?.g;
            let noise = match model.rho {
                Some(_) => rng.standard_normal(n),
                None => vec![0.0; n],
            };
            let rho = model.rho.unwrap_or(0.0);
            for i in 0..n {
                eta[i] += g[i] + rho * noise[i];
            }
        }
        for i in 0..n {
            logs[i].push(row_logpdf(model.lik, data.y[i], eta[i], d.shared.sigma)?);
            mean[i] += response_mean(model.lik, eta[i]);
        }
    }
    let ln_s = (draws.len() as f64).ln();
    Ok(logs
        .iter()
        .zip(&mean)
        .map(|(l, m)| {
            let top = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = top + l.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
            RowPrediction {
                mean: m / draws.len() as f64,
                log_lik: lse - ln_s,
            }
        })
        .collect())
}

/// Held-out metrics of one fold. Accuracy is in percent and only defined
/// for a binary response; the incorrect-prediction average is `None` when
/// every row is classified correctly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n_test: usize,
    pub accuracy: Option<f64>,
    pub loglik_all: f64,
    pub loglik_incorrect: Option<f64>,
    pub n_incorrect: usize,
}

pub fn fold_metrics(fold: usize, lik: Likelihood, y: &[f64], rows: &[RowPrediction], threshold: f64) -> Result<FoldMetrics> {
    if y.len() != rows.len() || y.is_empty() {
        return Err(Error::Shape(format!("{} responses for {} predictions", y.len(), rows.len())));
    }
    let n = y.len() as f64;
    let loglik_all = rows.iter().map(|r| r.log_lik).sum::<f64>() / n;
    if lik != Likelihood::Bernoulli {
        return Ok(FoldMetrics {
            fold,
            n_test: y.len(),
            accuracy: None,
            loglik_all,
            loglik_incorrect: None,
            n_incorrect: 0,
        });
    }
    let wrong: Vec<f64> = y
        .iter()
        .zip(rows)
        .filter(|(yi, r)| f64::from(r.mean >= threshold) != **yi)
        .map(|(_, r)| r.log_lik)
        .collect();
    Ok(FoldMetrics {
        fold,
        n_test: y.len(),
        accuracy: Some(100.0 * (1.0 - wrong.len() as f64 / n)),
        loglik_all,
        loglik_incorrect: (!wrong.is_empty()).then(|| wrong.iter().sum::<f64>() / wrong.len() as f64),
        n_incorrect: wrong.len(),
    })
}

/// Mean and sample standard deviation (0 for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let k = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / k;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            std,
            count: xs.len(),
        })
    }
}

/// Per-fold metrics and their summaries across folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub folds: Vec<FoldMetrics>,
    pub accuracy: Option<MeanStd>,
    pub loglik_all: Option<MeanStd>,
    /// Over the folds that had at least one misclassified row.
    pub loglik_incorrect: Option<MeanStd>,
}

impl MetricsReport {
    pub fn new(folds: Vec<FoldMetrics>) -> Self {
        let acc: Vec<f64> = folds.iter().filter_map(|f| f.accuracy).collect();
        let all: Vec<f64> = folds.iter().map(|f| f.loglik_all).collect();
        let inc: Vec<f64> = folds.iter().filter_map(|f| f.loglik_incorrect).collect();
        Self {
            accuracy: MeanStd::of(&acc),
            loglik_all: MeanStd::of(&all),
            loglik_incorrect: MeanStd::of(&inc),
            folds,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn render(&self) -> String {
        let f = |m: &Option<MeanStd>, unit: &str| match m {
            Some(m) => format!("{:.2}{unit} ± {:.2}", m.mean, m.std),
            None => "n/a".into(),
        };
        format!(
            "accuracy {}  loglik(all) {}  loglik(incorrect) {}  folds {}",
            f(&self.accuracy, "%"),
            f(&self.loglik_all, ""),
            f(&self.loglik_incorrect, ""),
            self.folds.len()
        )
    }
}
