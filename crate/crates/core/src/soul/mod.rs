//! Empirical Bayes for the auxiliary variables with unadjusted Langevin.
//!
//! SOUL treats `z` as hyperparameters. Each client runs `M` unadjusted
//! Langevin steps on `θ_j` given the current `z`, and `z` then takes one
//! Robbins–Monro step along the Monte Carlo estimate of
//! `∇_z log p(y, z; ρ) = E_{θ | y, z}[∇_z log p(θ, y | z; ρ)]`.
//!
//! The output is a MAP estimate `ẑ` and θ draws from `p(θ | y, ẑ; ρ)`. Those
//! draws are conditional on `ẑ`: they do not account for uncertainty in `z`
//! and are narrower than the marginal posterior of θ.
//!
//! For the augmented model the conditional of `θ_j` depends on `z` only
//! through `z_j`, so chains need nothing from the server. For the power
//! likelihood it also depends on `z_{-j}` and on σ.

pub mod protocol;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::federation::rng_plan::{stream, LANGEVIN};
use crate::federation::{MessageCounters, RunStatus, TransportKind};
use crate::math::linalg::{add_into, axpy, norm2, norm_inf, spd_inverse, spd_solve};
use crate::math::{Mat, RngStream};
use crate::models::{
    log_aux_conditional, log_prior, loglik_aux, loglik_power_j, normal_priors, predictor, predictor_vjp,
    ClientInputs, Dataset, Formulation, Likelihood, ModelSpec, PredictorKind, PriorSpec, ScalarPrior, SharedParam,
    SharedValues,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SoulConfig {
    /// Outer (Robbins–Monro) iterations.
    pub iterations: u64,
    pub seed: u64,
    /// Langevin steps per client per outer iteration (`M`).
    pub inner_steps: usize,
    /// Langevin step size `h`.
    pub step_size: f64,
    /// `δ_t = delta0 / (1 + t / decay)`; no decay keeps `δ_t = delta0`.
    pub delta0: f64,
    pub decay: Option<f64>,
    /// The log σ step is `δ_t · sigma_rate / n` times its gradient.
    pub sigma_rate: f64,
    /// Fraction of final iterations whose `z` iterates are averaged into
    /// the estimate; 0 reports the last iterate.
    pub average_tail: f64,
    /// θ draws from this many final iterations are kept.
    pub archive_iterations: u64,
    /// Abort once `‖z‖∞` exceeds this.
    pub divergence_bound: f64,
    pub transport: TransportKind,
    pub timeout_ms: u64,
    pub run_id: u64,
    pub message_log: Option<std::path::PathBuf>,
}

impl Default for SoulConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            seed: 0,
            inner_steps: 10,
            step_size: 1e-3,
            delta0: 0.1,
            decay: Some(1000.0),
            sigma_rate: 1.0,
            average_tail: 0.0,
            archive_iterations: 100,
            divergence_bound: 1e6,
            transport: TransportKind::InProcess,
            timeout_ms: 60_000,
            run_id: 1,
            message_log: None,
        }
    }
}

impl SoulConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.inner_steps == 0 {
            return bad("inner_steps must be >= 1");
        }
        if !(self.step_size > 0.0) {
            return bad("step_size must be > 0");
        }
        if !(self.delta0 >= 0.0) || self.decay.is_some_and(|d| !(d > 0.0)) {
            return bad("delta0 must be >= 0 and decay > 0");
        }
        if !(self.sigma_rate >= 0.0) || !(0.0..1.0).contains(&self.average_tail) {
            return bad("sigma_rate must be >= 0 and average_tail in [0, 1)");
        }
        if !(self.divergence_bound > 0.0) || self.timeout_ms == 0 {
            return bad("divergence_bound and timeout_ms must be > 0");
        }
        Ok(())
    }

    /// Robbins–Monro step `δ_t`.
    pub fn delta(&self, t: u64) -> f64 {
        match self.decay {
            Some(tau) => self.delta0 / (1.0 + t as f64 / tau),
            None => self.delta0,
        }
    }

    fn average_from(&self) -> u64 {
        ((self.iterations as f64) * (1.0 - self.average_tail)).floor() as u64
    }
}

/// `θ' = θ + h ∇log π(θ) + √(2h) ξ`, without a Metropolis correction.
pub fn ula_step(theta: &[f64], grad: &[f64], h: f64, noise: &[f64]) -> Result<Vec<f64>> {
    check_len("langevin gradient", theta.len(), grad.len())?;
    check_len("langevin noise", theta.len(), noise.len())?;
    if !(h >= 0.0 && h.is_finite()) {
        return Err(Error::Domain(format!("langevin step must be >= 0, got {h}")));
    }
    let s = (2.0 * h).sqrt();
    Ok(theta
        .iter()
        .zip(grad)
        .zip(noise)
        .map(|((t, g), e)| t + h * g + s * e)
        .collect())
}

/// What a client knows about its own model.
#[derive(Clone, Copy)]
pub struct ClientModel<'a> {
    pub kind: &'a PredictorKind,
    pub inputs: ClientInputs<'a>,
    pub prior: &'a PriorSpec,
}

/// Everything the power-likelihood conditional of `θ_j` needs besides the
/// client's own data.
#[derive(Clone, Copy)]
pub struct PowerView<'a> {
    pub lik: Likelihood,
    pub y: &'a [f64],
    pub offset: Option<&'a [f64]>,
    pub z: &'a [Vec<f64>],
    pub shared: SharedValues,
}

impl PowerView<'_> {
    fn blocks(&self) -> Vec<&[f64]> {
        self.z.iter().map(Vec::as_slice).collect()
    }
}

/// `∇_θ log p(θ_j | y, z; ρ)` up to a constant: prior, `log N(z_j; g_j, ρ)`
/// and, for the power likelihood, `(1/J) log p(y | g_j, z_{-j})`.
pub fn conditional_grad(
    model: ClientModel<'_>,
    theta: &[f64],
    z_own: &[f64],
    rho: f64,
    power: Option<(&PowerView<'_>, usize)>,
) -> Result<Vec<f64>> {
    let pred = predictor(model.kind, model.inputs, theta, None)?;
    let mut upstream = log_aux_conditional(z_own, &pred.g, rho)?.d_pred;
    if let Some((v, j)) = power {
        let ev = loglik_power_j(v.lik, v.y, &pred.g, &v.blocks(), j, v.offset, v.shared)?;
        add_into(&mut upstream, &ev.d_eta);
    }
    let vjp = predictor_vjp(model.kind, model.inputs, theta, None, &pred, &upstream)?;
    let (_, mut grad) = log_prior(theta, model.kind, model.prior)?;
    add_into(&mut grad, &vjp.theta);
    Ok(grad)
}

/// `(1/M) Σ_m ∇_{z_j} log N(z_j; g_j(θ^{(m)}), ρ)`, computed by the client.
pub fn prior_piece(model: ClientModel<'_>, samples: &[Vec<f64>], z_own: &[f64], rho: f64) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Contract("at least one θ sample is needed".into()));
    }
    let mut out = vec![0.0; z_own.len()];
    for th in samples {
        let pred = predictor(model.kind, model.inputs, th, None)?;
        add_into(&mut out, &log_aux_conditional(z_own, &pred.g, rho)?.d_z);
    }
    let w = 1.0 / samples.len() as f64;
    out.iter_mut().for_each(|v| *v *= w);
    Ok(out)
}

fn combine_augmented(lik: &[f64], prior: &[f64]) -> Vec<f64> {
    let mut g = lik.to_vec();
    add_into(&mut g, prior);
    g
}

/// Estimate of `∇_{z_j} log p(y, z; ρ)` for the augmented model:
/// `∇_{z_j} log p(y | z)` plus the client's prior piece.
#[allow(clippy::too_many_arguments)]
pub fn soul_z_grad_augmented(
    model: ClientModel<'_>,
    samples: &[Vec<f64>],
    lik: Likelihood,
    y: &[f64],
    z: &[&[f64]],
    j: usize,
    offset: Option<&[f64]>,
    shared: SharedValues,
    rho: f64,
) -> Result<Vec<f64>> {
    let ev = loglik_aux(lik, y, z, offset, shared)?;
    let prior = prior_piece(model, samples, z[j], rho)?;
    Ok(combine_augmented(&ev.d_eta, &prior))
}

/// What client `j` reports in the power protocol, each averaged over its
/// θ samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerPieces {
    /// `∇_{z_j} log N(z_j; g_j, ρ)`.
    pub prior: Vec<f64>,
    /// `∇_{z_k} (1/J) log p(y | θ_j, z_{-j})`, the same for every `k ≠ j`.
    pub cross: Vec<f64>,
    /// `∂/∂σ (1/J) log p(y | θ_j, z_{-j}, σ)`.
    pub d_sigma: f64,
}

pub fn power_pieces(
    model: ClientModel<'_>,
    samples: &[Vec<f64>],
    view: &PowerView<'_>,
    j: usize,
    rho: f64,
) -> Result<PowerPieces> {
    let prior = prior_piece(model, samples, &view.z[j], rho)?;
    let mut cross = vec![0.0; view.y.len()];
    let mut d_sigma = 0.0;
    let blocks = view.blocks();
    for th in samples {
        let pred = predictor(model.kind, model.inputs, th, None)?;
        let ev = loglik_power_j(view.lik, view.y, &pred.g, &blocks, j, view.offset, view.shared)?;
        add_into(&mut cross, &ev.d_eta);
        d_sigma += ev.d_sigma;
    }
    let w = 1.0 / samples.len() as f64;
    cross.iter_mut().for_each(|v| *v *= w);
    Ok(PowerPieces {
        prior,
        cross,
        d_sigma: d_sigma * w,
    })
}

/// Server-side assembly: `z_j` gets its own prior piece plus the cross
/// pieces of every other client, added in client order.
pub fn aggregate_power(pieces: &[PowerPieces]) -> Vec<Vec<f64>> {
    (0..pieces.len())
        .map(|j| {
            let mut g = pieces[j].prior.clone();
            for (k, p) in pieces.iter().enumerate() {
                if k != j {
                    add_into(&mut g, &p.cross);
                }
            }
            g
        })
        .collect()
}

/// Estimate of `∇_{z_j} log p(y, z; ρ)` for every client under the power
/// likelihood, from each client's θ samples.
pub fn soul_z_grad_power(
    models: &[ClientModel<'_>],
    samples: &[Vec<Vec<f64>>],
    view: &PowerView<'_>,
    rho: f64,
) -> Result<Vec<Vec<f64>>> {
    check_len("client samples", models.len(), samples.len())?;
    let pieces = models
        .iter()
        .zip(samples)
        .enumerate()
        .map(|(j, (m, s))| power_pieces(*m, s, view, j, rho))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate_power(&pieces))
}

/// Gradient of `log p(y | z, σ) + log p(σ)` with respect to `u = ln σ`.
/// `terms` are the likelihood's `∂/∂σ` contributions: the server's single
/// term for the augmented model, or each client's `PowerPieces::d_sigma`
/// for the power likelihood. They are summed in the order given.
pub fn soul_shared_sigma_grad(terms: &[f64], sigma: f64, prior: &ScalarPrior) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be > 0, got {sigma}")));
    }
    let lik: f64 = terms.iter().fold(0.0, |a, b| a + b);
    Ok(lik * sigma + prior.eval(sigma.ln()).1)
}

/// Closed-form maximizer of `log p(y, z; ρ)` for the augmented
/// linear-Gaussian model with Gaussian priors `θ_j ~ N(m_j, s_j²)`.
///
/// Integrating `θ_j` out gives `z_j ~ N(X_j m_j, ρ²I + X_j S_j X_jᵀ)`, and
/// `y | z ~ N(b + offset + Σ_j z_j, σ²)`; the stationarity conditions are a
/// linear system of size `nJ`.
pub fn conditional_map_linear(
    data: &Dataset,
    priors: &[PriorSpec],
    sigma: f64,
    rho: f64,
    intercept: f64,
) -> Result<Vec<Vec<f64>>> {
    if !(sigma > 0.0 && rho > 0.0) {
        return Err(Error::Domain("sigma and rho must be > 0".into()));
    }
    let (m0, v0) = normal_priors(data, priors)?;
    let n = data.n();
    let jn = data.num_clients();
    let mut base = data.y.clone();
    for v in &mut base {
        *v -= intercept;
    }
    if let Some(off) = &data.offset {
        for (v, o) in base.iter_mut().zip(off) {
            *v -= o;
        }
    }
    let s2 = sigma * sigma;
    let mut a = Mat::zeros(n * jn, n * jn);
    let mut rhs = vec![0.0; n * jn];
    let mut at = 0;
    for (j, x) in data.blocks.iter().enumerate() {
        let p = x.cols();
        let mut cov = Mat::identity(n);
        for i in 0..n {
            cov[(i, i)] = rho * rho;
            for k in 0..n {
                let mut acc = 0.0;
                for c in 0..p {
                    acc += x[(i, c)] * v0[at + c] * x[(k, c)];
                }
                cov[(i, k)] += acc;
            }
        }
        let prec = spd_inverse(&cov)?;
        let mean = x.matvec(&m0[at..at + p])?;
        let pm = prec.matvec(&mean)?;
        for i in 0..n {
            for k in 0..n {
                a[(j * n + i, j * n + k)] += prec[(i, k)];
            }
            rhs[j * n + i] = pm[i] + base[i] / s2;
            for l in 0..jn {
                a[(j * n + i, l * n + i)] += 1.0 / s2;
            }
        }
        at += p;
    }
    let sol = spd_solve(&a, &rhs)?;
    Ok(sol.chunks(n).map(<[f64]>::to_vec).collect())
}

/// One client's Langevin chain.
pub(crate) struct Chain<'a> {
    pub j: usize,
    pub model: ClientModel<'a>,
    pub rho: f64,
    pub theta: Vec<f64>,
    seed: u64,
    steps: usize,
    h: f64,
    archive_from: u64,
    pub archive: Vec<Vec<f64>>,
}

impl<'a> Chain<'a> {
    fn new(j: usize, model: ClientModel<'a>, rho: f64, cfg: &SoulConfig) -> Self {
        Self {
            j,
            model,
            rho,
            theta: vec![0.0; model.kind.theta_dim()],
            seed: cfg.seed,
            steps: cfg.inner_steps,
            h: cfg.step_size,
            archive_from: cfg.iterations.saturating_sub(cfg.archive_iterations),
            archive: Vec::new(),
        }
    }

    /// `g_j` at the initial θ, used as the starting `z_j`.
    pub fn warm_start(&self) -> Result<Vec<f64>> {
        Ok(predictor(self.model.kind, self.model.inputs, &self.theta, None)?.g)
    }

    /// `M` Langevin steps at outer iteration `t`; returns the visited states.
    pub fn run(&mut self, t: u64, z_own: &[f64], power: Option<&PowerView<'_>>) -> Result<Vec<Vec<f64>>> {
        let mut rng = RngStream::block(self.seed, stream(self.j + 1, LANGEVIN), t);
        let mut out = Vec::with_capacity(self.steps);
        for _ in 0..self.steps {
            let grad = conditional_grad(self.model, &self.theta, z_own, self.rho, power.map(|v| (v, self.j)))?;
            let noise = rng.standard_normal(self.theta.len());
            self.theta = ula_step(&self.theta, &grad, self.h, &noise)?;
            if let Some(i) = self.theta.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("client {} langevin state θ[{i}]", self.j)));
            }
            out.push(self.theta.clone());
        }
        if t >= self.archive_from {
            self.archive.extend(out.iter().cloned());
        }
        Ok(out)
    }
}

/// The server's view of the shared parameters during SOUL.
pub(crate) struct SharedPoint {
    pub intercept: f64,
    pub log_sigma: f64,
    pub sigma_prior: Option<ScalarPrior>,
    rate: f64,
}

impl SharedPoint {
    fn from_spec(spec: &ModelSpec, cfg: &SoulConfig, n: usize) -> Result<Self> {
        let intercept = match spec.intercept {
            SharedParam::Absent => 0.0,
            SharedParam::Fixed { value } => value,
            SharedParam::Learned { .. } => {
                return Err(Error::Config("SOUL learns σ only; give the intercept a fixed value".into()))
            }
        };
        let (log_sigma, sigma_prior) = match spec.sigma {
            SharedParam::Absent => (0.0, None),
            SharedParam::Fixed { value } => (value.ln(), None),
            SharedParam::Learned { prior, init } => (init.ln(), Some(prior)),
        };
        Ok(Self {
            intercept,
            log_sigma,
            sigma_prior,
            rate: cfg.sigma_rate / n as f64,
        })
    }

    pub fn values(&self) -> SharedValues {
        SharedValues {
            intercept: self.intercept,
            sigma: self.log_sigma.exp(),
        }
    }

    pub fn learned(&self) -> bool {
        self.sigma_prior.is_some()
    }

    fn step(&mut self, terms: &[f64], delta: f64) -> Result<()> {
        if let Some(prior) = &self.sigma_prior {
            let g = soul_shared_sigma_grad(terms, self.log_sigma.exp(), prior)?;
            self.log_sigma += delta * self.rate * g;
            if !self.log_sigma.is_finite() {
                return Err(Error::NonFinite("log sigma".into()));
            }
        }
        Ok(())
    }
}

/// Running tail average of the `z` iterates.
pub(crate) struct TailAverage {
    from: u64,
    count: u64,
    sum: Vec<f64>,
}

impl TailAverage {
    fn new(cfg: &SoulConfig, n: usize) -> Self {
        Self {
            from: cfg.average_from(),
            count: 0,
            sum: vec![0.0; n],
        }
    }

    fn push(&mut self, t: u64, z: &[f64]) {
        if t >= self.from {
            add_into(&mut self.sum, z);
            self.count += 1;
        }
    }

    fn value(&self, last: &[f64]) -> Vec<f64> {
        if self.count == 0 {
            return last.to_vec();
        }
        let w = 1.0 / self.count as f64;
        self.sum.iter().map(|v| v * w).collect()
    }
}

/// Robbins–Monro update of one block with the divergence guard.
fn update_z(z: &mut [f64], grad: &[f64], delta: f64, bound: f64, t: u64, actor: &str) -> Result<()> {
    axpy(delta, grad, z);
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{actor} z[{i}] at iteration {t}")));
    }
    let sup = norm_inf(z);
    if sup > bound {
        return Err(Error::Numerical {
            iteration: t,
            actor: actor.into(),
            detail: format!("z diverged: ‖z‖∞ = {sup:e} exceeds {bound:e}"),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoulTraceRow {
    pub iteration: u64,
    /// `‖ĝ_z‖₂` of the stochastic z-gradient over all clients.
    pub grad_norm: f64,
    pub z_sup: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoulResult {
    /// MAP estimate `ẑ`, tail-averaged when configured.
    pub z_map: Vec<Vec<f64>>,
    pub z_last: Vec<Vec<f64>>,
    pub sigma: f64,
    /// Langevin draws of `θ_j` given `ẑ`, per client. Conditional on `ẑ`,
    /// not the marginal posterior.
    pub conditional_draws: Vec<Vec<Vec<f64>>>,
    pub theta_last: Vec<Vec<f64>>,
    pub trace: Vec<SoulTraceRow>,
    pub counters: MessageCounters,
    pub status: RunStatus,
    pub seed: u64,
    pub wall_seconds: f64,
}

impl SoulResult {
    pub fn same_run(&self, other: &SoulResult) -> bool {
        self.z_map == other.z_map
            && self.z_last == other.z_last
            && self.sigma.to_bits() == other.sigma.to_bits()
            && self.conditional_draws == other.conditional_draws
            && self.theta_last == other.theta_last
            && self.trace == other.trace
            && self.status == other.status
    }
}

pub(crate) struct SoulSetup<'a> {
    pub kinds: Vec<PredictorKind>,
    pub data: &'a Dataset,
    pub spec: &'a ModelSpec,
    pub lik: Likelihood,
    pub rho: f64,
}

impl<'a> SoulSetup<'a> {
    pub fn new(spec: &'a ModelSpec, data: &'a Dataset, cfg: &SoulConfig) -> Result<Self> {
        cfg.validate()?;
        spec.validate_for(data)?;
        if spec.formulation == Formulation::True {
            return Err(Error::Config("SOUL needs the augmented or power formulation".into()));
        }
        let kinds = spec.predictor_kinds(data)?;
        if kinds.iter().any(|k| matches!(k, PredictorKind::SplitNn { .. })) {
            return Err(Error::Config(
                "SOUL samples θ only; split-NN feature networks are not supported".into(),
            ));
        }
        let lik = spec.family.likelihood();
        lik.validate_response(&data.y)?;
        Ok(Self {
            kinds,
            data,
            spec,
            lik,
            rho: spec.rho()?,
        })
    }

    pub fn chains(&'a self, cfg: &SoulConfig) -> Vec<Chain<'a>> {
        self.kinds
            .iter()
            .enumerate()
            .map(|(j, kind)| {
                let model = ClientModel {
                    kind,
                    inputs: self.data.client_inputs(j),
                    prior: self.spec.prior_for(j),
                };
                Chain::new(j, model, self.rho, cfg)
            })
            .collect()
    }

    pub fn power_view<'b>(&'b self, z: &'b [Vec<f64>], shared: SharedValues) -> PowerView<'b> {
        PowerView {
            lik: self.lik,
            y: &self.data.y,
            offset: self.data.offset.as_deref(),
            z,
            shared,
        }
    }
}

/// SOUL in a single loop with the same RNG plan as [`run_soul`].
pub fn soul_reference(spec: &ModelSpec, data: &Dataset, cfg: &SoulConfig) -> Result<SoulResult> {
    let start = Instant::now();
    let setup = SoulSetup::new(spec, data, cfg)?;
    let n = data.n();
    let mut chains = setup.chains(cfg);
    let mut shared = SharedPoint::from_spec(spec, cfg, n)?;
    let mut z: Vec<Vec<f64>> = chains.iter().map(Chain::warm_start).collect::<Result<_>>()?;
    let mut avg: Vec<TailAverage> = z.iter().map(|_| TailAverage::new(cfg, n)).collect();
    let mut trace = Vec::new();
    let mut status = RunStatus::Completed;
    let offset = data.offset.as_deref();
    for t in 0..cfg.iterations {
        let delta = cfg.delta(t);
        let step = |z: &mut Vec<Vec<f64>>,
                    chains: &mut Vec<Chain<'_>>,
                    shared: &mut SharedPoint,
                    avg: &mut Vec<TailAverage>|
         -> std::result::Result<SoulTraceRow, (usize, Error)> {
            let mut sq = Vec::with_capacity(z.len());
            match spec.formulation {
                Formulation::Augmented => {
                    let blocks: Vec<&[f64]> = z.iter().map(Vec::as_slice).collect();
                    let ev = loglik_aux(setup.lik, &data.y, &blocks, offset, shared.values()).map_err(|e| (0, e))?;
                    crate::error::check_finite("server likelihood gradient", &ev.d_eta).map_err(|e| (0, e))?;
                    shared.step(&[ev.d_sigma], delta).map_err(|e| (0, e))?;
                    for (j, c) in chains.iter_mut().enumerate() {
                        let name = format!("client {j}");
                        let samples = c.run(t, &z[j], None).map_err(|e| (j + 1, e))?;
                        let prior = prior_piece(c.model, &samples, &z[j], setup.rho).map_err(|e| (j + 1, e))?;
                        let g = combine_augmented(&ev.d_eta, &prior);
                        sq.push(norm2(&g).powi(2));
                        update_z(&mut z[j], &g, delta, cfg.divergence_bound, t, &name).map_err(|e| (j + 1, e))?;
                        avg[j].push(t, &z[j]);
                    }
                }
                Formulation::Power => {
                    let sv = shared.values();
                    let snapshot = z.clone();
                    let view = setup.power_view(&snapshot, sv);
                    let mut pieces = Vec::with_capacity(z.len());
                    for (j, c) in chains.iter_mut().enumerate() {
                        let samples = c.run(t, &snapshot[j], Some(&view)).map_err(|e| (j + 1, e))?;
                        pieces.push(power_pieces(c.model, &samples, &view, j, setup.rho).map_err(|e| (j + 1, e))?);
                    }
                    let grads = aggregate_power(&pieces);
                    let terms: Vec<f64> = pieces.iter().map(|p| p.d_sigma).collect();
                    shared.step(&terms, delta).map_err(|e| (0, e))?;
                    for (j, g) in grads.iter().enumerate() {
                        sq.push(norm2(g).powi(2));
                        update_z(&mut z[j], g, delta, cfg.divergence_bound, t, "server").map_err(|e| (0, e))?;
                        avg[j].push(t, &z[j]);
                    }
                }
                Formulation::True => unreachable!(),
            }
            Ok(trace_row(t, &sq, z.iter().map(|b| norm_inf(b)), shared.values().sigma))
        };
        match step(&mut z, &mut chains, &mut shared, &mut avg) {
            Ok(row) => trace.push(row),
            Err((actor, Error::NonFinite(detail) | Error::Numerical { detail, .. })) => {
                status = RunStatus::Aborted {
                    iteration: t,
                    actor: crate::federation::actors::actor_name(actor),
                    detail,
                };
                break;
            }
            Err((_, e)) => return Err(e),
        }
    }
    Ok(SoulResult {
        z_map: avg.iter().zip(&z).map(|(a, zl)| a.value(zl)).collect(),
        z_last: z,
        sigma: shared.values().sigma,
        conditional_draws: chains.iter().map(|c| c.archive.clone()).collect(),
        theta_last: chains.iter().map(|c| c.theta.clone()).collect(),
        trace,
        counters: MessageCounters::default(),
        status,
        seed: cfg.seed,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

pub(crate) fn trace_row(t: u64, sq: &[f64], sups: impl Iterator<Item = f64>, sigma: f64) -> SoulTraceRow {
    SoulTraceRow {
        iteration: t,
        grad_norm: sq.iter().fold(0.0, |a, b| a + b).sqrt(),
        z_sup: sups.fold(0.0, f64::max),
        sigma,
    }
}

pub use protocol::run_soul;
