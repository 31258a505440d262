//! Client/server execution of federated variational inference.
//!
//! The server holds the response `y` and the shared parameters γ; client `j`
//! holds its covariate block `x_j`, its prior and its variational factors.
//! Only auxiliary samples `z_j`, gradients with respect to them and control
//! messages cross the wire.
//!
//! * [`run_algorithm1`] fits the augmented-variable model. Per iteration each
//!   client sends `z_j`; the server replies with `∂L₀/∂z_j`.
//! * [`run_algorithm2`] fits the power-likelihood model. Per iteration each
//!   client sends `z_j`; the server broadcasts all of `z`; each client sends
//!   `∂L_{0,j}/∂z_k` for `k ≠ j`; the server returns the per-client sums.
//!   Clients see every other client's `z` in this protocol.
//! * [`monolithic_reference`] performs the same updates in one loop. With
//!   the same seed its result matches the federated runs bit for bit.
//!
//! The server also fits the shared parameters γ, stepping their factors once
//! per iteration after the likelihood gradients are computed.

pub mod actors;
pub mod message;
pub mod step;
pub mod transport;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::AdamConfig;
use crate::models::{loglik_aux, Dataset, Formulation, Likelihood, ModelSpec, SharedValues};
use crate::variational::{ClientState, SharedState, VariationalConfig};

use actors::{actor_name, ActorEnd, ActorReport, Mailbox, ResponseView};
use step::{cross_sum, sum_shared_grads, ClientWorker, ServerWorker};
pub use message::{ControlKind, Message, Payload, Tag};
pub use transport::{MessageCounters, MessageLog, TagCount, TransportKind};

/// Random stream ids: `(actor << 16) | purpose`, actor 0 being the server
/// and actor `j + 1` client `j`. Iteration `t` uses block `t` of a stream.
pub mod rng_plan {
    pub const INIT: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const SHARED: u64 = 3;
    pub const LANGEVIN: u64 = 4;

    pub fn stream(actor: usize, purpose: u64) -> u64 {
        ((actor as u64) << 16) | purpose
    }
}

/// Who can see `y` in the augmented protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Only the server holds `y`; it sends `∂L₀/∂z_j` to each client.
    #[default]
    PrivateResponse,
    /// Every actor holds `y`; the server broadcasts `z` and γ and each
    /// client evaluates `∂L₀/∂z_j` itself.
    SharedResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub iterations: u64,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub variational: VariationalConfig,
    pub scenario: Scenario,
    pub transport: TransportKind,
    /// Longest wait for any single protocol step.
    pub timeout_ms: u64,
    pub run_id: u64,
    /// JSON-lines record of every message sent.
    pub message_log: Option<PathBuf>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            seed: 0,
            optimizer: AdamConfig {
                lr: 0.01,
                ..Default::default()
            },
            variational: VariationalConfig::default(),
            scenario: Scenario::default(),
            transport: TransportKind::default(),
            timeout_ms: 60_000,
            run_id: 1,
            message_log: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timeout_ms == 0 {
            return Err(Error::Config("timeout_ms must be >= 1".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Executor {
    Algorithm1,
    Algorithm2,
    Monolithic,
}

/// ELBO estimate at one iteration, averaged over the Monte Carlo samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: u64,
    /// `L₀` (or `Σ_j L_{0,j}`) plus the shared factors' `log p(γ) − log q(γ)`.
    pub server: f64,
    /// `Σ_j L_j` (or `Σ_j L_{1,j}`).
    pub local: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    /// A non-finite value stopped the run; the factors are those in effect
    /// before the failing update.
    Aborted {
        iteration: u64,
        actor: String,
        detail: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub executor: Executor,
    pub trace: Vec<TraceRow>,
    pub clients: Vec<ClientState>,
    pub shared: SharedState,
    pub counters: MessageCounters,
    pub seed: u64,
    pub run_id: u64,
    pub wall_seconds: f64,
    pub status: RunStatus,
}

impl FitResult {
    /// Equality of everything the computation determines (not timing,
    /// executor or message accounting).
    pub fn same_fit(&self, other: &FitResult) -> bool {
        self.trace == other.trace
            && self.clients == other.clients
            && self.shared == other.shared
            && self.status == other.status
    }

    /// Mean of the total ELBO over the last `k` rows.
    pub fn tail_mean(&self, k: usize) -> f64 {
        let k = k.min(self.trace.len()).max(1);
        let tail = &self.trace[self.trace.len().saturating_sub(k)..];
        tail.iter().map(|r| r.total).sum::<f64>() / tail.len() as f64
    }
}

/// `∂L₀/∂z_j` for the augmented model. The derivative is the same vector
/// for every client; `d_intercept` and `d_sigma` feed the shared factors.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerGrad {
    pub value: f64,
    pub d_eta: Vec<f64>,
    pub d_intercept: f64,
    pub d_sigma: f64,
}

impl ServerGrad {
    pub fn for_client(&self, _j: usize) -> &[f64] {
        &self.d_eta
    }
}

pub fn server_grad_l0(
    lik: Likelihood,
    y: &[f64],
    z: &[&[f64]],
    offset: Option<&[f64]>,
    shared: SharedValues,
) -> Result<ServerGrad> {
    let ev = loglik_aux(lik, y, z, offset, shared)?;
    Ok(ServerGrad {
        value: ev.value,
        d_eta: ev.d_eta,
        d_intercept: ev.d_intercept,
        d_sigma: ev.d_sigma,
    })
}

fn trace_row(iteration: u64, lik: f64, shared: f64, locals: impl Iterator<Item = f64>) -> TraceRow {
    let server = lik + shared;
    let local = locals.fold(0.0, |a, b| a + b);
    TraceRow {
        iteration,
        server,
        local,
        total: server + local,
    }
}

struct Setup<'a> {
    lik: Likelihood,
    workers: Vec<ClientWorker<'a>>,
    server: ServerWorker<'a>,
    samples: usize,
}

fn setup<'a>(spec: &'a ModelSpec, data: &'a Dataset, cfg: &FitConfig) -> Result<Setup<'a>> {
    cfg.validate()?;
    spec.validate_for(data)?;
    cfg.variational.validate(spec.formulation)?;
    let lik = spec.family.likelihood();
    lik.validate_response(&data.y)?;
    let n = data.n();
    let kinds = spec.predictor_kinds(data)?;
    let rho = match spec.formulation {
        Formulation::True => None,
        _ => Some(spec.rho()?),
    };
    let y_aux = (spec.formulation == Formulation::Power).then_some(data.y.as_slice());
    let mut workers = Vec::with_capacity(kinds.len());
    for (j, kind) in kinds.into_iter().enumerate() {
        let mut rng = ClientWorker::init_stream(cfg.seed, j);
        let state = ClientState::init(&kind, n, spec.formulation, &cfg.variational, &mut rng)?;
        workers.push(ClientWorker::new(
            j,
            kind,
            data.client_inputs(j),
            y_aux,
            spec.prior_for(j),
            rho,
            state,
            cfg.optimizer,
            cfg.seed,
            cfg.variational.samples,
        ));
    }
    let shared = SharedState::from_spec(spec, cfg.variational.shared_scale);
    let server = ServerWorker::new(
        lik,
        &data.y,
        data.offset.as_deref(),
        shared,
        cfg.optimizer,
        cfg.seed,
        cfg.variational.samples,
    );
    Ok(Setup {
        lik,
        workers,
        server,
        samples: cfg.variational.samples,
    })
}

fn require(spec: &ModelSpec, formulation: Formulation, what: &str) -> Result<()> {
    if spec.formulation != formulation {
        return Err(Error::Config(format!(
            "{what} needs the {formulation:?} formulation, got {:?}",
            spec.formulation
        )));
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Protocol {
    One(Scenario),
    Two,
}

fn run_distributed(spec: &ModelSpec, data: &Dataset, cfg: &FitConfig, protocol: Protocol) -> Result<FitResult> {
    let start = Instant::now();
    let Setup {
        lik,
        workers,
        server,
        samples,
    } = setup(spec, data, cfg)?;
    if cfg.iterations == 0 {
        // nothing is exchanged; report the initial factors
        return Ok(FitResult {
            executor: match protocol {
                Protocol::One(_) => Executor::Algorithm1,
                Protocol::Two => Executor::Algorithm2,
            },
            trace: Vec::new(),
            clients: workers.into_iter().map(|w| w.state).collect(),
            shared: server.shared,
            counters: MessageCounters::default(),
            seed: cfg.seed,
            run_id: cfg.run_id,
            wall_seconds: start.elapsed().as_secs_f64(),
            status: RunStatus::Completed,
        });
    }
    let num_clients = workers.len();
    let log = cfg.message_log.as_deref().map(MessageLog::create).transpose()?;
    let timeout = Duration::from_millis(cfg.timeout_ms);
    let mut boxes: Vec<Mailbox> = transport::connect(cfg.transport, num_clients)?
        .into_iter()
        .enumerate()
        .map(|(a, e)| Mailbox::new(transport::Link::new(a, e, timeout, log.clone()), cfg.run_id))
        .collect();
    let client_boxes = boxes.split_off(1);
    let server_box = boxes.pop().unwrap();
    let view = ResponseView {
        lik,
        y: &data.y,
        offset: data.offset.as_deref(),
    };
    let iterations = cfg.iterations;
    let reports: Vec<Result<ActorReport>> = std::thread::scope(|sc| {
        let server_handle = sc.spawn(move || match protocol {
            Protocol::One(scenario) => {
                actors::server_algorithm1(server, server_box, iterations, scenario, num_clients, samples)
            }
            Protocol::Two => actors::server_algorithm2(server, server_box, iterations, num_clients, samples),
        });
        let client_handles: Vec<_> = workers
            .into_iter()
            .zip(client_boxes)
            .map(|(w, mb)| {
                sc.spawn(move || match protocol {
                    Protocol::One(scenario) => {
                        actors::client_algorithm1(w, mb, iterations, scenario, view, num_clients)
                    }
                    Protocol::Two => actors::client_algorithm2(w, mb, iterations, view, num_clients),
                })
            })
            .collect();
        let mut out = vec![server_handle.join().unwrap_or_else(|_| Err(panicked()))];
        out.extend(
            client_handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(panicked()))),
        );
        out
    });
    if let Some(l) = &log {
        l.flush()?;
    }
    let reports = first_error(reports)?;
    let executor = match protocol {
        Protocol::One(_) => Executor::Algorithm1,
        Protocol::Two => Executor::Algorithm2,
    };
    Ok(combine(executor, reports, cfg, start))
}

fn panicked() -> Error {
    Error::Contract("an actor thread panicked".into())
}

/// Picks the error that started a failed run: errors caused by peers going
/// away (stops, hang-ups, timeouts) rank below the rest.
pub(crate) fn first_error<R>(reports: Vec<Result<R>>) -> Result<Vec<R>> {
    let rank = |e: &Error| match e {
        Error::Aborted(_) => 3,
        Error::Transport(_) => 2,
        Error::Timeout(_) => 1,
        _ => 0,
    };
    let mut ok = Vec::new();
    let mut worst: Option<Error> = None;
    for r in reports {
        match r {
            Ok(rep) => ok.push(rep),
            Err(e) => {
                if worst.as_ref().is_none_or(|w| rank(&e) < rank(w)) {
                    worst = Some(e);
                }
            }
        }
    }
    match worst {
        Some(e) => Err(e),
        None => Ok(ok),
    }
}

fn combine(executor: Executor, reports: Vec<ActorReport>, cfg: &FitConfig, start: Instant) -> FitResult {
    let mut counters = MessageCounters::default();
    let mut status = RunStatus::Completed;
    let mut server = None;
    let mut clients = Vec::new();
    for r in reports {
        counters.merge(&r.link.counters);
        if let ActorEnd::Failed { iteration, detail } = &r.end {
            let earlier = match &status {
                RunStatus::Aborted { iteration: i, .. } => iteration < i,
                RunStatus::Completed => true,
            };
            if earlier {
                status = RunStatus::Aborted {
                    iteration: *iteration,
                    actor: actor_name(r.actor),
                    detail: detail.clone(),
                };
            }
        }
        if r.actor == 0 {
            server = Some(r);
        } else {
            clients.push(r);
        }
    }
    clients.sort_by_key(|r| r.actor);
    let server = server.expect("server report");
    let stopped = clients.iter().any(|c| matches!(c.end, ActorEnd::Stopped)) || matches!(server.end, ActorEnd::Stopped);
    if stopped && status == RunStatus::Completed {
        log::warn!("run stopped without a reported failure");
    }
    let rows = clients
        .iter()
        .map(|c| c.primary.len())
        .chain([server.secondary.len()])
        .min()
        .unwrap_or(0);
    let trace = (0..rows)
        .map(|t| {
            let lik = match executor {
                Executor::Algorithm2 => sum_in_order(clients.iter().map(|c| c.secondary[t])),
                _ => server.primary[t],
            };
            trace_row(t as u64, lik, server.secondary[t], clients.iter().map(|c| c.primary[t]))
        })
        .collect();
    FitResult {
        executor,
        trace,
        clients: clients.into_iter().map(|c| c.client.expect("client state")).collect(),
        shared: server.shared.expect("shared state"),
        counters,
        seed: cfg.seed,
        run_id: cfg.run_id,
        wall_seconds: start.elapsed().as_secs_f64(),
        status,
    }
}

fn sum_in_order(xs: impl Iterator<Item = f64>) -> f64 {
    xs.fold(0.0, |a, b| a + b)
}

/// Augmented-variable model over the transport in `cfg`.
pub fn run_algorithm1(spec: &ModelSpec, data: &Dataset, cfg: &FitConfig) -> Result<FitResult> {
    require(spec, Formulation::Augmented, "algorithm 1")?;
    run_distributed(spec, data, cfg, Protocol::One(cfg.scenario))
}

/// Power-likelihood model over the transport in `cfg`.
pub fn run_algorithm2(spec: &ModelSpec, data: &Dataset, cfg: &FitConfig) -> Result<FitResult> {
    require(spec, Formulation::Power, "algorithm 2")?;
    run_distributed(spec, data, cfg, Protocol::Two)
}

/// The same updates as the federated protocols, in a single loop, for any
/// formulation. The true model (no auxiliary variables) is only available
/// here.
pub fn monolithic_reference(spec: &ModelSpec, data: &Dataset, cfg: &FitConfig) -> Result<FitResult> {
    let start = Instant::now();
    let Setup {
        lik,
        mut workers,
        mut server,
        samples,
    } = setup(spec, data, cfg)?;
    let n = data.n();
    let offset = data.offset.as_deref();
    let mut trace = Vec::new();
    let mut status = RunStatus::Completed;
    for t in 0..cfg.iterations {
        let step = |workers: &mut Vec<ClientWorker<'_>>, server: &mut ServerWorker<'_>| -> std::result::Result<TraceRow, (usize, Error)> {
            let mut z = Vec::with_capacity(workers.len());
            for w in workers.iter_mut() {
                z.push(w.prepare(t).map_err(|e| (w.j + 1, e))?);
            }
            let shared = server.draw_shared(t).map_err(|e| (0, e))?;
            let mut locals = Vec::with_capacity(workers.len());
            match spec.formulation {
                Formulation::Augmented | Formulation::True => {
                    let ev = server.eval_aux(&z).map_err(|e| (0, e))?;
                    let sv = server.update_shared(&ev.shared_grad).map_err(|e| (0, e))?;
                    let own: Vec<Vec<f64>> = ev.d_eta.chunks(n).map(<[f64]>::to_vec).collect();
                    for w in workers.iter_mut() {
                        let r = if spec.formulation == Formulation::True {
                            w.finish(None, Some(&own))
                        } else {
                            w.finish(Some(&ev.d_eta), None)
                        };
                        locals.push(r.map_err(|e| (w.j + 1, e))?);
                    }
                    Ok(trace_row(t, ev.value, sv, locals.into_iter()))
                }
                Formulation::Power => {
                    let mut cross = Vec::with_capacity(workers.len());
                    for w in workers.iter_mut() {
                        cross.push(w.cross_grads(lik, &data.y, offset, &z, &shared).map_err(|e| (w.j + 1, e))?);
                    }
                    let view: Vec<(usize, &[(usize, Vec<f64>)])> =
                        cross.iter().enumerate().map(|(k, c)| (k, c.targets.as_slice())).collect();
                    let sums: Vec<Vec<f64>> = (0..workers.len()).map(|j| cross_sum(&view, j, samples * n)).collect();
                    let parts: Vec<&[f64]> = cross.iter().map(|c| c.shared_grad.as_slice()).collect();
                    let sv = server
                        .update_shared(&sum_shared_grads(&parts, 2 * samples))
                        .map_err(|e| (0, e))?;
                    for (w, sum) in workers.iter_mut().zip(&sums) {
                        locals.push(w.finish(Some(sum), None).map_err(|e| (w.j + 1, e))?);
                    }
                    let lik_total = sum_in_order(cross.iter().map(|c| c.value));
                    Ok(trace_row(t, lik_total, sv, locals.into_iter()))
                }
            }
        };
        match step(&mut workers, &mut server) {
            Ok(row) => trace.push(row),
            Err((actor, Error::NonFinite(detail))) => {
                status = RunStatus::Aborted {
                    iteration: t,
                    actor: actor_name(actor),
                    detail,
                };
                break;
            }
            Err((_, e)) => return Err(e),
        }
    }
    Ok(FitResult {
        executor: Executor::Monolithic,
        trace,
        clients: workers.into_iter().map(|w| w.state).collect(),
        shared: server.shared,
        counters: MessageCounters::default(),
        seed: cfg.seed,
        run_id: cfg.run_id,
        wall_seconds: start.elapsed().as_secs_f64(),
        status,
    })
}
