//! SOUL over the federated transport.
//!
//! Augmented model, per iteration: each client sends `z_j`, the server
//! answers with `∇_{z_j} log p(y | z)` and steps σ, and each client finishes
//! its own `z_j` update from its Langevin chain. `2J` messages.
//!
//! Power likelihood: `z` lives on the server after one initial upload. Per
//! iteration the server broadcasts `(z, b, σ)`, and each client answers with
//! its cross piece, its prior piece and, when σ is learned, its σ piece.

use std::time::{Duration, Instant};

use crate::error::{check_finite, Error, Result};
use crate::federation::actors::{actor_name, expect_client, split_broadcast, supervise, ActorEnd, Mailbox};
use crate::federation::message::{Payload, Tag};
use crate::federation::transport::{self, client_actor, Link, MessageLog, SERVER};
use crate::federation::{first_error, MessageCounters, RunStatus};
use crate::math::linalg::{norm2, norm_inf};
use crate::models::{loglik_aux, Dataset, Formulation, Likelihood, ModelSpec, SharedValues};

use super::{
    aggregate_power, combine_augmented, power_pieces, prior_piece, trace_row, update_z, Chain, PowerPieces,
    PowerView, SharedPoint, SoulConfig, SoulResult, SoulSetup, SoulTraceRow, TailAverage,
};

struct Report {
    actor: usize,
    /// Augmented: this client's squared gradient norm and `‖z_j‖∞` per
    /// iteration.
    sq: Vec<f64>,
    sup: Vec<f64>,
    /// Server: σ per iteration (augmented) or whole rows (power).
    sigma: Vec<f64>,
    rows: Vec<SoulTraceRow>,
    z_last: Vec<Vec<f64>>,
    z_map: Vec<Vec<f64>>,
    final_sigma: f64,
    theta: Vec<f64>,
    archive: Vec<Vec<f64>>,
    end: ActorEnd,
    link: Link,
}

impl Report {
    fn new(actor: usize, end: ActorEnd, link: Link) -> Self {
        Self {
            actor,
            sq: Vec::new(),
            sup: Vec::new(),
            sigma: Vec::new(),
            rows: Vec::new(),
            z_last: Vec::new(),
            z_map: Vec::new(),
            final_sigma: f64::NAN,
            theta: Vec::new(),
            archive: Vec::new(),
            end,
            link,
        }
    }
}

#[derive(Clone, Copy)]
struct Context<'a> {
    lik: Likelihood,
    y: &'a [f64],
    offset: Option<&'a [f64]>,
    cfg: &'a SoulConfig,
    num_clients: usize,
}

fn client_augmented(mut chain: Chain<'_>, mut mb: Mailbox, cx: Context<'_>) -> Result<Report> {
    let j = chain.j;
    let name = actor_name(client_actor(j));
    let mut z = chain.warm_start()?;
    let n = z.len();
    let mut avg = TailAverage::new(cx.cfg, n);
    let (mut sq, mut sup) = (Vec::new(), Vec::new());
    let end = supervise(&mut mb, &[SERVER], |mb, t| {
        for it in 0..cx.cfg.iterations {
            *t = it;
            mb.send(SERVER, it, Payload::AuxUpdate { client: j, z: z.clone() })?;
            let samples = chain.run(it, &z, None)?;
            let prior = prior_piece(chain.model, &samples, &z, chain.rho)?;
            let d_eta = match mb.gather_one(Tag::ServerZGrad, it, SERVER)? {
                Payload::ServerZGrad { client, grad } if client == j && grad.len() == n => grad,
                _ => return Err(Error::Protocol(format!("bad z-gradient for client {j}"))),
            };
            let g = combine_augmented(&d_eta, &prior);
            update_z(&mut z, &g, cx.cfg.delta(it), cx.cfg.divergence_bound, it, &name)?;
            avg.push(it, &z);
            sq.push(norm2(&g).powi(2));
            sup.push(norm_inf(&z));
        }
        Ok(())
    })?;
    let mut r = Report::new(client_actor(j), end, mb.link);
    r.sq = sq;
    r.sup = sup;
    r.z_map = vec![avg.value(&z)];
    r.z_last = vec![z];
    r.theta = chain.theta;
    r.archive = chain.archive;
    Ok(r)
}

fn collect_z(got: Vec<(usize, Payload)>, n: usize) -> Result<Vec<Vec<f64>>> {
    got.into_iter()
        .map(|(from, p)| match p {
            Payload::AuxUpdate { client, z } => {
                expect_client(client, from)?;
                if z.len() != n {
                    return Err(Error::Protocol(format!("z from client {client} has length {}", z.len())));
                }
                Ok(z)
            }
            _ => unreachable!(),
        })
        .collect()
}

fn server_augmented(mut shared: SharedPoint, mut mb: Mailbox, cx: Context<'_>) -> Result<Report> {
    let clients: Vec<usize> = (0..cx.num_clients).map(client_actor).collect();
    let mut sigma = Vec::new();
    let end = supervise(&mut mb, &clients, |mb, t| {
        for it in 0..cx.cfg.iterations {
            *t = it;
            let z = collect_z(mb.gather(Tag::AuxUpdate, it, &clients)?, cx.y.len())?;
            let blocks: Vec<&[f64]> = z.iter().map(Vec::as_slice).collect();
            let ev = loglik_aux(cx.lik, cx.y, &blocks, cx.offset, shared.values())?;
            check_finite("server likelihood gradient", &ev.d_eta)?;
            shared.step(&[ev.d_sigma], cx.cfg.delta(it))?;
            for j in 0..cx.num_clients {
                let grad = ev.d_eta.clone();
                mb.send(client_actor(j), it, Payload::ServerZGrad { client: j, grad })?;
            }
            sigma.push(shared.values().sigma);
        }
        Ok(())
    })?;
    let mut r = Report::new(SERVER, end, mb.link);
    r.sigma = sigma;
    r.final_sigma = shared.values().sigma;
    Ok(r)
}

fn client_power(mut chain: Chain<'_>, mut mb: Mailbox, cx: Context<'_>, learned: bool) -> Result<Report> {
    let j = chain.j;
    let n = cx.y.len();
    let end = supervise(&mut mb, &[SERVER], |mb, t| {
        let z0 = chain.warm_start()?;
        mb.send(SERVER, 0, Payload::AuxUpdate { client: j, z: z0 })?;
        for it in 0..cx.cfg.iterations {
            *t = it;
            let (z, shared) = split_broadcast(mb.gather_one(Tag::AuxBroadcast, it, SERVER)?, cx.num_clients, n)?;
            if shared.len() != 1 {
                return Err(Error::Protocol("SOUL broadcasts carry one point".into()));
            }
            let view = PowerView {
                lik: cx.lik,
                y: cx.y,
                offset: cx.offset,
                z: &z,
                shared: shared[0],
            };
            let samples = chain.run(it, &z[j], Some(&view))?;
            let p = power_pieces(chain.model, &samples, &view, j, chain.rho)?;
            let targets = (0..cx.num_clients).filter(|&k| k != j).map(|k| (k, p.cross.clone())).collect();
            mb.send(
                SERVER,
                it,
                Payload::CrossGrad {
                    from: j,
                    samples: 1,
                    block_len: n,
                    shared_grad: Vec::new(),
                    targets,
                },
            )?;
            mb.send(SERVER, it, Payload::ThetaSummary { client: j, values: p.prior })?;
            if learned {
                mb.send(SERVER, it, Payload::SigmaGrad { client: j, value: p.d_sigma })?;
            }
        }
        Ok(())
    })?;
    let mut r = Report::new(client_actor(j), end, mb.link);
    r.theta = chain.theta;
    r.archive = chain.archive;
    Ok(r)
}

fn server_power(mut shared: SharedPoint, mut mb: Mailbox, cx: Context<'_>) -> Result<Report> {
    let clients: Vec<usize> = (0..cx.num_clients).map(client_actor).collect();
    let n = cx.y.len();
    let mut rows = Vec::new();
    let mut z = Vec::new();
    let mut avg: Vec<TailAverage> = (0..cx.num_clients).map(|_| TailAverage::new(cx.cfg, n)).collect();
    let end = supervise(&mut mb, &clients, |mb, t| {
        z = collect_z(mb.gather(Tag::AuxUpdate, 0, &clients)?, n)?;
        for it in 0..cx.cfg.iterations {
            *t = it;
            let sv: SharedValues = shared.values();
            let b = crate::federation::actors::build_broadcast(&z, &[sv], n);
            for &c in &clients {
                mb.send(c, it, b.clone())?;
            }
            let mut pieces: Vec<PowerPieces> = Vec::with_capacity(cx.num_clients);
            for (from, p) in mb.gather(Tag::CrossGrad, it, &clients)? {
                let Payload::CrossGrad { from: k, targets, .. } = p else {
                    unreachable!()
                };
                expect_client(k, from)?;
                let cross = targets.into_iter().next().map(|(_, v)| v).unwrap_or_default();
                if cx.num_clients > 1 && cross.len() != n {
                    return Err(Error::Protocol(format!("cross piece from client {k} has the wrong shape")));
                }
                pieces.push(PowerPieces {
                    prior: Vec::new(),
                    cross,
                    d_sigma: 0.0,
                });
            }
            for (from, p) in mb.gather(Tag::ThetaSummary, it, &clients)? {
                let Payload::ThetaSummary { client, values } = p else {
                    unreachable!()
                };
                expect_client(client, from)?;
                if values.len() != n {
                    return Err(Error::Protocol(format!("prior piece from client {client} has the wrong shape")));
                }
                pieces[client].prior = values;
            }
            if shared.learned() {
                for (from, p) in mb.gather(Tag::SigmaGrad, it, &clients)? {
                    let Payload::SigmaGrad { client, value } = p else {
                        unreachable!()
                    };
                    expect_client(client, from)?;
                    pieces[client].d_sigma = value;
                }
            }
            let grads = aggregate_power(&pieces);
            let terms: Vec<f64> = pieces.iter().map(|p| p.d_sigma).collect();
            shared.step(&terms, cx.cfg.delta(it))?;
            let mut sq = Vec::with_capacity(cx.num_clients);
            for (j, g) in grads.iter().enumerate() {
                sq.push(norm2(g).powi(2));
                update_z(&mut z[j], g, cx.cfg.delta(it), cx.cfg.divergence_bound, it, "server")?;
                avg[j].push(it, &z[j]);
            }
            rows.push(trace_row(it, &sq, z.iter().map(|b| norm_inf(b)), shared.values().sigma));
        }
        Ok(())
    })?;
    let mut r = Report::new(SERVER, end, mb.link);
    r.rows = rows;
    r.z_map = avg.iter().zip(&z).map(|(a, zl)| a.value(zl)).collect();
    r.z_last = z;
    r.final_sigma = shared.values().sigma;
    Ok(r)
}

/// SOUL over the transport in `cfg`, with the formulation in `spec`.
/// Produces the same result as [`super::soul_reference`].
pub fn run_soul(spec: &ModelSpec, data: &Dataset, cfg: &SoulConfig) -> Result<SoulResult> {
    if cfg.iterations == 0 {
        // no messages; the warm start is the whole result
        return super::soul_reference(spec, data, cfg);
    }
    let start = Instant::now();
    let setup = SoulSetup::new(spec, data, cfg)?;
    let shared = SharedPoint::from_spec(spec, cfg, data.n())?;
    let learned = shared.learned();
    let chains = setup.chains(cfg);
    let num_clients = chains.len();
    let log = cfg.message_log.as_deref().map(MessageLog::create).transpose()?;
    let timeout = Duration::from_millis(cfg.timeout_ms);
    let mut boxes: Vec<Mailbox> = transport::connect(cfg.transport, num_clients)?
        .into_iter()
        .enumerate()
        .map(|(a, e)| Mailbox::new(Link::new(a, e, timeout, log.clone()), cfg.run_id))
        .collect();
    let client_boxes = boxes.split_off(1);
    let server_box = boxes.pop().unwrap();
    let cx = Context {
        lik: setup.lik,
        y: &data.y,
        offset: data.offset.as_deref(),
        cfg,
        num_clients,
    };
    let power = spec.formulation == Formulation::Power;
    let reports: Vec<Result<Report>> = std::thread::scope(|sc| {
        let server = sc.spawn(move || {
            if power {
                server_power(shared, server_box, cx)
            } else {
                server_augmented(shared, server_box, cx)
            }
        });
        let handles: Vec<_> = chains
            .into_iter()
            .zip(client_boxes)
            .map(|(c, mb)| {
                sc.spawn(move || {
                    if power {
                        client_power(c, mb, cx, learned)
                    } else {
                        client_augmented(c, mb, cx)
                    }
                })
            })
            .collect();
        let panicked = || Err(Error::Contract("an actor thread panicked".into()));
        let mut out = vec![server.join().unwrap_or_else(|_| panicked())];
        out.extend(handles.into_iter().map(|h| h.join().unwrap_or_else(|_| panicked())));
        out
    });
    if let Some(l) = &log {
        l.flush()?;
    }
    let reports = first_error(reports)?;
    Ok(combine(reports, power, cfg, start))
}

fn combine(reports: Vec<Report>, power: bool, cfg: &SoulConfig, start: Instant) -> SoulResult {
    let mut counters = MessageCounters::default();
    let mut status = RunStatus::Completed;
    let mut server = None;
    let mut clients = Vec::new();
    for r in reports {
        counters.merge(&r.link.counters);
        if let ActorEnd::Failed { iteration, detail } = &r.end {
            if !matches!(&status, RunStatus::Aborted { iteration: i, .. } if i <= iteration) {
                status = RunStatus::Aborted {
                    iteration: *iteration,
                    actor: actor_name(r.actor),
                    detail: detail.clone(),
                };
            }
        }
        if r.actor == SERVER {
            server = Some(r);
        } else {
            clients.push(r);
        }
    }
    clients.sort_by_key(|r| r.actor);
    let server = server.expect("server report");
    let sigma = server.final_sigma;
    let (trace, z_map, z_last) = if power {
        (server.rows, server.z_map, server.z_last)
    } else {
        let rows = clients.iter().map(|c| c.sq.len()).chain([server.sigma.len()]).min().unwrap_or(0);
        let trace = (0..rows)
            .map(|t| {
                let sq: Vec<f64> = clients.iter().map(|c| c.sq[t]).collect();
                trace_row(t as u64, &sq, clients.iter().map(|c| c.sup[t]), server.sigma[t])
            })
            .collect();
        (
            trace,
            clients.iter().flat_map(|c| c.z_map.clone()).collect(),
            clients.iter().flat_map(|c| c.z_last.clone()).collect(),
        )
    };
    SoulResult {
        z_map,
        z_last,
        sigma,
        conditional_draws: clients.iter().map(|c| c.archive.clone()).collect(),
        theta_last: clients.iter().map(|c| c.theta.clone()).collect(),
        trace,
        counters,
        status,
        seed: cfg.seed,
        wall_seconds: start.elapsed().as_secs_f64(),
    }
}
