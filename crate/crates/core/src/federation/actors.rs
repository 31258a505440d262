//! Server and client loops for both protocols.

use std::time::Instant;

use super::message::{ControlKind, Message, Payload, Tag};
use super::step::{cross_sum, eval_aux, sum_shared_grads, ClientWorker, ServerWorker};
use super::transport::{client_actor, Link, SERVER};
use super::Scenario;
use crate::error::{Error, Result};
use crate::models::{Likelihood, SharedValues};
use crate::variational::{ClientState, SharedState};

/// Receives messages for one actor and releases them grouped by
/// `(tag, iteration)`, whatever order they arrive in.
pub(crate) struct Mailbox {
    pub link: Link,
    run_id: u64,
    pending: Vec<(usize, Message)>,
}

impl Mailbox {
    pub fn new(link: Link, run_id: u64) -> Self {
        Self {
            link,
            run_id,
            pending: Vec::new(),
        }
    }

    pub fn send(&mut self, to: usize, iteration: u64, payload: Payload) -> Result<()> {
        self.link.send(to, &Message::new(self.run_id, iteration, payload))
    }

    pub fn stop(&mut self, to: usize, iteration: u64) {
        // best effort: the peer may already be gone
        let _ = self.send(to, iteration, Payload::Control { kind: ControlKind::Stop });
    }

    /// One message of `tag` for `iteration` from each of `senders`, sorted
    /// by sender. A stop request from anyone ends the wait.
    pub fn gather(&mut self, tag: Tag, iteration: u64, senders: &[usize]) -> Result<Vec<(usize, Payload)>> {
        let deadline = Instant::now() + self.link.timeout();
        let mut got: Vec<(usize, Payload)> = Vec::with_capacity(senders.len());
        let mut i = 0;
        loop {
            while i < self.pending.len() {
                let (from, m) = &self.pending[i];
                if let Payload::Control { kind: ControlKind::Stop } = m.payload {
                    return Err(Error::Aborted(actor_name(*from)));
                }
                if m.tag() == tag && m.iteration == iteration && senders.contains(from) {
                    let (from, m) = self.pending.remove(i);
                    if got.iter().any(|(f, _)| *f == from) {
                        return Err(Error::Protocol(format!(
                            "duplicate {tag:?} for iteration {iteration} from {}",
                            actor_name(from)
                        )));
                    }
                    got.push((from, m.payload));
                } else {
                    i += 1;
                }
            }
            if got.len() == senders.len() {
                got.sort_by_key(|(f, _)| *f);
                return Ok(got);
            }
            let (from, m) = self.link.recv(deadline).map_err(|e| match e {
                Error::Timeout(_) => Error::Timeout(format!(
                    "{tag:?} for iteration {iteration} at {}",
                    actor_name(self.link.me)
                )),
                e => e,
            })?;
            if m.run_id != self.run_id {
                return Err(Error::Protocol(format!(
                    "message from run {} received in run {}",
                    m.run_id, self.run_id
                )));
            }
            self.pending.push((from, m));
        }
    }

    pub fn gather_one(&mut self, tag: Tag, iteration: u64, sender: usize) -> Result<Payload> {
        Ok(self.gather(tag, iteration, &[sender])?.pop().unwrap().1)
    }
}

pub(crate) fn actor_name(actor: usize) -> String {
    if actor == SERVER {
        "server".into()
    } else {
        format!("client {}", actor - 1)
    }
}

pub(crate) enum ActorEnd {
    Completed,
    /// This actor hit a non-finite value.
    Failed { iteration: u64, detail: String },
    /// Another actor asked to stop.
    Stopped,
}

pub(crate) struct ActorReport {
    pub actor: usize,
    /// Client: local ELBO term per iteration. Server: `L₀` per iteration
    /// (augmented protocol only).
    pub primary: Vec<f64>,
    /// Client: `L_{0,j}` per iteration (power protocol). Server: the shared
    /// factors' `log p(γ) − log q(γ)` per iteration.
    pub secondary: Vec<f64>,
    pub client: Option<ClientState>,
    pub shared: Option<SharedState>,
    pub end: ActorEnd,
    /// Kept so that late messages from peers still have somewhere to go.
    pub link: Link,
}

/// Wraps an actor body with the stop and abort conventions: a non-finite
/// value ends the run with a report, any other failure is an error, and
/// either way the peers are told to stop.
pub(crate) fn supervise(
    mb: &mut Mailbox,
    peers: &[usize],
    body: impl FnOnce(&mut Mailbox, &mut u64) -> Result<()>,
) -> Result<ActorEnd> {
    let mut t = 0;
    match body(mb, &mut t) {
        Ok(()) => Ok(ActorEnd::Completed),
        Err(Error::NonFinite(detail) | Error::Numerical { detail, .. }) => {
            log::warn!("{} aborting at iteration {t}: {detail}", actor_name(mb.link.me));
            for &p in peers {
                mb.stop(p, t);
            }
            Ok(ActorEnd::Failed { iteration: t, detail })
        }
        Err(Error::Aborted(by)) => {
            log::debug!("{} stopped by {by}", actor_name(mb.link.me));
            if mb.link.me == SERVER {
                for &p in peers {
                    mb.stop(p, t);
                }
            }
            Ok(ActorEnd::Stopped)
        }
        Err(e) => {
            for &p in peers {
                mb.stop(p, t);
            }
            Err(e)
        }
    }
}

pub(crate) fn expect_client(payload_client: usize, from: usize) -> Result<()> {
    if client_actor(payload_client) != from {
        return Err(Error::Protocol(format!(
            "{} sent a message labelled as client {payload_client}",
            actor_name(from)
        )));
    }
    Ok(())
}

/// Response context for clients that evaluate `L₀` themselves.
#[derive(Clone, Copy)]
pub(crate) struct ResponseView<'a> {
    pub lik: Likelihood,
    pub y: &'a [f64],
    pub offset: Option<&'a [f64]>,
}

pub(crate) fn split_broadcast(payload: Payload, num_clients: usize, n: usize) -> Result<(Vec<Vec<f64>>, Vec<SharedValues>)> {
    let Payload::AuxBroadcast {
        num_clients: jj,
        samples,
        block_len,
        shared,
        z,
    } = payload
    else {
        unreachable!()
    };
    if jj != num_clients || block_len != n || shared.len() != 2 * samples {
        return Err(Error::Protocol("broadcast header does not match the run".into()));
    }
    let mut blocks = vec![Vec::with_capacity(samples * n); num_clients];
    for s in 0..samples {
        for (k, b) in blocks.iter_mut().enumerate() {
            let at = (s * num_clients + k) * n;
            b.extend_from_slice(&z[at..at + n]);
        }
    }
    let values = shared
        .chunks_exact(2)
        .map(|c| SharedValues {
            intercept: c[0],
            sigma: c[1],
        })
        .collect();
    Ok((blocks, values))
}

pub(crate) fn build_broadcast(z: &[Vec<f64>], shared: &[SharedValues], n: usize) -> Payload {
    let samples = shared.len();
    let mut flat = Vec::with_capacity(samples * z.len() * n);
    for s in 0..samples {
        for b in z {
            flat.extend_from_slice(&b[s * n..(s + 1) * n]);
        }
    }
    Payload::AuxBroadcast {
        num_clients: z.len(),
        samples,
        block_len: n,
        shared: shared.iter().flat_map(|v| [v.intercept, v.sigma]).collect(),
        z: flat,
    }
}

fn collect_z(got: Vec<(usize, Payload)>, width: usize) -> Result<Vec<Vec<f64>>> {
    got.into_iter()
        .map(|(from, p)| match p {
            Payload::AuxUpdate { client, z } => {
                expect_client(client, from)?;
                if z.len() != width {
                    return Err(Error::Protocol(format!("z from client {client} has length {}", z.len())));
                }
                Ok(z)
            }
            _ => unreachable!(),
        })
        .collect()
}

pub(crate) fn client_algorithm1(
    mut w: ClientWorker<'_>,
    mut mb: Mailbox,
    iterations: u64,
    scenario: Scenario,
    view: ResponseView<'_>,
    num_clients: usize,
) -> Result<ActorReport> {
    let mut locals = Vec::new();
    let n = w.inputs.x.rows();
    let end = supervise(&mut mb, &[SERVER], |mb, t| {
        let z = w.prepare(0)?;
        mb.send(SERVER, 0, Payload::AuxUpdate { client: w.j, z })?;
        for it in 0..iterations {
            *t = it;
            let remote = match scenario {
                Scenario::PrivateResponse => match mb.gather_one(Tag::ServerZGrad, it, SERVER)? {
                    Payload::ServerZGrad { client, grad } if client == w.j => grad,
                    _ => return Err(Error::Protocol("gradient addressed to another client".into())),
                },
                Scenario::SharedResponse => {
                    let p = mb.gather_one(Tag::AuxBroadcast, it, SERVER)?;
                    let (z, shared) = split_broadcast(p, num_clients, n)?;
                    eval_aux(view.lik, view.y, view.offset, &z, &shared)?.d_eta
                }
            };
            locals.push(w.finish(Some(&remote), None)?);
            if it + 1 < iterations {
                *t = it + 1;
                let z = w.prepare(it + 1)?;
                mb.send(SERVER, it + 1, Payload::AuxUpdate { client: w.j, z })?;
            }
        }
        Ok(())
    })?;
    Ok(ActorReport {
        actor: client_actor(w.j),
        primary: locals,
        secondary: Vec::new(),
        client: Some(w.state),
        shared: None,
        end,
        link: mb.link,
    })
}

pub(crate) fn server_algorithm1(
    mut w: ServerWorker<'_>,
    mut mb: Mailbox,
    iterations: u64,
    scenario: Scenario,
    num_clients: usize,
    samples: usize,
) -> Result<ActorReport> {
    let clients: Vec<usize> = (0..num_clients).map(client_actor).collect();
    let n = w.y.len();
    let (mut lik, mut shared_vals) = (Vec::new(), Vec::new());
    let end = supervise(&mut mb, &clients, |mb, t| {
        for it in 0..iterations {
            *t = it;
            let z = collect_z(mb.gather(Tag::AuxUpdate, it, &clients)?, samples * n)?;
            let shared = w.draw_shared(it)?;
            let ev = w.eval_aux(&z)?;
            let sv = w.update_shared(&ev.shared_grad)?;
            match scenario {
                Scenario::PrivateResponse => {
                    for j in 0..num_clients {
                        let grad = ev.d_eta.clone();
                        mb.send(client_actor(j), it, Payload::ServerZGrad { client: j, grad })?;
                    }
                }
                Scenario::SharedResponse => {
                    let b = build_broadcast(&z, &shared, n);
                    for j in 0..num_clients {
                        mb.send(client_actor(j), it, b.clone())?;
                    }
                }
            }
            lik.push(ev.value);
            shared_vals.push(sv);
        }
        Ok(())
    })?;
    Ok(ActorReport {
        actor: SERVER,
        primary: lik,
        secondary: shared_vals,
        client: None,
        shared: Some(w.shared),
        end,
        link: mb.link,
    })
}

pub(crate) fn client_algorithm2(
    mut w: ClientWorker<'_>,
    mut mb: Mailbox,
    iterations: u64,
    view: ResponseView<'_>,
    num_clients: usize,
) -> Result<ActorReport> {
    let (mut locals, mut l0) = (Vec::new(), Vec::new());
    let n = w.inputs.x.rows();
    let end = supervise(&mut mb, &[SERVER], |mb, t| {
        let z = w.prepare(0)?;
        mb.send(SERVER, 0, Payload::AuxUpdate { client: w.j, z })?;
        for it in 0..iterations {
            *t = it;
            let p = mb.gather_one(Tag::AuxBroadcast, it, SERVER)?;
            let (z, shared) = split_broadcast(p, num_clients, n)?;
            let samples = shared.len();
            let cg = w.cross_grads(view.lik, view.y, view.offset, &z, &shared)?;
            mb.send(
                SERVER,
                it,
                Payload::CrossGrad {
                    from: w.j,
                    samples,
                    block_len: n,
                    shared_grad: cg.shared_grad,
                    targets: cg.targets,
                },
            )?;
            let sum = match mb.gather_one(Tag::CrossGradSum, it, SERVER)? {
                Payload::CrossGradSum { client, sum } if client == w.j => sum,
                _ => return Err(Error::Protocol("cross-gradient sum addressed to another client".into())),
            };
            locals.push(w.finish(Some(&sum), None)?);
            l0.push(cg.value);
            if it + 1 < iterations {
                *t = it + 1;
                let z = w.prepare(it + 1)?;
                mb.send(SERVER, it + 1, Payload::AuxUpdate { client: w.j, z })?;
            }
        }
        Ok(())
    })?;
    Ok(ActorReport {
        actor: client_actor(w.j),
        primary: locals,
        secondary: l0,
        client: Some(w.state),
        shared: None,
        end,
        link: mb.link,
    })
}

pub(crate) fn server_algorithm2(
    mut w: ServerWorker<'_>,
    mut mb: Mailbox,
    iterations: u64,
    num_clients: usize,
    samples: usize,
) -> Result<ActorReport> {
    let clients: Vec<usize> = (0..num_clients).map(client_actor).collect();
    let n = w.y.len();
    let mut shared_vals = Vec::new();
    let end = supervise(&mut mb, &clients, |mb, t| {
        for it in 0..iterations {
            *t = it;
            let z = collect_z(mb.gather(Tag::AuxUpdate, it, &clients)?, samples * n)?;
            let shared = w.draw_shared(it)?;
            let b = build_broadcast(&z, &shared, n);
            for j in 0..num_clients {
                mb.send(client_actor(j), it, b.clone())?;
            }
            let got = mb.gather(Tag::CrossGrad, it, &clients)?;
            let mut cross = Vec::with_capacity(num_clients);
            for (from, p) in got {
                let Payload::CrossGrad {
                    from: k,
                    shared_grad,
                    targets,
                    ..
                } = p
                else {
                    unreachable!()
                };
                expect_client(k, from)?;
                if shared_grad.len() != 2 * samples || targets.iter().any(|(_, v)| v.len() != samples * n) {
                    return Err(Error::Protocol(format!("cross-gradient from client {k} has the wrong shape")));
                }
                cross.push((k, targets, shared_grad));
            }
            let view: Vec<(usize, &[(usize, Vec<f64>)])> = cross.iter().map(|(k, t, _)| (*k, t.as_slice())).collect();
            for j in 0..num_clients {
                let sum = cross_sum(&view, j, samples * n);
                mb.send(client_actor(j), it, Payload::CrossGradSum { client: j, sum })?;
            }
            let parts: Vec<&[f64]> = cross.iter().map(|(_, _, s)| s.as_slice()).collect();
            shared_vals.push(w.update_shared(&sum_shared_grads(&parts, 2 * samples))?);
        }
        Ok(())
    })?;
    Ok(ActorReport {
        actor: SERVER,
        primary: Vec::new(),
        secondary: shared_vals,
        client: None,
        shared: Some(w.shared),
        end,
        link: mb.link,
    })
}
