//! Per-iteration computations shared by the distributed actors and the
//! monolithic executor. Both call exactly these functions in the same order,
//! which is what makes their results bit-identical.

use crate::error::{check_finite, check_len, Result};
use crate::math::linalg::add_into;
use crate::math::{AdamConfig, AdamState, RngStream};
use crate::models::{loglik_power_j, ClientInputs, Likelihood, PredictorKind, PriorSpec, SharedValues};
use crate::variational::{assemble, local_bundle, ClientDraw, ClientState, SharedDraw, SharedState};

use super::rng_plan::{stream, INIT, NOISE, SHARED};
use super::server_grad_l0;

/// One client's private context and optimizer.
pub(crate) struct ClientWorker<'a> {
    pub j: usize,
    pub kind: PredictorKind,
    pub inputs: ClientInputs<'a>,
    /// Response passed to the amortized network (power formulation only).
    pub y_aux: Option<&'a [f64]>,
    pub prior: &'a PriorSpec,
    pub rho: Option<f64>,
    pub state: ClientState,
    adam: AdamState,
    seed: u64,
    samples: usize,
    n: usize,
    draws: Vec<ClientDraw>,
    own: Vec<Vec<f64>>,
}

/// A client's answer to the broadcast in the power protocol.
pub(crate) struct CrossGrads {
    pub targets: Vec<(usize, Vec<f64>)>,
    /// `(∂/∂b, ∂/∂σ)` per sample.
    pub shared_grad: Vec<f64>,
    /// Sample mean of `L_{0,j}`.
    pub value: f64,
}

impl<'a> ClientWorker<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        j: usize,
        kind: PredictorKind,
        inputs: ClientInputs<'a>,
        y_aux: Option<&'a [f64]>,
        prior: &'a PriorSpec,
        rho: Option<f64>,
        state: ClientState,
        optimizer: AdamConfig,
        seed: u64,
        samples: usize,
    ) -> Self {
        let n = inputs.x.rows();
        let adam = AdamState::new(state.param_count(), optimizer);
        Self {
            j,
            kind,
            inputs,
            y_aux,
            prior,
            rho,
            state,
            adam,
            seed,
            samples,
            n,
            draws: Vec::new(),
            own: Vec::new(),
        }
    }

    /// Initialization stream for client `j`.
    pub fn init_stream(seed: u64, j: usize) -> RngStream {
        RngStream::new(seed, stream(j + 1, INIT))
    }

    /// Draws this iteration's samples; returns the `z_j` (or `g_j`) blocks
    /// concatenated over samples.
    pub fn prepare(&mut self, t: u64) -> Result<Vec<f64>> {
        let mut rng = RngStream::block(self.seed, stream(self.j + 1, NOISE), t);
        self.draws.clear();
        self.own.clear();
        let mut out = Vec::with_capacity(self.samples * self.n);
        for _ in 0..self.samples {
            let noise = self.state.draw_noise(self.n, &mut rng);
            let d = self.state.draw(&self.kind, self.inputs, self.y_aux, noise)?;
            out.extend_from_slice(d.z());
            self.draws.push(d);
        }
        check_finite(&format!("client {} auxiliary sample", self.j), &out)?;
        Ok(out)
    }

    /// `∂L_{0,j}/∂z_k` for every other client, given every client's blocks
    /// (`z[k]` holds client `k`'s samples back to back).
    pub fn cross_grads(
        &mut self,
        lik: Likelihood,
        y: &[f64],
        offset: Option<&[f64]>,
        z: &[Vec<f64>],
        shared: &[SharedValues],
    ) -> Result<CrossGrads> {
        let num_clients = z.len();
        let n = self.n;
        let mut weighted = Vec::with_capacity(self.samples * n);
        let mut shared_grad = Vec::with_capacity(2 * self.samples);
        let mut value = 0.0;
        self.own.clear();
        for s in 0..self.samples {
            let blocks: Vec<&[f64]> = z.iter().map(|b| &b[s * n..(s + 1) * n]).collect();
            let ev = loglik_power_j(lik, y, &self.draws[s].pred.g, &blocks, self.j, offset, shared[s])?;
            check_finite(&format!("client {} likelihood gradient", self.j), &ev.d_eta)?;
            weighted.extend_from_slice(&ev.d_eta);
            shared_grad.extend([ev.d_intercept, ev.d_sigma]);
            value += ev.value;
            self.own.push(ev.d_eta);
        }
        let targets = (0..num_clients)
            .filter(|&k| k != self.j)
            .map(|k| (k, weighted.clone()))
            .collect();
        Ok(CrossGrads {
            targets,
            shared_grad,
            value: value / self.samples as f64,
        })
    }

    /// Assembles the sample-averaged gradient from `remote` (one block per
    /// sample; empty means zero) and takes an ascent step. Returns the mean
    /// local ELBO term.
    pub fn finish(&mut self, remote: Option<&[f64]>, own: Option<&[Vec<f64>]>) -> Result<f64> {
        let n = self.n;
        let own = own.or(if self.own.is_empty() { None } else { Some(&self.own) });
        if let Some(r) = remote {
            if !r.is_empty() {
                check_len("remote gradient", self.samples * n, r.len())?;
            }
        }
        let mut total = vec![0.0; self.state.param_count()];
        let mut local = 0.0;
        for (s, draw) in self.draws.iter().enumerate() {
            let mut bundle = local_bundle(&self.state, &self.kind, self.prior, self.rho, draw)?;
            bundle.remote_z = match remote {
                Some(r) if r.is_empty() => Some(vec![0.0; n]),
                Some(r) => Some(r[s * n..(s + 1) * n].to_vec()),
                None => None,
            };
            bundle.own_g = own.map(|o| o[s].clone());
            let g = assemble(&self.state, &self.kind, self.inputs, draw, &bundle)?;
            add_into(&mut total, &g.flat());
            local += bundle.local_value;
        }
        let w = 1.0 / self.samples as f64;
        total.iter_mut().for_each(|v| *v *= w);
        let mut flat = self.state.flatten();
        self.adam.ascend(&mut flat, &total)?;
        self.state.set_flat(&flat)?;
        Ok(local * w)
    }
}

/// The server's likelihood context and shared-parameter factors.
pub(crate) struct ServerWorker<'a> {
    pub lik: Likelihood,
    pub y: &'a [f64],
    pub offset: Option<&'a [f64]>,
    pub shared: SharedState,
    adam: AdamState,
    seed: u64,
    samples: usize,
    pub draws: Vec<SharedDraw>,
}

/// Result of evaluating `L₀` on every sample.
pub(crate) struct AuxEval {
    /// `∂L₀/∂z_j`, one block per sample; the same for every client.
    pub d_eta: Vec<f64>,
    /// `(∂/∂b, ∂/∂σ)` per sample.
    pub shared_grad: Vec<f64>,
    pub value: f64,
}

impl<'a> ServerWorker<'a> {
    pub fn new(
        lik: Likelihood,
        y: &'a [f64],
        offset: Option<&'a [f64]>,
        shared: SharedState,
        optimizer: AdamConfig,
        seed: u64,
        samples: usize,
    ) -> Self {
        Self {
            lik,
            y,
            offset,
            adam: AdamState::new(shared.param_count(), optimizer),
            shared,
            seed,
            samples,
            draws: Vec::new(),
        }
    }

    pub fn draw_shared(&mut self, t: u64) -> Result<Vec<SharedValues>> {
        let mut rng = RngStream::block(self.seed, stream(0, SHARED), t);
        let k = self.shared.num_learned();
        self.draws.clear();
        for _ in 0..self.samples {
            let noise = rng.standard_normal(k);
            self.draws.push(self.shared.draw(&noise)?);
        }
        Ok(self.draws.iter().map(|d| d.values).collect())
    }

    /// Evaluates `L₀` for the augmented or true model; `z[k]` holds client
    /// `k`'s samples back to back.
    pub fn eval_aux(&self, z: &[Vec<f64>]) -> Result<AuxEval> {
        eval_aux(self.lik, self.y, self.offset, z, &self.draws.iter().map(|d| d.values).collect::<Vec<_>>())
    }

    /// Steps the shared factors with the sample-averaged gradient; `lik_grad`
    /// holds `(∂/∂b, ∂/∂σ)` per sample. Returns the mean of
    /// `log p(γ) − log q(γ)`.
    pub fn update_shared(&mut self, lik_grad: &[f64]) -> Result<f64> {
        check_len("shared likelihood gradient", 2 * self.samples, lik_grad.len())?;
        let mut total = vec![0.0; self.shared.param_count()];
        let mut value = 0.0;
        for (s, d) in self.draws.iter().enumerate() {
            let (g, v) = self.shared.gradients(d, lik_grad[2 * s], lik_grad[2 * s + 1]);
            add_into(&mut total, &g);
            value += v;
        }
        let w = 1.0 / self.samples as f64;
        total.iter_mut().for_each(|v| *v *= w);
        if !total.is_empty() {
            let mut flat = self.shared.flatten();
            self.adam.ascend(&mut flat, &total)?;
            self.shared.set_flat(&flat)?;
        }
        Ok(value * w)
    }
}

/// `L₀` and its gradients per sample. Used by the server and, in the
/// shared-response scenario, by every client.
pub(crate) fn eval_aux(
    lik: Likelihood,
    y: &[f64],
    offset: Option<&[f64]>,
    z: &[Vec<f64>],
    shared: &[SharedValues],
) -> Result<AuxEval> {
    let n = y.len();
    let mut d_eta = Vec::with_capacity(shared.len() * n);
    let mut shared_grad = Vec::with_capacity(2 * shared.len());
    let mut value = 0.0;
    for (s, sv) in shared.iter().enumerate() {
        let blocks: Vec<&[f64]> = z.iter().map(|b| &b[s * n..(s + 1) * n]).collect();
        let g = server_grad_l0(lik, y, &blocks, offset, *sv)?;
        check_finite("server likelihood gradient", &g.d_eta)?;
        d_eta.extend_from_slice(&g.d_eta);
        shared_grad.extend([g.d_intercept, g.d_sigma]);
        value += g.value;
    }
    Ok(AuxEval {
        d_eta,
        shared_grad,
        value: value / shared.len() as f64,
    })
}

/// `Σ_{k≠j} ∂L_{0,k}/∂z_j`, summed in ascending sender order. `cross`
/// lists each sender's targets, sorted by sender.
pub(crate) fn cross_sum(cross: &[(usize, &[(usize, Vec<f64>)])], j: usize, width: usize) -> Vec<f64> {
    let mut sum = Vec::new();
    for (from, targets) in cross {
        if *from == j {
            continue;
        }
        if let Some((_, v)) = targets.iter().find(|(k, _)| *k == j) {
            if sum.is_empty() {
                sum = vec![0.0; width];
            }
            add_into(&mut sum, v);
        }
    }
    sum
}

/// Per-sample shared gradients summed over senders in order.
pub(crate) fn sum_shared_grads(parts: &[&[f64]], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; width];
    for p in parts {
        add_into(&mut out, p);
    }
    out
}
