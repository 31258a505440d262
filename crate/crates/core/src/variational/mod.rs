//! Variational families and STL gradient assembly.
//!
//! Each client holds `q(θ_j)` (a Gaussian with lower-triangular scale) and,
//! for the augmented and power formulations, a factor for `z_j`: either a
//! mean-field Gaussian or an amortized network conditioned on the
//! predictor. Gradients use the sticking-the-landing rule: `log q` is
//! differentiated only through the sampled values, never directly through
//! the variational parameters.

pub mod aux;
pub mod shared;
pub mod theta;

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::math::linalg::add_into;
use crate::math::{RngStream, Mat};
use crate::models::{
    log_aux_conditional, log_prior, predictor, predictor_vjp, ClientInputs, Formulation, PredictorEval,
    PredictorKind, PriorSpec,
};
use crate::neural::{Activation, MlpParams};

pub use aux::{AmortizedInput, AuxDraw, AuxFactor, AuxPullback};
pub use shared::{ScalarFactor, SharedDraw, SharedSlot, SharedState};
pub use theta::{ScaleStructure, ThetaFactor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxFamily {
    MeanField,
    Amortized,
}

/// Family choice and initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariationalConfig {
    pub family: AuxFamily,
    pub structure: ScaleStructure,
    /// Initial scale of q(θ_j) (times the identity).
    pub theta_scale: f64,
    /// Initial σ of q(z_j), for both families.
    pub z_scale: f64,
    /// Initial scale of the shared-parameter factors.
    pub shared_scale: f64,
    pub amortized_hidden: Vec<usize>,
    pub amortized_activation: Activation,
    /// Monte Carlo samples per iteration.
    pub samples: usize,
}

impl Default for VariationalConfig {
    fn default() -> Self {
        Self {
            family: AuxFamily::MeanField,
            structure: ScaleStructure::Full,
            theta_scale: 0.1,
            z_scale: 0.1,
            shared_scale: 0.1,
            amortized_hidden: vec![16],
            amortized_activation: Activation::Tanh,
            samples: 1,
        }
    }
}

impl VariationalConfig {
    pub fn validate(&self, formulation: Formulation) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("samples must be >= 1".into()));
        }
        if !(self.theta_scale > 0.0 && self.z_scale > 0.0 && self.shared_scale > 0.0) {
            return Err(Error::Config("initial scales must be > 0".into()));
        }
        if formulation == Formulation::True && self.family == AuxFamily::Amortized {
            return Err(Error::Config(
                "amortized VI is not applicable to the true model: it has no auxiliary variables".into(),
            ));
        }
        Ok(())
    }
}

/// Everything client `j` optimizes: `φ_j`, `ψ_j` and, for the split NN, the
/// point-estimated feature network `κ_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub theta: ThetaFactor,
    pub aux: Option<AuxFactor>,
    pub net: Option<MlpParams>,
}

/// Sizes of the three parameter groups in [`ClientState::flatten`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientLayout {
    pub phi: usize,
    pub psi: usize,
    pub net: usize,
}

impl ClientState {
    /// Initial state. `stream` feeds the network initializations.
    pub fn init(
        kind: &PredictorKind,
        n: usize,
        formulation: Formulation,
        cfg: &VariationalConfig,
        stream: &mut RngStream,
    ) -> Result<Self> {
        cfg.validate(formulation)?;
        let theta = ThetaFactor::new(kind.theta_dim(), cfg.theta_scale, cfg.structure);
        let net = match kind {
            PredictorKind::SplitNn { net } => Some(MlpParams::init(net, stream)?),
            _ => None,
        };
        let aux = match (formulation, cfg.family) {
            (Formulation::True, _) => None,
            (_, AuxFamily::MeanField) => Some(AuxFactor::mean_field(n, cfg.z_scale)),
            (f, AuxFamily::Amortized) => {
                let input = if f == Formulation::Power {
                    AmortizedInput::PredictorAndY
                } else {
                    AmortizedInput::Predictor
                };
                Some(AuxFactor::amortized(
                    &cfg.amortized_hidden,
                    cfg.amortized_activation,
                    input,
                    cfg.z_scale,
                    stream,
                )?)
            }
        };
        Ok(Self { theta, aux, net })
    }

    pub fn layout(&self) -> ClientLayout {
        ClientLayout {
            phi: self.theta.param_count(),
            psi: self.aux.as_ref().map_or(0, AuxFactor::param_count),
            net: self.net.as_ref().map_or(0, MlpParams::param_count),
        }
    }

    pub fn param_count(&self) -> usize {
        let l = self.layout();
        l.phi + l.psi + l.net
    }

    /// `[φ, ψ, κ]`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.theta.flatten();
        if let Some(a) = &self.aux {
            out.extend(a.flatten());
        }
        if let Some(n) = &self.net {
            out.extend(n.flatten());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let l = self.layout();
        check_len("client params", l.phi + l.psi + l.net, flat.len())?;
        self.theta.set_flat(&flat[..l.phi])?;
        if let Some(a) = &mut self.aux {
            a.set_flat(&flat[l.phi..l.phi + l.psi])?;
        }
        if let Some(n) = &mut self.net {
            n.set_flat(&flat[l.phi + l.psi..])?;
        }
        Ok(())
    }

    /// Number of normals in one noise draw: `d_j` for θ plus `n` for z.
    pub fn noise_len(&self, n: usize) -> (usize, usize) {
        (self.theta.dim(), if self.aux.is_some() { n } else { 0 })
    }

    /// Draws `(ε, τ)` from `stream`, θ-noise first.
    pub fn draw_noise(&self, n: usize, stream: &mut RngStream) -> ClientNoise {
        let (d, m) = self.noise_len(n);
        let eps = stream.standard_normal(d);
        let tau = stream.standard_normal(m);
        ClientNoise { eps, tau }
    }

    /// Reparameterized sample of `(θ_j, z_j)` for fixed noise.
    pub fn draw(
        &self,
        kind: &PredictorKind,
        inputs: ClientInputs<'_>,
        y: Option<&[f64]>,
        noise: ClientNoise,
    ) -> Result<ClientDraw> {
        let theta = self.theta.sample(&noise.eps)?;
        let pred = predictor(kind, inputs, &theta, self.net.as_ref())?;
        let aux = match &self.aux {
            Some(a) => Some(a.sample(&pred.g, y, &noise.tau)?),
            None => None,
        };
        Ok(ClientDraw {
            noise,
            theta,
            pred,
            aux,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientNoise {
    pub eps: Vec<f64>,
    pub tau: Vec<f64>,
}

/// One reparameterized sample and its forward intermediates.
#[derive(Debug, Clone)]
pub struct ClientDraw {
    pub noise: ClientNoise,
    pub theta: Vec<f64>,
    pub pred: PredictorEval,
    pub aux: Option<AuxDraw>,
}

impl ClientDraw {
    /// The vector this client contributes to the linear predictor: `z_j`
    /// when there are auxiliary variables, otherwise `g_j`.
    pub fn z(&self) -> &[f64] {
        match &self.aux {
            Some(a) => &a.z,
            None => &self.pred.g,
        }
    }
}

/// Gradient pieces for one client and one sample, split into what the
/// client computes itself and what arrives from elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    /// `∇ log p(θ_j)`.
    pub prior: Vec<f64>,
    /// `L⁻ᵀε`, the STL entropy term for θ.
    pub theta_entropy: Vec<f64>,
    /// `∂/∂z_j log N(z_j; g_j, ρ)` (empty for the true model).
    pub cond_z: Vec<f64>,
    /// `∂/∂g_j log N(z_j; g_j, ρ)`.
    pub cond_g: Vec<f64>,
    /// `τ/σ`, the STL entropy term for z.
    pub z_entropy: Vec<f64>,
    /// Server-supplied `∂L₀/∂z_j` (augmented) or `Σ_{k≠j} ∂L_{0,k}/∂z_j` (power).
    pub remote_z: Option<Vec<f64>>,
    /// `∂L_{0,j}/∂g_j` (power) or `∂ log p(y | η)/∂g_j` (true model).
    pub own_g: Option<Vec<f64>>,
    /// Single-sample value of the client's local ELBO term.
    pub local_value: f64,
}

/// Locally computable pieces and the local ELBO term
/// `log p(θ) + log N(z; g, ρ) − log q(θ) − log q(z | θ)`.
pub fn local_bundle(
    state: &ClientState,
    kind: &PredictorKind,
    prior: &PriorSpec,
    rho: Option<f64>,
    draw: &ClientDraw,
) -> Result<GradientBundle> {
    let (lp, prior_grad) = log_prior(&draw.theta, kind, prior)?;
    let theta_entropy = state.theta.stl_entropy_grad(&draw.noise.eps)?;
    let log_q_theta = state.theta.log_density(&draw.theta)?;
    let mut local_value = lp - log_q_theta;
    let (cond_z, cond_g, z_entropy) = match &draw.aux {
        Some(a) => {
            let rho = rho.ok_or_else(|| Error::Config("auxiliary variables need rho".into()))?;
            let c = log_aux_conditional(&a.z, &draw.pred.g, rho)?;
            local_value += c.value - a.log_density();
            (c.d_z, c.d_pred, a.stl_entropy_grad(&draw.noise.tau))
        }
        None => (Vec::new(), Vec::new(), Vec::new()),
    };
    Ok(GradientBundle {
        prior: prior_grad,
        theta_entropy,
        cond_z,
        cond_g,
        z_entropy,
        remote_z: None,
        own_g: None,
        local_value,
    })
}

/// Gradient for the flattened client parameters, `[φ, ψ, κ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientGradient {
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    pub net: Vec<f64>,
}

impl ClientGradient {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.phi.len() + self.psi.len() + self.net.len());
        out.extend(&self.phi);
        out.extend(&self.psi);
        out.extend(&self.net);
        out
    }
}

/// Assembles the full STL gradient.
///
/// With `G_z` the total derivative reaching `z_j` and `A_g` the direct
/// dependence on `g_j`, the gradient reaching the predictor is
/// `G_g = A_g + (∂m/∂g + τ ∂σ/∂g) ⊙ G_z` (the second term vanishes for
/// mean-field, whose `z_j` does not depend on θ), and
/// `∂/∂θ = ∇log p(θ) + L⁻ᵀε + (∂g/∂θ)ᵀ G_g`. The ψ gradient uses only the
/// path through `z_j`.
pub fn assemble(
    state: &ClientState,
    kind: &PredictorKind,
    inputs: ClientInputs<'_>,
    draw: &ClientDraw,
    bundle: &GradientBundle,
) -> Result<ClientGradient> {
    let n = inputs.x.rows();
    let mut g_g = vec![0.0; n];
    let mut psi = Vec::new();
    match (&state.aux, &draw.aux) {
        (Some(factor), Some(a)) => {
            let remote = bundle
                .remote_z
                .as_ref()
                .ok_or_else(|| Error::Protocol("missing remote z-gradient".into()))?;
            check_len("remote z-gradient", n, remote.len())?;
            let mut g_z = bundle.cond_z.clone();
            add_into(&mut g_z, &bundle.z_entropy);
            add_into(&mut g_z, remote);
            let pb = factor.pullback(a, &draw.noise.tau, &g_z)?;
            g_g.copy_from_slice(&bundle.cond_g);
            add_into(&mut g_g, &pb.d_pred);
            psi = pb.params;
        }
        (None, None) => {}
        _ => return Err(Error::Contract("draw does not match the client's factor".into())),
    }
    if let Some(own) = &bundle.own_g {
        check_len("own predictor gradient", n, own.len())?;
        add_into(&mut g_g, own);
    } else if state.aux.is_none() {
        return Err(Error::Protocol("true-model gradient needs ∂ log p(y|η)/∂g".into()));
    }
    let vjp = predictor_vjp(kind, inputs, &draw.theta, state.net.as_ref(), &draw.pred, &g_g)?;
    let mut d_theta = bundle.prior.clone();
    add_into(&mut d_theta, &bundle.theta_entropy);
    add_into(&mut d_theta, &vjp.theta);
    let phi = state.theta.pullback(&d_theta, &draw.noise.eps)?;
    let grad = ClientGradient {
        phi,
        psi,
        net: vjp.net.unwrap_or_default(),
    };
    check_finite("phi gradient", &grad.phi)?;
    check_finite("psi gradient", &grad.psi)?;
    check_finite("feature-net gradient", &grad.net)?;
    Ok(grad)
}

fn require_augmented(bundle: &GradientBundle) -> Result<()> {
    if bundle.remote_z.is_none() {
        return Err(Error::Protocol("server term ∂L0/∂z_j is missing".into()));
    }
    if bundle.own_g.is_some() {
        return Err(Error::Contract("augmented model has no own-likelihood term".into()));
    }
    Ok(())
}

fn require_power(bundle: &GradientBundle) -> Result<()> {
    if bundle.remote_z.is_none() {
        return Err(Error::Protocol("cross-gradient sum is missing".into()));
    }
    if bundle.own_g.is_none() {
        return Err(Error::Protocol("∂L_{0,j}/∂g_j is missing".into()));
    }
    Ok(())
}

/// `∇_φ` for the augmented-variable model.
pub fn grad_phi_augmented(
    state: &ClientState,
    kind: &PredictorKind,
    inputs: ClientInputs<'_>,
    draw: &ClientDraw,
    bundle: &GradientBundle,
) -> Result<Vec<f64>> {
    require_augmented(bundle)?;
    Ok(assemble(state, kind, inputs, draw, bundle)?.phi)
}

/// `∇_ψ` for the augmented-variable model.
pub fn grad_psi_augmented(
    state: &ClientState,
    kind: &PredictorKind,
    inputs: ClientInputs<'_>,
    draw: &ClientDraw,
    bundle: &GradientBundle,
) -> Result<Vec<f64>> {
    require_augmented(bundle)?;
    Ok(assemble(state, kind, inputs, draw, bundle)?.psi)
}

/// `∇_φ` for the power-likelihood model.
pub fn grad_phi_power(
    state: &ClientState,
    kind: &PredictorKind,
    inputs: ClientInputs<'_>,
    draw: &ClientDraw,
    bundle: &GradientBundle,
) -> Result<Vec<f64>> {
    require_power(bundle)?;
    Ok(assemble(state, kind, inputs, draw, bundle)?.phi)
}

/// `∇_ψ` for the power-likelihood model.
pub fn grad_psi_power(
    state: &ClientState,
    kind: &PredictorKind,
    inputs: ClientInputs<'_>,
    draw: &ClientDraw,
    bundle: &GradientBundle,
) -> Result<Vec<f64>> {
    require_power(bundle)?;
    Ok(assemble(state, kind, inputs, draw, bundle)?.psi)
}

/// ELBO estimate split into the likelihood part and the client parts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ElboParts {
    /// `L₀` (augmented or true) or `Σ_j L_{0,j}` (power), plus the shared
    /// parameters' `log p(γ) − log q(γ)`.
    pub server: f64,
    /// `Σ_j L_j` or `Σ_j L_{1,j}`.
    pub local: f64,
}

impl ElboParts {
    pub fn total(&self) -> f64 {
        self.server + self.local
    }
}

/// Header stored with a client-state checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateHeader {
    pub clients: Vec<ClientState>,
    pub shared: SharedState,
}

/// Writes a checkpoint: the JSON header holds the structure, the payload
/// the flattened parameters of every client then the shared factors.
pub fn save_state(path: &std::path::Path, clients: &[ClientState], shared: &SharedState) -> Result<()> {
    let mut values = Vec::new();
    for c in clients {
        values.extend(c.flatten());
    }
    values.extend(shared.flatten());
    crate::checkpoint::write(
        path,
        &StateHeader {
            clients: clients.to_vec(),
            shared: *shared,
        },
        &values,
    )
}

pub fn load_state(path: &std::path::Path) -> Result<(Vec<ClientState>, SharedState)> {
    let (mut header, values): (StateHeader, Vec<f64>) = crate::checkpoint::read(path)?;
    let mut at = 0;
    for c in &mut header.clients {
        let k = c.param_count();
        if at + k > values.len() {
            return Err(Error::Data("checkpoint payload too short".into()));
        }
        c.set_flat(&values[at..at + k])?;
        at += k;
    }
    header.shared.set_flat(&values[at..])?;
    Ok((header.clients, header.shared))
}

/// Returns `x` as a single-column input set; handy for tests and examples.
pub fn column_inputs(x: &Mat) -> ClientInputs<'_> {
    ClientInputs { x, group: None }
}
