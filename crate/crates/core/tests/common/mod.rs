//! Shared test oracles.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use vfl_core::math::{Mat, RngStream};
use vfl_core::models::{
    log_prior, loglik_aux, loglik_power_j, predictor, Dataset, Formulation, Likelihood, PredictorKind, PriorSpec,
    SharedValues,
};
use vfl_core::neural::{Activation, MlpSpec};
use vfl_core::variational::{
    assemble, local_bundle, AuxFamily, ClientNoise, ClientState, ScaleStructure, VariationalConfig,
};

/// A small random problem for gradient checks.
pub struct GradCase {
    pub data: Dataset,
    pub lik: Likelihood,
    pub formulation: Formulation,
    pub family: AuxFamily,
    pub kinds: Vec<PredictorKind>,
    pub priors: Vec<PriorSpec>,
    pub rho: f64,
    pub shared: SharedValues,
    pub states: Vec<ClientState>,
    pub noise: Vec<ClientNoise>,
}

impl GradCase {
    pub fn label(&self) -> String {
        format!(
            "{:?}/{:?}/{:?} J={} n={} p={:?}",
            self.formulation,
            self.family,
            self.lik,
            self.data.num_clients(),
            self.data.n(),
            self.data.block_sizes()
        )
    }

    fn y_for_aux(&self) -> Option<&[f64]> {
        (self.formulation == Formulation::Power).then_some(self.data.y.as_slice())
    }
}

fn perturb(s: &mut RngStream, v: &mut [f64], scale: f64) {
    let e = s.standard_normal(v.len());
    for (a, b) in v.iter_mut().zip(e) {
        *a += scale * b;
    }
}

/// Random configuration. `variant` cycles through formulation × family
/// first so any 4 consecutive cases cover all combinations.
pub fn random_case(seed: u64, variant: usize) -> GradCase {
    let mut s = RngStream::new(seed, 99);
    let formulation = if variant % 2 == 0 {
        Formulation::Augmented
    } else {
        Formulation::Power
    };
    let family = if (variant / 2) % 2 == 0 {
        AuxFamily::MeanField
    } else {
        AuxFamily::Amortized
    };
    let num_clients = 1 + s.int_inclusive(0, 2) as usize;
    let n = s.int_inclusive(5, 30) as usize;
    // predictor flavour: mostly linear, sometimes multilevel or split NN
    let flavour = (variant / 4) % 4;
    let lik = match (variant / 4) % 3 {
        0 => Likelihood::Bernoulli,
        1 => Likelihood::Gaussian,
        _ => Likelihood::Poisson,
    };
    let levels = 3;
    let mut blocks = Vec::new();
    let mut kinds = Vec::new();
    let mut priors = Vec::new();
    for j in 0..num_clients {
        let p = s.int_inclusive(1, 4) as usize;
        let xs: Vec<f64> = s.standard_normal(n * p).iter().map(|v| 0.5 * v).collect();
        blocks.push(Mat::from_vec(n, p, xs).unwrap());
        let kind = match (flavour + j) % 4 {
            1 => PredictorKind::Multilevel { p, levels },
            2 => PredictorKind::SplitNn {
                net: MlpSpec::new(vec![p, 3, 2], Activation::Tanh).with_output(Activation::Tanh),
            },
            _ => PredictorKind::Linear { p },
        };
        priors.push(match kind {
            PredictorKind::Multilevel { .. } => PriorSpec::Hierarchical {
                mean_sd: 1.0,
                scale: 1.0,
            },
            _ => PriorSpec::Normal { mean: 0.1, sd: 1.3 },
        });
        kinds.push(kind);
    }
    let y: Vec<f64> = match lik {
        Likelihood::Bernoulli => (0..n).map(|_| (s.uniform() < 0.5) as u8 as f64).collect(),
        Likelihood::Gaussian => s.standard_normal(n),
        Likelihood::Poisson => (0..n).map(|_| s.int_inclusive(0, 6) as f64).collect(),
    };
    let group: Vec<usize> = (0..n).map(|_| s.int_inclusive(0, levels as i64 - 1) as usize).collect();
    let data = Dataset {
        y,
        blocks,
        offset: Some(s.standard_normal(n).iter().map(|v| 0.1 * v).collect()),
        group: Some(group),
        levels: Some(levels),
    };
    let cfg = VariationalConfig {
        family,
        structure: if s.uniform() < 0.5 {
            ScaleStructure::Full
        } else {
            ScaleStructure::Diagonal
        },
        amortized_hidden: vec![3],
        ..Default::default()
    };
    let mut states = Vec::new();
    let mut noise = Vec::new();
    for kind in &kinds {
        let mut st = ClientState::init(kind, n, formulation, &cfg, &mut s).unwrap();
        // move away from the symmetric initialization
        let mut flat = st.flatten();
        perturb(&mut s, &mut flat, 0.3);
        st.set_flat(&flat).unwrap();
        // keep L well conditioned: off-diagonal entries small next to the ~0.1 diagonal
        st.theta.off.iter_mut().for_each(|v| *v *= 0.05);
        noise.push(st.draw_noise(n, &mut s));
        states.push(st);
    }
    GradCase {
        data,
        lik,
        formulation,
        family,
        kinds,
        priors,
        rho: 0.5 + s.uniform(),
        shared: SharedValues {
            intercept: 0.2 * s.standard_normal(1)[0],
            sigma: 0.8 + 0.4 * s.uniform(),
        },
        states,
        noise,
    }
}

/// `log N(θ; μ̄, L̄L̄ᵀ)` computed independently with nalgebra.
fn frozen_theta_logq(frozen: &ClientState, theta: &[f64]) -> f64 {
    let d = theta.len();
    let l = frozen.theta.scale();
    let lm = DMatrix::from_row_slice(d, d, l.as_slice());
    let cov = &lm * lm.transpose();
    let chol = cov.clone().cholesky().unwrap();
    let r = DVector::from_iterator(d, theta.iter().zip(&frozen.theta.mean).map(|(t, m)| t - m));
    let sol = chol.solve(&r);
    let quad = r.dot(&sol);
    let logdet = cov.determinant().ln();
    -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * logdet - 0.5 * quad
}

fn normal_logpdf(x: f64, m: f64, s: f64) -> f64 {
    let r = (x - m) / s;
    -0.5 * (2.0 * std::f64::consts::PI).ln() - s.ln() - 0.5 * r * r
}

/// Single-sample ELBO with fixed noise: samples use the live states, every
/// `log q` uses the frozen copy.
pub fn frozen_noise_elbo(case: &GradCase, live: &[ClientState]) -> f64 {
    let data = &case.data;
    let j_total = data.num_clients();
    let mut g = Vec::new();
    let mut z = Vec::new();
    let mut total = 0.0;
    for j in 0..j_total {
        let st = &live[j];
        let theta = st.theta.sample(&case.noise[j].eps).unwrap();
        let gj = predictor(&case.kinds[j], data.client_inputs(j), &theta, st.net.as_ref()).unwrap().g;
        let aux = st.aux.as_ref().unwrap();
        let zj = aux.sample(&gj, case.y_for_aux(), &case.noise[j].tau).unwrap().z;
        let frozen = &case.states[j];
        let fa = frozen.aux.as_ref().unwrap();
        // frozen q(z | g) evaluated at the live conditioning input
        let q = fa.sample(&gj, case.y_for_aux(), &vec![0.0; gj.len()]).unwrap();
        let mut local = log_prior(&theta, &case.kinds[j], &case.priors[j]).unwrap().0;
        local -= frozen_theta_logq(frozen, &theta);
        for i in 0..zj.len() {
            local += normal_logpdf(zj[i], gj[i], case.rho);
            local -= normal_logpdf(zj[i], q.mean[i], q.sigma[i]);
        }
        total += local;
        g.push(gj);
        z.push(zj);
    }
    let zr: Vec<&[f64]> = z.iter().map(Vec::as_slice).collect();
    let off = data.offset.as_deref();
    match case.formulation {
        Formulation::Augmented => total += loglik_aux(case.lik, &data.y, &zr, off, case.shared).unwrap().value,
        Formulation::Power => {
            for j in 0..j_total {
                total += loglik_power_j(case.lik, &data.y, &g[j], &zr, j, off, case.shared).unwrap().value;
            }
        }
        Formulation::True => unreachable!(),
    }
    total
}

/// Analytic gradient for client `j` assembled as the protocols do.
pub fn analytic_gradient(case: &GradCase, j: usize) -> Vec<f64> {
    let data = &case.data;
    let draws: Vec<_> = (0..data.num_clients())
        .map(|k| {
            case.states[k]
                .draw(&case.kinds[k], data.client_inputs(k), case.y_for_aux(), case.noise[k].clone())
                .unwrap()
        })
        .collect();
    let z: Vec<&[f64]> = draws.iter().map(|d| d.z()).collect();
    let off = data.offset.as_deref();
    let mut bundle = local_bundle(&case.states[j], &case.kinds[j], &case.priors[j], Some(case.rho), &draws[j]).unwrap();
    match case.formulation {
        Formulation::Augmented => {
            bundle.remote_z = Some(loglik_aux(case.lik, &data.y, &z, off, case.shared).unwrap().d_eta);
        }
        Formulation::Power => {
            let own = loglik_power_j(case.lik, &data.y, &draws[j].pred.g, &z, j, off, case.shared).unwrap();
            bundle.own_g = Some(own.d_eta);
            let mut sum = vec![0.0; data.n()];
            for k in 0..data.num_clients() {
                if k != j {
                    let ev = loglik_power_j(case.lik, &data.y, &draws[k].pred.g, &z, k, off, case.shared).unwrap();
                    for (a, b) in sum.iter_mut().zip(ev.d_eta) {
                        *a += b;
                    }
                }
            }
            bundle.remote_z = Some(sum);
        }
        Formulation::True => unreachable!(),
    }
    assemble(&case.states[j], &case.kinds[j], data.client_inputs(j), &draws[j], &bundle)
        .unwrap()
        .flat()
}

/// Central differences of [`frozen_noise_elbo`] in client `j`'s parameters.
pub fn fd_gradient(case: &GradCase, j: usize, h: f64) -> Vec<f64> {
    let base = case.states[j].flatten();
    let mut out = Vec::with_capacity(base.len());
    let mut live = case.states.clone();
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        live[j].set_flat(&p).unwrap();
        let fp = frozen_noise_elbo(case, &live);
        p[i] = base[i] - h;
        live[j].set_flat(&p).unwrap();
        let fm = frozen_noise_elbo(case, &live);
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// `‖a − b‖₂ / max(‖b‖₂, 1e-12)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-12)
}

/// Worst relative error over every client of a case.
pub fn case_error(case: &GradCase) -> f64 {
    (0..case.data.num_clients())
        .map(|j| rel_err(&analytic_gradient(case, j), &fd_gradient(case, j, 1e-5)))
        .fold(0.0, f64::max)
}

/// A random network, batch and upstream gradient for the MLP check.
pub struct MlpCase {
    pub params: vfl_core::neural::MlpParams,
    pub inputs: Mat,
    pub upstream: Mat,
}

pub fn random_mlp_case(seed: u64) -> MlpCase {
    let mut s = RngStream::new(seed, 77);
    let acts = [Activation::Tanh, Activation::Relu, Activation::Identity];
    let depth = s.int_inclusive(1, 4) as usize;
    let widths: Vec<usize> = (0..=depth).map(|_| s.int_inclusive(1, 6) as usize).collect();
    let hidden = acts[s.int_inclusive(0, 2) as usize];
    let output = acts[s.int_inclusive(0, 2) as usize];
    let spec = MlpSpec::new(widths.clone(), hidden).with_output(output);
    let mut params = vfl_core::neural::MlpParams::init(&spec, &mut s).unwrap();
    // nonzero biases so every layer's bias gradient is exercised
    let flat: Vec<f64> = params.flatten().iter().zip(s.standard_normal(spec.param_count())).map(|(p, e)| p + 0.1 * e).collect();
    params.set_flat(&flat).unwrap();
    let batch = s.int_inclusive(1, 7) as usize;
    let inputs = Mat::from_vec(batch, widths[0], s.standard_normal(batch * widths[0])).unwrap();
    let out = *widths.last().unwrap();
    let upstream = Mat::from_vec(batch, out, s.standard_normal(batch * out)).unwrap();
    MlpCase { params, inputs, upstream }
}

fn mlp_loss(params: &vfl_core::neural::MlpParams, inputs: &Mat, upstream: &Mat) -> f64 {
    let (out, _) = vfl_core::neural::mlp_forward(params, inputs).unwrap();
    out.as_slice().iter().zip(upstream.as_slice()).map(|(a, b)| a * b).sum()
}

/// Relative error of backprop against central differences of
/// `⟨upstream, f(x)⟩`, over parameters and inputs jointly.
pub fn mlp_case_error(c: &MlpCase) -> f64 {
    let h = 1e-6;
    let (_, tape) = vfl_core::neural::mlp_forward(&c.params, &c.inputs).unwrap();
    let g = vfl_core::neural::mlp_backward(&c.params, &tape, &c.upstream).unwrap();
    let mut analytic = g.params.clone();
    analytic.extend(g.inputs.as_slice());
    let base = c.params.flatten();
    let mut fd = Vec::with_capacity(analytic.len());
    let mut p = c.params.clone();
    for i in 0..base.len() {
        let mut v = base.clone();
        v[i] += h;
        p.set_flat(&v).unwrap();
        let fp = mlp_loss(&p, &c.inputs, &c.upstream);
        v[i] -= 2.0 * h;
        p.set_flat(&v).unwrap();
        fd.push((fp - mlp_loss(&p, &c.inputs, &c.upstream)) / (2.0 * h));
    }
    for i in 0..c.inputs.as_slice().len() {
        let mut x = c.inputs.clone();
        x.as_mut_slice()[i] += h;
        let fp = mlp_loss(&c.params, &x, &c.upstream);
        x.as_mut_slice()[i] -= 2.0 * h;
        fd.push((fp - mlp_loss(&c.params, &x, &c.upstream)) / (2.0 * h));
    }
    rel_err(&analytic, &fd)
}
