//! The non-Bayesian split NN: every client's feature network and final
//! weights are point estimates trained by Adam on the log-likelihood.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::rng_plan::{stream, INIT};
use crate::math::{AdamConfig, AdamState, RngStream};
use crate::models::{linear_predictor, predictor, predictor_vjp, Dataset, Formulation, ModelSpec, SharedValues};
use crate::neural::MlpParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointFit {
    /// Final-layer weights per client.
    pub theta: Vec<Vec<f64>>,
    pub nets: Vec<MlpParams>,
    /// `(iteration, log-likelihood)` before each update.
    pub trace: Vec<(u64, f64)>,
}

pub fn fit_point_split_nn(
    spec: &ModelSpec,
    data: &Dataset,
    iterations: u64,
    optimizer: AdamConfig,
    seed: u64,
) -> Result<PointFit> {
    spec.validate_for(data)?;
    if spec.formulation != Formulation::True {
        return Err(Error::Config("the point-estimate split NN has no auxiliary variables".into()));
    }
    let kinds = spec.predictor_kinds(data)?;
    let lik = spec.family.likelihood();
    let mut theta = Vec::new();
    let mut nets = Vec::new();
    let mut adams = Vec::new();
    for (j, kind) in kinds.iter().enumerate() {
        let crate::models::PredictorKind::SplitNn { net } = kind else {
            return Err(Error::Config("the point-estimate baseline needs the split NN family".into()));
        };
        let mut rng = RngStream::new(seed, stream(j + 1, INIT));
        let params = MlpParams::init(net, &mut rng)?;
        let k = kind.theta_dim();
        let w: Vec<f64> = rng.standard_normal(k).iter().map(|e| e / (k as f64).sqrt()).collect();
        adams.push(AdamState::new(k + params.param_count(), optimizer));
        theta.push(w);
        nets.push(params);
    }
    let n = data.n();
    let mut trace = Vec::with_capacity(iterations as usize);
    for t in 0..iterations {
        let evals = kinds
            .iter()
            .enumerate()
            .map(|(j, kind)| predictor(kind, data.client_inputs(j), &theta[j], Some(&nets[j])))
            .collect::<Result<Vec<_>>>()?;
        let parts: Vec<&[f64]> = evals.iter().map(|e| e.g.as_slice()).collect();
        let eta = linear_predictor(n, 0.0, data.offset.as_deref(), &parts)?;
        let ev = lik.eval(&data.y, &eta, SharedValues::default().sigma)?;
        if !ev.value.is_finite() {
            return Err(Error::Numerical {
                iteration: t,
                actor: "server".into(),
                detail: "log-likelihood is not finite".into(),
            });
        }
        trace.push((t, ev.value));
        for (j, kind) in kinds.iter().enumerate() {
            let vjp = predictor_vjp(kind, data.client_inputs(j), &theta[j], Some(&nets[j]), &evals[j], &ev.d_eta)?;
            let mut grad = vjp.theta;
            grad.extend(vjp.net.unwrap_or_default());
            let mut flat = theta[j].clone();
            flat.extend(nets[j].flatten());
            adams[j].ascend(&mut flat, &grad)?;
            let k = theta[j].len();
            theta[j].copy_from_slice(&flat[..k]);
            nets[j].set_flat(&flat[k..])?;
        }
    }
    Ok(PointFit { theta, nets, trace })
}
