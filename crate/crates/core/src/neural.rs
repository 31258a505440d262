//! Small feedforward networks with an explicit forward tape and a
//! hand-written backward pass.
//!
//! Used for the amortized auxiliary-variable family (per-observation mean and
//! scale heads) and for the client feature maps of the split network.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::math::{Mat, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation and the activation.
    #[inline]
    fn derivative(self, pre: f64, act: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - act * act,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Layer widths from input to output, e.g. `[1, 16, 2]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    #[serde(default)]
    pub hidden: Activation,
    #[serde(default = "identity")]
    pub output: Activation,
}

fn identity() -> Activation {
    Activation::Identity
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, hidden: Activation) -> Self {
        Self {
            widths,
            hidden,
            output: Activation::Identity,
        }
    }

    pub fn with_output(mut self, output: Activation) -> Self {
        self.output = output;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config(format!(
                "network needs input and output widths, got {:?}",
                self.widths
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!(
                "network widths must be >= 1, got {:?}",
                self.widths
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Σ (in + 1) · out
    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.num_layers() {
            self.output
        } else {
            self.hidden
        }
    }
}

/// One affine layer; `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
}

impl MlpParams {
    pub fn zeros(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .widths
            .windows(2)
            .map(|w| Layer {
                weight: Mat::zeros(w[1], w[0]),
                bias: vec![0.0; w[1]],
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    /// Weights ~ N(0, 1/√fan-in), biases 0.
    pub fn init(spec: &MlpSpec, stream: &mut RngStream) -> Result<Self> {
        let mut p = Self::zeros(spec)?;
        for layer in &mut p.layers {
            let fan_in = layer.weight.cols() as f64;
            let std = 1.0 / fan_in.sqrt();
            let draws = stream.standard_normal(layer.weight.rows() * layer.weight.cols());
            for (w, e) in layer.weight.as_mut_slice().iter_mut().zip(draws) {
                *w = std * e;
            }
        }
        Ok(p)
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// Layer-major flattening: each layer's weights (row-major) then its bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn unflatten(spec: &MlpSpec, flat: &[f64]) -> Result<Self> {
        check_len("flattened network parameters", spec.param_count(), flat.len())?;
        let mut p = Self::zeros(spec)?;
        p.set_flat(flat)?;
        Ok(p)
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_len("flattened network parameters", self.param_count(), flat.len())?;
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weight.as_slice().len();
            l.weight.as_mut_slice().copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for l in &self.layers {
            for v in l.weight.as_slice().iter().chain(&l.bias) {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Per-layer pre-activations and activations for one batch.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    /// `activations[0]` is the input; `activations[l + 1]` is layer `l`'s output.
    activations: Vec<Mat>,
    pre: Vec<Mat>,
    fingerprint: u64,
}

impl ForwardTape {
    pub fn batch(&self) -> usize {
        self.activations[0].rows()
    }

    pub fn output(&self) -> &Mat {
        self.activations.last().unwrap()
    }
}

/// Batched forward pass; rows are observations.
pub fn mlp_forward(params: &MlpParams, inputs: &Mat) -> Result<(Mat, ForwardTape)> {
    check_len("network input width", params.spec.input_dim(), inputs.cols())?;
    let batch = inputs.rows();
    let mut activations = Vec::with_capacity(params.layers.len() + 1);
    let mut pre = Vec::with_capacity(params.layers.len());
    activations.push(inputs.clone());
    for (li, layer) in params.layers.iter().enumerate() {
        let act_fn = params.spec.activation(li);
        let input = activations.last().unwrap();
        let out_dim = layer.weight.rows();
        let mut z = Mat::zeros(batch, out_dim);
        let mut a = Mat::zeros(batch, out_dim);
        for r in 0..batch {
            let x = input.row(r);
            for o in 0..out_dim {
                let s = layer.bias[o] + crate::math::linalg::dot(layer.weight.row(o), x);
                z[(r, o)] = s;
                a[(r, o)] = act_fn.apply(s);
            }
        }
        pre.push(z);
        activations.push(a);
    }
    let out = activations.last().unwrap().clone();
    Ok((
        out,
        ForwardTape {
            activations,
            pre,
            fingerprint: params.fingerprint(),
        },
    ))
}

/// Gradients of `⟨upstream, outputs⟩`.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    /// Same layout as [`MlpParams::flatten`].
    pub params: Vec<f64>,
    pub inputs: Mat,
}

pub fn mlp_backward(params: &MlpParams, tape: &ForwardTape, upstream: &Mat) -> Result<MlpGrads> {
    if tape.fingerprint != params.fingerprint() || tape.pre.len() != params.layers.len() {
        return Err(Error::Contract(
            "forward tape does not belong to these parameters".into(),
        ));
    }
    let batch = tape.batch();
    check_len("upstream rows", batch, upstream.rows())?;
    check_len("upstream cols", params.spec.output_dim(), upstream.cols())?;

    let mut layer_grads: Vec<Vec<f64>> = vec![Vec::new(); params.layers.len()];
    // delta = d<upstream, out>/d pre-activation of the current layer
    let mut carry = upstream.clone();
    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let act_fn = params.spec.activation(li);
        let (out_dim, in_dim) = (layer.weight.rows(), layer.weight.cols());
        let pre = &tape.pre[li];
        let act = &tape.activations[li + 1];
        let input = &tape.activations[li];
        let mut delta = Mat::zeros(batch, out_dim);
        for r in 0..batch {
            for o in 0..out_dim {
                delta[(r, o)] = carry[(r, o)] * act_fn.derivative(pre[(r, o)], act[(r, o)]);
            }
        }
        let mut gw = vec![0.0; out_dim * in_dim];
        let mut gb = vec![0.0; out_dim];
        let mut next = Mat::zeros(batch, in_dim);
        for r in 0..batch {
            let x = input.row(r);
            for o in 0..out_dim {
                let d = delta[(r, o)];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                crate::math::linalg::axpy(d, x, &mut gw[o * in_dim..(o + 1) * in_dim]);
                crate::math::linalg::axpy(d, layer.weight.row(o), next.row_mut(r));
            }
        }
        gw.extend_from_slice(&gb);
        layer_grads[li] = gw;
        carry = next;
    }
    Ok(MlpGrads {
        params: layer_grads.concat(),
        inputs: carry,
    })
}

/// Header written in front of flattened parameters on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpHeader {
    pub kind: String,
    pub spec: MlpSpec,
    pub count: usize,
}

pub fn save_params(path: &std::path::Path, params: &MlpParams) -> Result<()> {
    let header = MlpHeader {
        kind: "mlp".into(),
        spec: params.spec.clone(),
        count: params.param_count(),
    };
    crate::checkpoint::write(path, &header, &params.flatten())
}

pub fn load_params(path: &std::path::Path) -> Result<MlpParams> {
    let (header, flat): (MlpHeader, Vec<f64>) = crate::checkpoint::read(path)?;
    MlpParams::unflatten(&header.spec, &flat)
}
