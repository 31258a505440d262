//! Per-parameter draws from a fitted variational factor, for marginal
//! density plots.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::RngStream;
use crate::variational::SharedSlot;

use super::{load_fit, RunMeta, SavedFit};

const EXPORT_STREAM: u64 = 0x302;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityExport {
    pub parameter: String,
    pub draws: Vec<f64>,
    /// Data-generating value, when the data were simulated.
    pub truth: Option<f64>,
}

fn truth_of(meta: &RunMeta, name: &str) -> Option<f64> {
    let truth = meta.data.truth.as_ref()?;
    match name {
        "intercept" => Some(truth.intercept),
        "sigma" => truth.sigma,
        _ => truth
            .names
            .iter()
            .zip(&truth.theta)
            .find_map(|(names, vals)| names.iter().position(|n| n == name).map(|k| vals[k])),
    }
}

/// `count` draws of one parameter's marginal under the fitted factor. σ is
/// drawn on the log scale and exponentiated.
pub fn export_density(dir: &Path, parameter: &str, count: usize, seed: u64) -> Result<DensityExport> {
    let (meta, saved) = load_fit(dir)?;
    let SavedFit::Vi { clients, shared } = saved else {
        return Err(Error::Config(format!(
            "density export needs a variational fit; {} was fitted with {:?}",
            dir.display(),
            meta.algorithm
        )));
    };
    let (mean, sd, log) = match parameter {
        "intercept" | "sigma" => {
            let slot = if parameter == "intercept" { shared.intercept } else { shared.log_sigma };
            match slot {
                SharedSlot::Learned { factor, .. } => (factor.mean, factor.scale(), parameter == "sigma"),
                _ => return Err(Error::Config(format!("{parameter} is not learned in this fit"))),
            }
        }
        _ => {
            let (j, k) = meta
                .param_names
                .iter()
                .enumerate()
                .find_map(|(j, names)| names.iter().position(|n| n == parameter).map(|k| (j, k)))
                .ok_or_else(|| {
                    Error::Config(format!(
                        "unknown parameter {parameter:?}; known: {}, intercept, sigma",
                        meta.param_names.iter().flatten().cloned().collect::<Vec<_>>().join(", ")
                    ))
                })?;
            let f = &clients[j].theta;
            (f.mean[k], f.marginal_std()[k], false)
        }
    };
    let mut rng = RngStream::new(seed, EXPORT_STREAM);
    let draws = rng
        .standard_normal(count)
        .into_iter()
        .map(|e| {
            let v = mean + sd * e;
            if log {
                v.exp()
            } else {
                v
            }
        })
        .collect();
    Ok(DensityExport {
        parameter: parameter.to_string(),
        draws,
        truth: truth_of(&meta, parameter),
    })
}

/// Writes `density_<parameter>.csv` (`value,truth`) under `dir`.
pub fn write_density(dir: &Path, export: &DensityExport) -> Result<PathBuf> {
    let path = dir.join(format!("density_{}.csv", export.parameter));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["value", "truth"])?;
    let truth = export.truth.map_or_else(String::new, |t| t.to_string());
    for v in &export.draws {
        w.write_record([v.to_string(), truth.clone()])?;
    }
    w.flush()?;
    Ok(path)
}
