//! Synthetic generators, tabular preprocessing, vertical partitioning and
//! cross-validation folds.

pub mod io;
pub mod tabular;

use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{sigmoid, Mat, RngStream};
use crate::models::{Dataset, Family, PredictorKind};

pub use io::{read_dataset, write_dataset, DatasetMeta};
pub use tabular::{
    heart_schema, load_and_preprocess, read_table, synthetic_heart, Preprocessor, RawTable, SchemaConfig,
};

// stream ids for the generators; disjoint from the fitting streams
const X_STREAM: u64 = 0x100;
const PARAM_STREAM: u64 = 0x101;
const NOISE_STREAM: u64 = 0x102;
const AUX_STREAM: u64 = 0x103;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub family: Family,
    pub n: usize,
    /// Covariates per client; the total is `p`.
    pub block_sizes: Vec<usize>,
    pub seed: u64,
    /// Standard deviation of the Gaussian noise added to the linear
    /// predictor (logistic) or of the response noise (linear-Gaussian).
    pub noise_sd: f64,
    pub levels: usize,
    /// Inclusive population range for the Poisson offset.
    pub pop_range: (i64, i64),
    /// The Poisson log-rate is clipped to `±eta_clip`.
    pub eta_clip: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            family: Family::Logistic,
            n: 500,
            block_sizes: vec![10, 10],
            seed: 0,
            noise_sd: 1.0,
            levels: 5,
            pop_range: (250, 350),
            eta_clip: 30.0,
        }
    }
}

impl GeneratorSpec {
    pub fn logistic(n: usize, block_sizes: Vec<usize>, seed: u64) -> Self {
        Self {
            family: Family::Logistic,
            n,
            block_sizes,
            seed,
            ..Default::default()
        }
    }

    pub fn multilevel_poisson(n: usize, block_sizes: Vec<usize>, seed: u64) -> Self {
        Self {
            family: Family::PoissonMultilevel,
            n,
            block_sizes,
            seed,
            ..Default::default()
        }
    }

    pub fn p(&self) -> usize {
        self.block_sizes.iter().sum()
    }

    pub fn num_clients(&self) -> usize {
        self.block_sizes.len()
    }

    /// `p` covariates split as evenly as possible over `clients`, earlier
    /// clients taking the remainder.
    pub fn even_split(p: usize, clients: usize) -> Vec<usize> {
        (0..clients).map(|j| p / clients + usize::from(j < p % clients)).collect()
    }

    fn validate(&self, family: Family) -> Result<()> {
        if self.family != family {
            return Err(Error::Config(format!(
                "generator for {family:?} called with a {:?} spec",
                self.family
            )));
        }
        if self.n == 0 || self.block_sizes.is_empty() || self.block_sizes.contains(&0) {
            return Err(Error::Config("need n >= 1 and at least one non-empty block".into()));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::Config("noise_sd must be >= 0".into()));
        }
        Ok(())
    }
}

/// Parameters a synthetic dataset was drawn from, laid out like the
/// corresponding `θ_j` so they can be compared with fitted factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub intercept: f64,
    pub sigma: Option<f64>,
    pub theta: Vec<Vec<f64>>,
    pub names: Vec<Vec<String>>,
}

fn standard_design(spec: &GeneratorSpec) -> Result<Vec<Mat>> {
    let mut s = RngStream::new(spec.seed, X_STREAM);
    let x = Mat::from_vec(spec.n, spec.p(), s.standard_normal(spec.n * spec.p()))?;
    vertical_partition(&x, &spec.block_sizes)
}

/// Logistic data: `x, β ~ N(0, 1)`, `b = 0`, `η = xβ + ε` with
/// `ε ~ N(0, noise_sd²)`, `y ~ Bernoulli(σ(η))`.
pub fn gen_logistic(spec: &GeneratorSpec) -> Result<(Dataset, GroundTruth)> {
    spec.validate(Family::Logistic)?;
    let blocks = standard_design(spec)?;
    let beta = RngStream::new(spec.seed, PARAM_STREAM).standard_normal(spec.p());
    let noise = RngStream::new(spec.seed, NOISE_STREAM).standard_normal(spec.n);
    let mut u = RngStream::new(spec.seed, AUX_STREAM);
    let eta = linear_part(&blocks, &beta)?;
    let y = eta
        .iter()
        .zip(&noise)
        .map(|(e, w)| f64::from(u.uniform() < sigmoid(e + spec.noise_sd * w)))
        .collect();
    let theta = split_vec(&beta, &spec.block_sizes);
    let names = (0..spec.num_clients())
        .map(|j| PredictorKind::Linear { p: spec.block_sizes[j] }.param_names(j))
        .collect();
    Ok((
        Dataset::new(y, blocks)?,
        GroundTruth {
            intercept: 0.0,
            sigma: None,
            theta,
            names,
        },
    ))
}

/// Linear-Gaussian data with the same design: `y = xβ + noise_sd·ε`.
pub fn gen_linear(spec: &GeneratorSpec) -> Result<(Dataset, GroundTruth)> {
    spec.validate(Family::LinearGaussian)?;
    let blocks = standard_design(spec)?;
    let beta = RngStream::new(spec.seed, PARAM_STREAM).standard_normal(spec.p());
    let noise = RngStream::new(spec.seed, NOISE_STREAM).standard_normal(spec.n);
    let eta = linear_part(&blocks, &beta)?;
    let y = eta.iter().zip(&noise).map(|(e, w)| e + spec.noise_sd * w).collect();
    let names = (0..spec.num_clients())
        .map(|j| PredictorKind::Linear { p: spec.block_sizes[j] }.param_names(j))
        .collect();
    Ok((
        Dataset::new(y, blocks)?,
        GroundTruth {
            intercept: 0.0,
            sigma: Some(spec.noise_sd),
            theta: split_vec(&beta, &spec.block_sizes),
            names,
        },
    ))
}

/// Multilevel Poisson data with a population offset and uniformly assigned
/// levels: `μ ~ N(0, 1)`, `σ ~ HN(1)`, `β^r ~ N(μ^r, σ^r)` per client,
/// level and covariate, `b ~ N(0, 1)`, `y ~ Poisson(exp(η))`.
pub fn gen_multilevel_poisson(spec: &GeneratorSpec) -> Result<(Dataset, GroundTruth)> {
    spec.validate(Family::PoissonMultilevel)?;
    let (lo, hi) = spec.pop_range;
    if lo < 1 || hi < lo || spec.levels == 0 {
        return Err(Error::Config("need 1 <= pop_lo <= pop_hi and levels >= 1".into()));
    }
    let blocks = standard_design(spec)?;
    let mut aux = RngStream::new(spec.seed, AUX_STREAM);
    let offset: Vec<f64> = (0..spec.n).map(|_| (aux.int_inclusive(lo, hi) as f64).ln()).collect();
    let group: Vec<usize> = (0..spec.n)
        .map(|_| aux.int_inclusive(0, spec.levels as i64 - 1) as usize)
        .collect();

    let mut ps = RngStream::new(spec.seed, PARAM_STREAM);
    let intercept = ps.standard_normal(1)[0];
    let mut theta = Vec::new();
    let mut names = Vec::new();
    for (j, &p) in spec.block_sizes.iter().enumerate() {
        let block = p * spec.levels;
        let mu = ps.standard_normal(block);
        let sd: Vec<f64> = ps.standard_normal(block).iter().map(|v| v.abs()).collect();
        let e = ps.standard_normal(block);
        let beta: Vec<f64> = (0..block).map(|i| mu[i] + sd[i] * e[i]).collect();
        let mut t = beta;
        t.extend(&mu);
        t.extend(sd.iter().map(|s| s.ln()));
        theta.push(t);
        names.push(PredictorKind::Multilevel { p, levels: spec.levels }.param_names(j));
    }

    let mut eta: Vec<f64> = offset.iter().map(|o| intercept + o).collect();
    for (j, x) in blocks.iter().enumerate() {
        let p = x.cols();
        for (i, e) in eta.iter_mut().enumerate() {
            let b = &theta[j][group[i] * p..(group[i] + 1) * p];
            *e += x.row(i).iter().zip(b).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    let clipped = eta.iter().filter(|e| e.abs() > spec.eta_clip).count();
    if clipped > 0 {
        log::warn!("{clipped} log-rates clipped to ±{}", spec.eta_clip);
    }
    let mut noise = RngStream::new(spec.seed, NOISE_STREAM);
    let y = eta
        .iter()
        .map(|e| {
            let rate = e.clamp(-spec.eta_clip, spec.eta_clip).exp();
            Poisson::new(rate)
                .map(|d| d.sample(&mut noise))
                .map_err(|err| Error::Domain(format!("poisson rate {rate}: {err}")))
        })
        .collect::<Result<Vec<f64>>>()?;

    let mut data = Dataset::new(y, blocks)?;
    data.offset = Some(offset);
    data.group = Some(group);
    data.levels = Some(spec.levels);
    data.validate()?;
    Ok((
        data,
        GroundTruth {
            intercept,
            sigma: None,
            theta,
            names,
        },
    ))
}

/// Dispatches on `spec.family`.
pub fn generate(spec: &GeneratorSpec) -> Result<(Dataset, GroundTruth)> {
    match spec.family {
        Family::Logistic => gen_logistic(spec),
        Family::LinearGaussian => gen_linear(spec),
        Family::PoissonMultilevel => gen_multilevel_poisson(spec),
        Family::SplitnnBernoulli => Err(Error::Config(
            "split-NN data comes from a table; see synthetic_heart".into(),
        )),
    }
}

fn linear_part(blocks: &[Mat], beta: &[f64]) -> Result<Vec<f64>> {
    let n = blocks[0].rows();
    let mut eta = vec![0.0; n];
    let mut at = 0;
    for x in blocks {
        let g = x.matvec(&beta[at..at + x.cols()])?;
        eta.iter_mut().zip(&g).for_each(|(e, v)| *e += v);
        at += x.cols();
    }
    Ok(eta)
}

fn split_vec(v: &[f64], sizes: &[usize]) -> Vec<Vec<f64>> {
    let mut at = 0;
    sizes
        .iter()
        .map(|&s| {
            at += s;
            v[at - s..at].to_vec()
        })
        .collect()
}

/// Contiguous column blocks of `features`, in order.
pub fn vertical_partition(features: &Mat, sizes: &[usize]) -> Result<Vec<Mat>> {
    let total: usize = sizes.iter().sum();
    if total != features.cols() {
        return Err(Error::Shape(format!(
            "block sizes sum to {total} but there are {} columns",
            features.cols()
        )));
    }
    let mut at = 0;
    sizes
        .iter()
        .map(|&s| {
            at += s;
            features.column_slice(at - s, s)
        })
        .collect()
}

/// Fold label in `0..k` for each of `n` rows: a seeded shuffle dealt round
/// robin, so fold sizes differ by at most one.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::Config(format!("need 1 <= k <= n, got k = {k}, n = {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut s = RngStream::new(seed, AUX_STREAM);
    for i in (1..n).rev() {
        let j = s.int_inclusive(0, i as i64) as usize;
        order.swap(i, j);
    }
    let mut fold = vec![0; n];
    for (pos, &row) in order.iter().enumerate() {
        fold[row] = pos % k;
    }
    Ok(fold)
}

/// `(train, test)` row indices for fold `f`, each ascending.
pub fn fold_split(folds: &[usize], f: usize) -> (Vec<usize>, Vec<usize>) {
    (0..folds.len()).partition(|&i| folds[i] != f)
}
