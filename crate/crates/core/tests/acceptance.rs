//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! `cargo test -p vfl-core --test acceptance -- [N ...]` runs the listed
//! criteria (all by default). A FAIL is reported but only turns into a
//! non-zero exit under `VFL_ACCEPTANCE_STRICT=1`. `VFL_SLOW=1` enables the
//! full-scale split NN cross-validation.

mod common;

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use vfl_core::data::{generate, write_dataset, DatasetMeta, GeneratorSpec};
use vfl_core::experiments::{cross_validate, run_algorithm, DataSource, ExperimentConfig, Outcome, Source, ENV_HEART_CSV};
use vfl_core::federation::{
    monolithic_reference, run_algorithm1, run_algorithm2, FitConfig, FitResult, TransportKind,
};
use vfl_core::math::{Mat, RngStream};
use vfl_core::models::{
    marginalized_posterior_linear, Dataset, Family, Formulation, Likelihood, ModelSpec, PredictorKind, PriorSpec,
    SharedValues,
};
use vfl_core::variational::{
    assemble, local_bundle, AuxFamily, ClientState, ThetaFactor, VariationalConfig,
};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn config(rel: &str) -> ExperimentConfig {
    let path = configs().join(rel);
    let cfg = ExperimentConfig::from_toml(&std::fs::read_to_string(&path).unwrap()).unwrap();
    cfg.validate().unwrap();
    cfg
}

fn generated(cfg: &ExperimentConfig) -> Dataset {
    Source::load(cfg).unwrap().all().unwrap().data
}

fn with_generator_seed(cfg: &mut ExperimentConfig, seed: u64) {
    if let DataSource::Generate { generator } = &mut cfg.data {
        generator.seed = seed;
    }
}

fn vi(outcome: Outcome) -> FitResult {
    match outcome {
        Outcome::Vi(r) => r,
        _ => panic!("expected a variational fit"),
    }
}

fn stacked(data: &Dataset) -> DMatrix<f64> {
    let p: usize = data.block_sizes().iter().sum();
    let mut x = DMatrix::zeros(data.n(), p);
    let mut at = 0;
    for b in &data.blocks {
        for i in 0..data.n() {
            for c in 0..b.cols() {
                x[(i, at + c)] = b[(i, c)];
            }
        }
        at += b.cols();
    }
    x
}

/// Posterior of β under N(0, I) priors with the auxiliary variables
/// integrated out: `y | β ~ N(Xβ, (σ² + Jρ²) I)`.
fn conjugate(data: &Dataset, sigma: f64, rho: f64) -> (DVector<f64>, DMatrix<f64>) {
    let x = stacked(data);
    let v = sigma * sigma + data.num_clients() as f64 * rho * rho;
    let cov = (x.transpose() * &x / v + DMatrix::identity(x.ncols(), x.ncols()))
        .try_inverse()
        .unwrap();
    let mean = &cov * x.transpose() * DVector::from_vec(data.y.clone()) / v;
    (mean, cov)
}

fn sup(a: impl Iterator<Item = f64>) -> f64 {
    a.fold(0.0, |m, v| m.max(v.abs()))
}

fn criterion_1() -> Verdict {
    let base = config("oracle/linear_rho_sweep.toml");
    let data = generated(&base);
    let fit_at = |rho: f64| {
        let mut c = base.clone();
        c.model.rho = Some(rho);
        c.iterations = 20_000;
        vi(run_algorithm(&c, &data, None).unwrap())
    };
    let (m01, s01) = conjugate(&data, 1.0, 0.1);
    let core = marginalized_posterior_linear(&data, &[PriorSpec::default(), PriorSpec::default()], 1.0, 0.1).unwrap();
    let oracle_agree = sup(core.mean.iter().zip(m01.iter()).map(|(a, b)| a - b)) < 1e-10;

    let r = fit_at(0.1);
    let mean: Vec<f64> = r.clients.iter().flat_map(|c| c.theta.mean.clone()).collect();
    let sd: Vec<f64> = r.clients.iter().flat_map(|c| c.theta.marginal_std()).collect();
    let mean_err = sup(mean.iter().zip(m01.iter()).map(|(a, b)| a - b));
    let sd_rel = sup(sd.iter().enumerate().map(|(k, s)| s / s01[(k, k)].sqrt() - 1.0));

    let (m0, _) = conjugate(&data, 1.0, 0.0);
    let mut sweep = Vec::new();
    for rho in [1.0, 0.5] {
        let f = fit_at(rho);
        let m: Vec<f64> = f.clients.iter().flat_map(|c| c.theta.mean.clone()).collect();
        sweep.push(sup(m.iter().zip(m0.iter()).map(|(a, b)| a - b)));
    }
    sweep.push(sup(mean.iter().zip(m0.iter()).map(|(a, b)| a - b)));
    let monotone = sweep.windows(2).all(|w| w[1] < w[0]);
    let exact: Vec<f64> = [1.0, 0.5, 0.1]
        .iter()
        .map(|&rho| sup(conjugate(&data, 1.0, rho).0.iter().zip(m0.iter()).map(|(a, b)| a - b)))
        .collect();
    verdict(
        oracle_agree && mean_err < 0.05 && sd_rel < 0.15 && monotone,
        format!(
            "mean err {mean_err:.4} (< 0.05), sd rel err {sd_rel:.3} (< 0.15), \
             sup|m - m0| over rho 1, 0.5, 0.1 = {:.4}, {:.4}, {:.4} (exact {:.4}, {:.4}, {:.4})",
            sweep[0], sweep[1], sweep[2], exact[0], exact[1], exact[2]
        ),
    )
}

fn criterion_2() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut combos = HashSet::new();
    let mut clients = std::collections::BTreeSet::new();
    for i in 0..50 {
        let case = common::random_case(5000 + i as u64, i);
        combos.insert((case.formulation == Formulation::Power, case.family == AuxFamily::Amortized));
        clients.insert(case.data.num_clients());
        worst = worst.max(common::case_error(&case));
    }
    verdict(
        worst < 1e-5 && combos.len() == 4 && clients.len() == 3,
        format!("worst rel err {worst:.2e} over 50 cases; {} formulation x family combos, J in {clients:?}", combos.len()),
    )
}

fn same(a: &FitResult, b: &FitResult) -> bool {
    a.trace.len() == b.trace.len()
        && a.trace.iter().zip(&b.trace).all(|(x, y)| x.total.to_bits() == y.total.to_bits())
        && a.same_fit(b)
}

fn criterion_3() -> Verdict {
    let mut checked = 0;
    let mut bad = Vec::new();
    for seed in 1..=5u64 {
        let (data, _) = generate(&GeneratorSpec::logistic(500, vec![10, 10], seed)).unwrap();
        for family in [AuxFamily::MeanField, AuxFamily::Amortized] {
            let cfg = FitConfig {
                iterations: 100,
                seed,
                variational: VariationalConfig {
                    family,
                    ..Default::default()
                },
                ..Default::default()
            };
            for f in [Formulation::Augmented, Formulation::Power] {
                let spec = ModelSpec::new(Family::Logistic, f, Some(1.0)).with_learned_intercept();
                let fed = match f {
                    Formulation::Augmented => run_algorithm1(&spec, &data, &cfg),
                    _ => run_algorithm2(&spec, &data, &cfg),
                }
                .unwrap();
                let mono = monolithic_reference(&spec, &data, &cfg).unwrap();
                checked += 1;
                if !same(&fed, &mono) {
                    bad.push(format!("seed {seed} {family:?} {f:?}"));
                }
            }
        }
    }
    verdict(bad.is_empty(), format!("{checked} runs of 100 iterations bit-identical; mismatches {bad:?}"))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

fn criterion_4() -> Verdict {
    let jobs: Vec<(usize, &str, u64)> = [2usize, 10]
        .iter()
        .flat_map(|&j| ["augmented", "power"].map(move |f| (j, f)))
        .flat_map(|(j, f)| (1..=5u64).map(move |s| (j, f, s)))
        .collect();
    let finals: Vec<f64> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(j, f, seed)| {
                scope.spawn(move || {
                    let mut c = config(&format!("logistic/logistic_j{j}_{f}_meanfield_rho1.0.toml"));
                    // bit-identical to the federated executors (criterion 3)
                    c.algorithm = vfl_core::experiments::Algorithm::Monolithic;
                    c.iterations = 10_000;
                    c.seed = seed;
                    with_generator_seed(&mut c, seed);
                    vi(run_algorithm(&c, &generated(&c), None).unwrap()).tail_mean(100)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let med = |j: usize, f: &str| {
        median(
            jobs.iter()
                .zip(&finals)
                .filter(|((jj, ff, _), _)| *jj == j && *ff == f)
                .map(|(_, v)| *v)
                .collect(),
        )
    };
    let gap2 = med(2, "power") - med(2, "augmented");
    let gap10 = med(10, "power") - med(10, "augmented");
    verdict(
        gap2 > 0.0 && gap10.abs() < gap2.abs(),
        format!(
            "median final ELBO J=2: power {:.2} aug {:.2} (gap {gap2:.2}, needs > 0); \
             J=10: power {:.2} aug {:.2} (gap {gap10:.2}, needs |gap| below the J=2 one)",
            med(2, "power"),
            med(2, "augmented"),
            med(10, "power"),
            med(10, "augmented")
        ),
    )
}

fn criterion_5() -> Verdict {
    let mut s = RngStream::new(21, 1);
    let (n, p) = (20, 3);
    let x = Mat::from_vec(n, p, s.standard_normal(n * p)).unwrap();
    let y = s.standard_normal(n);
    let data = Dataset::new(y, vec![x]).unwrap();
    let (m, cov) = conjugate(&data, 1.0, 0.0);
    let l = cov.cholesky().unwrap().l();
    let scale = Mat::from_vec(p, p, (0..p * p).map(|i| l[(i / p, i % p)]).collect()).unwrap();
    let kind = PredictorKind::Linear { p };
    let prior = PriorSpec::default();
    let vcfg = VariationalConfig::default();
    let mut state = ClientState::init(&kind, n, Formulation::True, &vcfg, &mut s).unwrap();
    state.theta = ThetaFactor::from_moments(m.iter().copied().collect(), &scale).unwrap();
    let lik = Likelihood::Gaussian;
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let noise = state.draw_noise(n, &mut s);
        let draw = state.draw(&kind, data.client_inputs(0), None, noise).unwrap();
        let mut bundle = local_bundle(&state, &kind, &prior, None, &draw).unwrap();
        bundle.own_g = Some(lik.eval(&data.y, &draw.pred.g, SharedValues::default().sigma).unwrap().d_eta);
        let g = assemble(&state, &kind, data.client_inputs(0), &draw, &bundle).unwrap().flat();
        worst = worst.max(g.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    verdict(worst < 1e-10, format!("max gradient norm {worst:.2e} over 1000 draws (< 1e-10)"))
}

/// Conditional MAP of z for the augmented linear-Gaussian model with
/// `β_j ~ N(0, I)` and no intercept. With `C_j = ρ²I + X_j X_jᵀ` the
/// stationarity conditions give `r = (I + Σ_j C_j / σ²)⁻¹ y` and
/// `z_j = C_j r / σ²`.
fn soul_oracle(data: &Dataset, sigma: f64, rho: f64) -> Vec<Vec<f64>> {
    let n = data.n();
    let cs: Vec<DMatrix<f64>> = data
        .blocks
        .iter()
        .map(|b| {
            let x = DMatrix::from_fn(n, b.cols(), |i, c| b[(i, c)]);
            DMatrix::identity(n, n) * (rho * rho) + &x * x.transpose()
        })
        .collect();
    let mut a = DMatrix::identity(n, n);
    for c in &cs {
        a += c / (sigma * sigma);
    }
    let r = a.lu().solve(&DVector::from_vec(data.y.clone())).unwrap();
    cs.iter().map(|c| (c * &r / (sigma * sigma)).iter().copied().collect()).collect()
}

fn criterion_6() -> Verdict {
    let mut errs = Vec::new();
    for seed in 1..=5u64 {
        let mut c = config("soul/linear_toy.toml");
        c.seed = seed;
        with_generator_seed(&mut c, 100 + seed);
        let data = generated(&c);
        let Outcome::Soul(r) = run_algorithm(&c, &data, None).unwrap() else { panic!() };
        let want = soul_oracle(&data, 1.0, c.model.rho.unwrap());
        errs.push(sup(r.z_map.iter().flatten().zip(want.iter().flatten()).map(|(a, b)| a - b)));
    }
    let c = config("soul/linear_sigma.toml");
    let data = generated(&c);
    let Outcome::Soul(r) = run_algorithm(&c, &data, None).unwrap() else { panic!() };
    let ok = errs.iter().all(|e| *e < 1e-2) && (r.sigma - 1.0).abs() < 0.1;
    verdict(
        ok,
        format!(
            "toy sup|z - z*| per seed {:?} (< 1e-2); sigma {:.4} at n = {} (true 1, tol 0.1)",
            errs.iter().map(|e| format!("{e:.1e}")).collect::<Vec<_>>(),
            r.sigma,
            data.n()
        ),
    )
}

fn criterion_7() -> Verdict {
    let worst = (0..20)
        .map(|seed| common::mlp_case_error(&common::random_mlp_case(seed)))
        .fold(0.0, f64::max);
    verdict(worst < 1e-5, format!("worst rel err {worst:.2e} over 20 architectures"))
}

fn separable_split_task(dir: &Path) -> f64 {
    let mut s = RngStream::new(31, 2);
    let n = 300;
    let a = s.standard_normal(n * 3);
    let b = s.standard_normal(n * 3);
    let mut y = Vec::with_capacity(n);
    let mut xa = Vec::with_capacity(n * 3);
    for i in 0..n {
        let margin = a[3 * i] + b[3 * i];
        let push = if margin.abs() < 0.3 { 0.3 * margin.signum() } else { 0.0 };
        xa.extend([a[3 * i] + push, a[3 * i + 1], a[3 * i + 2]]);
        y.push(f64::from(margin > 0.0));
    }
    let data = Dataset::new(y, vec![Mat::from_vec(n, 3, xa).unwrap(), Mat::from_vec(n, 3, b).unwrap()]).unwrap();
    write_dataset(dir, &data, &DatasetMeta::describe(&data)).unwrap();
    let mut c = config("splitnn/splitnn_heart_rho1.0.toml");
    c.data = DataSource::Directory { path: dir.to_path_buf() };
    c.iterations = 5000;
    c.optimizer.lr = 1e-3;
    c.evaluate.folds = 5;
    c.evaluate.run_folds = Some(2);
    cross_validate(&c, false).unwrap().metrics.accuracy.unwrap().mean
}

fn criterion_8() -> Verdict {
    let slow = std::env::var_os("VFL_SLOW").is_some();
    let real = std::env::var_os(ENV_HEART_CSV).is_some();
    let tmp = tempfile::tempdir().unwrap();
    if slow && real {
        let acc = |rho: &str| {
            let c = config(&format!("splitnn/splitnn_heart_rho{rho}.toml"));
            cross_validate(&c, false).unwrap().metrics.accuracy.unwrap()
        };
        let (a1, a10) = (acc("1.0"), acc("10.0"));
        return verdict(
            (80.0..=92.0).contains(&a1.mean) && a1.mean >= a10.mean,
            format!(
                "full 10-fold: rho 1 {:.2} +- {:.2} (in [80, 92]); rho 10 {:.2}",
                a1.mean, a1.std, a10.mean
            ),
        );
    }
    let mut c = config("splitnn/splitnn_heart_rho1.0.toml");
    c.iterations = 5000;
    c.evaluate.run_folds = Some(2);
    let r = cross_validate(&c, false).unwrap();
    let acc = r.metrics.accuracy.unwrap().mean;
    let sep = separable_split_task(tmp.path());
    let table = if r.synthetic_table { "synthetic fallback" } else { "heart data" };
    verdict(
        (75.0..=95.0).contains(&acc) && (r.synthetic_table || real) && sep >= 90.0,
        format!(
            "{table}, 2 folds x 5000 iterations: {acc:.2}% (in [75, 95]); separable task {sep:.2}% (>= 90){}",
            if slow { "" } else { "; full run needs VFL_SLOW=1 and the heart CSV" }
        ),
    )
}

fn criterion_9() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let mut failures = Vec::new();
    let mut s = RngStream::new(77, 3);
    for trial in 0..20u64 {
        let j = s.int_inclusive(1, 4) as usize;
        let n = s.int_inclusive(8, 30) as usize;
        let blocks: Vec<usize> = (0..j).map(|_| s.int_inclusive(1, 3) as usize).collect();
        let t = s.int_inclusive(2, 6) as u64;
        let family = if trial % 2 == 0 { AuxFamily::MeanField } else { AuxFamily::Amortized };
        let (data, _) = generate(&GeneratorSpec::logistic(n, blocks, trial)).unwrap();
        for (f, per) in [(Formulation::Augmented, 2), (Formulation::Power, 4)] {
            let spec = ModelSpec::new(Family::Logistic, f, Some(1.0)).with_learned_intercept();
            let log = tmp.path().join(format!("{trial}-{f:?}.jsonl"));
            let base = FitConfig {
                iterations: t,
                seed: trial,
                variational: VariationalConfig {
                    family,
                    amortized_hidden: vec![3],
                    ..Default::default()
                },
                message_log: Some(log.clone()),
                ..Default::default()
            };
            let run = |c: &FitConfig| match f {
                Formulation::Augmented => run_algorithm1(&spec, &data, c).unwrap(),
                _ => run_algorithm2(&spec, &data, c).unwrap(),
            };
            let r = run(&base);
            let label = format!("trial {trial} {f:?} J={j}");
            if r.counters.total_messages() != per * j as u64 * t {
                failures.push(format!("{label}: {} messages", r.counters.total_messages()));
            }
            let mut private: HashSet<u64> = HashSet::new();
            for b in &data.blocks {
                private.extend(b.as_slice().iter().map(|v| v.to_bits()));
            }
            for c in &r.clients {
                private.extend(c.theta.mean.iter().map(|v| v.to_bits()));
            }
            for line in std::fs::read_to_string(&log).unwrap().lines() {
                let rec: serde_json::Value = serde_json::from_str(line).unwrap();
                let leaked = rec["payload"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .filter_map(|v| v.as_f64())
                    .any(|v| v.fract() != 0.0 && private.contains(&v.to_bits()));
                if leaked {
                    failures.push(format!("{label}: {} leaks a private value", rec["tag"]));
                }
            }
            let mut transports = vec![TransportKind::Shuffled { seed: 1000 + trial }];
            if trial % 5 == 0 {
                transports.push(TransportKind::Socket);
            }
            for transport in transports {
                let other = run(&FitConfig {
                    transport,
                    message_log: None,
                    ..base.clone()
                });
                if !same(&r, &other) || r.counters != other.counters {
                    failures.push(format!("{label}: {transport:?} changed the result"));
                }
            }
        }
    }
    verdict(
        failures.is_empty(),
        format!("20 trials x 2 protocols: counts, privacy scan, shuffled/socket delivery; failures {failures:?}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("AXDA exactness", criterion_1),
        ("gradient fidelity", criterion_2),
        ("federated equals monolithic", criterion_3),
        ("power >= augmented ELBO", criterion_4),
        ("STL zero variance at optimum", criterion_5),
        ("SOUL convergence", criterion_6),
        ("MLP correctness", criterion_7),
        ("split NN accuracy", criterion_8),
        ("protocol properties", criterion_9),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let v = run();
        let status = if v.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!v.pass);
        println!("{status} [{id}] {name}: {} ({:.1}s)", v.detail, t.elapsed().as_secs_f64());
    }
    if failed > 0 && std::env::var_os("VFL_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
