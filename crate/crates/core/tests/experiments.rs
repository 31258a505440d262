use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use vfl_core::data::{write_dataset, DatasetMeta, GeneratorSpec};
use vfl_core::experiments::oracle::{linear_oracle, logistic_grid};
use vfl_core::experiments::{
    cross_validate, evaluate_saved, exit_code, export_density, fit_experiment, fold_metrics, load_fit,
    oracle_experiment, write_density, Algorithm, DataSource, ExperimentConfig, MeanStd, OracleReport, RowPrediction,
    SavedFit,
};
use vfl_core::federation::{RunStatus, Scenario};
use vfl_core::math::{Mat, RngStream};
use vfl_core::models::{Dataset, Family, Formulation, Likelihood, ModelSpec};
use vfl_core::variational::AuxFamily;
use vfl_core::Error;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn shipped_configs() -> Vec<PathBuf> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, out);
            } else if p.extension().is_some_and(|x| x == "toml") {
                out.push(p);
            }
        }
    }
    let mut out = Vec::new();
    walk(&configs_dir(), &mut out);
    out.sort();
    out
}

fn parse(path: &Path) -> ExperimentConfig {
    let cfg = ExperimentConfig::from_toml(&fs::read_to_string(path).unwrap())
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    cfg
}

const BASE: &str = r#"
schema_version = 1
name = "t"
algorithm = "monolithic"
iterations = 50

[model]
family = "logistic"
formulation = "augmented"
rho = 1.0

[data]
source = "generate"
generator = { family = "logistic", n = 40, block_sizes = [2, 2], seed = 1 }
"#;

fn base() -> ExperimentConfig {
    ExperimentConfig::from_toml(BASE).unwrap()
}

#[test]
fn every_shipped_config_is_valid() {
    let all = shipped_configs();
    assert!(all.len() >= 37, "{} configs", all.len());
    let cfgs: Vec<_> = all.iter().map(|p| parse(p)).collect();
    let names: std::collections::BTreeSet<_> = cfgs.iter().map(|c| c.name.clone()).collect();
    assert_eq!(names.len(), cfgs.len(), "config names must be unique");
}

#[test]
fn shipped_configs_cover_the_experiment_grid() {
    let cfgs: Vec<_> = shipped_configs().iter().map(|p| parse(p)).collect();
    let has = |f: &dyn Fn(&ExperimentConfig) -> bool| cfgs.iter().any(f);
    for clients in [2usize, 10] {
        for rho in [0.5, 1.0, 2.0] {
            for fam in [AuxFamily::MeanField, AuxFamily::Amortized] {
                for form in [Formulation::Augmented, Formulation::Power] {
                    assert!(
                        has(&|c| {
                            c.model.family == Family::Logistic
                                && c.model.rho == Some(rho)
                                && c.model.formulation == form
                                && c.variational.family == fam
                                && matches!(&c.data, DataSource::Generate { generator }
                                    if generator.block_sizes.len() == clients && generator.n == 500
                                        && generator.p() == 20)
                        }),
                        "missing J={clients} rho={rho} {fam:?} {form:?}"
                    );
                }
            }
        }
    }
    for rho in [1.0, 2.0] {
        assert!(has(&|c| c.model.family == Family::PoissonMultilevel && c.model.rho == Some(rho)));
    }
    for rho in [1.0, 5.0, 10.0] {
        assert!(has(&|c| c.model.family == Family::SplitnnBernoulli
            && c.model.rho == Some(rho)
            && c.iterations == 50_000
            && (c.optimizer.lr - 1e-3).abs() < 1e-15));
    }
    assert!(has(&|c| c.algorithm == Algorithm::PointEstimate));
}

/// Shortened runs of every shipped config.
#[test]
fn every_shipped_config_runs_briefly() {
    let tmp = tempfile::tempdir().unwrap();
    for path in shipped_configs() {
        let mut cfg = parse(&path);
        cfg.iterations = 5;
        cfg.output.samples = 20;
        cfg.output_dir = Some(tmp.path().join(&cfg.name));
        let s = fit_experiment(&cfg).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(s.meta.status, RunStatus::Completed, "{}", path.display());
        assert!(s.dir.join("run_meta.json").exists());
        assert!(s.dir.join("samples.csv").exists());
        if path.parent().is_some_and(|d| d.ends_with("oracle")) {
            oracle_experiment(&cfg, true).unwrap();
            assert!(s.dir.join("oracle.json").exists());
        }
    }
}

fn rejects(cfg: &ExperimentConfig) -> String {
    match cfg.validate() {
        Err(Error::Config(m)) => m,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn feasibility_matrix_follows_the_model_inference_table() {
    for fam in [AuxFamily::MeanField, AuxFamily::Amortized] {
        for form in [Formulation::True, Formulation::Augmented, Formulation::Power] {
            let mut c = base();
            c.variational.family = fam;
            c.model.formulation = form;
            c.model.rho = (form != Formulation::True).then_some(1.0);
            let ok = c.validate().is_ok();
            assert_eq!(ok, !(fam == AuxFamily::Amortized && form == Formulation::True), "{fam:?} {form:?}");
        }
    }
}

#[test]
fn invalid_combinations_are_explained() {
    let mut c = base();
    c.algorithm = Algorithm::Alg1;
    c.model.formulation = Formulation::Power;
    assert!(rejects(&c).contains("alg1"));

    let mut c = base();
    c.algorithm = Algorithm::Alg2;
    assert!(rejects(&c).contains("alg2"));

    let mut c = base();
    c.algorithm = Algorithm::Alg2;
    c.model.formulation = Formulation::Power;
    assert!(rejects(&c).contains("y cannot stay with the server"));
    c.scenario = Scenario::SharedResponse;
    c.validate().unwrap();

    let mut c = base();
    c.algorithm = Algorithm::Soul;
    c.model.formulation = Formulation::True;
    c.model.rho = None;
    assert!(rejects(&c).contains("soul"));

    let mut c = base();
    c.algorithm = Algorithm::PointEstimate;
    assert!(rejects(&c).contains("split NN"));

    let mut c = base();
    c.model = ModelSpec::new(Family::LinearGaussian, Formulation::Augmented, Some(1.0));
    assert!(rejects(&c).contains("does not match"));

    let mut c = base();
    c.schema_version = 2;
    assert!(rejects(&c).contains("schema_version"));

    let mut c = base();
    c.evaluate.folds = 1;
    rejects(&c);

    let mut c = base();
    c.oracle.grid_points = 100;
    rejects(&c);
}

#[test]
fn unknown_keys_are_config_errors() {
    let e = ExperimentConfig::from_toml(&format!("itertions = 3\n{BASE}")).unwrap_err();
    assert_eq!(exit_code(&e), 2);
    let e = ExperimentConfig::from_toml(&format!("{BASE}\npath = \"x\"\n")).unwrap_err();
    assert_eq!(exit_code(&e), 2);
    let e = ExperimentConfig::from_toml(&BASE.replace("seed = 1", "seed = 1, sede = 2")).unwrap_err();
    assert_eq!(exit_code(&e), 2);
}

#[test]
fn environment_overrides_seed_and_output_dir() {
    let mut c = base();
    c.apply_env(|k| match k {
        "VFL_SEED" => Some("42".into()),
        "VFL_OUTPUT_DIR" => Some("/tmp/elsewhere".into()),
        _ => None,
    })
    .unwrap();
    assert_eq!(c.seed, 42);
    assert_eq!(c.output_dir(), PathBuf::from("/tmp/elsewhere"));
    let mut c = base();
    assert_eq!(c.output_dir(), PathBuf::from("runs/t"));
    let e = c.apply_env(|k| (k == "VFL_SEED").then(|| "minus one".to_string())).unwrap_err();
    assert_eq!(exit_code(&e), 2);
}

#[test]
fn exit_codes() {
    assert_eq!(exit_code(&Error::Config("x".into())), 2);
    assert_eq!(
        exit_code(&Error::Numerical {
            iteration: 3,
            actor: "server".into(),
            detail: "nan".into()
        }),
        3
    );
    assert_eq!(exit_code(&Error::NonFinite("x".into())), 3);
    assert_eq!(exit_code(&Error::Data("x".into())), 1);
}

#[test]
fn zero_iterations_write_the_initial_state() {
    let tmp = tempfile::tempdir().unwrap();
    for alg in [Algorithm::Monolithic, Algorithm::Alg1] {
        let mut c = base();
        c.algorithm = alg;
        c.iterations = 0;
        c.output.samples = 10;
        c.output_dir = Some(tmp.path().join(format!("{alg:?}")));
        let s = fit_experiment(&c).unwrap();
        assert_eq!(s.meta.status, RunStatus::Completed);
        assert_eq!(s.meta.final_elbo, None);
        let trace = fs::read_to_string(s.dir.join("elbo_trace.csv")).unwrap();
        assert_eq!(trace.lines().count(), 1, "{trace}");
        let (_, saved) = load_fit(&s.dir).unwrap();
        let SavedFit::Vi { clients, .. } = saved else { panic!() };
        for st in &clients {
            assert!(st.theta.mean.iter().all(|m| *m == 0.0));
            let sd = st.theta.marginal_std();
            assert!(sd.iter().all(|s| (s - c.variational.theta_scale).abs() < 1e-12), "{sd:?}");
        }
        let samples = fs::read_to_string(s.dir.join("samples.csv")).unwrap();
        assert_eq!(samples.lines().count(), 11);
    }
}

/// Two clients with one informative column each; the classes are separated
/// by a margin in the first client's column.
fn separable(n: usize, seed: u64) -> Dataset {
    let mut rng = RngStream::new(seed, 9);
    let u: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    let noise = rng.standard_normal(n);
    let x1: Vec<f64> = u
        .iter()
        .enumerate()
        .map(|(i, u)| if i % 2 == 0 { 1.0 + 2.0 * u } else { -1.0 - 2.0 * u })
        .collect();
    let y = x1.iter().map(|x| f64::from(*x > 0.0)).collect();
    Dataset::new(y, vec![Mat::column(&x1), Mat::column(&noise)]).unwrap()
}

fn separable_config(dir: &Path) -> ExperimentConfig {
    let mut c = base();
    c.model = ModelSpec::new(Family::Logistic, Formulation::True, None);
    c.data = DataSource::Directory { path: dir.to_path_buf() };
    c.iterations = 3000;
    c.optimizer.lr = 0.05;
    c
}

#[test]
fn separable_toy_is_classified_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let (train, test) = (separable(60, 1), separable(40, 2));
    write_dataset(&tmp.path().join("train"), &train, &DatasetMeta::describe(&train)).unwrap();
    write_dataset(&tmp.path().join("test"), &test, &DatasetMeta::describe(&test)).unwrap();
    let mut c = separable_config(&tmp.path().join("train"));
    c.output_dir = Some(tmp.path().join("fit"));
    fit_experiment(&c).unwrap();
    let r = evaluate_saved(&tmp.path().join("fit"), &test, 100, 0.5, 0).unwrap();
    let f = &r.folds[0];
    assert_eq!(f.accuracy, Some(100.0));
    assert_eq!(f.loglik_incorrect, None);
    assert_eq!(r.loglik_incorrect, None);
    assert!(r.render().contains("loglik(incorrect) n/a"));
    assert!(f.loglik_all < 0.0 && f.loglik_all > -0.5, "{}", f.loglik_all);

    let mut c = separable_config(&tmp.path().join("train"));
    c.evaluate.folds = 3;
    c.output_dir = Some(tmp.path().join("cv"));
    let cv = cross_validate(&c, true).unwrap();
    assert_eq!(cv.metrics.folds.len(), 3);
    assert_eq!(cv.metrics.folds.iter().map(|f| f.n_test).sum::<usize>(), 60);
    assert_eq!(cv.metrics.accuracy.unwrap().mean, 100.0);
    assert!(tmp.path().join("cv/cv_metrics.json").exists());
    let rows = fs::read_to_string(tmp.path().join("cv/cv_folds.csv")).unwrap();
    assert_eq!(rows.lines().count(), 4);
    assert!(rows.lines().nth(1).unwrap().contains("NA"));
}

#[test]
fn evaluating_on_mismatched_data_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let train = separable(30, 3);
    write_dataset(&tmp.path().join("train"), &train, &DatasetMeta::describe(&train)).unwrap();
    let mut c = separable_config(&tmp.path().join("train"));
    c.iterations = 5;
    c.output_dir = Some(tmp.path().join("fit"));
    fit_experiment(&c).unwrap();
    let wide = Dataset::new(train.y.clone(), vec![train.blocks[0].clone(), Mat::zeros(30, 2)]).unwrap();
    let e = evaluate_saved(&tmp.path().join("fit"), &wide, 10, 0.5, 0).unwrap_err();
    assert_eq!(exit_code(&e), 2, "{e}");
}

#[test]
fn fold_metrics_by_hand() {
    let rows = [
        RowPrediction { mean: 0.9, log_lik: -0.1 },
        RowPrediction { mean: 0.4, log_lik: -0.5 },
        RowPrediction { mean: 0.5, log_lik: -0.7 },
        RowPrediction { mean: 0.2, log_lik: -1.6 },
    ];
    let m = fold_metrics(0, Likelihood::Bernoulli, &[1.0, 0.0, 0.0, 1.0], &rows, 0.5).unwrap();
    assert_eq!(m.accuracy, Some(50.0));
    assert_eq!(m.n_incorrect, 2);
    assert!((m.loglik_all - (-2.9 / 4.0)).abs() < 1e-12);
    assert!((m.loglik_incorrect.unwrap() - (-1.15)).abs() < 1e-12);
    let g = fold_metrics(0, Likelihood::Gaussian, &[1.0], &rows[..1], 0.5).unwrap();
    assert_eq!(g.accuracy, None);
    assert!(fold_metrics(0, Likelihood::Bernoulli, &[1.0], &rows, 0.5).is_err());
}

#[test]
fn mean_std_uses_the_sample_convention() {
    let m = MeanStd::of(&[80.0, 90.0]).unwrap();
    assert_eq!(m.mean, 85.0);
    assert!((m.std - 50f64.sqrt()).abs() < 1e-12);
    assert_eq!(MeanStd::of(&[3.0]).unwrap().std, 0.0);
    assert!(MeanStd::of(&[]).is_none());
}

fn linear_case() -> (ModelSpec, Dataset) {
    let spec = GeneratorSpec {
        family: Family::LinearGaussian,
        n: 200,
        block_sizes: vec![3, 3],
        seed: 3,
        ..Default::default()
    };
    let (data, _) = vfl_core::data::generate(&spec).unwrap();
    (ModelSpec::new(Family::LinearGaussian, Formulation::Augmented, Some(0.1)), data)
}

/// `β | y ~ N(m, S)` with `S = (XᵀX / v + I)⁻¹`, `m = S Xᵀy / v` and
/// `v = σ² + Jρ²` once the auxiliary variables are integrated out.
fn conjugate(data: &Dataset, sigma: f64, rho: f64) -> (DVector<f64>, DMatrix<f64>) {
    let n = data.n();
    let p: usize = data.block_sizes().iter().sum();
    let x = DMatrix::from_fn(n, p, |i, c| {
        let mut c = c;
        for b in &data.blocks {
            if c < b.cols() {
                return b[(i, c)];
            }
            c -= b.cols();
        }
        unreachable!()
    });
    let v = sigma * sigma + data.num_clients() as f64 * rho * rho;
    let prec = x.transpose() * &x / v + DMatrix::identity(p, p);
    let cov = prec.try_inverse().unwrap();
    let mean = &cov * x.transpose() * DVector::from_vec(data.y.clone()) / v;
    (mean, cov)
}

#[test]
fn linear_oracle_matches_conjugate_algebra() {
    let (spec, data) = linear_case();
    let o = linear_oracle(&spec, &data, &[2.0, 1.0, 0.5, 0.1]).unwrap();
    assert_eq!(o.exact.rho, 0.0);
    for r in std::iter::once(&o.exact).chain(&o.sweep) {
        let (m, s) = conjugate(&data, 1.0, r.rho);
        for k in 0..m.len() {
            assert!((r.posterior.mean[k] - m[k]).abs() < 1e-10, "rho {} k {k}", r.rho);
            assert!((r.std[k] - s[(k, k)].sqrt()).abs() < 1e-10);
        }
    }
    assert_eq!(o.names[0], "beta_0_0");
}

#[test]
fn oracle_variance_increases_with_rho() {
    let (spec, data) = linear_case();
    let o = linear_oracle(&spec, &data, &[0.1, 0.5, 1.0, 2.0]).unwrap();
    let mut prev = o.exact.std.clone();
    for r in &o.sweep {
        for (a, b) in prev.iter().zip(&r.std) {
            assert!(b > a, "rho {}: {b} <= {a}", r.rho);
        }
        prev = r.std.clone();
    }
}

#[test]
fn linear_oracle_needs_a_known_sigma() {
    let (mut spec, data) = linear_case();
    spec.sigma = vfl_core::models::SharedParam::Learned {
        prior: vfl_core::models::ScalarPrior::HalfNormal { scale: 1.0 },
        init: 1.0,
    };
    assert!(linear_oracle(&spec, &data, &[1.0]).is_err());
}

fn grid_case() -> (ModelSpec, Dataset) {
    let g = GeneratorSpec {
        n: 40,
        block_sizes: vec![1, 1],
        seed: 4,
        noise_sd: 0.0,
        ..GeneratorSpec::default()
    };
    let (data, _) = vfl_core::data::generate(&g).unwrap();
    (ModelSpec::new(Family::Logistic, Formulation::True, None), data)
}

#[test]
fn grid_posterior_normalizes_and_matches_brute_force() {
    let (spec, data) = grid_case();
    let o = logistic_grid(&spec, &data, 201).unwrap();
    assert!((o.half_grid_integral - 1.0).abs() < 1e-4, "{}", o.half_grid_integral);

    // independent midpoint rule over a wide box
    let (x1, x2) = (&data.blocks[0], &data.blocks[1]);
    let logpost = |a: f64, b: f64| {
        let mut s = -0.5 * (a * a + b * b);
        for i in 0..data.n() {
            let eta = a * x1[(i, 0)] + b * x2[(i, 0)];
            s += data.y[i] * eta - (1.0 + eta.exp()).ln();
        }
        s
    };
    let (k, lo, hi) = (600usize, -8.0, 8.0);
    let h = (hi - lo) / k as f64;
    let pts: Vec<f64> = (0..k).map(|i| lo + (i as f64 + 0.5) * h).collect();
    let vals: Vec<(f64, f64, f64)> = pts
        .iter()
        .flat_map(|&a| pts.iter().map(move |&b| (a, b)))
        .map(|(a, b)| (a, b, logpost(a, b)))
        .collect();
    let top = vals.iter().map(|v| v.2).fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut ma, mut mb, mut saa) = (0.0, 0.0, 0.0, 0.0);
    for (a, b, l) in &vals {
        let w = (l - top).exp();
        z += w;
        ma += w * a;
        mb += w * b;
        saa += w * a * a;
    }
    let (ma, mb) = (ma / z, mb / z);
    let sa = (saa / z - ma * ma).sqrt();
    assert!((o.mean[0] - ma).abs() < 1e-4, "{} vs {ma}", o.mean[0]);
    assert!((o.mean[1] - mb).abs() < 1e-4, "{} vs {mb}", o.mean[1]);
    assert!((o.std[0] - sa).abs() < 1e-4, "{} vs {sa}", o.std[0]);
}

#[test]
fn grid_oracle_rejects_more_than_two_parameters() {
    let (spec, data) = grid_case();
    let wide = Dataset::new(data.y.clone(), vec![Mat::zeros(40, 2), data.blocks[1].clone()]).unwrap();
    assert!(matches!(logistic_grid(&spec, &wide, 51), Err(Error::Config(_))));
    let with_b = spec.clone().with_learned_intercept();
    assert!(matches!(logistic_grid(&with_b, &wide, 51), Err(Error::Config(_))));
}

#[test]
fn oracle_report_is_tagged_by_task() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = parse(&configs_dir().join("oracle/logistic_grid.toml"));
    c.oracle.grid_points = 51;
    c.output_dir = Some(tmp.path().to_path_buf());
    let r = oracle_experiment(&c, true).unwrap();
    assert!(matches!(r, OracleReport::Grid(_)));
    let json = fs::read_to_string(tmp.path().join("oracle.json")).unwrap();
    assert!(json.contains("\"task\": \"grid\""), "{json}");
}

fn vi_fit(dir: &Path) -> ExperimentConfig {
    let mut c = base();
    c.model = ModelSpec::new(Family::LinearGaussian, Formulation::Augmented, Some(0.5));
    c.model.sigma = vfl_core::models::SharedParam::Learned {
        prior: vfl_core::models::ScalarPrior::HalfNormal { scale: 1.0 },
        init: 1.0,
    };
    c.data = DataSource::Generate {
        generator: GeneratorSpec {
            family: Family::LinearGaussian,
            n: 50,
            block_sizes: vec![2, 1],
            seed: 7,
            ..Default::default()
        },
    };
    c.iterations = 200;
    c.optimizer.lr = 0.02;
    c.output_dir = Some(dir.to_path_buf());
    fit_experiment(&c).unwrap();
    c
}

#[test]
fn density_export_matches_the_fitted_factor() {
    let tmp = tempfile::tempdir().unwrap();
    vi_fit(tmp.path());
    let (meta, saved) = load_fit(tmp.path()).unwrap();
    let SavedFit::Vi { clients, shared } = saved else { panic!() };
    let truth = meta.data.truth.clone().unwrap();
    let (m, s) = (clients[0].theta.mean[1], clients[0].theta.marginal_std()[1]);
    let e = export_density(tmp.path(), "beta_0_1", 10_000, 5).unwrap();
    assert_eq!(e.draws.len(), 10_000);
    let mean = e.draws.iter().sum::<f64>() / 1e4;
    assert!((mean - m).abs() < 3.0 * s / 100.0, "{mean} vs {m} (s {s})");
    assert_eq!(e.truth, Some(truth.theta[0][1]));
    assert_eq!(e, export_density(tmp.path(), "beta_0_1", 10_000, 5).unwrap());
    assert_ne!(e.draws, export_density(tmp.path(), "beta_0_1", 10_000, 6).unwrap().draws);

    let sig = export_density(tmp.path(), "sigma", 10_000, 0).unwrap();
    assert!(sig.draws.iter().all(|v| *v > 0.0));
    assert_eq!(sig.truth, truth.sigma);
    let vfl_core::variational::SharedSlot::Learned { factor, .. } = &shared.log_sigma else { panic!() };
    let logs: Vec<f64> = sig.draws.iter().map(|v| v.ln()).collect();
    let lm = logs.iter().sum::<f64>() / 1e4;
    assert!((lm - factor.mean).abs() < 3.0 * factor.scale() / 100.0);

    let path = write_density(tmp.path(), &e).unwrap();
    let text = fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().next(), Some("value,truth"));
    assert_eq!(text.lines().count(), 10_001);

    assert!(matches!(export_density(tmp.path(), "beta_9_9", 10, 0), Err(Error::Config(_))));
    assert!(matches!(export_density(tmp.path(), "intercept", 10, 0), Err(Error::Config(_))));
}

#[test]
fn multilevel_export_covers_means_and_levels() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = parse(&configs_dir().join("multilevel/poisson_multilevel_augmented_amortized_rho1.0.toml"));
    c.iterations = 3;
    c.output_dir = Some(tmp.path().to_path_buf());
    fit_experiment(&c).unwrap();
    for p in ["mu_0_0_level0", "beta_0_0_level0"] {
        let e = export_density(tmp.path(), p, 100, 0).unwrap();
        assert!(e.truth.is_some(), "{p}");
    }
}

#[test]
fn density_export_needs_a_variational_fit() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = parse(&configs_dir().join("soul/linear_toy.toml"));
    c.iterations = 3;
    c.output_dir = Some(tmp.path().to_path_buf());
    fit_experiment(&c).unwrap();
    let e = export_density(tmp.path(), "beta_0_0", 10, 0).unwrap_err();
    assert_eq!(exit_code(&e), 2);
}

#[test]
fn fit_outputs_have_the_documented_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let c = vi_fit(tmp.path());
    let trace = fs::read_to_string(tmp.path().join("elbo_trace.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("iteration,l0,local,total"));
    assert_eq!(trace.lines().count(), 201);
    for line in trace.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        assert!((v[1] + v[2] - v[3]).abs() < 1e-9 * v[3].abs().max(1.0), "{line}");
    }
    let samples = fs::read_to_string(tmp.path().join("samples.csv")).unwrap();
    assert_eq!(samples.lines().next(), Some("beta_0_0,beta_0_1,beta_1_0,intercept,sigma"));
    assert_eq!(samples.lines().count(), c.output.samples + 1);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("run_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["schema_version"], 1);
    assert_eq!(meta["seed"], 0);
    assert!(meta["wall_seconds"].as_f64().is_some());
    assert!(meta["final_elbo"].as_f64().is_some());
}

#[test]
fn federated_fit_counts_messages() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = base();
    c.algorithm = Algorithm::Alg1;
    c.iterations = 10;
    c.output_dir = Some(tmp.path().to_path_buf());
    let s = fit_experiment(&c).unwrap();
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(s.dir.join("run_meta.json")).unwrap()).unwrap();
    assert!(meta["counters"].is_object(), "{}", meta["counters"]);
    assert!(!meta["counters"].as_object().unwrap().is_empty());
}

#[test]
fn point_estimate_baseline_raises_the_likelihood() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = parse(&configs_dir().join("splitnn/splitnn_heart_point_estimate.toml"));
    c.data = DataSource::Table {
        path: None,
        schema: vfl_core::data::heart_schema(),
        fallback_seed: 0,
    };
    c.iterations = 300;
    c.optimizer.lr = 0.01;
    c.output_dir = Some(tmp.path().to_path_buf());
    let s = fit_experiment(&c).unwrap();
    let vfl_core::experiments::Outcome::Point(p) = &s.outcome else { panic!() };
    let (first, last) = (p.trace[0].1, p.trace.last().unwrap().1);
    assert!(last > first + 10.0, "{first} -> {last}");
    assert!(tmp.path().join("point_fit.json").exists());
}
