use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vfl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vfl"))
        .args(args)
        .current_dir(cwd)
        .env_remove("VFL_SEED")
        .env_remove("VFL_OUTPUT_DIR")
        .env_remove("VFL_HEART_CSV")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const LINEAR: &str = r#"
schema_version = 1
name = "cli_linear"
algorithm = "alg1"
iterations = 40

[model]
family = "linear-gaussian"
formulation = "augmented"
rho = 0.5
sigma = { mode = "fixed", value = 1.0 }

[data]
source = "generate"
generator = { family = "linear-gaussian", n = 30, block_sizes = [2, 1], seed = 2 }

[optimizer]
lr = 0.01
"#;

#[test]
fn generate_fit_evaluate_export() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let o = vfl(&["generate", "--family", "logistic", "--n", "60", "--blocks", "2,1", "--seed", "3", "--out", "data"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["features_0.csv", "features_1.csv", "response.csv", "meta.json"] {
        assert!(d.join("data").join(f).exists(), "{f}");
    }
    fs::write(
        d.join("fit.toml"),
        r#"
schema_version = 1
name = "cli_logistic"
algorithm = "monolithic"
iterations = 30

[model]
family = "logistic"
formulation = "power"
rho = 1.0

[data]
source = "directory"
path = "data"
"#,
    )
    .unwrap();
    let o = vfl(&["fit", "--config", "fit.toml"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = d.join("runs/cli_logistic");
    for f in ["elbo_trace.csv", "factors.bin", "samples.csv", "run_meta.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let o = vfl(&["evaluate", "--fit", "runs/cli_logistic", "--data", "data"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("accuracy"));
    assert!(run.join("eval_metrics.json").exists());

    let o = vfl(&["export-density", "--fit", "runs/cli_logistic", "--param", "beta_0_0", "--param", "beta_1_0", "--draws", "500"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(run.join("density_beta_0_0.csv")).unwrap();
    assert_eq!(text.lines().count(), 501);
    assert!(run.join("density_beta_1_0.csv").exists());

    let o = vfl(&["export-density", "--fit", "runs/cli_logistic", "--param", "gamma"], d);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("unknown parameter"), "{}", stderr(&o));
}

#[test]
fn iterations_flag_and_environment_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("c.toml"), LINEAR).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_vfl"))
        .args(["fit", "--config", "c.toml", "--iterations", "0"])
        .current_dir(d)
        .env("VFL_OUTPUT_DIR", d.join("out"))
        .env("VFL_SEED", "9")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let meta = fs::read_to_string(d.join("out/run_meta.json")).unwrap();
    assert!(meta.contains("\"seed\": 9"), "{meta}");
    assert!(meta.contains("\"iterations\": 0"));
    assert_eq!(fs::read_to_string(d.join("out/elbo_trace.csv")).unwrap().lines().count(), 1);

    let o = vfl(&["fit", "--config", "c.toml", "--output-dir", "flag"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(d.join("flag/run_meta.json").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let bad = LINEAR.replace("\"alg1\"", "\"alg2\"");
    fs::write(d.join("bad.toml"), bad).unwrap();
    let o = vfl(&["fit", "--config", "bad.toml"], d);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("alg2 fits the power-likelihood model"), "{}", stderr(&o));

    let o = vfl(&["fit", "--config", "missing.toml"], d);
    assert_eq!(code(&o), 2);

    let amortized_true = LINEAR
        .replace("\"augmented\"", "\"true\"")
        .replace("\"alg1\"", "\"monolithic\"")
        + "\n[variational]\nfamily = \"amortized\"\n";
    fs::write(d.join("at.toml"), amortized_true).unwrap();
    let o = vfl(&["fit", "--config", "at.toml"], d);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    fs::write(d.join("folds.toml"), format!("{LINEAR}\n[evaluate]\nfolds = 1\n")).unwrap();
    let o = vfl(&["evaluate", "--config", "folds.toml"], d);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn numerical_failure_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = LINEAR
        .replace("linear-gaussian", "poisson-multilevel")
        .replace("sigma = { mode = \"fixed\", value = 1.0 }", "prior = { kind = \"hierarchical\", mean_sd = 1.0, scale = 1.0 }")
        .replace("lr = 0.01", "lr = 1e6")
        .replace("iterations = 40", "iterations = 200");
    fs::write(d.join("c.toml"), cfg).unwrap();
    let o = vfl(&["fit", "--config", "c.toml"], d);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(d.join("runs/cli_linear/run_meta.json").exists());
}

#[test]
fn oracle_writes_json() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("c.toml"), LINEAR).unwrap();
    let o = vfl(&["oracle", "--config", "c.toml"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let json = fs::read_to_string(d.join("runs/cli_linear/oracle.json")).unwrap();
    assert!(json.contains("\"task\": \"linear\""));

    let poisson = LINEAR
        .replace("linear-gaussian", "poisson-multilevel")
        .replace("sigma = { mode = \"fixed\", value = 1.0 }", "prior = { kind = \"hierarchical\", mean_sd = 1.0, scale = 1.0 }");
    fs::write(d.join("p.toml"), poisson).unwrap();
    let o = vfl(&["oracle", "--config", "p.toml"], d);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("no oracle"), "{}", stderr(&o));
}

#[test]
fn cross_validation_writes_fold_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = r#"
schema_version = 1
name = "cv"
algorithm = "alg1"
iterations = 20

[model]
family = "logistic"
formulation = "augmented"
rho = 1.0

[data]
source = "generate"
generator = { family = "logistic", n = 40, block_sizes = [1, 1], seed = 1 }

[evaluate]
folds = 4
run_folds = 2
samples = 10
"#;
    fs::write(d.join("cv.toml"), cfg).unwrap();
    let o = vfl(&["evaluate", "--config", "cv.toml"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = fs::read_to_string(d.join("runs/cv/cv_folds.csv")).unwrap();
    assert_eq!(rows.lines().count(), 3);
}

#[test]
fn generate_from_a_spec_file() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("g.toml"), "family = \"poisson-multilevel\"\nn = 50\nblock_sizes = [2, 2]\nseed = 4\n").unwrap();
    let o = vfl(&["generate", "--spec", "g.toml", "--out", "pois"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let meta = fs::read_to_string(d.join("pois/meta.json")).unwrap();
    assert!(meta.contains("poisson-multilevel"));
    fs::write(d.join("bad.toml"), "family = \"logistic\"\nsamples = 3\n").unwrap();
    let o = vfl(&["generate", "--spec", "bad.toml", "--out", "x"], d);
    assert_eq!(code(&o), 2);
}
