use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nrdm::residual::StackModel;
use nrdm::rng::Seed;
use nrdm::training::load_checkpoint;
use nrdm_cli::commands::stream;
use nrdm_cli::config::RunConfig;
use nrdm_cli::run::sha256_hex;
use nrdm_cli::svg;

const TINY: &str = r#"
seed = 11

[model]
depth = 3
hidden = 12
embed_dim = 8

[train]
steps = 20
batch_size = 16

[eval]
n = 200
steps = 10

[report]
depths = [2, 3]
seeds = 2
batch = 32
finetune_steps = 5
pfode_n = 400
pfode_steps = 50
pfode_points = 4

[schedule]
kind = "vp"
beta_min = 0.1
beta_max = 20.0
"#;

const DIVERGENT: &str = r#"
[model]
depth = 3
hidden = 8
embed_dim = 8

[data]
family = "gaussian-mixture"
means = [[-1.5, 0.0], [1.5, 0.0]]
variance = 1e-4

[train]
lr = 10.0
t_min = 0.0
steps = 200
batch_size = 16

[report]
depths = [3]
seeds = 1
variants = ["v0"]
"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Sandbox {
        Sandbox {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn config(&self, name: &str, text: &str) -> PathBuf {
        let p = self.dir.path().join(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("runs")
    }

    fn nrdm(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_nrdm"))
            .args(args)
            .arg("--out")
            .arg(self.out())
            .output()
            .unwrap()
    }

    /// Runs a command that must succeed and returns its run directory.
    fn ok(&self, args: &[&str]) -> PathBuf {
        let out = self.nrdm(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        let stdout = String::from_utf8(out.stdout).unwrap();
        PathBuf::from(stdout.lines().last().unwrap())
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn column(path: &Path, name: &str) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == name).unwrap();
    csv_rows(path).into_iter().map(|r| r[i].clone()).collect()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

/// Every file listed in the manifest exists with the recorded hash and every
/// SVG re-renders from its CSV.
fn check_run(dir: &Path) {
    let m = manifest(dir);
    for f in m["files"].as_array().unwrap() {
        let rel = f["path"].as_str().unwrap();
        let bytes = fs::read(dir.join(rel)).unwrap();
        assert_eq!(f["sha256"].as_str().unwrap(), sha256_hex(&bytes), "{rel}");
        if let Some(csv_rel) = rel.strip_suffix(".svg") {
            let csv_name = format!("{csv_rel}.csv");
            let text = fs::read_to_string(dir.join(&csv_name)).unwrap();
            let name = Path::new(&csv_name).file_name().unwrap().to_str().unwrap().to_string();
            let spec = svg::plot_for(&name).unwrap();
            assert_eq!(svg::render(&text, &spec).unwrap().as_bytes(), &bytes[..], "{rel}");
        }
    }
}

#[test]
fn missing_config_is_a_usage_error() {
    let sb = Sandbox::new();
    let out = sb.nrdm(&["train", "--config", "/nonexistent/run.toml"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/run.toml"));
}

#[test]
fn typos_and_bad_values_are_usage_errors() {
    let sb = Sandbox::new();
    let cfg = sb.config("run.toml", TINY);
    let cfg = cfg.to_str().unwrap();
    for set in ["train.stpes=3", "model.variant=v9", "model.depth=0", "report.depths=[0]"] {
        assert_eq!(code(&sb.nrdm(&["train", "--config", cfg, "--set", set])), 2, "{set}");
    }
    assert_eq!(code(&sb.nrdm(&["train", "--bogus"])), 2);
}

#[test]
fn zero_steps_checkpoint_equals_initialization() {
    let sb = Sandbox::new();
    let cfg_path = sb.config("run.toml", TINY);
    let dir = sb.ok(&["train", "--config", cfg_path.to_str().unwrap(), "--set", "train.steps=0"]);
    let cfg = RunConfig::load(Some(&cfg_path), &[]).unwrap();
    let init = StackModel::new(cfg.model.clone(), Seed(cfg.seed).split(stream::INIT)).unwrap();
    let ck = load_checkpoint(&dir.join("checkpoint.nrdm")).unwrap();
    assert_eq!(ck.step, 0);
    assert_eq!(ck.params.len(), init.params().len());
    for (a, b) in ck.params.iter().zip(init.params()) {
        let bits = |t: &nrdm::tensor::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(fs::read_to_string(dir.join("train_log.csv")).unwrap().lines().count(), 1);
    check_run(&dir);
}

#[test]
fn training_reruns_are_byte_identical() {
    let sb = Sandbox::new();
    let cfg = sb.config("run.toml", TINY);
    let args = ["train", "--config", cfg.to_str().unwrap(), "--set", "train.report_every=10"];
    let a = sb.ok(&args);
    let b = sb.ok(&args);
    assert_ne!(a, b);
    for f in ["train_log.csv", "checkpoint.nrdm", "sensitivity.csv", "train_log.svg"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(column(&a.join("sensitivity.csv"), "series")[0], "step0");
    check_run(&a);
    let m = manifest(&a);
    assert_eq!(m["seed"], 11);
    assert_eq!(m["command"], "train");
    assert_eq!(m["config"]["train"]["steps"], 20);
    assert!(m["started"].as_str().unwrap() <= m["finished"].as_str().unwrap());
}

#[test]
fn seed_flag_overrides_the_file() {
    let sb = Sandbox::new();
    let cfg = sb.config("run.toml", TINY);
    let dir = sb.ok(&["train", "--config", cfg.to_str().unwrap(), "--seed", "99", "--set", "train.steps=1"]);
    assert!(dir.file_name().unwrap().to_str().unwrap().ends_with("seed99"));
    assert_eq!(manifest(&dir)["seed"], 99);
}

#[test]
fn sampling_writes_the_requested_rows() {
    let sb = Sandbox::new();
    let cfg = sb.config("run.toml", TINY);
    let cfg = cfg.to_str().unwrap();
    let trained = sb.ok(&["train", "--config", cfg]);
    let ck = trained.join("checkpoint.nrdm");
    let ck = ck.to_str().unwrap();
    let args = ["sample", "--config", cfg, "--checkpoint", ck, "--n", "1000", "--solver", "euler", "--steps", "200"];
    let a = sb.ok(&args);
    assert_eq!(csv_rows(&a.join("samples.csv")).len(), 1000);
    assert_eq!(csv_rows(&a.join("metrics.csv")).len(), 1);
    let b = sb.ok(&args);
    assert_eq!(fs::read(a.join("samples.csv")).unwrap(), fs::read(b.join("samples.csv")).unwrap());
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    check_run(&a);

    assert_eq!(code(&sb.nrdm(&["sample", "--config", cfg, "--checkpoint", ck, "--solver", "rk4"])), 2);
    assert_eq!(code(&sb.nrdm(&["sample", "--config", cfg])), 2);
    let broken = trained.join("broken.nrdm");
    fs::write(&broken, b"NRDM1 truncated").unwrap();
    assert_eq!(code(&sb.nrdm(&["sample", "--config", cfg, "--checkpoint", broken.to_str().unwrap()])), 2);
}

#[test]
fn sensitivity_profiles() {
    let sb = Sandbox::new();
    // closed gates: every state is the input, so every depth sees the same
    // sensitivity
    let cfg = sb.config("id.toml", TINY);
    let dir = sb.ok(&[
        "sensitivity",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "model.alpha_init=0.0",
        "--set",
        "report.series=[\"gated\"]",
    ]);
    let norm: Vec<f64> = column(&dir.join("sensitivity.csv"), "normalized").iter().map(|v| v.parse().unwrap()).collect();
    assert_eq!(norm.len(), 3);
    assert!(norm.iter().all(|&v| v == 1.0), "{norm:?}");

    // contractive linear stack without gating: |dL/dz_i| grows towards the
    // output by the factor |1 + a| per unit
    let contractive = r#"
[model]
depth = 6
mapper = "linear-scalar"
linear_init = -0.25
time_cond = "none"

[report]
series = ["ungated", "gated", "finetuned"]
finetune_steps = 10
batch = 64
"#;
    let cfg = sb.config("lin.toml", contractive);
    let dir = sb.ok(&["sensitivity", "--config", cfg.to_str().unwrap()]);
    let path = dir.join("sensitivity.csv");
    let series = column(&path, "series");
    let norm: Vec<f64> = column(&path, "normalized").iter().map(|v| v.parse().unwrap()).collect();
    let ungated: Vec<f64> = norm.iter().zip(&series).filter(|(_, s)| *s == "ungated").map(|(v, _)| *v).collect();
    assert_eq!(ungated.len(), 6);
    assert!(ungated.windows(2).all(|w| w[0] < w[1]), "{ungated:?}");
    for (i, v) in ungated.iter().enumerate() {
        assert!((v - 0.75f64.powi(5 - i as i32)).abs() < 1e-12, "{ungated:?}");
    }
    for s in ["gated", "finetuned"] {
        assert_eq!(series.iter().filter(|x| *x == s).count(), 6);
    }
    check_run(&dir);
}

#[test]
fn variant_table_has_one_row_per_run() {
    let sb = Sandbox::new();
    let cfg = sb.config("run.toml", TINY);
    let cfg = cfg.to_str().unwrap();
    let a = sb.ok(&["variants", "--config", cfg]);
    let path = a.join("variants.csv");
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), "variant,seed,steps,final_loss,sw,mmd");
    let rows = csv_rows(&path);
    assert_eq!(rows.len(), 10);
    assert_eq!(column(&path, "variant"), ["v0", "v0", "v1", "v1", "v2", "v2", "v3", "v3", "v4", "v4"]);
    assert_eq!(column(&path, "seed"), ["11", "12", "11", "12", "11", "12", "11", "12", "11", "12"]);
    assert!(a.join("v2-seed12").join("checkpoint.nrdm").is_file());
    check_run(&a);
    // the worker count does not change any output
    let b = sb.ok(&["variants", "--config", cfg, "--jobs", "3"]);
    assert_eq!(text, fs::read_to_string(b.join("variants.csv")).unwrap());
    assert_eq!(
        fs::read(a.join("v4-seed11/checkpoint.nrdm")).unwrap(),
        fs::read(b.join("v4-seed11/checkpoint.nrdm")).unwrap()
    );
}

#[test]
fn failed_runs_leave_no_manifest() {
    let sb = Sandbox::new();
    let cfg = sb.config("div.toml", DIVERGENT);
    let cfg = cfg.to_str().unwrap();
    for cmd in ["train", "variants", "depth-scaling"] {
        let out = sb.nrdm(&[cmd, "--config", cfg]);
        assert_eq!(code(&out), 3, "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let mut finished = 0;
    for entry in fs::read_dir(sb.out()).unwrap() {
        let p = entry.unwrap().path();
        assert!(!p.join("manifest.json.tmp").exists());
        finished += p.join("manifest.json").exists() as usize;
    }
    assert_eq!(finished, 0);
}

#[test]
fn pfode_check_commands() {
    let sb = Sandbox::new();
    let noiseless = r#"
[schedule]
kind = "ou"
theta = 1.0
sigma = 0.0

[report]
pfode_n = 300
pfode_steps = 100
pfode_points = 5
pfode_solver = "euler"
"#;
    let cfg = sb.config("zero.toml", noiseless);
    let dir = sb.ok(&["pfode-check", "--config", cfg.to_str().unwrap()]);
    let path = dir.join("pfode_check.csv");
    let tol: Vec<f64> = column(&path, "tolerance").iter().map(|v| v.parse().unwrap()).collect();
    for col in ["mean_diff", "cov_diff"] {
        for (v, t) in column(&path, col).iter().zip(&tol) {
            assert!(v.parse::<f64>().unwrap() <= *t + 1e-12);
        }
    }
    check_run(&dir);

    let gaussian = r#"
[schedule]
kind = "ou"
theta = 1.0
sigma = 1.4142135623730951

[data]
family = "gaussian-mixture"
means = [[1.0, -0.5]]
variance = 0.5

[report]
pfode_n = 10000
pfode_steps = 250
pfode_points = 20
"#;
    let cfg = sb.config("ou.toml", gaussian);
    let dir = sb.ok(&["pfode-check", "--config", cfg.to_str().unwrap()]);
    let mean: Vec<f64> = column(&dir.join("pfode_check.csv"), "mean_diff").iter().map(|v| v.parse().unwrap()).collect();
    assert_eq!(mean.len(), 20);
    assert!(mean.iter().cloned().fold(0.0, f64::max) < 0.05);

    let cfg = sb.config("nosched.toml", "[report]\npfode_n = 10\n");
    let out = sb.nrdm(&["pfode-check", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("[schedule]"));
}

#[test]
fn depth_sweep_has_two_rows_per_depth() {
    let sb = Sandbox::new();
    let cfg = sb.config("run.toml", TINY);
    let cfg = cfg.to_str().unwrap();
    let dir = sb.ok(&["depth-scaling", "--config", cfg, "--depths", "8,16,32,64", "--set", "train.steps=2", "--set", "model.hidden=4"]);
    let path = dir.join("depth_scaling.csv");
    assert_eq!(column(&path, "depth"), ["8", "8", "16", "16", "32", "32", "64", "64"]);
    assert_eq!(column(&path, "mode"), ["gated", "ungated", "gated", "ungated", "gated", "ungated", "gated", "ungated"]);
    check_run(&dir);
    let dir = sb.ok(&["depth-scaling", "--config", cfg, "--depths", "4"]);
    assert_eq!(csv_rows(&dir.join("depth_scaling.csv")).len(), 2);
}

#[test]
fn output_root_comes_from_the_environment() {
    let sb = Sandbox::new();
    let root = sb.dir.path().join("elsewhere");
    let out = Command::new(env!("CARGO_BIN_EXE_nrdm"))
        .args(["train", "--set", "train.steps=0", "--set", "model.depth=2"])
        .env("NRDM_OUT_ROOT", &root)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_dir(&root).unwrap().count(), 1);
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            RunConfig::load(Some(&p), &[]).unwrap_or_else(|e| panic!("{}: {e:#}", p.display()));
            n += 1;
        }
    }
    assert!(n > 0);
}

#[test]
fn quick_config_runs_end_to_end() {
    let sb = Sandbox::new();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quick.toml");
    let cfg = cfg.to_str().unwrap();
    let dir = sb.ok(&["train", "--config", cfg, "--set", "train.steps=40"]);
    let ck = dir.join("checkpoint.nrdm");
    let dir = sb.ok(&["sample", "--config", cfg, "--checkpoint", ck.to_str().unwrap(), "--n", "200"]);
    check_run(&dir);
}

#[test]
fn guide_config_example_loads() {
    let guide = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../book/src/cli.md")).unwrap();
    let block = guide.split("```toml\n").nth(1).unwrap().split("```").next().unwrap();
    let sb = Sandbox::new();
    let cfg = RunConfig::load(Some(&sb.config("guide.toml", block)), &[]).unwrap();
    assert_eq!(cfg.report.series.len(), 3);
}
