//! The six commands. Each creates a run directory, fills it and finishes it
//! with a manifest; on error the directory is left without one.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use nrdm::autodiff::{Tape, Var};
use nrdm::data::{eval_generated, sample_dataset, samples_to_csv, MetricReport, Reference, ScoreSource};
use nrdm::dynamics::{sde_vs_pfode_marginal_check, Schedule, ScoreOracle};
use nrdm::residual::{ModelConfig, StackModel, Variant};
use nrdm::rng::Seed;
use nrdm::sensitivity::{sensitivity_report, SensitivityReport};
use nrdm::training::{
    eval_loss, finetune_gates, load_checkpoint, log_to_csv, mse_tape, noisy_batch, save_checkpoint, train_score_model,
    Checkpoint, Objective, ScoreTarget, TrainConfig, TrainData, TrainOutcome,
};
use nrdm::Tensor;
use rayon::prelude::*;

use crate::config::{RunConfig, Series, DEFAULT_DATA_SIZE};
use crate::run::{RunDir, MANIFEST};
use crate::svg;

/// Sub-seeds of the run seed, one per purpose.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const PROBE: u64 = 4;
    pub const FINETUNE: u64 = 5;
    pub const PFODE: u64 = 6;
    pub const LOSS: u64 = 7;
    pub const DATA: u64 = 8;
}

/// Samples used for the fixed-batch loss in sweep summaries.
pub const EVAL_LOSS_SAMPLES: usize = 4096;

/// Training data owned for the duration of a command.
pub struct DataSource {
    oracle: Option<ScoreOracle>,
    samples: Option<(Tensor, Vec<usize>)>,
}

impl DataSource {
    pub fn new(cfg: &RunConfig) -> Result<DataSource> {
        let oracle = cfg.data.spec.oracle();
        let samples = match (cfg.data.samples, &oracle) {
            (None, Some(_)) => None,
            (size, _) => {
                let n = size.unwrap_or(DEFAULT_DATA_SIZE);
                Some(sample_dataset(&cfg.data.spec, n, Seed(cfg.seed).split(stream::DATA))?)
            }
        };
        let analytic = cfg.train.target == ScoreTarget::AnalyticOracle && cfg.train.objective != Objective::EpsPrediction;
        if analytic && samples.is_some() {
            bail!(
                "train.target = \"analytic-oracle\" needs fresh draws from a gaussian-mixture family without data.samples; \
                 set train.target = \"denoising-estimate\""
            );
        }
        Ok(DataSource { oracle, samples })
    }

    pub fn train_data(&self) -> TrainData<'_> {
        match (&self.samples, &self.oracle) {
            (Some((x, labels)), _) => TrainData::Samples { x, labels: Some(labels) },
            (None, Some(o)) => TrainData::Oracle(o),
            (None, None) => unreachable!("DataSource::new always holds samples or an oracle"),
        }
    }
}

fn check_width(model: &ModelConfig, cfg: &RunConfig) -> Result<()> {
    let dim = cfg.data.spec.dim();
    if model.width != dim {
        bail!("model width {} does not match data dimension {dim}", model.width);
    }
    Ok(())
}

fn train_model(
    model_cfg: ModelConfig,
    cfg: &RunConfig,
    data: &DataSource,
    seed: Seed,
) -> Result<(StackModel, TrainOutcome)> {
    let mut m = StackModel::new(model_cfg, seed.split(stream::INIT))?;
    let out = train_score_model(&mut m, &cfg.train, &cfg.schedule_or_default(), data.train_data(), seed.split(stream::TRAIN))?;
    Ok((m, out))
}

/// Score-matching loss (or epsilon loss for noise-prediction runs) on a fixed
/// batch drawn from `seed`, without the gate regularizer.
pub fn fixed_batch_loss(m: &StackModel, cfg: &RunConfig, data: &DataSource, seed: Seed) -> Result<f64> {
    let objective = match cfg.train.objective {
        Objective::EpsPrediction => Objective::EpsPrediction,
        _ => Objective::ScoreMatching,
    };
    let tc = TrainConfig {
        objective,
        ..cfg.train.clone()
    };
    let ev = eval_loss(m, &tc, &cfg.schedule_or_default(), data.train_data(), EVAL_LOSS_SAMPLES, seed.split(stream::LOSS))?;
    Ok(ev.loss)
}

fn checkpoint_path(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    cfg.eval
        .checkpoint
        .clone()
        .ok_or_else(|| anyhow!("{command} needs a checkpoint: pass --checkpoint or set eval.checkpoint"))
}

fn load_model(path: &Path, use_ema: bool) -> Result<StackModel> {
    let ck = load_checkpoint(path)?;
    Ok(if use_ema { ck.to_ema_model()? } else { ck.to_model()? })
}

fn f(v: f64) -> String {
    format!("{v:e}")
}

/// Writes a CSV (and its plot) under the run directory without going
/// through `RunDir`, for use inside parallel sweeps. Returns the relative
/// paths written.
fn emit_csv(root: &Path, rel: &Path, text: &str) -> Result<Vec<PathBuf>> {
    std::fs::write(root.join(rel), text).with_context(|| format!("cannot write {}", rel.display()))?;
    let mut written = vec![rel.to_path_buf()];
    let name = rel.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    if let Some(spec) = svg::plot_for(name) {
        let svg_rel = rel.with_file_name(svg::svg_name(name));
        std::fs::write(root.join(&svg_rel), svg::render(text, &spec)?)?;
        written.push(svg_rel);
    }
    Ok(written)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .context("cannot start worker pool")
}

pub fn train(cfg: &RunConfig, root: &Path) -> Result<PathBuf> {
    let data = DataSource::new(cfg)?;
    let mut run = RunDir::create(root, "train", cfg.seed)?;
    let (m, out) = train_model(cfg.model.clone(), cfg, &data, Seed(cfg.seed))?;
    let ck = Checkpoint::from_model(&m, Some(out.optim), Some(out.ema), cfg.seed, cfg.train.steps as u64);
    save_checkpoint(&run.path.join("checkpoint.nrdm"), &ck)?;
    run.track("checkpoint.nrdm");
    run.write_csv("train_log.csv", &log_to_csv(&out.log))?;
    if !out.reports.is_empty() {
        let mut csv = format!("series,{}\n", SensitivityReport::CSV_HEADER);
        for r in &out.reports {
            for line in r.csv_rows().lines() {
                csv.push_str(&format!("step{},{line}\n", r.step));
            }
        }
        run.write_csv("sensitivity.csv", &csv)?;
    }
    if let Some(last) = out.log.last() {
        println!("final loss {:.6} (score {:.6}, gate term {:.6})", last.loss, last.score_term, last.gamma_term);
    }
    run.finish(cfg.seed, cfg)
}

pub fn sample(cfg: &RunConfig, root: &Path) -> Result<PathBuf> {
    let path = checkpoint_path(cfg, "sample")?;
    let m = load_model(&path, cfg.eval.use_ema)?;
    check_width(m.config(), cfg)?;
    let mut run = RunDir::create(root, "sample", cfg.seed)?;
    let (report, generated) = eval_generated(
        ScoreSource::Model(&m),
        &cfg.schedule_or_default(),
        Reference::Dataset(&cfg.data.spec),
        cfg.eval.n,
        &cfg.eval.sampler(),
        Seed(cfg.seed).split(stream::EVAL),
    )?;
    let k = m.config().num_classes;
    let labels: Option<Vec<usize>> = (k > 0).then(|| (0..cfg.eval.n).map(|i| i % k).collect());
    run.write_csv("samples.csv", &samples_to_csv(&generated, labels.as_deref()))?;
    run.write("metrics.csv", format!("{}\n{}\n", MetricReport::CSV_HEADER, report.csv_row()))?;
    println!(
        "sliced_wasserstein {:.5} mmd {:.5} histogram_kl {:.5}",
        report.sliced_wasserstein, report.mmd, report.histogram_kl
    );
    run.finish(cfg.seed, cfg)
}

/// Sets every gate to `(1, 0)`, which reduces all five variants to the plain
/// residual update.
pub fn ungate(m: &mut StackModel) {
    for u in 0..m.num_units() {
        m.set_gates(u, 1.0, 0.0);
    }
}

pub fn sensitivity(cfg: &RunConfig, root: &Path) -> Result<PathBuf> {
    let data = DataSource::new(cfg)?;
    let base = Seed(cfg.seed);
    let model = match &cfg.eval.checkpoint {
        Some(p) => load_model(p, cfg.eval.use_ema)?,
        None => StackModel::new(cfg.model.clone(), base.split(stream::INIT))?,
    };
    check_width(model.config(), cfg)?;
    let schedule = cfg.schedule_or_default();
    let mut run = RunDir::create(root, "sensitivity", cfg.seed)?;
    let batch = noisy_batch(&model, &cfg.train, &schedule, &data.train_data(), cfg.report.batch, &mut base.stream(stream::PROBE))?;
    let target = batch.target.clone();
    let loss = move |t: &mut Tape, out: Var| {
        let tv = t.constant(target.clone());
        mse_tape(t, out, tv)
    };
    let mut csv = format!("series,{}\n", SensitivityReport::CSV_HEADER);
    for &series in &cfg.report.series {
        let mut m = model.clone();
        let mut step = 0;
        match series {
            Series::Gated => {}
            Series::Ungated => ungate(&mut m),
            Series::Finetuned => {
                let tc = TrainConfig {
                    steps: cfg.report.finetune_steps,
                    ..cfg.train.clone()
                };
                finetune_gates(&mut m, &tc, &schedule, data.train_data(), base.split(stream::FINETUNE))?;
                step = cfg.report.finetune_steps;
            }
        }
        let r = sensitivity_report(&m, &batch.zt, &batch.ts, batch.labels.as_deref(), &loss, step)?;
        for line in r.csv_rows().lines() {
            csv.push_str(&format!("{},{line}\n", series.name()));
        }
        println!("{:<10} min normalized sensitivity {:.5}", series.name(), r.min_normalized());
    }
    run.write_csv("sensitivity.csv", &csv)?;
    run.finish(cfg.seed, cfg)
}

/// One row of the variant comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantRow {
    pub variant: Variant,
    pub seed: u64,
    pub steps: usize,
    pub final_loss: f64,
    pub sw: f64,
    pub mmd: f64,
}

pub const VARIANTS_HEADER: &str = "variant,seed,steps,final_loss,sw,mmd";

pub fn variants(cfg: &RunConfig, root: &Path, jobs: usize) -> Result<PathBuf> {
    let data = DataSource::new(cfg)?;
    let mut run = RunDir::create(root, "variants", cfg.seed)?;
    let grid: Vec<(Variant, u64)> = cfg
        .report
        .variants
        .iter()
        .flat_map(|&v| (0..cfg.report.seeds as u64).map(move |i| (v, cfg.seed + i)))
        .collect();
    let run_path = run.path.clone();
    let schedule = cfg.schedule_or_default();
    let results = pool(jobs)?.install(|| {
        grid.par_iter()
            .map(|&(variant, seed)| -> Result<(VariantRow, Vec<PathBuf>)> {
                let dir = PathBuf::from(format!("{variant}-seed{seed}"));
                std::fs::create_dir_all(run_path.join(&dir))?;
                let mc = ModelConfig {
                    variant,
                    ..cfg.model.clone()
                };
                let (m, out) = train_model(mc, cfg, &data, Seed(seed))
                    .with_context(|| format!("variant {variant}, seed {seed}"))?;
                let final_loss = fixed_batch_loss(&m, cfg, &data, Seed(cfg.seed))?;
                let (report, _) = eval_generated(
                    ScoreSource::Model(&m),
                    &schedule,
                    Reference::Dataset(&cfg.data.spec),
                    cfg.eval.n,
                    &cfg.eval.sampler(),
                    Seed(seed).split(stream::EVAL),
                )?;
                let ck = dir.join("checkpoint.nrdm");
                save_checkpoint(&run_path.join(&ck), &Checkpoint::from_model(&m, None, None, seed, cfg.train.steps as u64))?;
                let mut files = vec![ck];
                files.extend(emit_csv(&run_path, &dir.join("train_log.csv"), &log_to_csv(&out.log))?);
                let row = VariantRow {
                    variant,
                    seed,
                    steps: cfg.train.steps,
                    final_loss,
                    sw: report.sliced_wasserstein,
                    mmd: report.mmd,
                };
                Ok((row, files))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut csv = format!("{VARIANTS_HEADER}\n");
    for (row, files) in &results {
        for p in files {
            run.track(p);
        }
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.variant,
            row.seed,
            row.steps,
            f(row.final_loss),
            f(row.sw),
            f(row.mmd)
        ));
    }
    for &v in &cfg.report.variants {
        let rows: Vec<&VariantRow> = results.iter().map(|(r, _)| r).filter(|r| r.variant == v).collect();
        let mean = |g: fn(&VariantRow) -> f64| rows.iter().map(|r| g(r)).sum::<f64>() / rows.len().max(1) as f64;
        println!("{v}: mean final_loss {:.5} sw {:.5} mmd {:.5}", mean(|r| r.final_loss), mean(|r| r.sw), mean(|r| r.mmd));
    }
    run.write_csv("variants.csv", &csv)?;
    run.finish(cfg.seed, cfg)
}

pub fn pfode_check(cfg: &RunConfig, root: &Path) -> Result<PathBuf> {
    let schedule: &Schedule = cfg
        .schedule
        .as_ref()
        .ok_or_else(|| anyhow!("pfode-check needs a [schedule] section"))?;
    let oracle = cfg
        .data
        .spec
        .oracle()
        .ok_or_else(|| anyhow!("pfode-check needs a data family with an exact score (gaussian-mixture)"))?;
    let mut run = RunDir::create(root, "pfode-check", cfg.seed)?;
    let k = cfg.report.pfode_points;
    let grid: Vec<f64> = (1..=k).map(|i| i as f64 / k as f64).collect();
    let r = sde_vs_pfode_marginal_check(
        &oracle,
        schedule,
        cfg.report.pfode_n,
        &grid,
        cfg.report.pfode_steps,
        cfg.report.pfode_solver,
        Seed(cfg.seed).split(stream::PFODE),
    )?;
    run.write_csv("pfode_check.csv", &r.to_csv())?;
    println!("max mean discrepancy {:.5}, max covariance discrepancy {:.5}", r.max_mean_diff(), r.max_cov_diff());
    run.finish(cfg.seed, cfg)
}

/// One row of the depth sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthRow {
    pub depth: usize,
    /// `gated` (configured variant) or `ungated` (v3).
    pub mode: &'static str,
    pub variant: Variant,
    pub steps: usize,
    /// Mean training loss over the last 100 steps (NaN without steps).
    pub train_loss: f64,
    pub eval_loss: f64,
}

pub const DEPTH_HEADER: &str = "depth,mode,variant,steps,train_loss,eval_loss";

pub fn depth_scaling(cfg: &RunConfig, root: &Path, jobs: usize) -> Result<PathBuf> {
    let data = DataSource::new(cfg)?;
    let mut run = RunDir::create(root, "depth-scaling", cfg.seed)?;
    let grid: Vec<(usize, &'static str, Variant)> = cfg
        .report
        .depths
        .iter()
        .flat_map(|&d| [(d, "gated", cfg.model.variant), (d, "ungated", Variant::V3)])
        .collect();
    let run_path = run.path.clone();
    let results = pool(jobs)?.install(|| {
        grid.par_iter()
            .map(|&(depth, mode, variant)| -> Result<(DepthRow, Vec<PathBuf>)> {
                let dir = PathBuf::from(format!("L{depth}-{mode}"));
                std::fs::create_dir_all(run_path.join(&dir))?;
                let mc = ModelConfig {
                    depth,
                    variant,
                    ..cfg.model.clone()
                };
                let (m, out) = train_model(mc, cfg, &data, Seed(cfg.seed)).with_context(|| format!("depth {depth}, {mode}"))?;
                let tail = &out.log[out.log.len().saturating_sub(100)..];
                let train_loss = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64;
                let eval_loss = fixed_batch_loss(&m, cfg, &data, Seed(cfg.seed))?;
                let files = emit_csv(&run_path, &dir.join("train_log.csv"), &log_to_csv(&out.log))?;
                Ok((
                    DepthRow {
                        depth,
                        mode,
                        variant,
                        steps: cfg.train.steps,
                        train_loss,
                        eval_loss,
                    },
                    files,
                ))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut csv = format!("{DEPTH_HEADER}\n");
    for (r, files) in &results {
        for p in files {
            run.track(p);
        }
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.depth,
            r.mode,
            r.variant,
            r.steps,
            f(r.train_loss),
            f(r.eval_loss)
        ));
        println!("L={:<4} {:<8} eval loss {:.5}", r.depth, r.mode, r.eval_loss);
    }
    run.write_csv("depth_scaling.csv", &csv)?;
    run.finish(cfg.seed, cfg)
}

/// True when `dir` holds a finished run.
pub fn is_finished(dir: &Path) -> bool {
    dir.join(MANIFEST).is_file()
}
