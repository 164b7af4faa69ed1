//! Run configuration: a TOML file with `[model]`, `[schedule]`, `[data]`,
//! `[train]`, `[eval]` and `[report]` sections plus a top-level `seed`.
//!
//! Loading goes file -> `--set` overrides -> typed config, so overrides see
//! the same typo checks as the file. Relative paths inside the file are
//! resolved against the file's directory.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use nrdm::data::{DatasetSpec, SamplerConfig};
use nrdm::dynamics::{DiscreteSchedule, Schedule, Solver};
use nrdm::residual::{ModelConfig, Variant};
use nrdm::training::TrainConfig;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    /// Forward process. Commands other than `pfode-check` fall back to the
    /// default VP schedule when absent.
    pub schedule: Option<Schedule>,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub report: ReportConfig,
}

/// A dataset family plus how much of it to use.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataConfig {
    pub spec: DatasetSpec,
    /// Size of a fixed training set (`samples` in the file). `None` trains on
    /// fresh draws when the family has an exact score and on 10 000 fixed
    /// samples otherwise.
    pub samples: Option<usize>,
}

pub const DEFAULT_DATA_SIZE: usize = 10_000;

impl<'de> Deserialize<'de> for DataConfig {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let mut table = toml::Table::deserialize(d)?;
        let samples = match table.remove("samples") {
            None => None,
            Some(v) => Some(usize::try_from(v.as_integer().ok_or_else(|| D::Error::custom("data.samples must be an integer"))?).map_err(D::Error::custom)?),
        };
        let spec = if table.is_empty() {
            DatasetSpec::default()
        } else {
            DatasetSpec::deserialize(toml::Value::Table(table)).map_err(D::Error::custom)?
        };
        Ok(DataConfig { spec, samples })
    }
}

impl Serialize for DataConfig {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut v = serde_json::to_value(&self.spec).map_err(serde::ser::Error::custom)?;
        if let (Some(n), Some(map)) = (self.samples, v.as_object_mut()) {
            map.insert("samples".into(), n.into());
        }
        v.serialize(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Number of generated and reference samples.
    pub n: usize,
    pub solver: Solver,
    pub steps: usize,
    pub t_end: f64,
    /// Sample from the EMA weights instead of the raw weights.
    pub use_ema: bool,
    /// Checkpoint for `sample` and `sensitivity`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let s = SamplerConfig::default();
        EvalConfig {
            n: 2000,
            solver: s.solver,
            steps: s.steps,
            t_end: s.t_end,
            use_ema: false,
            checkpoint: None,
        }
    }
}

impl EvalConfig {
    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            solver: self.solver,
            steps: self.steps,
            t_end: self.t_end,
        }
    }
}

/// A trace in the `sensitivity` command output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Series {
    /// The model as configured or loaded.
    Gated,
    /// Same mapper weights with every gate set to `(1, 0)`.
    Ungated,
    /// The model after gate-only fine-tuning with the regularized loss.
    Finetuned,
}

impl Series {
    pub fn name(self) -> &'static str {
        match self {
            Series::Gated => "gated",
            Series::Ungated => "ungated",
            Series::Finetuned => "finetuned",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Stack depths for `depth-scaling`.
    pub depths: Vec<usize>,
    /// Seeds per variant for `variants`; run `i` uses `seed + i`.
    pub seeds: usize,
    pub variants: Vec<Variant>,
    /// Batch size of the sensitivity probe.
    pub batch: usize,
    pub series: Vec<Series>,
    pub finetune_steps: usize,
    /// Paths per process in `pfode-check`.
    pub pfode_n: usize,
    pub pfode_steps: usize,
    /// Comparison times `k / pfode_points`, `k = 1..=pfode_points`.
    pub pfode_points: usize,
    pub pfode_solver: Solver,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            depths: vec![8, 16, 32, 64],
            seeds: 5,
            variants: Variant::ALL.to_vec(),
            batch: 256,
            series: vec![Series::Gated, Series::Ungated],
            finetune_steps: 300,
            pfode_n: 10_000,
            pfode_steps: 1000,
            pfode_points: 20,
            pfode_solver: Solver::Heun,
        }
    }
}

/// Applies `key.path=value` to a TOML table. The value is parsed as a TOML
/// literal and falls back to a bare string.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{assignment}` is not of the form key=value"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!("override `{assignment}` has an empty key segment");
    }
    let value = parse_value(raw.trim());
    let (last, parents) = path.split_last().expect("split yields at least one segment");
    let mut table = root;
    for seg in parents {
        let entry = table.entry(seg.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override `{assignment}`: `{seg}` is not a section"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Reads `path` (or starts from defaults when `None`), applies overrides
    /// and resolves relative paths.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let (mut table, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config file {}", p.display()))?;
                let table: toml::Table = text.parse().with_context(|| format!("cannot parse config file {}", p.display()))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (table, base)
            }
            None => (toml::Table::new(), PathBuf::new()),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        resolve_table_path(&mut table, &base)?;
        let origin = path.map_or_else(|| "configuration".to_string(), |p| p.display().to_string());
        let mut cfg: RunConfig = RunConfig::deserialize(toml::Value::Table(table)).with_context(|| format!("invalid {origin}"))?;
        if let Some(ck) = &mut cfg.eval.checkpoint {
            if ck.is_relative() {
                *ck = base.join(&*ck);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.spec.validate()?;
        if let Some(s) = &self.schedule {
            s.validate()?;
        }
        let dim = self.data.spec.dim();
        if self.model.width != dim {
            bail!("model.width = {} but the {} data has dimension {dim}", self.model.width, family(&self.data.spec));
        }
        if self.model.num_classes > 0 && self.model.num_classes != self.data.spec.num_classes() {
            bail!(
                "model.num_classes = {} but the data has {} classes",
                self.model.num_classes,
                self.data.spec.num_classes()
            );
        }
        if self.data.samples == Some(0) {
            bail!("data.samples must be positive");
        }
        if self.eval.n == 0 || self.eval.steps == 0 {
            bail!("eval.n and eval.steps must be positive");
        }
        if self.report.batch == 0 || self.report.pfode_n == 0 || self.report.pfode_steps == 0 || self.report.pfode_points == 0 {
            bail!("report.batch, pfode_n, pfode_steps and pfode_points must be positive");
        }
        if self.report.depths.iter().any(|&d| d == 0) {
            bail!("report.depths must be positive");
        }
        Ok(())
    }

    pub fn schedule_or_default(&self) -> Schedule {
        self.schedule.clone().unwrap_or_default()
    }
}

fn family(spec: &DatasetSpec) -> &'static str {
    match spec {
        DatasetSpec::GaussianMixture { .. } => "gaussian-mixture",
        DatasetSpec::TwoMoons { .. } => "two-moons",
        DatasetSpec::SwissRoll { .. } => "swiss-roll-2d",
        DatasetSpec::Checkerboard { .. } => "checkerboard-2d",
        DatasetSpec::ImageGrid { .. } => "image-grid",
    }
}

/// `[schedule] kind = "table", path = "..."` loads the alpha-bar table from
/// a CSV file next to the config.
fn resolve_table_path(table: &mut toml::Table, base: &Path) -> Result<()> {
    let Some(toml::Value::Table(sched)) = table.get_mut("schedule") else {
        return Ok(());
    };
    if sched.get("kind").and_then(toml::Value::as_str) != Some("table") {
        return Ok(());
    }
    let Some(p) = sched.remove("path") else {
        return Ok(());
    };
    let p = p.as_str().ok_or_else(|| anyhow!("schedule.path must be a string"))?;
    let full = base.join(p);
    let t = DiscreteSchedule::from_csv(&full)?;
    let alpha_bar = t.alpha_bar.iter().map(|&v| toml::Value::Float(v)).collect();
    let mut inner = toml::Table::new();
    inner.insert("alpha_bar".into(), toml::Value::Array(alpha_bar));
    sched.insert("table".into(), toml::Value::Table(inner));
    Ok(())
}
