//! Experiment configuration: one TOML file, optionally patched by
//! `--set section.key=value` flags.
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/demo"
//!
//! [model]
//! kind = "mlp"              # "logistic" or "mlp"
//! hidden_dim = 16
//! activation = "tanh"       # "tanh" or "identity"
//!
//! [data]
//! train_fraction = 0.8223684210526315
//! [data.synthetic]          # or: csv = "patients.csv"
//! n_patients = 1216
//! per_patient = 50
//! dim = 16
//! class_sep = 3.0
//!
//! [train]
//! strategy = "p3sgd"        # or "sgd"
//! noise_scales = [3.0, 1.0]
//! eps_select_sq = 0.1
//!
//! [accountant]
//! delta = 5.0e-4            # default 1 / n_train^1.1
//!
//! [attack]
//! steps = 500
//! ```
//!
//! Every table rejects unknown keys. Omitted keys take the defaults of the
//! corresponding library types.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};

use p3sgd_core::accountant::MomentsAccountant;
use p3sgd_core::attack::{AttackConfig, AttackInit, TvLayout};
use p3sgd_core::dpcore::{SgdConfig, TrainConfig};
use p3sgd_core::models::{Activation, ModelKind, ModelSpec};
use p3sgd_core::par::Execution;
use p3sgd_core::patientdb::{generate_synthetic, load_csv, split, PatientDatabase, SynthParams};

/// Environment variable that re-roots relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "P3SGD_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub accountant: AccountantSection,
    #[serde(default)]
    pub attack: AttackSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// Must match the data when given; inferred otherwise.
    pub input_dim: Option<usize>,
    pub hidden_dim: usize,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::Mlp,
            input_dim: None,
            hidden_dim: 16,
            activation: Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    pub csv: Option<PathBuf>,
    pub synthetic: Option<SynthParams>,
}

fn default_train_fraction() -> f64 {
    1000.0 / 1216.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    P3sgd,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub strategy: Strategy,
    pub sampling_ratio: f64,
    pub rounds: usize,
    pub noise_scales: Vec<f64>,
    /// Give at most one of `eps_select` and `eps_select_sq`.
    pub eps_select: Option<f64>,
    pub eps_select_sq: Option<f64>,
    pub update_bound: f64,
    pub objective_bound: f64,
    pub learning_rate: f64,
    pub local_epochs: usize,
    pub local_batch: usize,
    pub charge_selection_always: bool,
    pub execution: Execution,
    /// Write a checkpoint every this many rounds (sgd: steps); 0 disables.
    pub checkpoint_every: usize,
    /// Evaluate train/test loss every this many rounds (sgd: steps); 0 disables.
    pub eval_every: usize,
    pub sgd_steps: usize,
    pub sgd_batch: usize,
    pub sgd_learning_rate: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            strategy: Strategy::P3sgd,
            sampling_ratio: t.sampling_ratio,
            rounds: t.rounds,
            noise_scales: t.noise_scales,
            eps_select: None,
            eps_select_sq: None,
            update_bound: t.update_bound,
            objective_bound: t.objective_bound,
            learning_rate: t.learning_rate,
            local_epochs: t.local_epochs,
            local_batch: t.local_batch,
            charge_selection_always: t.charge_selection_always,
            execution: t.execution,
            checkpoint_every: 10,
            eval_every: 1,
            sgd_steps: 1000,
            sgd_batch: 32,
            sgd_learning_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccountantSection {
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub steps: usize,
    pub step_size: f64,
    pub tv_weight: f64,
    pub init: AttackInit,
    /// Treat inputs as a square grid of this width for the TV term.
    pub grid_width: Option<usize>,
    pub backtracking: bool,
    pub n_train: usize,
    pub n_test: usize,
    pub execution: Execution,
}

impl Default for AttackSection {
    fn default() -> Self {
        let a = AttackConfig::default();
        Self {
            steps: a.steps,
            step_size: a.step_size,
            tv_weight: a.tv_weight,
            init: a.init,
            grid_width: None,
            backtracking: a.backtracking,
            n_train: 50,
            n_test: 50,
            execution: Execution::Parallel,
        }
    }
}

impl ExperimentConfig {
    /// Reads `path`, applies `overrides` and validates the result.
    pub fn load(path: &Path, overrides: &[String]) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_text(&text, overrides).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn from_text(text: &str, overrides: &[String]) -> anyhow::Result<Self> {
        let mut table: toml::Table = toml::from_str(text)?;
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let cfg: Self = table.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fully resolved TOML, written next to every run's outputs.
    pub fn snapshot(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        match (&self.data.csv, &self.data.synthetic) {
            (Some(_), Some(_)) => bail!("data: give either `csv` or `[data.synthetic]`, not both"),
            (None, None) => bail!("data: one of `csv` or `[data.synthetic]` is required"),
            (None, Some(s)) => {
                s.validate().map_err(|e| anyhow!("data.synthetic: {e}"))?;
                if let Some(d) = self.model.input_dim {
                    if d != s.dim {
                        bail!("model.input_dim = {d} disagrees with data.synthetic.dim = {}", s.dim);
                    }
                }
            }
            (Some(_), None) => {}
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            bail!(
                "data.train_fraction must lie in (0, 1), got {}",
                self.data.train_fraction
            );
        }
        if let Some(d) = self.model.input_dim {
            self.model_spec(d).validate().map_err(|e| anyhow!("model: {e}"))?;
        }
        let t = &self.train;
        if t.eps_select.is_some() && t.eps_select_sq.is_some() {
            bail!("train: give at most one of `eps_select` and `eps_select_sq`");
        }
        if let Some(v) = t.eps_select_sq {
            if !(v >= 0.0 && v.is_finite()) {
                bail!("train.eps_select_sq must be finite and non-negative, got {v}");
            }
        }
        match t.strategy {
            Strategy::P3sgd => self.train_config().validate().map_err(|e| anyhow!("train: {e}"))?,
            Strategy::Sgd => self.sgd_config().validate().map_err(|e| anyhow!("train: {e}"))?,
        }
        if let Some(delta) = self.accountant.delta {
            if !(delta > 0.0 && delta < 1.0) {
                bail!("accountant.delta must lie in (0, 1), got {delta}");
            }
        }
        self.attack_config().validate().map_err(|e| anyhow!("attack: {e}"))?;
        Ok(())
    }

    pub fn model_spec(&self, input_dim: usize) -> ModelSpec {
        let m = &self.model;
        let spec = match m.kind {
            ModelKind::Logistic => ModelSpec::logistic(input_dim),
            ModelKind::Mlp => ModelSpec::mlp(input_dim, m.hidden_dim),
        };
        spec.with_activation(m.activation)
    }

    pub fn eps_select(&self) -> f64 {
        match (self.train.eps_select, self.train.eps_select_sq) {
            (Some(e), _) => e,
            (None, Some(sq)) => sq.sqrt(),
            (None, None) => TrainConfig::default().eps_select,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            sampling_ratio: t.sampling_ratio,
            rounds: t.rounds,
            noise_scales: t.noise_scales.clone(),
            eps_select: self.eps_select(),
            update_bound: t.update_bound,
            objective_bound: t.objective_bound,
            learning_rate: t.learning_rate,
            local_epochs: t.local_epochs,
            local_batch: t.local_batch,
            seed: self.seed,
            charge_selection_always: t.charge_selection_always,
            execution: t.execution,
        }
    }

    pub fn sgd_config(&self) -> SgdConfig {
        SgdConfig {
            steps: self.train.sgd_steps,
            batch_size: self.train.sgd_batch,
            learning_rate: self.train.sgd_learning_rate,
            seed: self.seed,
        }
    }

    pub fn attack_config(&self) -> AttackConfig {
        let a = &self.attack;
        AttackConfig {
            steps: a.steps,
            step_size: a.step_size,
            tv_weight: a.tv_weight,
            tv_layout: a.grid_width.map_or(TvLayout::Flat, |width| TvLayout::Grid { width }),
            init: a.init,
            backtracking: a.backtracking,
            seed: self.seed,
        }
    }

    pub fn delta(&self, n_train_patients: usize) -> f64 {
        self.accountant
            .delta
            .unwrap_or_else(|| MomentsAccountant::default_delta(n_train_patients))
    }

    /// `output_dir`, placed under `$P3SGD_OUTPUT_ROOT` when that is set and
    /// the configured path is relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    /// Loads or generates the database and splits it by patient.
    pub fn datasets(&self) -> anyhow::Result<(PatientDatabase, PatientDatabase)> {
        let db = match (&self.data.csv, &self.data.synthetic) {
            (Some(path), _) => load_csv(path)?,
            (None, Some(params)) => generate_synthetic(params, self.seed)?,
            (None, None) => bail!("no data source configured"),
        };
        if let Some(d) = self.model.input_dim {
            if d != db.feature_dim() {
                bail!("model.input_dim = {d} but the data has {} features", db.feature_dim());
            }
        }
        Ok(split(&db, self.data.train_fraction, self.seed)?)
    }
}

/// Sets `a.b.c = value` in `table`. The value is read as a TOML literal and
/// falls back to a plain string, so `train.strategy=sgd` works unquoted.
fn apply_override(table: &mut toml::Table, item: &str) -> anyhow::Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{item}` is not of the form key=value"))?;
    let key = key.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| anyhow!("override `{item}` has an empty key"))?;
    let mut node = table;
    for part in parts {
        node = node
            .entry(part)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("override `{item}`: `{part}` is not a table"))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}
