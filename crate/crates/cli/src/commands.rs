//! Subcommand bodies. Each returns a [`Failure`] tagged with the exit status
//! it maps to: 1 for usage and configuration problems, 2 for everything that
//! goes wrong once work has started.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Serialize;
use sha2::{Digest, Sha256};

use p3sgd_core::accountant::{MomentsAccountant, PrivacySpend};
use p3sgd_core::attack::{attack_report, sample_targets, AttackReport, Group, ModelTag};
use p3sgd_core::dpcore::{p3sgd_train, sgd_train};
use p3sgd_core::gradcheck::{self, GradcheckReport};
use p3sgd_core::metrics::{MetricsSink, RoundLog, SgdStepLog};
use p3sgd_core::models::{evaluate, mean_loss, Checkpoint, ModelSpec};
use p3sgd_core::patientdb::{generate_synthetic, write_csv, PatientDatabase, SynthParams};
use p3sgd_core::{Error, ParamVector, RandomSource};

use crate::config::{ExperimentConfig, Strategy};
use crate::records::{self, RecordWriter, ValidationSummary};

#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (Failure::Usage(e) | Failure::Runtime(e)) = self;
        // Library errors often repeat their source in their own message.
        let mut prev = String::new();
        for (i, cause) in e.chain().enumerate() {
            let text = cause.to_string();
            if i > 0 && prev.contains(&text) {
                continue;
            }
            if i > 0 {
                f.write_str(": ")?;
            }
            f.write_str(&text)?;
            prev = text;
        }
        Ok(())
    }
}

pub type Outcome<T> = Result<T, Failure>;

trait Classify<T> {
    fn usage(self) -> Outcome<T>;
    fn runtime(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Outcome<T> {
        self.map_err(|e| Failure::Usage(e.into()))
    }

    fn runtime(self) -> Outcome<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

/// Hex SHA-256 of the config snapshot and seed, shortened to 16 digits.
pub fn run_id(snapshot: &str, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(snapshot.as_bytes());
    h.update(seed.to_le_bytes());
    hex::encode(h.finalize())[..16].to_string()
}

// ---------------------------------------------------------------- train

pub const SNAPSHOT_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub run_id: String,
    pub strategy: Strategy,
    pub seed: u64,
    /// Rounds for P3SGD, steps for SGD.
    pub iterations: usize,
    pub train_patients: usize,
    pub test_patients: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub train_loss: f64,
    pub test_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub dir: PathBuf,
    pub summary: TrainSummary,
}

pub fn train(config: &Path, overrides: &[String]) -> Outcome<TrainOutput> {
    let cfg = ExperimentConfig::load(config, overrides).usage()?;
    let snapshot = cfg.snapshot().usage()?;
    let run_id = run_id(&snapshot, cfg.seed);
    let dir = cfg.resolved_output_dir();
    fs::create_dir_all(dir.join(CHECKPOINT_DIR))
        .with_context(|| format!("cannot create output directory {}", dir.display()))
        .runtime()?;
    fs::write(dir.join(SNAPSHOT_FILE), &snapshot)
        .context("cannot write config snapshot")
        .runtime()?;

    let (train_db, test_db) = cfg.datasets().runtime()?;
    let spec = cfg.model_spec(train_db.feature_dim());
    spec.validate().context("model").usage()?;

    let writer = RecordWriter::create(&dir.join(METRICS_FILE), &run_id).runtime()?;
    let total = match cfg.train.strategy {
        Strategy::P3sgd => cfg.train.rounds,
        Strategy::Sgd => cfg.train.sgd_steps,
    };
    let mut sink = TrainSink {
        writer,
        spec: &spec,
        train: &train_db,
        test: &test_db,
        eval_every: cfg.train.eval_every,
        checkpoint_every: cfg.train.checkpoint_every,
        checkpoint_dir: dir.join(CHECKPOINT_DIR),
        seed: cfg.seed,
        total,
    };

    let (theta, spend) = match cfg.train.strategy {
        Strategy::P3sgd => {
            let tc = cfg.train_config();
            let mut acc = MomentsAccountant::new(tc.sampling_ratio, cfg.delta(train_db.num_patients())).usage()?;
            let theta = p3sgd_train(&spec, &train_db, &tc, &mut acc, &mut sink).runtime()?;
            (theta, Some(acc.spend()))
        }
        Strategy::Sgd => (
            sgd_train(&spec, &train_db, &cfg.sgd_config(), &mut sink).runtime()?,
            None,
        ),
    };

    Checkpoint::new(spec, cfg.seed, total as u64, theta.clone())
        .and_then(|c| c.save(dir.join(FINAL_CHECKPOINT)))
        .runtime()?;

    let (train_loss, train_accuracy) = evaluate(&spec, &theta, train_db.examples()).runtime()?;
    let (test_loss, test_accuracy) = evaluate(&spec, &theta, test_db.examples()).runtime()?;
    let summary = TrainSummary {
        run_id,
        strategy: cfg.train.strategy,
        seed: cfg.seed,
        iterations: total,
        train_patients: train_db.num_patients(),
        test_patients: test_db.num_patients(),
        train_accuracy,
        test_accuracy,
        train_loss,
        test_loss,
        epsilon: spend.map(|s| s.epsilon),
        delta: spend.map(|s| s.delta),
        lambda: spend.map(|s| s.lambda),
    };
    let mut json = serde_json::to_string_pretty(&summary).runtime()?;
    json.push('\n');
    fs::write(dir.join(SUMMARY_FILE), json)
        .context("cannot write summary")
        .runtime()?;
    sink.writer.write("summary", &summary).runtime()?;
    Ok(TrainOutput { dir, summary })
}

struct TrainSink<'a> {
    writer: RecordWriter,
    spec: &'a ModelSpec,
    train: &'a PatientDatabase,
    test: &'a PatientDatabase,
    eval_every: usize,
    checkpoint_every: usize,
    checkpoint_dir: PathBuf,
    seed: u64,
    total: usize,
}

#[derive(Serialize)]
struct RoundRecord<'a> {
    #[serde(flatten)]
    log: &'a RoundLog,
    #[serde(skip_serializing_if = "Option::is_none")]
    train_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_loss: Option<f64>,
}

/// SGD steps are reported under the `round` key so both strategies share
/// one record layout.
#[derive(Serialize)]
struct StepRecord {
    round: usize,
    batch_size: usize,
    batch_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    train_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_loss: Option<f64>,
}

fn every(n: usize, k: usize, last: usize) -> bool {
    k > 0 && (n.is_multiple_of(k) || n == last)
}

impl TrainSink<'_> {
    fn losses(&self, theta: &ParamVector) -> p3sgd_core::Result<(f64, f64)> {
        Ok((
            mean_loss(self.spec, theta, self.train.examples())?,
            mean_loss(self.spec, theta, self.test.examples())?,
        ))
    }

    fn checkpoint(&self, n: usize, theta: &ParamVector) -> p3sgd_core::Result<()> {
        if every(n, self.checkpoint_every, usize::MAX) {
            let path = self.checkpoint_dir.join(format!("round-{n:06}.ckpt"));
            Checkpoint::new(*self.spec, self.seed, n as u64, theta.clone())?.save(path)?;
        }
        Ok(())
    }
}

fn sink_err(e: anyhow::Error) -> Error {
    Error::Sink(format!("{e:#}"))
}

impl MetricsSink for TrainSink<'_> {
    fn round(&mut self, log: &RoundLog, theta: &ParamVector) -> p3sgd_core::Result<()> {
        let (train_loss, test_loss) = if every(log.round, self.eval_every, self.total) {
            let (a, b) = self.losses(theta)?;
            (Some(a), Some(b))
        } else {
            (None, None)
        };
        let record = RoundRecord {
            log,
            train_loss,
            test_loss,
        };
        self.writer.write("round", &record).map_err(sink_err)?;
        self.checkpoint(log.round, theta)
    }

    fn sgd_step(&mut self, log: &SgdStepLog, theta: &ParamVector) -> p3sgd_core::Result<()> {
        if !every(log.step, self.eval_every, self.total) {
            return self.checkpoint(log.step, theta);
        }
        let (train_loss, test_loss) = self.losses(theta)?;
        let record = StepRecord {
            round: log.step,
            batch_size: log.batch_size,
            batch_loss: log.batch_loss,
            train_loss: Some(train_loss),
            test_loss: Some(test_loss),
        };
        self.writer.write("round", &record).map_err(sink_err)?;
        self.checkpoint(log.step, theta)
    }
}

// ----------------------------------------------------------- accountant

#[derive(Debug, Clone, Default)]
pub struct AccountantArgs {
    pub q: f64,
    /// Fixed noise multiplier.
    pub z: Option<f64>,
    /// Candidate set; more than one entry needs a trace.
    pub noise_scales: Vec<f64>,
    /// One selected z per line.
    pub trace: Option<PathBuf>,
    pub eps_select: Option<f64>,
    pub eps_select_sq: Option<f64>,
    pub rounds: Option<usize>,
    pub delta: Option<f64>,
    pub n_patients: Option<usize>,
}

pub const DEFAULT_ACCOUNTANT_ROUNDS: usize = 100;
pub const DEFAULT_ACCOUNTANT_PATIENTS: usize = 1000;

/// Replays `T` charges and converts to ε. The selection moment is charged
/// every round whenever ε' > 0; pass ε' = 0 for Gaussian-only accounting.
pub fn accountant(args: &AccountantArgs) -> Outcome<PrivacySpend> {
    let eps = match (args.eps_select, args.eps_select_sq) {
        (Some(_), Some(_)) => {
            return Err(Failure::Usage(anyhow!(
                "give at most one of --eps-select and --eps-select-sq"
            )))
        }
        (Some(e), None) => e,
        (None, Some(sq)) => sq.sqrt(),
        (None, None) => 0.1f64.sqrt(),
    };
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Failure::Usage(anyhow!(
            "selection budget must be finite and non-negative, got {eps}"
        )));
    }
    let delta = match (args.delta, args.n_patients) {
        (Some(_), Some(_)) => return Err(Failure::Usage(anyhow!("give at most one of --delta and --n-patients"))),
        (Some(d), None) => d,
        (None, n) => MomentsAccountant::default_delta(n.unwrap_or(DEFAULT_ACCOUNTANT_PATIENTS)),
    };
    let schedule = z_schedule(args)?;
    let mut acc = MomentsAccountant::new(args.q, delta).usage()?;
    let selection = (eps > 0.0).then_some(eps);
    for z in schedule {
        acc.charge_round(z, selection).runtime()?;
    }
    Ok(acc.spend())
}

fn z_schedule(args: &AccountantArgs) -> Outcome<Vec<f64>> {
    if args.z.is_some() && !args.noise_scales.is_empty() {
        return Err(Failure::Usage(anyhow!("give either --z or --noise-scales, not both")));
    }
    if let Some(path) = &args.trace {
        let trace = read_trace(path).runtime()?;
        if let Some(bad) = trace
            .iter()
            .find(|z| !args.noise_scales.is_empty() && !args.noise_scales.contains(z))
        {
            return Err(Failure::Runtime(anyhow!(
                "{}: z = {bad} is not one of the noise scales",
                path.display()
            )));
        }
        if let Some(z) = args.z {
            if let Some(bad) = trace.iter().find(|&&t| t != z) {
                return Err(Failure::Runtime(anyhow!(
                    "{}: z = {bad} differs from the fixed --z {z}",
                    path.display()
                )));
            }
        }
        if let Some(t) = args.rounds {
            if t != trace.len() {
                return Err(Failure::Usage(anyhow!(
                    "--rounds {t} disagrees with the {} trace entries",
                    trace.len()
                )));
            }
        }
        return Ok(trace);
    }
    let z = match (args.z, args.noise_scales.as_slice()) {
        (Some(z), _) => z,
        (None, [z]) => *z,
        (None, []) => return Err(Failure::Usage(anyhow!("one of --z or --noise-scales is required"))),
        (None, _) => {
            return Err(Failure::Usage(anyhow!(
                "adaptive noise scales need --trace with the selected z of every round"
            )))
        }
    };
    Ok(vec![z; args.rounds.unwrap_or(DEFAULT_ACCOUNTANT_ROUNDS)])
}

/// Parses one z per line; blank lines and `#` comments are skipped.
pub fn read_trace(path: &Path) -> anyhow::Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read trace {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let z: f64 = line
            .parse()
            .map_err(|e| anyhow!("{}:{}: cannot parse `{line}`: {e}", path.display(), i + 1))?;
        if !(z > 0.0 && z.is_finite()) {
            return Err(anyhow!(
                "{}:{}: noise multiplier must be positive, got {z}",
                path.display(),
                i + 1
            ));
        }
        out.push(z);
    }
    Ok(out)
}

// --------------------------------------------------------------- attack

pub const ATTACK_FILE: &str = "attack.jsonl";

pub fn attack(
    config: &Path,
    private: &Path,
    nonprivate: &Path,
    out: Option<&Path>,
    overrides: &[String],
) -> Outcome<AttackReport> {
    let cfg = ExperimentConfig::load(config, overrides).usage()?;
    let snapshot = cfg.snapshot().usage()?;
    let load = |p: &Path| Checkpoint::load(p).with_context(|| format!("cannot load checkpoint {}", p.display()));
    let ck_private = load(private).runtime()?;
    let ck_nonprivate = load(nonprivate).runtime()?;

    let (train_db, test_db) = cfg.datasets().runtime()?;
    let spec = cfg.model_spec(train_db.feature_dim());
    for (path, ck) in [(private, &ck_private), (nonprivate, &ck_nonprivate)] {
        if ck.spec != spec {
            return Err(Failure::Runtime(anyhow!(
                "checkpoint {} holds a {:?} model but the config describes {:?}",
                path.display(),
                ck.spec,
                spec
            )));
        }
    }

    let root = RandomSource::new(cfg.seed).child("attack-targets");
    let train_targets = sample_targets(&train_db, cfg.attack.n_train, &mut root.child("train"));
    let test_targets = sample_targets(&test_db, cfg.attack.n_test, &mut root.child("test"));
    let report = attack_report(
        &spec,
        &ck_private.theta,
        &ck_nonprivate.theta,
        &train_targets,
        &test_targets,
        &cfg.attack_config(),
        cfg.attack.execution,
    )
    .runtime()?;

    let path = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let dir = cfg.resolved_output_dir();
            fs::create_dir_all(&dir)
                .with_context(|| format!("cannot create output directory {}", dir.display()))
                .runtime()?;
            dir.join(ATTACK_FILE)
        }
    };
    let mut writer = RecordWriter::create(&path, &run_id(&snapshot, cfg.seed)).runtime()?;
    for r in &report.records {
        writer.write("attack", r).runtime()?;
    }
    for s in &report.summaries {
        writer.write("summary", s).runtime()?;
    }
    Ok(report)
}

/// Group-mean table for the terminal.
pub fn format_attack_table(report: &AttackReport) -> String {
    let mut out = format!(
        "{:<6} {:<11} {:>5} {:>10} {:>10}\n",
        "group", "model", "n", "psnr_db", "reduction"
    );
    for group in [Group::Train, Group::Test] {
        for tag in [ModelTag::Private, ModelTag::NonPrivate] {
            if let Some(s) = report.summary(group, tag) {
                let g = if group == Group::Train { "train" } else { "test" };
                let t = if tag == ModelTag::Private {
                    "private"
                } else {
                    "non_private"
                };
                out += &format!(
                    "{g:<6} {t:<11} {:>5} {:>10.3} {:>10.6}\n",
                    s.count, s.mean_psnr_db, s.mean_objective_reduction
                );
            }
        }
    }
    out
}

// ------------------------------------------------------------ gradcheck

pub fn gradcheck(spec: &ModelSpec, draws: usize, seed: u64, corrupt: bool) -> Outcome<GradcheckReport> {
    spec.validate().usage()?;
    if draws == 0 {
        return Err(Failure::Usage(anyhow!("--draws must be at least 1")));
    }
    let report = gradcheck::run(spec, draws, seed, corrupt).runtime()?;
    if report.passed() {
        Ok(report)
    } else {
        Err(Failure::Runtime(anyhow!(
            "max relative error {:.3e} over {} draws is not below {:.0e}",
            report.max_relative_error,
            report.draws,
            gradcheck::PASS_THRESHOLD
        )))
    }
}

// ---------------------------------------------------------------- synth

pub fn synth(params: &SynthParams, seed: u64, out: &Path) -> Outcome<PatientDatabase> {
    params.validate().usage()?;
    let db = generate_synthetic(params, seed).runtime()?;
    write_csv(&db, out).runtime()?;
    Ok(db)
}

// ----------------------------------------------------- validate-metrics

pub fn validate_metrics(path: &Path) -> Outcome<ValidationSummary> {
    records::validate_file(path).runtime()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_id_depends_on_snapshot_and_seed() {
        let a = run_id("x = 1", 0);
        assert_eq!(a.len(), 16);
        assert_eq!(a, run_id("x = 1", 0));
        assert_ne!(a, run_id("x = 1", 1));
        assert_ne!(a, run_id("x = 2", 0));
    }

    #[test]
    fn eval_cadence_includes_last() {
        assert!(every(10, 5, 12));
        assert!(!every(11, 5, 12));
        assert!(every(12, 5, 12));
        assert!(!every(12, 0, 12));
    }

    #[test]
    fn adaptive_without_trace_is_usage_error() {
        let args = AccountantArgs {
            q: 0.1,
            noise_scales: vec![3.0, 1.0],
            ..Default::default()
        };
        assert_eq!(accountant(&args).unwrap_err().exit_code(), 1);
    }

    #[test]
    fn zero_rounds_gives_grid_floor() {
        let args = AccountantArgs {
            q: 0.1,
            z: Some(1.0),
            rounds: Some(0),
            delta: Some(5e-4),
            ..Default::default()
        };
        let spend = accountant(&args).unwrap();
        assert!((spend.epsilon - (1.0f64 / 5e-4).ln() / 32.0).abs() < 1e-12);
    }
}
