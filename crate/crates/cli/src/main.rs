use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use p3sgd_cli::commands::{self, AccountantArgs};
use p3sgd_cli::Outcome;
use p3sgd_core::models::{Activation, ModelKind, ModelSpec};
use p3sgd_core::patientdb::SynthParams;

/// Patient-level private SGD: training, privacy accounting and inversion attacks.
#[derive(Parser)]
#[command(name = "p3sgd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with P3SGD or the non-private baseline, as configured.
    Train {
        config: PathBuf,
        /// Override a config key, e.g. `--set train.rounds=20`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Print the privacy spend of a charge schedule without training.
    Accountant(AccountantCli),
    /// Invert hidden features of two checkpoints and compare the groups.
    Attack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        private: PathBuf,
        #[arg(long)]
        nonprivate: PathBuf,
        /// Report path; defaults to attack.jsonl in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Compare analytic gradients against central differences.
    Gradcheck {
        #[command(flatten)]
        model: ModelCli,
        #[arg(long, default_value_t = 100)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb the analytic gradient; the check must then fail.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Write a synthetic patient database as CSV.
    Synth {
        #[arg(long)]
        n_patients: usize,
        #[arg(long)]
        per_patient: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 3.0)]
        class_sep: f64,
        #[arg(long, default_value_t = 0.5)]
        patient_offset: f64,
        #[arg(long, default_value_t = 0.0)]
        prevalence_spread: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a metrics file line by line.
    ValidateMetrics { path: PathBuf },
}

#[derive(Args)]
struct AccountantCli {
    /// Patient sampling ratio.
    #[arg(long)]
    q: f64,
    /// Fixed noise multiplier.
    #[arg(long)]
    z: Option<f64>,
    /// Candidate noise multipliers; with more than one, --trace is required.
    #[arg(long, value_delimiter = ',')]
    noise_scales: Vec<f64>,
    /// File with the selected z of each round, one per line.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Per-round selection budget (default sqrt(0.1)); 0 skips the selection charge.
    #[arg(long)]
    eps_select: Option<f64>,
    #[arg(long)]
    eps_select_sq: Option<f64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    /// Derive delta as 1 / n^1.1 (default n = 1000).
    #[arg(long)]
    n_patients: Option<usize>,
}

#[derive(Args)]
struct ModelCli {
    #[arg(long, value_parser = parse_kind, default_value = "mlp")]
    model: ModelKind,
    #[arg(long, default_value_t = 8)]
    input_dim: usize,
    #[arg(long, default_value_t = 8)]
    hidden_dim: usize,
    #[arg(long, value_parser = parse_activation, default_value = "tanh")]
    activation: Activation,
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    match s {
        "logistic" => Ok(ModelKind::Logistic),
        "mlp" => Ok(ModelKind::Mlp),
        _ => Err(format!("unknown model `{s}` (expected logistic or mlp)")),
    }
}

fn parse_activation(s: &str) -> Result<Activation, String> {
    match s {
        "tanh" => Ok(Activation::Tanh),
        "identity" => Ok(Activation::Identity),
        _ => Err(format!("unknown activation `{s}` (expected tanh or identity)")),
    }
}

impl ModelCli {
    fn spec(&self) -> ModelSpec {
        let spec = match self.model {
            ModelKind::Logistic => ModelSpec::logistic(self.input_dim),
            ModelKind::Mlp => ModelSpec::mlp(self.input_dim, self.hidden_dim),
        };
        spec.with_activation(self.activation)
    }
}

fn run(command: Command) -> Outcome<()> {
    match command {
        Command::Train { config, set } => {
            let out = commands::train(&config, &set)?;
            let s = &out.summary;
            println!("run {} -> {}", s.run_id, out.dir.display());
            println!(
                "train_accuracy {:.4}  test_accuracy {:.4}",
                s.train_accuracy, s.test_accuracy
            );
            if let (Some(eps), Some(delta)) = (s.epsilon, s.delta) {
                println!("epsilon {eps:.4}  delta {delta:.3e}");
            }
        }
        Command::Accountant(a) => {
            let spend = commands::accountant(&AccountantArgs {
                q: a.q,
                z: a.z,
                noise_scales: a.noise_scales,
                trace: a.trace,
                eps_select: a.eps_select,
                eps_select_sq: a.eps_select_sq,
                rounds: a.rounds,
                delta: a.delta,
                n_patients: a.n_patients,
            })?;
            println!("epsilon {:.6}", spend.epsilon);
            println!("lambda {}", spend.lambda);
            println!("delta {:.6e}", spend.delta);
        }
        Command::Attack {
            config,
            private,
            nonprivate,
            out,
            set,
        } => {
            let report = commands::attack(&config, &private, &nonprivate, out.as_deref(), &set)?;
            print!("{}", commands::format_attack_table(&report));
        }
        Command::Gradcheck {
            model,
            draws,
            seed,
            corrupt,
        } => {
            let report = commands::gradcheck(&model.spec(), draws, seed, corrupt)?;
            println!(
                "max relative error {:.3e} over {} draws: ok",
                report.max_relative_error, report.draws
            );
        }
        Command::Synth {
            n_patients,
            per_patient,
            dim,
            class_sep,
            patient_offset,
            prevalence_spread,
            seed,
            out,
        } => {
            let mut params = SynthParams::new(n_patients, per_patient, dim, class_sep);
            params.patient_offset = patient_offset;
            params.prevalence_spread = prevalence_spread;
            let db = commands::synth(&params, seed, &out)?;
            println!(
                "wrote {} patients, {} examples to {}",
                db.num_patients(),
                db.num_examples(),
                out.display()
            );
        }
        Command::ValidateMetrics { path } => {
            let s = commands::validate_metrics(&path)?;
            println!(
                "ok: {} records ({} round, {} attack, {} summary)",
                s.records, s.rounds, s.attacks, s.summaries
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
