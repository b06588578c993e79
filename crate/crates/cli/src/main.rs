use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aelstm::analysis::build_table;
use aelstm::config::RunConfig;
use aelstm::pipeline::{AblationModel, EncoderKind};
use aelstm::{Error, Result};
use aelstm_cli::{attention_report, pca_report, read_results, read_traces, reproduce_all, resolve_out, Stage};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "aelstm", version, about = "AE-LSTM motion switching: data, training, evaluation and analysis")]
struct Cli {
    /// TOML run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Full-size hand, wide encoders and long training.
    #[arg(long, global = true)]
    paper_scale: bool,
    /// Run directory (overrides $AELSTM_OUT and the config's output_dir).
    /// Given before the subcommand.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training epochs for every network.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Whole,
    Thumb,
    Both,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum AnalysisKind {
    Pca,
    Attention,
    Table,
}

#[derive(Subcommand)]
enum Command {
    /// Record expert demonstrations.
    Generate,
    /// Fit normalization and train the tactile encoders.
    TrainAe {
        #[arg(long, value_enum, default_value = "both")]
        which: Which,
    },
    /// Train one ablation variant.
    TrainPolicy {
        /// Constraint strength used when the constraint is on.
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, value_enum, default_value = "on")]
        attention: Switch,
        #[arg(long, value_enum, default_value = "on")]
        constraint: Switch,
        /// Repeat seed; defaults to the first configured seed.
        #[arg(long)]
        repeat: Option<u64>,
    },
    /// Closed-loop trials of the trained policies.
    Evaluate {
        /// Comma-separated models; defaults to every checkpoint present.
        #[arg(long, value_delimiter = ',')]
        models: Vec<AblationModel>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Post-hoc analyses over trace or result files.
    Analyze {
        #[arg(value_enum)]
        kind: AnalysisKind,
        /// Trace directory (pca, attention) or results file or directory (table).
        #[arg(long = "in")]
        input: PathBuf,
        /// Output CSV.
        #[arg(long = "out")]
        output: PathBuf,
        /// Fit one PCA per trace instead of one across all traces.
        #[arg(long)]
        per_trial: bool,
    },
    /// Every stage for models I-IV and all configured seeds.
    ReproduceAll {
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut c = match (&cli.config, cli.paper_scale) {
        (Some(p), false) => RunConfig::load(p)?,
        (Some(_), true) => return Err(Error::Config("--paper-scale and --config are exclusive".into())),
        (None, true) => RunConfig::paper_scale(),
        (None, false) => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(e) = cli.epochs {
        c.autoencoder.train.epochs = e;
        c.policy.train.epochs = e;
    }
    c.validate()?;
    Ok(c)
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    if let Command::Analyze { kind, input, output, per_trial } = &cli.command {
        return analyze(*kind, input, output, *per_trial);
    }
    if let Command::ShowConfig = cli.command {
        print!("{}", config.to_toml());
        return Ok(());
    }
    let out = resolve_out(&config, cli.out.as_deref());
    let jobs_default = config.eval.jobs;
    let stage = Stage::open(config, &out)?;
    match cli.command {
        Command::Generate => {
            stage.generate()?;
        }
        Command::TrainAe { which } => {
            let kinds: &[EncoderKind] = match which {
                Which::Whole => &[EncoderKind::Whole],
                Which::Thumb => &[EncoderKind::Thumb],
                Which::Both => &EncoderKind::BOTH,
            };
            stage.train_ae(kinds)?;
        }
        Command::TrainPolicy { gamma, attention, constraint, repeat } => {
            let model = AblationModel::from_flags(attention == Switch::On, constraint == Switch::On);
            stage.train_policy(model, repeat.unwrap_or(stage.config.eval.seeds[0]), gamma)?;
        }
        Command::Evaluate { models, jobs } => {
            let cells: Vec<(AblationModel, u64)> = if models.is_empty() {
                stage.available_policies()
            } else {
                let r = stage.config.eval.seeds[0];
                models.iter().map(|&m| (m, r)).collect()
            };
            let records = stage.evaluate(&cells, jobs.unwrap_or(jobs_default))?;
            print!("{}", build_table(&records).to_csv());
        }
        Command::ReproduceAll { jobs } => {
            print!("{}", reproduce_all(&stage, jobs.unwrap_or(jobs_default))?);
        }
        Command::Analyze { .. } | Command::ShowConfig => unreachable!("handled above"),
    }
    println!("run directory: {}", out.display());
    Ok(())
}

fn analyze(kind: AnalysisKind, input: &Path, output: &Path, per_trial: bool) -> Result<()> {
    match kind {
        AnalysisKind::Pca => {
            let r = pca_report(&read_traces(input, "_hidden.csv")?, per_trial)?;
            write_out(output, &r.csv)?;
            let top: Vec<String> = r.explained_ratio.iter().take(2).map(|v| format!("{v:.3}")).collect();
            println!("steps {} explained [{}] 5-NN accuracy {:.3}", r.steps, top.join(", "), r.knn5);
        }
        AnalysisKind::Attention => {
            let (csv, w) = attention_report(&read_traces(input, "_attention.csv")?)?;
            write_out(output, &csv)?;
            println!(
                "thumb after attempt {:.4} (overall {:.4}); joint while sliding {:.4} (overall {:.4})",
                w.thumb_after_attempt, w.thumb_overall, w.joint_sliding, w.joint_overall
            );
        }
        AnalysisKind::Table => {
            let table = build_table(&read_results(input)?);
            let csv = table.to_csv();
            write_out(output, &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
