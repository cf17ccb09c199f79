use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use parvecmf::dataset::MalformedPolicy;
use parvecmf::Error;
use parvecmf_cli::commands::{self, exit_code};
use parvecmf_cli::config::{RunConfig, WORKDIR_ENV};
use parvecmf_cli::workdir::Workdir;

#[derive(Parser)]
#[command(name = "parvecmf", version, about = "Paragraph-vector priors for matrix-factorization recommenders")]
struct Cli {
    /// Work directory; overrides the config file and the environment.
    #[arg(long, global = true, env = WORKDIR_ENV)]
    workdir: Option<PathBuf>,

    /// Global seed; component seeds follow it unless set explicitly.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for embedding training and fold evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Force single-threaded, reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Config override `key=value`; may repeat and wins over the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Raise log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print review, user and product counts and the median review length.
    Stats {
        dataset: PathBuf,
        /// Key-value output file [default: <workdir>/stats.txt]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Abort on the first malformed record instead of skipping it.
        #[arg(long)]
        strict: bool,
    },
    /// Build the ratings matrix and write the fold plan.
    Prepare {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the joint user/item paragraph-vector model.
    TrainPv {
        #[arg(long)]
        config: PathBuf,
        /// Train on this fold's training part only.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Fit the factorization with priors from the trained embeddings.
    TrainMf {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Cross-validate against the SVD baseline over the prepared folds.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Prepare and evaluate end to end.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Rank unseen items for one user of a trained factorization.
    Recommend {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        user: String,
        #[arg(short = 'n', long, default_value_t = 5, allow_negative_numbers = true)]
        n: i64,
        /// Clamp printed scores to the rating scale.
        #[arg(long)]
        clip: bool,
    },
    /// Average a per-fold report into plot-ready TSV.
    ExportPlot {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

const DEFAULT_WORKDIR: &str = "parvecmf-work";

fn load_config(cli: &Cli, path: &Path) -> Result<RunConfig, Error> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(threads) = cli.threads {
        overrides.extend([format!("threads={threads}"), format!("pv.threads={threads}"), format!("eval.fold_threads={threads}")]);
    }
    let mut cfg = RunConfig::load(path, &overrides, cli.workdir.as_deref())?;
    if cli.deterministic {
        cfg.make_deterministic();
    }
    init_logging(cli.verbose, Some(&cfg.verbosity));
    Ok(cfg)
}

/// `-v` flags win over the config's `verbosity`; `RUST_LOG` wins over both.
fn init_logging(verbose: u8, configured: Option<&str>) {
    let level = match (verbose, configured) {
        (0, Some(level)) => level,
        (0, None) => "warn",
        (1, _) => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Stats { dataset, out, strict } => {
            let policy = if *strict { MalformedPolicy::FailFast } else { MalformedPolicy::SkipAndCount };
            let (s, target) = match out {
                Some(out) => (commands::cmd_stats(dataset, out, policy)?, out.clone()),
                None => {
                    let wd = Workdir::acquire(cli.workdir.as_deref().unwrap_or(DEFAULT_WORKDIR.as_ref()))?;
                    let target = wd.path(commands::STATS_FILE);
                    (commands::cmd_stats(dataset, &target, policy)?, target)
                }
            };
            println!("reviews\t{}", s.n_reviews);
            println!("users\t{}", s.n_users);
            println!("products\t{}", s.n_products);
            println!("median_words_per_review\t{}", s.median_words_per_review);
            log::info!("statistics written to {}", target.display());
        }
        Command::Prepare { config } => {
            let cfg = load_config(cli, config)?;
            let wd = Workdir::acquire(&cfg.workdir)?;
            commands::cmd_prepare(&cfg, &wd)?;
        }
        Command::TrainPv { config, fold } => {
            let cfg = load_config(cli, config)?;
            let wd = Workdir::acquire(&cfg.workdir)?;
            commands::cmd_train_pv(&cfg, &wd, *fold)?;
        }
        Command::TrainMf { config, fold } => {
            let cfg = load_config(cli, config)?;
            let wd = Workdir::acquire(&cfg.workdir)?;
            let (_, log) = commands::cmd_train_mf(&cfg, &wd, *fold)?;
            if let Some(last) = log.sweeps.last() {
                println!("sweeps\t{}\nlog_likelihood\t{}\ngrad_inf_norm\t{}", last.sweep, last.log_likelihood, last.grad_inf_norm);
            }
        }
        Command::Evaluate { config } => {
            let cfg = load_config(cli, config)?;
            let wd = Workdir::acquire(&cfg.workdir)?;
            let report = commands::cmd_evaluate(&cfg, &wd)?;
            report.write_means_tsv(std::io::stdout().lock())?;
        }
        Command::Run { config } => {
            let cfg = load_config(cli, config)?;
            let wd = Workdir::acquire(&cfg.workdir)?;
            let report = commands::cmd_run(&cfg, &wd)?;
            report.write_means_tsv(std::io::stdout().lock())?;
        }
        Command::Recommend { checkpoint, user, n, clip } => {
            let n = usize::try_from(*n).ok().filter(|&n| n > 0).ok_or_else(|| Error::Argument(format!("N must be positive, got {n}")))?;
            for (item, score) in commands::cmd_recommend(checkpoint, user, n, *clip)? {
                println!("{item}\t{score}");
            }
        }
        Command::ExportPlot { report, out } => {
            commands::cmd_export_plot(report, out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if !matches!(cli.command, Command::Prepare { .. } | Command::TrainPv { .. } | Command::TrainMf { .. } | Command::Evaluate { .. } | Command::Run { .. }) {
        init_logging(cli.verbose, None);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            init_logging(cli.verbose, None);
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
