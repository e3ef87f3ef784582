use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand};

use rca::cli::{self, GradcheckSizes, StateFile};
use rca::io::{read_instances, read_vocabulary, to_json, write_json_line, RunConfig, Vocabulary, RUN_CONFIG_KEYS};
use rca::loss::Lambdas;
use rca::tags::DEFAULT_TOP_M;
use rca::{RcaError, Result};

/// Relative contrastive alignment toolkit.
#[derive(Debug, Parser)]
#[command(name = "rca", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Rank vocabulary tags for every image and split them into P/N sides.
    Rank {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        instances: PathBuf,
        #[arg(long = "m", default_value_t = DEFAULT_TOP_M)]
        m: usize,
    },
    /// Report selected tags and weights for every image.
    Uasr {
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long = "m", default_value_t = DEFAULT_TOP_M)]
        m: usize,
    },
    /// Per-image and mean contrastive losses.
    Loss {
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long = "m", default_value_t = DEFAULT_TOP_M)]
        m: usize,
        #[arg(long = "enable_uasr", default_value_t = true, action = clap::ArgAction::Set)]
        enable_uasr: bool,
        #[arg(long = "lambda_cross", default_value_t = 1.0)]
        lambda_cross: f64,
        #[arg(long = "lambda_inner", default_value_t = 1.0)]
        lambda_inner: f64,
    },
    /// Compare analytic gradients against central differences.
    Gradcheck {
        #[arg(long, env = "RCA_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = GradcheckSizes::default().d)]
        d: usize,
        #[arg(long, default_value_t = GradcheckSizes::default().regions)]
        regions: usize,
        #[arg(long, default_value_t = GradcheckSizes::default().k)]
        k: usize,
        #[arg(long, default_value_t = GradcheckSizes::default().captions)]
        captions: usize,
        #[arg(long, default_value_t = rca::grad::DEFAULT_STEP)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Train on a synthetic dataset. Every run-config key is also a flag.
    Train {
        /// `key = value` run configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the JSON-lines metrics stream.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Where to write the final state.
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Retrieval accuracy of a saved state.
    Eval {
        #[arg(long)]
        state: PathBuf,
    },
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| RcaError::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn load_vocab(path: Option<&PathBuf>) -> Result<Option<Vocabulary>> {
    path.map(|p| read_vocabulary(open(p)?)).transpose()
}

fn print<T: serde::Serialize>(value: &T) -> Result<()> {
    write_json_line(io::stdout().lock(), value)
}

fn run_config(config: Option<&PathBuf>, overrides: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Ok(seed) = std::env::var("RCA_SEED") {
        cfg.set("seed", &seed)?;
    }
    if let Some(path) = config {
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
    }
    for key in RUN_CONFIG_KEYS {
        if let Some(v) = overrides.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli, matches: &ArgMatches) -> Result<ExitCode> {
    match cli.command {
        Command::Rank { vocab, instances, m } => {
            let vocab = read_vocabulary(open(&vocab)?)?;
            let records = read_instances(open(&instances)?)?;
            print(&cli::rank(&vocab, &records, m)?)?;
        }
        Command::Uasr { instances, vocab, m } => {
            let vocab = load_vocab(vocab.as_ref())?;
            let records = read_instances(open(&instances)?)?;
            print(&cli::uasr(&records, vocab.as_ref(), m)?)?;
        }
        Command::Loss {
            instances,
            vocab,
            m,
            enable_uasr,
            lambda_cross,
            lambda_inner,
        } => {
            let vocab = load_vocab(vocab.as_ref())?;
            let records = read_instances(open(&instances)?)?;
            let lambdas = Lambdas::new(lambda_cross, lambda_inner)?;
            print(&cli::loss(&records, vocab.as_ref(), m, enable_uasr, lambdas)?)?;
        }
        Command::Gradcheck {
            seed,
            d,
            regions,
            k,
            captions,
            h,
            tolerance,
        } => {
            let sizes = GradcheckSizes {
                d,
                regions,
                k,
                captions,
            };
            let report = cli::gradcheck(seed, sizes, h, tolerance)?;
            print(&report)?;
            if !report.passed {
                if let Some((variant, t)) = report.worst() {
                    eprintln!(
                        "gradient check failed: {variant}/{} row {:?} col {:?}: analytic {} vs numeric {} (relative error {:e} >= {:e})",
                        t.tensor, t.worst_row, t.worst_col, t.analytic, t.numeric, t.max_relative_error, tolerance
                    );
                }
                return Ok(ExitCode::from(1));
            }
        }
        Command::Train { config, metrics, state } => {
            let overrides = matches.subcommand_matches("train").expect("train subcommand");
            let cfg = run_config(config.as_ref(), overrides)?;
            let mut sink: Option<BufWriter<File>> = metrics.as_ref().map(File::create).transpose()?.map(BufWriter::new);
            let (summary, state_file) = cli::train(&cfg, |record| match sink.as_mut() {
                Some(w) => write_json_line(w, record),
                None => Ok(()),
            })?;
            if let Some(mut w) = sink {
                w.flush()?;
            }
            if let Some(path) = state {
                let mut w = BufWriter::new(File::create(path)?);
                writeln!(w, "{}", to_json(&state_file)?)?;
                w.flush()?;
            }
            print(&summary)?;
        }
        Command::Eval { state } => {
            let text = std::fs::read_to_string(&state)?;
            let file: StateFile = serde_json::from_str(&text).map_err(|e| RcaError::Parse {
                line: e.line(),
                message: e.to_string(),
            })?;
            print(&cli::eval(&file)?)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let command = Cli::command().mut_subcommand("train", |sub| {
        sub.args(RUN_CONFIG_KEYS.iter().map(|key| {
            Arg::new(*key)
                .long(*key)
                .value_name("VALUE")
                .help(format!("override run-config key `{key}`"))
        }))
    });
    let matches = command.get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli, &matches) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
