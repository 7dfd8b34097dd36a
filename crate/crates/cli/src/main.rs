use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use introspect::perception::BackendKind;
use introspect::{Error, ErrorCategory};
use introspect_cli::{Config, Pipeline, SMOKE_CONFIG};

#[derive(Parser)]
#[command(name = "introspect", version, about = "Learn to predict stereo obstacle-detection failures")]
struct Cli {
    /// JSON config; the bundled smoke config when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Restrict to one backend (sparse or dense).
    #[arg(long, global = true)]
    backend: Option<BackendKind>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// No progress output on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the configured sessions.
    Gen,
    /// Label rendered sessions against the depth monitor.
    Label {
        /// Only this session.
        #[arg(long)]
        session: Option<String>,
    },
    /// Train the introspection model on the training sessions.
    Train,
    /// Write heatmaps for the test sessions.
    Infer,
    /// Score the model on the labeled test sessions.
    Eval,
    /// Cluster confident failure predictions.
    Cluster,
    /// Everything above, in order.
    All,
    /// Print the resolved config.
    Config,
}

fn run(cli: Cli) -> introspect::Result<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::from_json(SMOKE_CONFIG)?,
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    if let Command::Config = cli.command {
        println!("{}", serde_json::to_string_pretty(&cfg).unwrap());
        return Ok(());
    }
    let mut pipe = Pipeline::new(cfg, &cli.out)?;
    pipe.quiet = cli.quiet;
    let backends = pipe.backends(cli.backend);
    match cli.command {
        Command::Gen => {
            for (name, frames) in pipe.gen()? {
                println!("{name}: {frames} frames");
            }
        }
        Command::Label { session } => {
            for b in backends {
                for (name, counts) in pipe.label(b, session.as_deref())? {
                    println!("{b} {name}: {counts}");
                }
            }
        }
        Command::Train => {
            for b in backends {
                let (_, report) = pipe.train(b)?;
                println!("{b}: final loss {:.4}", report.epoch_losses.last().unwrap());
            }
        }
        Command::Infer => {
            for b in backends {
                println!("{b}: {} heatmaps", pipe.infer(b)?);
            }
        }
        Command::Eval => {
            for b in backends {
                let out = pipe.eval(b)?;
                println!("{b}: {}", serde_json::to_string(&out.report).unwrap());
            }
        }
        Command::Cluster => {
            for b in backends {
                let s = pipe.cluster(b)?.summary;
                println!("{b}: {} failures clustered, planted purity {:?}", s.selected, s.planted_purity);
            }
        }
        Command::All => {
            pipe.all(cli.backend)?;
            println!("done: {}", cli.out.display());
        }
        Command::Config => unreachable!(),
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.category() {
                ErrorCategory::Usage => 1,
                ErrorCategory::Data => 2,
                ErrorCategory::Numerical => 3,
            })
        }
    }
}
