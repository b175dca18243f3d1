use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use logra::config::RunConfig;
use logra::eval::Method;
use logra::pipeline::{cmd_eval, cmd_extract, cmd_inspect, cmd_query, cmd_train, QueryRequest, QuerySplit};
use logra::{Error, Result};

/// Gradient-projection data valuation: train, extract, query, evaluate.
#[derive(Parser)]
#[command(name = "logra", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configuration's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train the model and write the checkpoint.
    Train(Common),
    /// Write projections, statistics and the gradient store.
    Extract(Common),
    /// Rank stored train examples for each query example.
    Query {
        #[command(flatten)]
        common: Common,
        /// dot, influence, l_relatif or cosine.
        #[arg(long)]
        mode: Option<String>,
        #[arg(short, long)]
        k: Option<usize>,
        /// Which split the query examples come from.
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Comma-separated example indices within the split.
        #[arg(long, value_delimiter = ',')]
        ids: Option<Vec<u64>>,
        #[arg(long)]
        workers: Option<usize>,
        /// Report file; printed to stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// LDS and brittleness tables for the chosen valuation methods.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Comma-separated method names.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
    },
    /// Print the header of a store, statistics, projection or checkpoint file.
    Inspect { path: PathBuf },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let r = cmd_train(&c.load()?)?;
            println!("wrote {}", r.checkpoint.display());
        }
        Command::Extract(c) => {
            let r = cmd_extract(&c.load()?)?;
            println!("wrote {} records to {}", r.records, r.store.display());
        }
        Command::Query {
            common,
            mode,
            k,
            split,
            ids,
            workers,
            report,
        } => {
            let mut cfg = common.load()?;
            if let Some(m) = mode {
                cfg.query.mode = m;
            }
            if let Some(k) = k {
                cfg.query.k = k;
            }
            let req = QueryRequest {
                split: match split {
                    SplitArg::Train => QuerySplit::Train,
                    SplitArg::Test => QuerySplit::Test,
                },
                ids,
                mode: cfg.score_mode()?,
                k: cfg.query.k,
                workers,
            };
            let csv = cmd_query(&cfg, &req)?.to_csv();
            match report {
                Some(p) => std::fs::write(&p, csv).map_err(|e| Error::Io { path: p, source: e })?,
                None => print!("{csv}"),
            }
        }
        Command::Eval { common, methods } => {
            let cfg = common.load()?;
            let methods = match methods {
                Some(names) => names
                    .iter()
                    .map(|n| Method::parse(n).ok_or_else(|| Error::Config(format!("unknown method {n:?}"))))
                    .collect::<Result<Vec<_>>>()?,
                None => cfg.eval.methods.clone(),
            };
            let cache = std::env::var_os("LOGRA_CACHE_DIR").map(PathBuf::from);
            let s = cmd_eval(&cfg, &methods, cache)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Inspect { path } => print!("{}", cmd_inspect(&path)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
