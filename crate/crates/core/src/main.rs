use std::path::PathBuf;
use std::process::ExitCode;

use attrib_bench::config::RunConfig;
use attrib_bench::model::Variant;
use attrib_bench::{pipeline, Result};
use clap::{Args, Parser, Subcommand};

/// Grid-based faithfulness benchmark for attribution methods.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// Sectioned config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory shared by all stages.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, env = "ATTRIB_BENCH_JOBS")]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic dataset.
    GenData,
    /// Train the classifier.
    Train(TrainArgs),
    /// Keep eval images classified with high confidence.
    Filter,
    /// Build grids and score every method, layer and setting.
    Eval(EvalArgs),
    /// Render AggAtt panels from archived maps.
    Aggatt,
    /// Summarize scores into report.json and report.txt.
    Report,
    /// Run every stage in order.
    All(AllArgs),
    /// Print the resolved configuration.
    ShowConfig,
}

#[derive(Args, Default)]
struct TrainArgs {
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Default)]
struct EvalArgs {
    /// Comma-separated settings: gridpg, difull, dipart.
    #[arg(long, value_delimiter = ',')]
    settings: Option<Vec<String>>,
    /// Comma-separated split layers: input, mid, final.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<String>>,
    /// Comma-separated method names, or `all`.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long)]
    grids: Option<usize>,
}

#[derive(Args)]
struct AllArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    eval: EvalArgs,
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    let (train, eval) = match &cli.cmd {
        Cmd::Train(t) => (Some(t), None),
        Cmd::Eval(e) => (None, Some(e)),
        Cmd::All(a) => (Some(&a.train), Some(&a.eval)),
        _ => (None, None),
    };
    if let Some(t) = train {
        if let Some(v) = t.variant {
            cfg.model.variant = v;
        }
        if let Some(e) = t.epochs {
            cfg.model.epochs = e;
        }
    }
    if let Some(e) = eval {
        if let Some(s) = &e.settings {
            cfg.eval.settings = s.clone();
        }
        if let Some(l) = &e.layers {
            cfg.eval.layers = l.clone();
        }
        if let Some(m) = &e.methods {
            cfg.eval.methods = m.clone();
        }
        if let Some(g) = e.grids {
            cfg.eval.grids = g;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    match cli.cmd {
        Cmd::GenData => drop(pipeline::gen_data(&cfg)?),
        Cmd::Train(_) => drop(pipeline::train_model(&cfg)?),
        Cmd::Filter => drop(pipeline::filter(&cfg)?),
        Cmd::Eval(_) => {
            let out = pipeline::eval(&cfg)?;
            log::info!("{} score rows, {} map archives", out.rows.len(), out.archives.len());
        }
        Cmd::Aggatt => drop(pipeline::aggatt_panels(&cfg)?),
        Cmd::Report => print!("{}", pipeline::render_report(&pipeline::report(&cfg)?)),
        Cmd::All(_) => print!("{}", pipeline::render_report(&pipeline::run_all(&cfg)?)),
        Cmd::ShowConfig => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
