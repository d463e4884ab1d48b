use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use kclab::config::RunConfig;
use kclab::labeling::LabelMethod;
use kclab::model::KcSetKind;
use kclab::pipeline::{run_pipeline, Pipeline, Stage};
use kclab::plot::PlotKind;

#[derive(Parser)]
#[command(name = "kclab", version, about = "KC-level correctness labeling and learning-curve analytics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Labeling method: baseline, llm_cot or llm_direct.
    #[arg(long)]
    method: Option<LabelMethod>,
    /// KC set: human, generated or selected.
    #[arg(long = "kc-set")]
    kc_set: Option<KcSetKind>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate the dataset; build attempt pairs.
    Ingest(Common),
    /// Generate a KC set from exemplar solutions.
    #[command(name = "gen-kcs")]
    GenKcs(Common),
    /// Map each student to a KC subset via the nearest exemplar.
    Map(Common),
    /// Label first attempts per KC.
    Label(Common),
    /// Empirical learning curves and power-law fits.
    Curves(Common),
    /// Fit and evaluate the additive factors model.
    Afm(Common),
    /// Comparison table over every completed run.
    Report(Common),
    /// Run several stages in order, stopping at the first failure.
    Run {
        #[command(flatten)]
        common: Common,
        /// Comma-separated stages.
        #[arg(long, value_delimiter = ',', default_value = "ingest,label,curves,afm,report")]
        stages: Vec<Stage>,
    },
    /// Emit SVG and CSV learning-curve plots for the current run.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "aggregated")]
        kind: PlotKind,
        #[arg(long = "max-opportunity")]
        max_opportunity: Option<u32>,
    },
    /// Write a human-evaluation worksheet.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Cohen's kappa between annotations and labels or a second annotator.
    Agreement {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        other: Option<PathBuf>,
    },
}

fn pipeline(common: &Common) -> anyhow::Result<Pipeline> {
    let mut config = RunConfig::load(&common.config)
        .with_context(|| format!("loading {}", common.config.display()))?;
    if let Some(m) = common.method {
        config.labeling.method = m;
    }
    if let Some(k) = common.kc_set {
        config.labeling.kc_set = k;
    }
    if let Some(s) = common.seed {
        config.override_seed(s);
    }
    Ok(Pipeline::new(config))
}

fn run_stages(common: &Common, stages: &[Stage]) -> anyhow::Result<bool> {
    let p = pipeline(common)?;
    let results = run_pipeline(&p, stages);
    let mut ok = true;
    for (stage, r) in &results {
        match r {
            Ok(outcome) => println!("{stage}: ok {}", outcome.summary),
            Err(e) => {
                ok = false;
                println!("{stage}: FAILED {e}");
            }
        }
    }
    for stage in &stages[results.len()..] {
        println!("{stage}: skipped");
    }
    Ok(ok)
}

fn execute(cli: Cli) -> anyhow::Result<bool> {
    let single = |common: &Common, stage| run_stages(common, &[stage]);
    match cli.command {
        Command::Ingest(c) => single(&c, Stage::Ingest),
        Command::GenKcs(c) => single(&c, Stage::GenKcs),
        Command::Map(c) => single(&c, Stage::Map),
        Command::Label(c) => single(&c, Stage::Label),
        Command::Curves(c) => single(&c, Stage::Curves),
        Command::Afm(c) => single(&c, Stage::Afm),
        Command::Report(c) => single(&c, Stage::Report),
        Command::Run { common, stages } => run_stages(&common, &stages),
        Command::Plot { common, kind, max_opportunity } => {
            for path in pipeline(&common)?.plot(kind, max_opportunity)? {
                println!("{}", path.display());
            }
            Ok(true)
        }
        Command::Sample { common, n } => {
            println!("{}", pipeline(&common)?.sample(n)?.display());
            Ok(true)
        }
        Command::Agreement { common, annotations, other } => {
            let (report, path) = pipeline(&common)?.agreement(&annotations, other.as_deref())?;
            println!(
                "kappa={:.4} observed={:.4} expected={:.4} n={} ({})",
                report.kappa,
                report.observed_agreement,
                report.expected_agreement,
                report.n,
                path.display()
            );
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("KCLAB_LOG").unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
