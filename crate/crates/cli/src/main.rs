use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use paincast::learners::ModelKind;
use paincast::pipeline::{self, Overrides, Run, RunConfig};
use paincast::text_extract::Horizon;

/// Forecast inpatient pain episodes at 48 and 72 hours.
///
/// Commands share one run directory (<output-dir>/<run-name>) and read each
/// other's outputs from it. Typical order: synth|ingest, train, evaluate,
/// rag-index, predict, fuse, report.
#[derive(Debug, Parser)]
#[command(name = "paincast", version)]
struct Cli {
    #[command(flatten)]
    opts: GlobalOpts,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Read the record file at paths.cohort and apply exclusions.
    Ingest,
    /// Generate a synthetic cohort (settings under [synth]).
    Synth,
    /// Cross-validate every configured model and fit final models.
    Train,
    /// Group comparison and feature importance for the selected models.
    Evaluate,
    /// Embed the knowledge-base directory at paths.kb_dir.
    RagIndex,
    /// Write per-patient learner probabilities.
    Predict,
    /// Query the language model for in-band patients and fuse.
    Fuse,
    /// Metric table and ROC point files for all three systems.
    Report,
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LlmBackend {
    Mock,
    Http,
}

#[derive(Debug, Args)]
struct GlobalOpts {
    /// TOML run configuration; flags override its values.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (required here or in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory name under the output directory.
    #[arg(long, global = true)]
    run_name: Option<String>,
    /// Parent directory for run directories.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Record file (JSON lines) for `ingest`.
    #[arg(long, global = true)]
    cohort: Option<PathBuf>,
    /// Directory of reference documents for `rag-index`.
    #[arg(long, global = true)]
    kb_dir: Option<PathBuf>,
    /// Drug lexicon file replacing the built-in one.
    #[arg(long, global = true)]
    lexicon: Option<PathBuf>,
    /// Extraction rule file replacing the built-in rules.
    #[arg(long, global = true)]
    rules: Option<PathBuf>,
    /// Prompt template file.
    #[arg(long, global = true)]
    template: Option<PathBuf>,
    /// Comma-separated horizons, e.g. 48h,72h.
    #[arg(long, global = true, value_delimiter = ',')]
    horizons: Option<Vec<Horizon>>,
    /// Cross-validation folds.
    #[arg(long, global = true)]
    k_folds: Option<usize>,
    /// Comma-separated model kinds, e.g. rf,lr,gb.
    #[arg(long, global = true, value_delimiter = ',')]
    models: Option<Vec<ModelKind>>,
    /// Lower edge of the fusion band (exclusive).
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Upper edge of the fusion band (exclusive).
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Probability at or above which a case is called positive.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Language-model backend.
    #[arg(long, global = true, value_enum)]
    llm: Option<LlmBackend>,
    /// Chat-completion base URL for the http backend.
    #[arg(long, global = true)]
    base_url: Option<String>,
    /// Model name sent to the endpoint.
    #[arg(long, global = true)]
    llm_model: Option<String>,
    /// Cohort size for `synth`.
    #[arg(long, global = true)]
    n_patients: Option<usize>,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

impl GlobalOpts {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            run_name: self.run_name.clone(),
            output_dir: self.output_dir.clone(),
            cohort: self.cohort.clone(),
            kb_dir: self.kb_dir.clone(),
            lexicon: self.lexicon.clone(),
            rules: self.rules.clone(),
            prompt_template: self.template.clone(),
            horizons: self.horizons.clone(),
            k_folds: self.k_folds,
            models: self.models.clone(),
            alpha: self.alpha,
            beta: self.beta,
            decision_threshold: self.threshold,
            mock: self.llm.map(|b| matches!(b, LlmBackend::Mock)),
            base_url: self.base_url.clone(),
            model_name: self.llm_model.clone(),
            n_patients: self.n_patients,
        }
    }

    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply(&self.overrides());
        cfg.apply_env();
        Ok(cfg)
    }
}

fn execute(cli: &Cli) -> anyhow::Result<()> {
    let cfg = cli.opts.resolve()?;
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let run = Run::open(cfg).context("invalid run configuration")?;
    match cli.command {
        Command::Ingest => {
            let s = pipeline::cmd_ingest(&run)?;
            println!("read {} records: {} rejected, {} excluded, {} kept", s.read, s.rejected, s.excluded, s.kept);
        }
        Command::Synth => {
            let n = pipeline::cmd_synth(&run)?;
            println!("generated {n} patients");
        }
        Command::Train => {
            for s in pipeline::cmd_train(&run)? {
                println!("{}: {} rows, {} positive", s.horizon, s.n_rows, s.n_positive);
                for r in &s.reports {
                    println!("  {:<18} AUC {:.3} ± {:.3}", r.kind.as_str(), r.mean_auc, r.sd_auc);
                }
                println!("  selected {}", s.selected.kind);
            }
        }
        Command::Evaluate => pipeline::cmd_evaluate(&run)?,
        Command::RagIndex => {
            let n = pipeline::cmd_rag_index(&run)?;
            println!("indexed {n} chunks");
        }
        Command::Predict => {
            for (h, rows) in pipeline::cmd_predict(&run)? {
                println!("{h}: {} predictions", rows.len());
            }
        }
        Command::Fuse => {
            for s in pipeline::cmd_fuse(&run)? {
                println!(
                    "{}: {} patients, {} in band, {} fusion calls, {} baseline calls, {} failures",
                    s.horizon, s.patients, s.in_band, s.fusion_calls, s.baseline_calls, s.failures
                );
            }
        }
        Command::Report => {
            pipeline::cmd_report(&run)?;
            let table = run.path("report/table.md");
            print!("{}", std::fs::read_to_string(&table).with_context(|| table.display().to_string())?);
        }
        Command::ShowConfig => unreachable!("handled above"),
    }
    println!("outputs in {}", run.dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.opts.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
