//! Command-line entry point.
//!
//! Verbs: `synth` builds a self-contained demo corpus with bundled demo
//! backbones; `extract`, `train`, `eval` and `grid` run the pipeline stages
//! against a run config. Exit code 0 on success, 1 for configuration
//! problems, 2 for runtime failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use evkit::config::{Overrides, RunConfig};
use evkit::features_global::FeatureKind;
use evkit::pipeline;
use evkit::synth::{self, SynthConfig};
use evkit::Result;

#[derive(Parser)]
#[command(
    name = "evkit",
    about = "Decide whether images were captured at a claimed event: backbone \
             transfer features scored by classical classifiers",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    /// Run configuration (TOML).
    #[arg(long, short = 'c')]
    config: PathBuf,
    /// Retarget every feature spec onto this backbone.
    #[arg(long)]
    backbone: Option<String>,
    /// Keep only features of this kind, adding one with default parameters
    /// if the config lists none.
    #[arg(long)]
    features: Option<FeatureKind>,
    /// Replace the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace the repeat count.
    #[arg(long)]
    repeats: Option<usize>,
    /// Replace the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl StageArgs {
    fn load(&self) -> Result<RunConfig> {
        let overrides = Overrides {
            backbone: self.backbone.clone(),
            features: self.features,
            seed: self.seed,
            repeats: self.repeats,
            out: self.out.clone(),
        };
        RunConfig::load(&self.config, &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Compute configured features for every manifest image into the cache.
    Extract(StageArgs),
    /// Train one classifier per (feature, classifier) pairing; optionally
    /// fine-tune a backbone first.
    Train(StageArgs),
    /// Score saved models on the test split and write report + ROC artifacts.
    Eval(StageArgs),
    /// Run the full feature × classifier sweep and write the grid table.
    Grid(StageArgs),
    /// Generate a synthetic corpus plus demo backbones for self-contained runs.
    Synth {
        /// Directory to create the corpus in.
        #[arg(long)]
        out: PathBuf,
        /// Number of events (2 to 8).
        #[arg(long, default_value_t = 4)]
        events: usize,
        /// Training images per event.
        #[arg(long, default_value_t = 40)]
        train_per_event: usize,
        /// Test images per event.
        #[arg(long, default_value_t = 20)]
        test_per_event: usize,
        /// Corpus seed.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Skip writing the bundled demo backbones.
        #[arg(long)]
        no_backbones: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Extract(args) => {
            let summary = pipeline::cmd_extract(&args.load()?)?;
            println!(
                "extracted {} feature vectors ({} specs x {} records): {} computed, {} cached",
                summary.specs * summary.records,
                summary.specs,
                summary.records,
                summary.computed,
                summary.cache_hits
            );
            println!("cache: {}", summary.cache_dir.display());
        }
        Command::Train(args) => {
            let summary = pipeline::cmd_train(&args.load()?)?;
            if let Some(ft) = &summary.fine_tune {
                let first = ft.loss_trace.first().copied().unwrap_or(f64::NAN);
                let last = ft.loss_trace.last().copied().unwrap_or(f64::NAN);
                println!(
                    "fine-tuned {} -> {} ({} epochs, loss {first:.4} -> {last:.4})",
                    ft.backbone,
                    ft.tuned_name,
                    ft.loss_trace.len()
                );
                println!("merged registry: {}", ft.registry_path.display());
            }
            for model in &summary.models {
                println!("trained {} / {} -> {}", model.feature, model.classifier, model.path.display());
            }
        }
        Command::Eval(args) => {
            let summary = pipeline::cmd_eval(&args.load()?)?;
            for run in &summary.doc.runs {
                match run.summary_auc {
                    Some(auc) => println!(
                        "{} / {}: {} AUC {auc:.4}",
                        run.feature, run.classifier, summary.doc.averaging
                    ),
                    None => println!(
                        "{} / {}: {} AUC undefined",
                        run.feature, run.classifier, summary.doc.averaging
                    ),
                }
            }
            println!("report: {}", summary.report_path.display());
        }
        Command::Grid(args) => {
            let summary = pipeline::cmd_grid(&args.load()?)?;
            let total = summary.doc.cells.len();
            let defined = summary.doc.cells.iter().filter(|c| c.auc.is_some()).count();
            println!("grid: {defined}/{total} cells with a defined AUC");
            for cell in summary.doc.cells.iter().filter(|c| c.diagnostic.is_some()) {
                println!(
                    "  {} / {}: {}",
                    cell.feature,
                    cell.classifier,
                    cell.diagnostic.as_deref().unwrap_or("")
                );
            }
            println!("wrote {}", summary.json_path.display());
            println!("wrote {}", summary.csv_path.display());
            println!("wrote {}", summary.html_path.display());
        }
        Command::Synth { out, events, train_per_event, test_per_event, seed, no_backbones } => {
            let config = SynthConfig { out_dir: out.clone(), events, train_per_event, test_per_event, seed };
            let manifest = synth::generate_corpus(&config)?;
            println!("manifest: {}", manifest.display());
            if !no_backbones {
                let registry = synth::write_demo_backbones(&out.join("backbones"))?;
                println!("registry: {}", registry.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
