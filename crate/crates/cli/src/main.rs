//! `foldlm`: train and compare folding and baseline language models, run the folding demo,
//! and export metrics and latent projections.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use foldlm_core::harness::output::{canonical_json, to_canonical_json};
use foldlm_core::harness::{
    emit_tables, evaluate_model, export_projection, fold_demo, run_comparison, train_model,
    write_synthetic_corpus, Ablation, DemoConfig, RunConfig, SYNTHETIC_CATEGORIES,
};
use foldlm_core::model::{forward, load_checkpoint, save_checkpoint, tokenize};
use foldlm_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "foldlm",
    version,
    about = "Hierarchical latent space folding experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long, value_parser = existing_file)]
    config: PathBuf,
    /// Overrides `training.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Switches off one folding component; results go to `<out>/ablate-<term>`.
    #[arg(long, value_parser = ["attraction", "cohesion", "laplacian", "gate"])]
    ablate: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and save its checkpoint and report.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Train the model without folding modules.
        #[arg(long)]
        baseline: bool,
    },
    /// Train baseline and folding models side by side and write the comparison tables.
    Compare {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Fold synthetic clusters and print the objective and energy traces.
    FoldDemo {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        points: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 50)]
        steps: usize,
    },
    /// Write the 2-D PCA projection of one layer's activations for a text.
    Project {
        #[arg(long, value_parser = existing_file)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a saved model on the corpora of a run configuration.
    Metrics {
        #[arg(long, value_parser = existing_file)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = existing_file)]
        config: PathBuf,
        /// Write the report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a seeded synthetic corpus, one file per category.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 170_000)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn existing_file(s: &str) -> Result<PathBuf, String> {
    let p = PathBuf::from(s);
    if p.is_file() {
        Ok(p)
    } else {
        Err(format!("no such file: {s}"))
    }
}

fn load_run(args: &RunArgs) -> foldlm_core::Result<RunConfig> {
    let mut run = RunConfig::from_path(&args.config)?;
    if let Some(seed) = args.seed {
        run.training.seed = seed;
    }
    if let Some(out) = &args.out {
        run.output = out.clone();
    }
    if let Some(term) = &args.ablate {
        run = term.parse::<Ablation>()?.apply(&run);
    }
    Ok(run)
}

fn write(path: &Path, text: &str) -> foldlm_core::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn execute(command: Command) -> foldlm_core::Result<()> {
    match command {
        Command::Train { run, baseline } => {
            let run = load_run(&run)?;
            let trained = train_model(&run, !baseline)?;
            std::fs::create_dir_all(&run.output).map_err(|e| Error::io(&run.output, e))?;
            let ckpt = run.output.join("model.ckpt");
            save_checkpoint(&ckpt, &trained.params, &trained.cfg)?;
            write(
                &run.output.join("report.json"),
                &to_canonical_json(&trained.report)?,
            )?;
            let last = trained
                .report
                .epoch_loss
                .last()
                .copied()
                .unwrap_or(f64::NAN);
            println!("saved {} (final epoch loss {last:.6})", ckpt.display());
        }
        Command::Compare { run } => {
            let run = load_run(&run)?;
            let result = run_comparison(&run)?;
            let files = emit_tables(&result, &run.output)?;
            for f in files {
                println!("{}", f.display());
            }
            if let Some(e) = &result.error {
                eprintln!("warning: run is partial: {e}");
            }
        }
        Command::FoldDemo {
            seed,
            points,
            dim,
            steps,
        } => {
            let cfg = DemoConfig {
                points,
                dim,
                flow_steps: steps,
                ..DemoConfig::default()
            };
            print!("{}", fold_demo(seed, &cfg)?);
        }
        Command::Project {
            checkpoint,
            text,
            layer,
            out,
        } => {
            let (params, cfg) = load_checkpoint(&checkpoint)?;
            let tokens = tokenize(text.as_bytes());
            let (_, trace) = forward(&params, &cfg, &tokens)?;
            export_projection(&trace, layer, &tokens, &out)?;
            println!("{}", out.display());
        }
        Command::Metrics {
            checkpoint,
            config,
            out,
        } => {
            let (params, cfg) = load_checkpoint(&checkpoint)?;
            let run = RunConfig::from_path(&config)?;
            let report = evaluate_model(&params, &cfg, &run)?;
            let value = serde_json::to_value(&report).map_err(|e| Error::Format(e.to_string()))?;
            let text = canonical_json(&value);
            match out {
                Some(path) => write(&path, &text)?,
                None => print!("{text}"),
            }
        }
        Command::SynthCorpus { out, bytes, seed } => {
            for (category, path) in
                write_synthetic_corpus(&out, &SYNTHETIC_CATEGORIES, bytes, seed)?
            {
                println!("{category}\t{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            e.print().ok();
            return if usage {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
