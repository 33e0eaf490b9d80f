use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use aescap::captioner::{Mode, Preset};
use aescap::data::{SyntheticSpec, DEFAULT_PROMPT};
use aescap::experiment::{
    init_threads, run_ablation, run_caption, run_eval, run_experiment, run_gen_data, run_saliency, CaptionRun, ExperimentConfig,
    THREADS_ENV,
};
use aescap::{Error, Result};

/// Aesthetic-saliency captioning experiments at desk scale.
#[derive(Parser)]
#[command(version, after_help = format!("Set {THREADS_ENV} to fix the worker thread count.\nExit codes: 0 success, 1 invalid input, 2 runtime failure."))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic labeled caption corpus.
    GenData {
        /// JSON synthetic corpus spec; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        num_images: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one mode, caption the test split and score it.
    Train(ExperimentArgs),
    /// Caption images with a trained checkpoint.
    Caption {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scorer checkpoint, needed for saliency-enabled captioners.
        #[arg(long)]
        scorer: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        test_ratio: f64,
        /// Caption every record, not just the held-out split.
        #[arg(long)]
        all: bool,
        #[arg(long, default_value = DEFAULT_PROMPT)]
        prompt: String,
    },
    /// Score a captions JSONL file against a dataset's references.
    Eval {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Label recorded in the report.
        #[arg(long, default_value = "external")]
        mode: String,
        /// Also write intermediate n-gram counts to this JSON file.
        #[arg(long)]
        oracle_dump: Option<PathBuf>,
    },
    /// Train (or load) the scorer and write per-image saliency heatmaps.
    Saliency(ExperimentArgs),
    /// Run all three modes with one seed and write a comparison table.
    Ablate(ExperimentArgs),
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON experiment config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// no-finetune, finetune or finetune+IASC.
    #[arg(long)]
    mode: Option<String>,
    /// desk or paper.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    pgm_heatmaps: bool,
    /// Captioner training steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Reuse this scorer instead of training one.
    #[arg(long)]
    scorer: Option<PathBuf>,
}

impl ExperimentArgs {
    fn resolve(self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(d) = self.dataset {
            cfg.dataset = d;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.mode {
            cfg.mode = m.parse::<Mode>()?;
        }
        if let Some(p) = self.preset {
            cfg.preset = p.parse::<Preset>()?;
        }
        if let Some(o) = self.out {
            cfg.out = o;
        }
        cfg.pgm_heatmaps |= self.pgm_heatmaps;
        if self.steps.is_some() {
            cfg.train.total_steps = self.steps;
        }
        if self.scorer.is_some() {
            cfg.scorer_checkpoint = self.scorer;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            config,
            seed,
            num_images,
            out,
        } => {
            let mut spec: SyntheticSpec = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::Validation(format!("{}: {e}", p.display())))?;
                    serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", p.display())))?
                }
                None => SyntheticSpec::default(),
            };
            if let Some(n) = num_images {
                spec.num_images = n;
            }
            let m = run_gen_data(&spec, seed, &out)?;
            println!("wrote {} files to {}", m.files.len(), out.display());
        }
        Command::Train(args) => {
            let r = run_experiment(&args.resolve()?)?;
            print!("{}", r.report.to_csv());
            println!("outputs in {}", r.out.display());
        }
        Command::Caption {
            checkpoint,
            scorer,
            dataset,
            out,
            seed,
            test_ratio,
            all,
            prompt,
        } => {
            let lines = run_caption(&CaptionRun {
                checkpoint,
                scorer_checkpoint: scorer,
                dataset,
                out: out.clone(),
                prompt,
                all_records: all,
                seed,
                test_ratio,
            })?;
            for l in &lines {
                println!("{}\t{}", l.image, l.caption);
            }
        }
        Command::Eval {
            candidates,
            dataset,
            out,
            mode,
            oracle_dump,
        } => {
            let report = run_eval(&candidates, &dataset, &out, &mode, oracle_dump.as_deref())?;
            print!("{}", report.to_csv());
        }
        Command::Saliency(args) => {
            let cfg = args.resolve()?;
            let m = run_saliency(&cfg)?;
            println!("wrote {} files to {}", m.files.len(), cfg.out.display());
        }
        Command::Ablate(args) => {
            let cfg = args.resolve()?;
            run_ablation(&cfg)?;
            print!("{}", std::fs::read_to_string(cfg.out.join("ablation.csv")).unwrap_or_default());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = init_threads().and_then(|_| run(cli));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
