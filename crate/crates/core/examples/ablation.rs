//! The three-mode ablation on a fresh synthetic corpus.
//!
//! cargo run --release --example ablation -- [out_dir] [seed] [num_images] [steps]

use std::path::PathBuf;
use std::time::Instant;

use aescap::data::{generate_synthetic_corpus, SyntheticSpec};
use aescap::experiment::{run_ablation, ExperimentConfig, TrainOverrides};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/ablation".into()));
    let seed: u64 = args.next().map(|a| a.parse()).transpose()?.unwrap_or(0);
    let num_images = args.next().map(|a| a.parse()).transpose()?.unwrap_or(64);
    let steps = args.next().map(|a| a.parse()).transpose()?;

    let data = out.join("data");
    let spec = SyntheticSpec {
        num_images,
        ..Default::default()
    };
    generate_synthetic_corpus(&spec, seed, &data)?;

    let cfg = ExperimentConfig {
        dataset: data,
        seed,
        out: out.clone(),
        train: TrainOverrides {
            total_steps: steps,
            ..Default::default()
        },
        ..Default::default()
    };
    let start = Instant::now();
    let runs = run_ablation(&cfg)?;
    println!("{:<15} {:>8} {:>8} {:>8} {:>10}", "mode", "B4", "CIDEr", "R", "loss");
    for r in &runs {
        let m = &r.report.mean;
        let loss = match (r.train_log.first(), r.train_log.last()) {
            (Some(a), Some(b)) => format!("{:.3}->{:.3}", a.loss, b.loss),
            _ => "-".into(),
        };
        println!("{:<15} {:>8.4} {:>8.4} {:>8.4} {:>10}", r.mode.as_str(), m.b4, m.cider, m.rouge_l, loss);
    }
    println!("\n{} in {:.1}s", out.join("ablation.csv").display(), start.elapsed().as_secs_f64());
    Ok(())
}
