//! Trains the style scorer on a synthetic corpus and reports accuracy.
//!
//! cargo run --release --example train_scorer -- [num_images] [seed] [patch] [steps] [batch]

use std::time::Instant;

use aescap::data::{generate_samples, SyntheticSpec};
use aescap::scorer::{train_scorer, Scorer, ScorerConfig, ScorerTrainConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let num_images = args.next().map(|a| a.parse()).transpose()?.unwrap_or(64);
    let seed = args.next().map(|a| a.parse()).transpose()?.unwrap_or(0);
    let base = ScorerConfig::default();
    let train = ScorerTrainConfig::default();
    let patch_size = args.next().map(|a| a.parse()).transpose()?.unwrap_or(base.patch_size);
    let steps = args.next().map(|a| a.parse()).transpose()?.unwrap_or(train.steps);
    let batch_size = args.next().map(|a| a.parse()).transpose()?.unwrap_or(train.batch_size);

    let spec = SyntheticSpec {
        num_images,
        ..Default::default()
    };
    let data: Vec<_> = generate_samples(&spec, seed)?
        .into_iter()
        .map(|s| (s.image, s.label))
        .collect();

    let mut scorer = Scorer::new(ScorerConfig {
        seed,
        patch_size,
        ..base
    })?;
    let cfg = ScorerTrainConfig {
        seed,
        steps,
        batch_size,
        ..train
    };
    let start = Instant::now();
    let losses = train_scorer(&mut scorer, &data, &cfg)?;
    for (i, l) in losses.iter().enumerate().step_by(25) {
        println!("step {i:4}  loss {l:.4}");
    }
    println!(
        "final loss {:.4}, train accuracy {:.3}, {:.1}s",
        losses.last().unwrap(),
        scorer.accuracy(&data)?,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
