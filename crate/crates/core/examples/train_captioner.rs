//! Trains the captioner in one mode on an in-memory synthetic corpus and
//! prints a few held-out captions next to their references.
//!
//! cargo run --release --example train_captioner -- [mode] [steps] [seed]
//!
//! `mode` is no-finetune, finetune or finetune+IASC (default).

use aescap::captioner::{
    config_for_mode, train_captioner, CaptionSample, Captioner, CaptionerConfig, Mode, PreparedImage, TrainConfig,
    Vocabulary,
};
use aescap::data::synthetic::stratified_split;
use aescap::data::{generate_samples, Split, SyntheticSpec, DEFAULT_PROMPT};
use aescap::encoder::image_saliency;
use aescap::scorer::{train_scorer, Scorer, ScorerConfig, ScorerTrainConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let mode: Mode = args.next().as_deref().unwrap_or("finetune+IASC").parse()?;
    let steps: usize = args.next().map(|a| a.parse()).transpose()?.unwrap_or(400);
    let seed: u64 = args.next().map(|a| a.parse()).transpose()?.unwrap_or(0);

    let spec = SyntheticSpec::default();
    let samples = generate_samples(&spec, seed)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let split = stratified_split(&labels, spec.split_sizes().1, seed);
    let (train, test): (Vec<usize>, Vec<usize>) = (0..samples.len()).partition(|&i| split[i] == Split::Train);

    let config = config_for_mode(&CaptionerConfig { seed, ..Default::default() }, mode);
    let scorer = if mode.wiring().iasc {
        let data: Vec<_> = train.iter().map(|&i| (samples[i].image.clone(), samples[i].label)).collect();
        let mut scorer = Scorer::new(ScorerConfig { seed, ..Default::default() })?;
        train_scorer(&mut scorer, &data, &ScorerTrainConfig { seed, ..Default::default() })?;
        Some(scorer)
    } else {
        None
    };
    let prepared: Vec<PreparedImage> = samples
        .iter()
        .map(|s| {
            Ok(PreparedImage {
                pixels: s.image.clone(),
                saliency: scorer.as_ref().map(|sc| image_saliency(sc, &s.image, &config.encoder)).transpose()?,
            })
        })
        .collect::<aescap::Result<_>>()?;

    let vocab = Vocabulary::build(
        train
            .iter()
            .flat_map(|&i| samples[i].captions.iter().map(String::as_str))
            .chain([DEFAULT_PROMPT]),
    );
    let mut model = Captioner::new(config, vocab)?;
    println!("{mode}: {} parameters, {} vocabulary entries", model.parameter_count(), model.vocab.len());

    if mode.wiring().train {
        let prompt = model.vocab.encode(DEFAULT_PROMPT);
        let pairs: Vec<(usize, Vec<usize>)> = train
            .iter()
            .flat_map(|&i| samples[i].captions.iter().map(move |c| (i, c)))
            .map(|(i, c)| (i, model.vocab.encode(c)))
            .collect();
        let batch: Vec<CaptionSample> = pairs
            .iter()
            .map(|(i, c)| CaptionSample {
                image: &prepared[*i],
                prompt: &prompt,
                caption: c,
            })
            .collect();
        let cfg = TrainConfig {
            total_steps: steps,
            seed,
            ..TrainConfig::default()
        };
        train_captioner(&mut model, &batch, cfg, |l| {
            if l.step % 50 == 0 || l.step + 1 == steps {
                println!("  step {:>4}  lr {:.2e}  loss {:.4}", l.step, l.lr, l.loss);
            }
        })?;
    }

    for &i in test.iter().take(4) {
        println!("\n[{}]", spec.classes[samples[i].label].name);
        println!("  generated: {}", model.generate(&prepared[i], DEFAULT_PROMPT)?);
        println!("  reference: {}", samples[i].captions[0]);
    }
    Ok(())
}
