//! Convergence behavior of the scorer and the captioner.

use aescap::captioner::{
    config_for_mode, train_captioner, CaptionSample, Captioner, CaptionerConfig, Mode, PreparedImage, TrainConfig,
    Vocabulary,
};
use aescap::data::{generate_samples, SyntheticSpec, DEFAULT_PROMPT};
use aescap::encoder::{image_saliency, EncoderConfig};
use aescap::scorer::{train_scorer, Scorer, ScorerConfig, ScorerTrainConfig};

#[test]
fn scorer_fits_the_style_classes() {
    let spec = SyntheticSpec::default();
    let data: Vec<_> = generate_samples(&spec, 0)
        .unwrap()
        .into_iter()
        .map(|s| (s.image, s.label))
        .collect();
    let mut scorer = Scorer::new(ScorerConfig::default()).unwrap();
    let losses = train_scorer(&mut scorer, &data, &ScorerTrainConfig::default()).unwrap();
    assert_eq!(losses.len(), 300);
    let acc = scorer.accuracy(&data).unwrap();
    assert!(acc >= 0.9, "train accuracy {acc}");
}

fn tiny_captioner(seed: u64, mode: Mode) -> CaptionerConfig {
    config_for_mode(
        &CaptionerConfig {
            encoder: EncoderConfig {
                embed_dim: 8,
                num_blocks: 1,
                num_heads: 2,
                ..EncoderConfig::desk()
            },
            lm_dim: 16,
            lm_blocks: 1,
            lm_heads: 2,
            mlp_ratio: 2,
            seed,
            ..Default::default()
        },
        mode,
    )
}

/// Full-batch training so one step is one epoch; averages over windows of
/// ten epochs should almost never go up.
fn windowed_loss_trend(mode: Mode, seed: u64) -> (usize, usize, f64, f64) {
    let spec = SyntheticSpec {
        num_images: 40,
        ..Default::default()
    };
    let mut samples = generate_samples(&spec, seed).unwrap();
    samples.truncate(16);
    let config = tiny_captioner(seed, mode);
    let scorer = mode.wiring().iasc.then(|| {
        let data: Vec<_> = samples.iter().map(|s| (s.image.clone(), s.label)).collect();
        let mut sc = Scorer::new(ScorerConfig { seed, ..Default::default() }).unwrap();
        let cfg = ScorerTrainConfig {
            steps: 40,
            seed,
            ..Default::default()
        };
        train_scorer(&mut sc, &data, &cfg).unwrap();
        sc
    });
    let prepared: Vec<PreparedImage> = samples
        .iter()
        .map(|s| PreparedImage {
            pixels: s.image.clone(),
            saliency: scorer
                .as_ref()
                .map(|sc| image_saliency(sc, &s.image, &config.encoder).unwrap()),
        })
        .collect();
    let vocab = Vocabulary::build(
        samples
            .iter()
            .flat_map(|s| s.captions.iter().map(String::as_str))
            .chain([DEFAULT_PROMPT]),
    );
    let mut model = Captioner::new(config, vocab).unwrap();
    let prompt = model.vocab.encode(DEFAULT_PROMPT);
    let encoded: Vec<(usize, Vec<usize>)> = samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.captions.iter().map(move |c| (i, c)))
        .map(|(i, c)| (i, model.vocab.encode(c)))
        .collect();
    let batch: Vec<CaptionSample> = encoded
        .iter()
        .map(|(i, c)| CaptionSample {
            image: &prepared[*i],
            prompt: &prompt,
            caption: c,
        })
        .collect();
    let cfg = TrainConfig {
        total_steps: 200,
        batch_size: batch.len(),
        seed,
        ..TrainConfig::default()
    };
    let logs = train_captioner(&mut model, &batch, cfg, |_| {}).unwrap();
    let windows: Vec<f64> = logs
        .chunks(10)
        .map(|w| w.iter().map(|l| l.loss).sum::<f64>() / w.len() as f64)
        .collect();
    let ok = windows.windows(2).filter(|p| p[1] <= p[0]).count();
    (ok, windows.len() - 1, logs[0].loss, logs.last().unwrap().loss)
}

#[test]
fn captioner_epoch_loss_trends_down() {
    for (mode, seed) in [(Mode::Finetune, 0), (Mode::FinetuneIasc, 1)] {
        let (ok, total, first, last) = windowed_loss_trend(mode, seed);
        assert!(ok as f64 >= 0.9 * total as f64, "{mode}: {ok}/{total} windows non-increasing");
        assert!(last < 0.75 * first, "{mode}: {first} -> {last}");
    }
}
