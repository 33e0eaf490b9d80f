//! Trains the style scorer, then shows where its evidence for the predicted
//! class sits in a few images. Heatmaps are also written as PGM files.
//!
//! cargo run --release --example saliency_map -- [out_dir] [seed]

use std::path::PathBuf;

use aescap::data::{generate_samples, SyntheticSpec};
use aescap::iasm::{aesthetic_saliency, normalize_resize, write_pgm};
use aescap::scorer::{train_scorer, Scorer, ScorerConfig, ScorerTrainConfig};

const SHADES: &[u8] = b" .:-=+*#%@";

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/saliency_map".into()));
    let seed: u64 = args.next().map(|a| a.parse()).transpose()?.unwrap_or(0);
    std::fs::create_dir_all(&out)?;

    let spec = SyntheticSpec::default();
    let samples = generate_samples(&spec, seed)?;
    let data: Vec<_> = samples.iter().map(|s| (s.image.clone(), s.label)).collect();
    let mut scorer = Scorer::new(ScorerConfig { seed, ..Default::default() })?;
    train_scorer(&mut scorer, &data, &ScorerTrainConfig { seed, ..Default::default() })?;
    println!("scorer train accuracy {:.3}\n", scorer.accuracy(&data)?);

    for (i, sample) in samples.iter().take(4).enumerate() {
        let raw = aesthetic_saliency(&scorer, &sample.image)?;
        let map = normalize_resize(&raw, 16, 16)?;
        let class = &spec.classes[raw.class_index].name;
        println!("image {i}: {} {} -> predicted {class}", spec.classes[sample.label].name, sample.shape);
        for r in 0..16 {
            let row: String = (0..16)
                .map(|c| {
                    let v = map.values.data()[r * 16 + c];
                    SHADES[((v * (SHADES.len() - 1) as f64).round() as usize).min(SHADES.len() - 1)] as char
                })
                .collect();
            // doubled horizontally so cells look roughly square
            println!("  {}", row.chars().flat_map(|ch| [ch, ch]).collect::<String>());
        }
        let path = out.join(format!("saliency_{i}.pgm"));
        write_pgm(&normalize_resize(&raw, 32, 32)?, &path)?;
        println!("  -> {}\n", path.display());
    }
    Ok(())
}
