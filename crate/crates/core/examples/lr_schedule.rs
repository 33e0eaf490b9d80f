//! Warmup-then-cosine learning rate for the desk and paper presets.
//!
//! cargo run --release --example lr_schedule -- [total_steps]

use aescap::captioner::{Preset, TrainConfig};

fn main() -> anyhow::Result<()> {
    let total: Option<usize> = std::env::args().nth(1).map(|a| a.parse()).transpose()?;
    for preset in [Preset::Desk, Preset::Paper] {
        let mut cfg = TrainConfig::preset(preset);
        if let Some(t) = total {
            cfg.total_steps = t;
        }
        let s = cfg.schedule();
        println!(
            "{preset:?}: peak {:e}, {} warmup steps of {}",
            cfg.learning_rate,
            s.warmup_steps(),
            cfg.total_steps
        );
        for k in 0..=20 {
            let step = k * cfg.total_steps / 20;
            let lr = cfg.lr_at(step)?;
            let bar = "#".repeat((lr / cfg.learning_rate * 50.0).round() as usize);
            println!("  {step:>6}  {lr:>10.3e}  {bar}");
        }
    }
    Ok(())
}
