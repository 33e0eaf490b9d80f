//! The saliency-fused encoder next to the plain one: token counts, the
//! zero-initialized fusion start, and how saliency changes the output.
//!
//! cargo run --release --example cross_attention_encoder

use aescap::encoder::{Encoder, EncoderConfig};
use aescap::iasm::SaliencyMap;
use aescap::nn::{ParamStore, Session};
use aescap::tensor::{Float, Tape, Tensor};

fn max_diff(a: &Tensor, b: &Tensor) -> Float {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, Float::max)
}

fn main() -> anyhow::Result<()> {
    let plain_cfg = EncoderConfig { iasc: false, ..EncoderConfig::desk() };
    let fused_cfg = EncoderConfig::desk();
    let mut plain_store = ParamStore::new();
    let plain = Encoder::new(&mut plain_store, plain_cfg.clone())?;
    let mut fused_store = ParamStore::new();
    let fused = Encoder::new(&mut fused_store, fused_cfg.clone())?;
    let count = |s: &ParamStore| s.iter().map(|(_, p)| p.value.numel()).sum::<usize>();
    let extra: usize = fused_store
        .iter()
        .filter(|(_, p)| Encoder::is_iasc_param(&p.name))
        .map(|(_, p)| p.value.numel())
        .sum();
    println!("plain encoder  {} parameters", count(&plain_store));
    println!("fused encoder  {} parameters ({extra} in the saliency path)", count(&fused_store));

    let n = fused_cfg.tile_base;
    let image = Tensor::from_fn(&[n, n, 3], |i| ((i as Float) * 0.37).sin() * 0.5 + 0.5);
    let g = fused_cfg.grid();
    let map = |f: &dyn Fn(usize) -> Float| SaliencyMap {
        values: Tensor::from_fn(&[g.rows, g.cols], f),
        normalized: true,
        class_index: 0,
    };

    let tape = Tape::new();
    let p = plain.encode_view(&Session::new(&tape, &plain_store), &image, None)?;
    let s = Session::new(&tape, &fused_store);
    let zero = fused.encode_view(&s, &image, Some(&map(&|_| 0.0)))?;
    let peaked = fused.encode_view(&s, &image, Some(&map(&|i| if i == 5 { 1.0 } else { 0.0 })))?;
    println!(
        "\n{} patches -> {} tokens of width {} after pixel shuffle",
        g.len(),
        p.grid.len(),
        p.dim()
    );
    println!("fresh fused vs plain, zero saliency: max |diff| {:.1e}", max_diff(&zero.tokens.value(), &p.tokens.value()));
    println!(
        "fresh fused, saliency on one patch:  max |diff| {:.3e}",
        max_diff(&peaked.tokens.value(), &p.tokens.value())
    );
    Ok(())
}
