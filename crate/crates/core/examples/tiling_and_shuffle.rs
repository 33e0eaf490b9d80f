//! Tile plans for a range of image shapes, and the token reduction from
//! pixel shuffle.
//!
//! cargo run --release --example tiling_and_shuffle

use aescap::encoder::{pixel_shuffle, pixel_unshuffle, plan_tiles, EncoderConfig};
use aescap::nn::{Grid, VisualTokens};
use aescap::tensor::{Float, Tape, Tensor};

fn main() -> anyhow::Result<()> {
    let desk = EncoderConfig::desk();
    let paper = EncoderConfig::paper_scale();
    let sizes = [
        (32, 32),
        (64, 32),
        (32, 96),
        (64, 64),
        (448, 448),
        (896, 448),
        (1920, 1080),
        (4032, 3024),
        (8000, 600),
    ];
    println!("{:>11}  {:>22}  {:>22}", "w x h", "desk (tile 32)", "paper (tile 448)");
    for (w, h) in sizes {
        let show = |cfg: &EncoderConfig| -> anyhow::Result<String> {
            let p = plan_tiles(w, h, cfg)?;
            Ok(format!(
                "{}x{} = {:>2} tiles{}",
                p.rows,
                p.cols,
                p.tiles(),
                if p.includes_thumbnail { " + thumb" } else { "" }
            ))
        };
        println!("{:>11}  {:>22}  {:>22}", format!("{w}x{h}"), show(&desk)?, show(&paper)?);
    }

    let tape = Tape::new();
    let grid = Grid { rows: 32, cols: 32 };
    let x = VisualTokens {
        tokens: tape.constant(Tensor::from_fn(&[grid.len(), 8], |i| i as Float)),
        grid,
    };
    let shuffled = pixel_shuffle(x, 2)?;
    let back = pixel_unshuffle(shuffled, 2)?;
    println!(
        "\npixel shuffle: {} tokens x {} -> {} tokens x {}; round trip exact: {}",
        grid.len(),
        x.dim(),
        shuffled.grid.len(),
        shuffled.dim(),
        back.tokens.value() == x.tokens.value()
    );
    Ok(())
}
