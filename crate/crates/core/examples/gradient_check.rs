//! Reverse-mode gradients of a small transformer against central differences.
//!
//! cargo run --release --example gradient_check -- [seeds] [entries_per_tensor]

use std::time::Instant;

use aescap::nn::{check_param_gradients, Block, ParamStore, Session};
use aescap::tensor::{finite_diff_gradient, max_relative_error, Float, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIM: usize = 16;
const TOKENS: usize = 6;
// Below this magnitude errors are judged absolutely: the key biases have an
// exactly zero gradient, where the difference quotient is pure round-off.
const FLOOR: Float = 1e-5;

/// Scalar probe: the block outputs weighted elementwise by `w`.
fn forward<'t>(s: &Session<'t, '_>, blocks: &[Block], x: Var<'t>, w: &Tensor) -> aescap::Result<Var<'t>> {
    let mut h = x;
    for b in blocks {
        h = b.forward(s, h, None)?;
    }
    Ok(h.mul(s.constant(w.clone()))?.sum())
}

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map(|a| a.parse()).transpose()?.unwrap_or(20);
    let per_tensor: Option<usize> = args.next().map(|a| a.parse()).transpose()?;
    let start = Instant::now();
    let mut worst: Float = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let blocks: Vec<Block> = (0..2)
            .map(|i| Block::new(&mut store, &format!("b{i}"), DIM, 4, 2, &mut rng))
            .collect::<aescap::Result<_>>()?;
        let mut rand_tensor = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
        let x = rand_tensor(&[TOKENS, DIM]);
        let w = rand_tensor(&[TOKENS, DIM]);

        let params = check_param_gradients(
            &store,
            |s| forward(s, &blocks, s.constant(x.clone()), &w),
            1e-5,
            FLOOR,
            per_tensor,
            seed,
        )?;

        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let xv = tape.var(x.clone());
        let analytic = tape.backward(forward(&s, &blocks, xv, &w)?)?.get_or_zeros(xv);
        let numeric = finite_diff_gradient(
            |t| {
                let tape = Tape::new();
                let s = Session::new(&tape, &store);
                forward(&s, &blocks, s.constant(t.clone()), &w).map_or(Float::NAN, |l| l.value().item())
            },
            &x,
            1e-5,
        )?;
        let input = max_relative_error(&analytic, &numeric, FLOOR);
        println!("seed {seed:>2}: params {params:.2e}  input {input:.2e}");
        worst = worst.max(params).max(input);
    }
    println!("max relative error {worst:.3e} over {seeds} seeds in {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
