//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Runs without the libtest harness. Criterion 8 trains the full desk-scale
//! ablation on five seeds and dominates the runtime.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use aescap::captioner::{Mode, TrainConfig, Preset};
use aescap::data::{generate_synthetic_corpus, SyntheticSpec};
use aescap::encoder::{pixel_shuffle, pixel_unshuffle, plan_tiles, Encoder, EncoderConfig};
use aescap::experiment::{run_ablation, run_experiment, ExperimentConfig, Manifest, MANIFEST};
use aescap::iasm::{aesthetic_saliency, fuse_channels, saliency_weights, weighted_features, SaliencyMap};
use aescap::metrics::{bleu, evaluate_corpus, max_over_references, rouge_l, EvalConfig};
use aescap::nn::{check_param_gradients, Attention, Block, Grid, ParamStore, Session, VisualTokens};
use aescap::scorer::{ClassScores, Scorer, ScorerConfig};
use aescap::tensor::{finite_diff_gradient, max_relative_error, Float, Tape, Tensor, Var};
use aescap::text::tokenize;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> Float {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, Float::max)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: Float, hi: Float) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

// 1 ---------------------------------------------------------------------------

const GRAD_H: Float = 1e-5;
const GRAD_TOL: Float = 1e-4;
// Key biases receive an exactly zero gradient (softmax is shift invariant),
// where the difference quotient is pure round-off; judge those absolutely.
const GRAD_FLOOR: Float = 1e-5;

fn probe<'t>(s: &Session<'t, '_>, blocks: &[Block], x: Var<'t>, w: &Tensor) -> aescap::Result<Var<'t>> {
    let mut h = x;
    for b in blocks {
        h = b.forward(s, h, None)?;
    }
    Ok(h.mul(s.constant(w.clone()))?.sum())
}

fn gradient_oracle() -> Outcome {
    if cfg!(feature = "f32") {
        return Err("needs 64-bit floats; built with the f32 feature".into());
    }
    let start = Instant::now();
    let mut worst: Float = 0.0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let blocks: Vec<Block> = (0..2)
            .map(|i| Block::new(&mut store, &format!("b{i}"), 16, 4, 2, &mut rng))
            .collect::<aescap::Result<_>>()
            .map_err(|e| e.to_string())?;
        let x = rand_tensor(&mut rng, &[6, 16], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[6, 16], -1.0, 1.0);
        let params = check_param_gradients(
            &store,
            |s| probe(s, &blocks, s.constant(x.clone()), &w),
            GRAD_H,
            GRAD_FLOOR,
            None,
            seed,
        )
        .map_err(|e| e.to_string())?;
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let xv = tape.var(x.clone());
        let root = probe(&s, &blocks, xv, &w).map_err(|e| e.to_string())?;
        let analytic = tape.backward(root).map_err(|e| e.to_string())?.get_or_zeros(xv);
        let numeric = finite_diff_gradient(
            |t| {
                let tape = Tape::new();
                let s = Session::new(&tape, &store);
                probe(&s, &blocks, s.constant(t.clone()), &w).map_or(Float::NAN, |l| l.value().item())
            },
            &x,
            GRAD_H,
        )
        .map_err(|e| e.to_string())?;
        worst = worst.max(params).max(max_relative_error(&analytic, &numeric, GRAD_FLOOR));
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("max relative error {worst:.2e} over 20 seeds, {secs:.1}s");
    ensure(worst < GRAD_TOL && secs < 60.0, || detail.clone())?;
    Ok(detail)
}

// 2 ---------------------------------------------------------------------------

fn saliency_map(g: &Tensor, a: &Tensor) -> SaliencyMap {
    fuse_channels(&weighted_features(&saliency_weights(g), a).unwrap(), 0).unwrap()
}

fn saliency_exactness() -> Outcome {
    let a = Tensor::new(vec![1, 2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
    let g = Tensor::new(vec![1, 2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
    let m = saliency_map(&g, &a);
    let want = Tensor::new(vec![2, 2], vec![0.5, 0.0, 6.0, 0.0]).unwrap();
    let err = max_abs_diff(&m.values, &want);
    ensure(err <= 1e-9, || format!("hand fixture off by {err:e}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..100 {
        let k = rng.random_range(1..5);
        let (h, w) = (rng.random_range(1..5), rng.random_range(1..5));
        let g = rand_tensor(&mut rng, &[k, h, w], -3.0, 0.0);
        let a = rand_tensor(&mut rng, &[k, h, w], -3.0, 3.0);
        ensure(saliency_map(&g, &a).is_zero(), || format!("non-positive gradient case {case} gave a nonzero map"))?;
    }
    Ok(format!("hand fixture error {err:.1e}; 100 non-positive gradient cases all zero"))
}

// 3 ---------------------------------------------------------------------------

fn saliency_non_negativity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for draw in 0..200u64 {
        let scorer = Scorer::new(ScorerConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 8,
            num_blocks: 2,
            num_heads: 2,
            target_layer: (draw % 2) as usize,
            seed: draw,
            ..Default::default()
        })
        .map_err(|e| e.to_string())?;
        let image = rand_tensor(&mut rng, &[16, 16, 3], 0.0, 1.0);
        let m = aesthetic_saliency(&scorer, &image).map_err(|e| e.to_string())?;
        ensure(m.values.data().iter().all(|&v| v >= 0.0), || format!("negative saliency on draw {draw}"))?;
    }
    for case in 0..50 {
        let y: Vec<Float> = (0..8).map(|_| rng.random_range(-5.0..5.0)).collect();
        let lambda: Float = 10.0 - rng.random_range(0.0..10.0);
        let c = ClassScores::from_logits(y.clone()).c;
        let scaled = ClassScores::from_logits(y.iter().map(|v| v * lambda).collect()).c;
        ensure(c == scaled, || format!("argmax moved under scaling by {lambda} (case {case})"))?;
    }
    Ok("200 scorer/image draws non-negative; argmax stable under 50 scalings".into())
}

// 4 ---------------------------------------------------------------------------

fn cross_attention_symmetry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let attn = Attention::new(&mut store, "cross", 8, 2, &mut rng).map_err(|e| e.to_string())?;
    let tape = Tape::new();
    let s = Session::new(&tape, &store);
    let q = s.constant(rand_tensor(&mut rng, &[5, 8], -1.0, 1.0));
    let kv = rand_tensor(&mut rng, &[12, 8], -1.0, 1.0);
    let base = attn.forward(&s, q, s.constant(kv.clone()), None).unwrap().value();
    let mut perm_worst: Float = 0.0;
    for _ in 0..20 {
        let mut order: Vec<usize> = (0..12).collect();
        order.shuffle(&mut rng);
        let permuted = Tensor::new(vec![12, 8], order.iter().flat_map(|&r| kv.row(r).to_vec()).collect()).unwrap();
        let out = attn.forward(&s, q, s.constant(permuted), None).unwrap().value();
        perm_worst = perm_worst.max(max_abs_diff(&out, &base));
    }
    ensure(perm_worst < 1e-6, || format!("permutation changed output by {perm_worst:e}"))?;

    let one = s.constant(rand_tensor(&mut rng, &[1, 8], -1.0, 1.0));
    let value = attn.out.forward(&s, attn.v.forward(&s, one).unwrap()).unwrap().value();
    let out = attn.forward(&s, q, one, None).unwrap().value();
    let single = (0..5)
        .map(|r| value.row(0).iter().zip(out.row(r)).map(|(a, b)| (a - b).abs()).fold(0.0, Float::max))
        .fold(0.0, Float::max);
    ensure(single <= 1e-7, || format!("single key differs from value projection by {single:e}"))?;

    let config = |iasc| EncoderConfig {
        patch_size: 4,
        embed_dim: 8,
        num_blocks: 2,
        num_heads: 2,
        tile_base: 16,
        iasc,
        ..EncoderConfig::desk()
    };
    let (mut plain_store, mut fused_store) = (ParamStore::new(), ParamStore::new());
    let plain = Encoder::new(&mut plain_store, config(false)).unwrap();
    let fused = Encoder::new(&mut fused_store, config(true)).unwrap();
    let mut init_worst: Float = 0.0;
    for seed in 0..5 {
        let view = rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &[16, 16, 3], 0.0, 1.0);
        let zero = SaliencyMap {
            values: Tensor::zeros(&[4, 4]),
            normalized: true,
            class_index: 0,
        };
        let a = plain.encode_view(&Session::new(&tape, &plain_store), &view, None).unwrap();
        let b = fused.encode_view(&Session::new(&tape, &fused_store), &view, Some(&zero)).unwrap();
        init_worst = init_worst.max(max_abs_diff(&a.tokens.value(), &b.tokens.value()));
        // with the output projection zeroed, any key/value stream leaves a block unchanged
        let fs = Session::new(&tape, &fused_store);
        let x = fs.constant(rand_tensor(&mut rng, &[16, 8], -1.0, 1.0));
        let kv = fs.constant(rand_tensor(&mut rng, &[16, 8], -1.0, 1.0));
        for blk in &fused.blocks {
            let with = blk.forward(&fs, x, Some(kv)).unwrap().value();
            let without = blk.forward(&fs, x, None).unwrap().value();
            init_worst = init_worst.max(max_abs_diff(&with, &without));
        }
    }
    ensure(init_worst <= 1e-7, || format!("fresh fused encoder differs from plain by {init_worst:e}"))?;
    Ok(format!(
        "permutation {perm_worst:.1e}, single key {single:.1e}, fresh fusion vs plain {init_worst:.1e}"
    ))
}

// 5 ---------------------------------------------------------------------------

fn pixel_shuffle_and_tiling() -> Outcome {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (rows, cols, dim) in [(32, 32, 4), (4, 6, 3), (2, 2, 1), (8, 2, 5)] {
        let grid = Grid { rows, cols };
        let x = rand_tensor(&mut rng, &[grid.len(), dim], -1.0, 1.0);
        let v = VisualTokens {
            tokens: tape.var(x.clone()),
            grid,
        };
        let sh = pixel_shuffle(v, 2).map_err(|e| e.to_string())?;
        ensure(sh.grid.len() * 4 == grid.len() && sh.tokens.value().rows() * 4 == grid.len(), || {
            format!("{rows}x{cols}: {} tokens after shuffle", sh.grid.len())
        })?;
        let back = pixel_unshuffle(sh, 2).map_err(|e| e.to_string())?;
        ensure(back.tokens.value().as_ref() == &x && back.grid == grid, || format!("{rows}x{cols}: round trip not exact"))?;
    }
    let paper = EncoderConfig::paper_scale();
    let mut most = 0;
    for _ in 0..2000 {
        let (w, h) = (rng.random_range(1..10_000), rng.random_range(1..10_000));
        let p = plan_tiles(w, h, &paper).map_err(|e| e.to_string())?;
        most = most.max(p.tiles());
        ensure(p.tiles() <= 40, || format!("{w}x{h}: {} tiles", p.tiles()))?;
        ensure(p.includes_thumbnail == (p.tiles() > 1), || format!("{w}x{h}: thumbnail flag wrong"))?;
    }
    Ok(format!("1024 -> 256 tokens, exact round trips; 2000 paper plans, at most {most} tiles"))
}

// 6 ---------------------------------------------------------------------------

fn lr_schedule() -> Outcome {
    for total in [100, 1000, 12345] {
        let cfg = TrainConfig {
            total_steps: total,
            ..TrainConfig::preset(Preset::Paper)
        };
        let lr = |s| cfg.lr_at(s).unwrap();
        let sched = cfg.schedule();
        let warm = sched.warmup_steps();
        ensure(lr(0) == 0.0, || format!("lr_at(0) = {}", lr(0)))?;
        ensure((lr(warm) - 4e-5).abs() <= 1e-12, || format!("peak {}", lr(warm)))?;
        ensure(lr(total).abs() <= 1e-12, || format!("lr_at(total) = {}", lr(total)))?;
        // both sides of the junction extrapolate to the peak
        let ramp = 4e-5 * (warm - 1) as f64 / warm as f64;
        let jump = (lr(warm) - lr(warm - 1)) - (4e-5 - ramp);
        ensure(jump.abs() <= 1e-12, || format!("ramp step mismatch {jump:e} at {warm}"))?;
        let cosine = lr(warm) - lr(warm + 1);
        ensure(cosine >= 0.0 && cosine < 4e-5 / warm as f64, || format!("discontinuity after warmup: {cosine:e}"))?;
        ensure(cfg.lr_at(total + 1).is_err(), || "stepping past the end accepted".into())?;
    }
    Ok("start 0, peak 4e-5, end 0, continuous at the junction".into())
}

// 7 ---------------------------------------------------------------------------

fn oracle_file(name: &str) -> serde_json::Value {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/oracle").join(name);
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn metric_suite() -> Outcome {
    let captions = [
        "warm golden light falls across the quiet square",
        "a cool minimal frame with a single circle",
        "the colors clash in a busy composition",
    ];
    let cands: Vec<(String, String)> = captions.iter().enumerate().map(|(i, c)| (format!("i{i}"), c.to_string())).collect();
    let refs: BTreeMap<String, Vec<String>> = cands.iter().map(|(id, c)| (id.clone(), vec![c.clone()])).collect();
    let report = evaluate_corpus(&cands, &refs, &EvalConfig::default()).map_err(|e| e.to_string())?;
    for im in &report.images {
        let s = &im.scores;
        for (name, v) in [("B1", s.b1), ("B2", s.b2), ("B3", s.b3), ("B4", s.b4), ("R", s.rouge_l), ("Pre", s.precision), ("Re", s.recall)] {
            ensure(v == 1.0, || format!("identity {}: {name} = {v}", im.image))?;
        }
    }

    let b1 = bleu(&tokenize("the the the"), &[tokenize("the cat")], 1);
    ensure((b1 - 1.0 / 3.0).abs() <= 1e-12, || format!("clipping case BLEU-1 = {b1}"))?;

    let fx = oracle_file("fixture.json");
    let mut cands = Vec::new();
    let mut refs = BTreeMap::new();
    for im in fx["images"].as_array().unwrap() {
        let id = im["id"].as_str().unwrap().to_string();
        cands.push((id.clone(), im["candidate"].as_str().unwrap().to_string()));
        refs.insert(id, im["references"].as_array().unwrap().iter().map(|r| r.as_str().unwrap().to_string()).collect());
    }
    let report = evaluate_corpus(&cands, &refs, &EvalConfig::default()).map_err(|e| e.to_string())?;
    let expected = oracle_file("expected.json");
    let mut worst: f64 = 0.0;
    for (got, want) in report.images.iter().zip(expected["images"].as_array().unwrap()) {
        let s = &got.scores;
        let b: Vec<f64> = want["bleu"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        let pairs = [
            (s.b1, b[0]),
            (s.b2, b[1]),
            (s.b3, b[2]),
            (s.b4, b[3]),
            (s.rouge_l, want["rouge_l"].as_f64().unwrap()),
            (s.cider, want["cider"].as_f64().unwrap()),
        ];
        for (g, w) in pairs {
            worst = worst.max((g - w).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("fixture differs from the reference script by {worst:e}"))?;

    let words = prop::sample::select(vec!["a", "the", "cat", "warm", "light", "red", "frame", "soft", "sky"]);
    let sentence = prop::collection::vec(words, 1..8).prop_map(|w| w.into_iter().map(String::from).collect::<Vec<_>>());
    let strategy = (sentence.clone(), prop::collection::vec(sentence, 1..5), 0usize..4);
    let mut runner = TestRunner::new(Config {
        cases: 200,
        failure_persistence: None,
        ..Config::default()
    });
    let scorers: [(&str, fn(&[String], &[String]) -> f64); 3] = [
        ("BLEU-2", |c, r| bleu(c, &[r.to_vec()], 2)),
        ("ROUGE-L", |c, r| rouge_l(c, &[r.to_vec()])),
        ("BLEU-4", |c, r| bleu(c, &[r.to_vec()], 4)),
    ];
    runner
        .run(&strategy, |(cand, refs, which)| {
            let (name, f) = scorers[which % scorers.len()];
            let mut prev = f64::NEG_INFINITY;
            for k in 1..=refs.len() {
                let v = max_over_references(f, &cand, &refs[..k]);
                prop_assert!(v >= prev, "{} dropped from {} to {} at {} references", name, prev, v, k);
                prev = v;
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("identity exact, clipping 1/3, fixture within {worst:.1e}, 200 monotonicity cases"))
}

// 8 ---------------------------------------------------------------------------

const ABLATION_SEEDS: u64 = 5;
const ABLATION_BUDGET: Duration = Duration::from_secs(600);
const LOSS_RATIO: f64 = 0.2;

fn corpus(root: &Path, seed: u64) -> Result<PathBuf, String> {
    let data = root.join(format!("data{seed}"));
    let spec = SyntheticSpec {
        num_images: 64,
        ..Default::default()
    };
    generate_synthetic_corpus(&spec, seed, &data).map_err(|e| e.to_string())?;
    Ok(data)
}

fn manifest(dir: &Path) -> Result<Manifest, String> {
    let text = fs::read_to_string(dir.join(MANIFEST)).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn end_to_end() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut wins = 0;
    let mut first_time = Duration::ZERO;
    let mut notes = Vec::new();
    for seed in 0..ABLATION_SEEDS {
        let cfg = ExperimentConfig {
            dataset: corpus(tmp.path(), seed)?,
            seed,
            out: tmp.path().join(format!("ablate{seed}")),
            ..Default::default()
        };
        let start = Instant::now();
        let runs = run_ablation(&cfg).map_err(|e| e.to_string())?;
        let took = start.elapsed();
        if seed == 0 {
            first_time = took;
            ensure(took < ABLATION_BUDGET, || format!("ablation took {:.0}s", took.as_secs_f64()))?;
        }
        let by_mode: BTreeMap<&str, _> = runs.iter().map(|r| (r.mode.as_str(), r)).collect();
        for mode in [Mode::Finetune, Mode::FinetuneIasc] {
            let log = &by_mode[mode.as_str()].train_log;
            let (a, b) = (log.first().unwrap().loss, log.last().unwrap().loss);
            ensure(b < LOSS_RATIO * a, || format!("seed {seed} {mode}: loss {a:.3} -> {b:.3}"))?;
        }
        let plain = by_mode[Mode::Finetune.as_str()].report.mean.b4;
        let iasc = by_mode[Mode::FinetuneIasc.as_str()].report.mean.b4;
        wins += usize::from(iasc >= plain);
        notes.push(format!("{iasc:.3}/{plain:.3}"));
    }
    ensure(wins >= 3, || format!("IASC B4 >= finetune B4 in only {wins}/5 seeds ({})", notes.join(" ")))?;

    let mode = Mode::FinetuneIasc;
    let first = tmp.path().join("ablate0").join(aescap::experiment::mode_dir(mode));
    let again = tmp.path().join("rerun");
    run_experiment(&ExperimentConfig {
        dataset: tmp.path().join("data0"),
        seed: 0,
        mode,
        out: again.clone(),
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let (ma, mb) = (manifest(&first)?, manifest(&again)?);
    ensure(ma.files == mb.files && ma.config_hash == mb.config_hash, || "rerun manifest differs".into())?;
    for f in &ma.files {
        let same = fs::read(first.join(&f.path)).ok() == fs::read(again.join(&f.path)).ok();
        ensure(same, || format!("rerun changed {}", f.path))?;
    }
    Ok(format!(
        "seed 0 ablation {:.0}s; IASC B4 >= finetune in {wins}/5 (iasc/finetune {}); rerun identical over {} files",
        first_time.as_secs_f64(),
        notes.join(" "),
        ma.files.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient oracle", gradient_oracle),
        ("saliency exactness", saliency_exactness),
        ("saliency non-negativity", saliency_non_negativity),
        ("cross-attention symmetry", cross_attention_symmetry),
        ("pixel shuffle and tiling", pixel_shuffle_and_tiling),
        ("lr schedule", lr_schedule),
        ("metric suite", metric_suite),
        ("end-to-end ablation", end_to_end),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name} ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL {name} ({detail})", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
